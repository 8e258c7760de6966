"""Phantom generation, normalization and the VVOL1 file format."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cgddpm.volume import (
    HEADER,
    MAGIC,
    PhantomSpec,
    Volume,
    VolumeFormatError,
    generate_phantom_pair,
    list_cases,
    normalize_volume,
    read_case,
    remap_b,
    volume_bytes,
    volume_from_bytes,
    write_case,
)

SMALL = dict(extents=(24, 20, 8))


def test_phantom_deterministic():
    a1, b1, m1 = generate_phantom_pair(PhantomSpec(seed=11, **SMALL))
    a2, b2, m2 = generate_phantom_pair(PhantomSpec(seed=11, **SMALL))
    assert volume_bytes(a1) == volume_bytes(a2) and volume_bytes(b1) == volume_bytes(b2)
    assert np.array_equal(m1, m2)
    a3, _, _ = generate_phantom_pair(PhantomSpec(seed=12, **SMALL))
    assert not np.array_equal(a1.data, a3.data)


@pytest.mark.parametrize("seed", range(5))
def test_noise_free_phantom_takes_class_values(seed):
    spec = PhantomSpec(seed=seed, bias_amplitude=0.0, noise_sigma=0.0, **SMALL)
    a, b, mask = generate_phantom_pair(spec)
    np.testing.assert_array_equal(a.data, np.float32(np.asarray(spec.table_a))[mask])
    np.testing.assert_array_equal(b.data, np.float32(np.asarray(spec.table_b))[mask])
    assert mask.min() == 0 and mask.max() < len(spec.table_a)
    assert (mask == 1).any()


def test_default_tables_keep_background_dark_and_invert_tissue():
    spec = PhantomSpec()
    assert spec.table_b[0] == spec.table_a[0] == -0.9
    np.testing.assert_allclose(spec.table_b[1:], remap_b(spec.table_a[1:]))
    assert np.all(np.diff(spec.table_b[1:]) < 0)


@pytest.mark.parametrize("seed", range(5))
def test_modalities_share_anatomy(seed):
    """With noise and bias off, each class occupies the same voxels in both modalities."""
    spec = PhantomSpec(seed=seed, bias_amplitude=0.0, noise_sigma=0.0, **SMALL)
    a, b, mask = generate_phantom_pair(spec)
    for c in np.unique(mask):
        sel = mask == c
        assert np.unique(a.data[sel]).size == 1 and np.unique(b.data[sel]).size == 1


def test_noisy_phantom_in_range_and_bias_is_smooth():
    spec = PhantomSpec(seed=4, **SMALL)
    a, b, _ = generate_phantom_pair(spec)
    for v in (a, b):
        assert v.data.min() >= -1.0 and v.data.max() <= 1.0
        assert v.spacing == (1.0, 1.0, 6.0) and v.extents == (24, 20, 8)
    clean = generate_phantom_pair(PhantomSpec(seed=4, noise_sigma=0.0, **SMALL))[0]
    plain = generate_phantom_pair(PhantomSpec(seed=4, noise_sigma=0.0, bias_amplitude=0.0, **SMALL))[0]
    bias = clean.data.astype(np.float64) - plain.data
    inside = np.abs(plain.data) < 0.85  # away from the clamp
    assert np.abs(bias[inside]).max() <= 0.1 + 1e-6
    assert np.abs(np.diff(bias, axis=0)[inside[1:] & inside[:-1]]).max() < 0.05


def test_remap_is_monotone_decreasing_and_nonlinear():
    x = np.linspace(-0.9, 0.9, 101)
    y = remap_b(x)
    assert np.all(np.diff(y) < 0)
    assert y[0] == pytest.approx(0.9) and y[-1] == pytest.approx(-0.9)
    second = np.diff(y, 2)
    assert np.abs(second).max() > 1e-4


@pytest.mark.parametrize("kwargs", [dict(extents=(1, 8, 8)), dict(table_a=(0.0, 1.5, 0.2)),
                                    dict(table_a=(0.1, 0.2)), dict(noise_sigma=-1.0), dict(ellipsoids=(3, 1))])
def test_phantom_spec_rejects(kwargs):
    with pytest.raises(ValueError):
        PhantomSpec(**kwargs)


def test_normalize_endpoints_and_clamp():
    raw = Volume(np.array([0.0, 50.0, 100.0, 150.0, -10.0]).reshape(5, 1, 1))
    out = normalize_volume(raw, 0.0, 100.0).data.ravel()
    np.testing.assert_array_equal(out, [-1.0, 0.0, 1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        normalize_volume(raw, 5.0, 5.0)


@settings(max_examples=40, deadline=None)
@given(arr=hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=6),
                      elements=st.floats(-1e6, 1e6, width=32)),
       spacing=st.tuples(*[st.floats(0.125, 8.0, width=32)] * 3))
def test_vvol_round_trip(arr, spacing):
    vol = Volume(arr, spacing)
    back = volume_from_bytes(volume_bytes(vol))
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == vol.spacing


def test_vvol_layout_is_x_fastest():
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    raw = volume_bytes(Volume(data, (1.0, 2.0, 3.0)))
    assert len(raw) == 62 and HEADER.size == 30
    assert raw[:5] == MAGIC
    assert struct.unpack_from("<3I", raw, 5) == (2, 2, 2)
    payload = np.frombuffer(raw[30:], "<f4")
    assert payload[1] == data[1, 0, 0] and payload[2] == data[0, 1, 0] and payload[4] == data[0, 0, 1]


@pytest.mark.parametrize("mutate, code", [
    (lambda b: b"XVOL1" + b[5:], "bad magic"),
    (lambda b: b[:-1], "truncated payload"),
    (lambda b: b[:20], "truncated payload"),
    (lambda b: b[:29] + b"\x07" + b[30:], "unknown dtype"),
    (lambda b: b[:3], "bad magic"),
])
def test_vvol_errors(mutate, code):
    raw = volume_bytes(Volume(np.zeros((2, 2, 2))))
    with pytest.raises(VolumeFormatError) as err:
        volume_from_bytes(mutate(raw))
    assert err.value.code == code


def test_volume_rejects_non_finite_and_degenerate():
    with pytest.raises(ValueError):
        volume_bytes(Volume(np.full((2, 2, 2), np.nan)))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))


def test_case_layout(tmp_path):
    a, b, mask = generate_phantom_pair(PhantomSpec(seed=1, **SMALL))
    paths = write_case(tmp_path, 3, a, b, mask)
    assert [p.name for p in paths] == ["case0003_a.vvol", "case0003_b.vvol", "case0003_mask.vvol"]
    (tmp_path / "notes.txt").write_text("x")
    assert list_cases(tmp_path) == ["case0003"]
    ra, rb = read_case(tmp_path, "case0003")
    assert ra.data.tobytes() == a.data.tobytes() and rb.spacing == b.spacing
