"""Paired phantom volumes, intensity normalization and the VVOL1 file format.

Volumes are arrays shaped (X, Y, Z) with a voxel spacing in mm. On disk the
payload is stored x-fastest (Fortran order), little-endian 32-bit reals:

    b"VVOL1" | u32 X, Y, Z | f32 sx, sy, sz | u8 dtype (0 = f32) | payload
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VVOL1"
HEADER = struct.Struct("<5s3I3fB")
DTYPE_F32 = 0


class VolumeFormatError(ValueError):
    """Raised for unreadable VVOL1 files; ``code`` names the failure."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume needs three positive extents, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def normalize_volume(raw: Volume, lo: float, hi: float) -> Volume:
    """Affine map of [lo, hi] onto [-1, 1], clamped."""
    if not hi > lo:
        raise ValueError(f"normalization needs hi > lo, got lo={lo}, hi={hi}")
    scaled = (raw.data.astype(np.float64) - lo) * (2.0 / (hi - lo)) - 1.0
    return Volume(np.clip(scaled, -1.0, 1.0), raw.spacing)


# ---------------------------------------------------------------- file format


def volume_bytes(volume: Volume) -> bytes:
    if not np.all(np.isfinite(volume.data)):
        raise ValueError("refusing to write non-finite volume data")
    head = HEADER.pack(MAGIC, *volume.extents, *volume.spacing, DTYPE_F32)
    return head + volume.data.astype("<f4").tobytes(order="F")


def volume_from_bytes(data: bytes) -> Volume:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError("bad magic")
    if len(data) < HEADER.size:
        raise VolumeFormatError("truncated payload", "header incomplete")
    _, nx, ny, nz, sx, sy, sz, dtype = HEADER.unpack_from(data)
    if dtype != DTYPE_F32:
        raise VolumeFormatError("unknown dtype", str(dtype))
    count = nx * ny * nz
    payload = data[HEADER.size:]
    if len(payload) < 4 * count:
        raise VolumeFormatError("truncated payload", f"expected {4 * count} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4", count=count).reshape((nx, ny, nz), order="F")
    return Volume(arr.astype(np.float32), (sx, sy, sz))


def write_volume(volume: Volume, path) -> None:
    Path(path).write_bytes(volume_bytes(volume))


def read_volume(path) -> Volume:
    return volume_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- phantoms


def remap_b(a) -> np.ndarray:
    """Monotone decreasing, nonlinear map of modality-A intensities to modality B.

    Contrast inversion followed by a gamma curve on the [-0.9, 0.9] band.
    """
    u = (np.asarray(a, dtype=np.float64) + 0.9) / 1.8
    return 0.9 - 1.8 * np.power(np.clip(u, 0.0, 1.0), 0.6)


DEFAULT_TABLE_A = (-0.9, -0.3, 0.1, 0.35, 0.55, 0.75, 0.9)


@dataclass
class PhantomSpec:
    """Parameters of one phantom pair.

    Class 0 is background, class 1 the body, higher classes fill the inner
    ellipsoids. ``table_b`` defaults to ``remap_b`` of the tissue classes with
    the background kept at its modality-A value, since air gives no signal in
    either sequence.
    """

    extents: tuple[int, int, int] = (64, 64, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 6.0)
    ellipsoids: tuple[int, int] = (3, 8)
    table_a: tuple[float, ...] = DEFAULT_TABLE_A
    table_b: tuple[float, ...] | None = None
    bias_degree: int = 2
    bias_amplitude: float = 0.1
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        if len(self.extents) != 3 or min(self.extents) < 2:
            raise ValueError(f"degenerate phantom extents {self.extents}")
        lo, hi = (int(v) for v in self.ellipsoids)
        if not 0 <= lo <= hi:
            raise ValueError(f"bad ellipsoid count range {self.ellipsoids}")
        self.ellipsoids = (lo, hi)
        self.table_a = tuple(float(v) for v in self.table_a)
        if self.table_b is None:
            self.table_b = (self.table_a[0],) + tuple(float(v) for v in remap_b(self.table_a[1:]))
        self.table_b = tuple(float(v) for v in self.table_b)
        if len(self.table_a) < 3 or len(self.table_a) != len(self.table_b):
            raise ValueError("intensity tables need equal length >= 3")
        for v in self.table_a + self.table_b:
            if not -0.9 <= v <= 0.9:
                raise ValueError(f"class intensity {v} outside [-0.9, 0.9]")
        if self.bias_degree < 0 or self.bias_amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("bias degree, bias amplitude and noise sigma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "extents": list(self.extents),
            "spacing": list(self.spacing),
            "ellipsoids": list(self.ellipsoids),
            "table_a": list(self.table_a),
            "table_b": list(self.table_b),
            "bias_degree": self.bias_degree,
            "bias_amplitude": self.bias_amplitude,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }


def _grid(extents) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    axes = [np.linspace(-1.0, 1.0, e) for e in extents]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(gx, gy, gz, center, radii, angle) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    dx, dy, dz = gx - center[0], gy - center[1], gz - center[2]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / radii[0]) ** 2 + (v / radii[1]) ** 2 + (dz / radii[2]) ** 2 <= 1.0


def class_mask(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    gx, gy, gz = _grid(spec.extents)
    mask = np.zeros(spec.extents, dtype=np.int32)
    body_r = rng.uniform(0.75, 0.9, size=2)
    mask[_ellipsoid(gx, gy, gz, (0.0, 0.0, 0.0), (body_r[0], body_r[1], 1.6), rng.uniform(0, np.pi))] = 1
    classes = len(spec.table_a)
    count = int(rng.integers(spec.ellipsoids[0], spec.ellipsoids[1] + 1))
    for _ in range(count):
        center = np.concatenate([rng.uniform(-0.45, 0.45, size=2), rng.uniform(-0.4, 0.4, size=1)])
        radii = np.concatenate([rng.uniform(0.12, 0.35, size=2), rng.uniform(0.35, 0.8, size=1)])
        inside = _ellipsoid(gx, gy, gz, center, radii, rng.uniform(0, np.pi)) & (mask > 0)
        mask[inside] = int(rng.integers(2, classes))
    return mask


def bias_field(extents, degree: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Random smooth polynomial field scaled to peak magnitude ``amplitude``."""
    gx, gy, gz = _grid(extents)
    field = np.zeros(extents)
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            for k in range(degree + 1 - i - j):
                field += rng.standard_normal() * gx**i * gy**j * gz**k
    peak = np.abs(field).max()
    return field * (amplitude / peak) if peak > 0 else field


def generate_phantom_pair(spec: PhantomSpec) -> tuple[Volume, Volume, np.ndarray]:
    """Co-registered modality pair (A, B) plus the shared integer class mask."""
    root = np.random.SeedSequence(spec.seed)
    geo, bias_a, bias_b, noise_a, noise_b = (np.random.Generator(np.random.Philox(s)) for s in root.spawn(5))
    mask = class_mask(spec, geo)
    vols = []
    for table, brng, nrng in ((spec.table_a, bias_a, noise_a), (spec.table_b, bias_b, noise_b)):
        img = np.asarray(table, dtype=np.float64)[mask]
        if spec.bias_amplitude > 0:
            img = img + bias_field(spec.extents, spec.bias_degree, spec.bias_amplitude, brng)
        if spec.noise_sigma > 0:
            img = img + spec.noise_sigma * nrng.standard_normal(spec.extents)
        vols.append(Volume(np.clip(img, -1.0, 1.0), spec.spacing))
    return vols[0], vols[1], mask


# ---------------------------------------------------------------- dataset layout

CASE_RE = re.compile(r"^case(\d{4})_a\.vvol$")


def case_name(index: int) -> str:
    return f"case{index:04d}"


def write_case(directory, index: int, a: Volume, b: Volume, mask: np.ndarray) -> list[Path]:
    directory = Path(directory)
    stem = case_name(index)
    paths = [directory / f"{stem}_{tag}.vvol" for tag in ("a", "b", "mask")]
    write_volume(a, paths[0])
    write_volume(b, paths[1])
    write_volume(Volume(mask.astype(np.float32), a.spacing), paths[2])
    return paths


def list_cases(directory) -> list[str]:
    names = sorted(os.listdir(directory))
    return [f"case{m.group(1)}" for m in map(CASE_RE.match, names) if m]


def read_case(directory, case: str) -> tuple[Volume, Volume]:
    directory = Path(directory)
    return read_volume(directory / f"{case}_a.vvol"), read_volume(directory / f"{case}_b.vvol")
