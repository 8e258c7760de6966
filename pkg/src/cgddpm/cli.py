"""Command-line interface.

    cgddpm [--config FILE] [--seed S] [--threads T] COMMAND ...

Commands: gen-data, train, sample, evaluate, consistency. Exit codes:
0 success, 2 configuration or input error, 3 incompatible checkpoint,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .denoiser import DenoiserConfig
from .inference import DIRECTIONS, SAMPLERS, PatchSampler, pick_nets, sampling_schedule, translate_volume
from .metrics import MCReport, mae, mc_consistency, mssim, psnr, write_report
from .tensor import NonFiniteError
from .tensor.checkpoint import CheckpointError
from .training import TrainConfig, TrainingError, load_nets, save_trace, train
from .volume import (
    PhantomSpec,
    Volume,
    VolumeFormatError,
    case_name,
    generate_phantom_pair,
    list_cases,
    read_case,
    read_volume,
    write_case,
    write_volume,
)

log = logging.getLogger("cgddpm")

EXIT_OK, EXIT_INPUT, EXIT_CHECKPOINT, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "CGDDPM_THREADS"


class ConfigError(ValueError):
    pass


def _section(cls, d: dict | None, **fixed):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    d.update(fixed)
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


@dataclass
class SamplingConfig:
    steps: int = 16
    sampler: str = "cg"
    runs: int = 5
    overlap: float = 0.5
    batch: int = 8

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.steps < 1 or self.runs < 1 or self.batch < 1:
            raise ValueError("steps, runs and batch must be >= 1")
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must lie in [0, 1)")


@dataclass
class PathsConfig:
    data: str | None = None
    checkpoints: str | None = None
    reports: str | None = None


PHANTOM_KEYS = ("extents", "spacing", "ellipsoids", "table_a", "table_b", "bias_degree", "bias_amplitude",
                "noise_sigma")


@dataclass
class ExperimentConfig:
    """Validated experiment configuration; every section is optional in the JSON file."""

    paths: PathsConfig = field(default_factory=PathsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    phantom: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {"paths", "train", "denoiser", "sampling", "phantom", "seed"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        seed = int(d.get("seed", 0) if seed is None else seed)
        train = dict(d.get("train") or {})
        if "seed" in train:
            raise ConfigError("set the seed at top level or with --seed, not inside 'train'")
        if "patch" in train:
            train["patch"] = tuple(train["patch"])
        den = dict(d.get("denoiser") or {})
        try:
            denoiser = DenoiserConfig.from_dict(den)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid DenoiserConfig: {exc}") from exc
        phantom = dict(d.get("phantom") or {})
        bad = sorted(set(phantom) - set(PHANTOM_KEYS))
        if bad:
            raise ConfigError(f"unknown phantom keys: {bad}")
        cfg = cls(
            paths=_section(PathsConfig, d.get("paths")),
            train=_section(TrainConfig, train, seed=seed),
            denoiser=denoiser,
            sampling=_section(SamplingConfig, d.get("sampling")),
            phantom=phantom,
            seed=seed,
        )
        if cfg.sampling.steps > cfg.train.N:
            raise ConfigError(f"sampling steps {cfg.sampling.steps} exceed diffusion steps {cfg.train.N}")
        try:
            cfg.denoiser.check_patch(cfg.train.patch)
            _phantom_spec(cfg, 0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg


def _phantom_spec(cfg: ExperimentConfig, index: int) -> PhantomSpec:
    ss = np.random.SeedSequence([cfg.seed & (2**63 - 1), index])
    return PhantomSpec(**cfg.phantom, seed=int(ss.generate_state(1, np.uint32)[0]))


def load_config(path, seed: int | None) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data, seed)


def _resolve(arg, default, what: str) -> Path:
    value = arg if arg is not None else default
    if value is None:
        raise ConfigError(f"no {what} given (flag or config paths)")
    return Path(value)


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"directory {path} is not writable")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    out = _writable_dir(_resolve(args.out, cfg.paths.data, "output directory"))
    if args.count < 0:
        raise ConfigError("count must be >= 0")
    if args.count == 0:
        log.warning("count is 0: writing an empty manifest")
    files = []
    for index in range(args.first_index, args.first_index + args.count):
        spec = _phantom_spec(cfg, index)
        a, b, mask = generate_phantom_pair(spec)
        try:
            paths = write_case(out, index, a, b, mask)
        except OSError as exc:
            raise ConfigError(f"cannot write case {index}: {exc}") from exc
        files += [{"file": p.name, "sha256": _sha256(p), "phantom_seed": spec.seed} for p in paths]
    manifest = {
        "format": "cgddpm-dataset/1",
        "seed": cfg.seed,
        "first_index": args.first_index,
        "count": args.count,
        "phantom": PhantomSpec(**cfg.phantom).to_dict() | {"seed": None},
        "files": files,
    }
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ConfigError(f"cannot write manifest: {exc}") from exc
    log.info("wrote %d cases to %s", args.count, out)
    return EXIT_OK


def _load_cases(data_dir: Path):
    if not data_dir.is_dir():
        raise ConfigError(f"data directory {data_dir} does not exist")
    names = list_cases(data_dir)
    if not names:
        raise ConfigError(f"no cases found in {data_dir}")
    return names, [tuple(v.data for v in read_case(data_dir, c)) for c in names]


def cmd_train(args, cfg: ExperimentConfig) -> int:
    data = _resolve(args.data, cfg.paths.data, "data directory")
    out = _writable_dir(_resolve(args.out, cfg.paths.checkpoints, "checkpoint directory"))
    tcfg = cfg.train
    overrides = {k: v for k, v in (("total_epochs", args.epochs), ("phase1_epochs", args.phase1_epochs),
                                   ("lam", args.lam)) if v is not None}
    if overrides:
        tcfg = _section(TrainConfig, tcfg.to_dict() | overrides | {"patch": tcfg.patch})
    _, cases = _load_cases(data)
    for a, _ in cases:
        if any(p > e for p, e in zip(tcfg.patch, a.shape)):
            raise ConfigError(f"patch {tcfg.patch} larger than volume {a.shape}")

    def report(epoch, losses):
        log.info("epoch %d: %s", epoch, json.dumps(asdict(losses)))

    train(cases, tcfg, cfg.denoiser, out, resume=not args.no_resume, init=args.init, log=report)
    return EXIT_OK


def _load_pair(path):
    try:
        return load_nets(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc


def _sources(source: Path, direction: str) -> list[tuple[str, np.ndarray, Volume]]:
    """(name, source array, reference volume) for a file or every case of a dataset."""
    if source.is_dir():
        tag = "a" if direction == "a2b" else "b"
        return [(c, read_volume(source / f"{c}_{tag}.vvol").data, read_volume(source / f"{c}_{tag}.vvol"))
                for c in list_cases(source)]
    vol = read_volume(source)
    return [(source.stem, vol.data, vol)]


def _check_compat(net, shape, patch):
    try:
        net.config.check_patch(patch)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    if any(p > e for p, e in zip(patch, shape)):
        raise CheckpointError(f"checkpoint patch {tuple(patch)} does not fit volume {shape}")


def cmd_sample(args, cfg: ExperimentConfig) -> int:
    net_a, net_b, header = _load_pair(args.checkpoint)
    patch = tuple(header["train"]["patch"])
    kind, N = header["train"]["schedule"], header["train"]["N"]
    runs = args.runs if args.runs is not None else cfg.sampling.runs
    sampler_kind = args.sampler or cfg.sampling.sampler
    out = _writable_dir(Path(args.out))
    net_x, net_y = pick_nets(net_a, net_b, args.direction)
    try:
        s, tmap = sampling_schedule(kind, N, args.steps or cfg.sampling.steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for name, src, ref in _sources(Path(args.source), args.direction):
        _check_compat(net_x, src.shape, patch)
        sampler = PatchSampler(sampler_kind, net_x, net_y, s, tmap, keep_traces=args.save_trace)
        outs = translate_volume(src, sampler, patch, runs, cfg.seed, cfg.sampling.overlap,
                                shared_start=args.shared_start, batch=cfg.sampling.batch, threads=args.threads)
        for r, vol in enumerate(outs):
            write_volume(Volume(vol, ref.spacing), out / f"{name}_run{r}.vvol")
        mean = outs[0] if runs == 1 else np.mean(outs, axis=0)
        write_volume(Volume(mean, ref.spacing), out / f"{name}_mean.vvol")
        if args.save_trace:
            for key, trace in sorted(sampler.traces.items()):
                save_trace(trace, out / f"{name}_run{key[0]}_w{key[1]:03d}.ztrc")
        log.info("sampled %s (%d runs, %s)", name, runs, sampler_kind)
    return EXIT_OK


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    pred, truth = Path(args.pred), Path(args.truth)
    tag = "b" if args.direction == "a2b" else "a"
    cases = list_cases(truth)
    if not cases:
        raise ConfigError(f"no truth cases in {truth}")
    missing = [c for c in cases if not (pred / f"{c}_mean.vvol").exists()]
    if missing:
        for c in missing:
            print(f"missing prediction for case {c}", file=sys.stderr)
        return EXIT_INPUT
    rows = []
    per_metric: dict[str, list[float]] = {"mae": [], "psnr": [], "mssim": []}
    for c in cases:
        p = read_volume(pred / f"{c}_mean.vvol").data
        t = read_volume(truth / f"{c}_{tag}.vvol").data
        vals = {"mae": mae(p, t), "psnr": psnr(p, t), "mssim": mssim(p, t)}
        for m, v in vals.items():
            rows.append((c, args.direction, args.label, m, v))
            per_metric[m].append(v)
    for m, vs in per_metric.items():
        rows.append(("mean", args.direction, args.label, m, float(np.mean(vs))))
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    write_report(args.report, rows)
    return EXIT_OK


def cmd_consistency(args, cfg: ExperimentConfig) -> int:
    runs = args.runs if args.runs is not None else cfg.sampling.runs
    if runs < 2:
        raise ConfigError("consistency needs at least 2 runs")
    net_a, net_b, header = _load_pair(args.checkpoint)
    patch = tuple(header["train"]["patch"])
    net_x, net_y = pick_nets(net_a, net_b, args.direction)
    try:
        s, tmap = sampling_schedule(header["train"]["schedule"], header["train"]["N"],
                                    args.steps or cfg.sampling.steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    data = Path(args.data)
    cases = args.cases or list_cases(data)
    src_tag, tgt_tag = ("a", "b") if args.direction == "a2b" else ("b", "a")
    rows, curve, bars = [], [], []
    for case in cases:
        try:
            src = read_volume(data / f"{case}_{src_tag}.vvol").data
            truth = read_volume(data / f"{case}_{tgt_tag}.vvol").data
        except FileNotFoundError as exc:
            raise ConfigError(f"case {case} not found in {data}") from exc
        _check_compat(net_x, src.shape, patch)
        for kind in args.samplers:
            sampler = PatchSampler(kind, net_x, net_y, s, tmap)
            shared = args.shared_start or kind == "ddim"
            outs = translate_volume(src, sampler, patch, runs, cfg.seed, cfg.sampling.overlap,
                                    shared_start=shared, batch=cfg.sampling.batch, threads=args.threads)
            rep: MCReport = mc_consistency(outs, truth)
            rows += rep.rows(case, args.direction, kind)
            curve += [(kind, case, n, v) for n, v in enumerate(rep.n_mssim, 1)]
            bars.append((kind, case, rep.uncertainty, rep.inconsistency))
            log.info("%s %s: uncertainty %.5f inconsistency %.5f", case, kind, rep.uncertainty, rep.inconsistency)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, rows)
    stem = report.with_suffix("")
    with open(f"{stem}_nmssim.csv", "w") as fh:
        fh.write("sampler,case,mc_n,n_mssim\n")
        fh.writelines(f"{k},{c},{n},{v!r}\n" for k, c, n, v in curve)
    with open(f"{stem}_bars.csv", "w") as fh:
        fh.write("sampler,case,uncertainty,inconsistency\n")
        fh.writelines(f"{k},{c},{u!r},{i!r}\n" for k, c, u, i in bars)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cgddpm", description="Cycle-guided diffusion for paired volume translation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, default=None,
                   help=f"window-level worker threads (default ${THREADS_ENV} or 1); never changes results")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write paired phantom cases and a manifest")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out")
    g.add_argument("--first-index", type=int, default=0, help="index of the first case (held-out sets)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-phase training of both networks")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int, help="override total_epochs")
    t.add_argument("--phase1-epochs", type=int, help="override phase1_epochs")
    t.add_argument("--lam", type=float, help="override the cycle strength")
    t.add_argument("--init", help="start from another run's checkpoint (e.g. a shared first phase)")
    t.add_argument("--no-resume", action="store_true", help="ignore out/last.ckpt")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="synthesize volumes with a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--source", required=True, help="source .vvol file or dataset directory")
    s.add_argument("--direction", choices=DIRECTIONS, default="a2b")
    s.add_argument("--sampler", choices=SAMPLERS)
    s.add_argument("--runs", type=int)
    s.add_argument("--steps", type=int, help="respaced sampling steps K")
    s.add_argument("--shared-start", action="store_true", help="same starting noise in every run")
    s.add_argument("--save-trace", action="store_true", help="write latent traces of cycle-guided runs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="MAE / PSNR / MSSIM report of MC-mean predictions")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--direction", choices=DIRECTIONS, default="a2b")
    e.add_argument("--label", default="model")
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("consistency", help="Monte-Carlo uncertainty and N-MSSIM study")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--cases", nargs="*")
    c.add_argument("--direction", choices=DIRECTIONS, default="a2b")
    c.add_argument("--samplers", nargs="+", choices=SAMPLERS, default=list(SAMPLERS))
    c.add_argument("--runs", type=int)
    c.add_argument("--steps", type=int)
    c.add_argument("--shared-start", action="store_true")
    c.add_argument("--report", required=True)
    c.set_defaults(func=cmd_consistency)
    return p


def _threads(arg) -> int:
    if arg is not None:
        return max(1, arg)
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.threads = _threads(args.threads)
    try:
        cfg = load_config(args.config, args.seed)
        return args.func(args, cfg)
    except (ConfigError, VolumeFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (TrainingError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
