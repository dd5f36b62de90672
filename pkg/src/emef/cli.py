"""Command-line entry point: ``emef <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable images, bad checkpoints, missing files), 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
import typing
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TypeVar

import numpy as np

from .autodiff import NonFiniteError
from .fusers import registry, run_all_targets
from .imaging import (
    ExposurePair,
    ImageFormatError,
    PairError,
    atomic_write_bytes,
    load_pair_dir,
    load_ppm,
    save_pair,
    save_ppm,
    synth_pair,
)
from .imitator import CheckpointError, Generator, NetConfig, load_generator, save_generator
from .metrics import DEFAULT_METRICS, METRICS, rank_scores, score_images
from .training import STREAM_DATA, TrainingConfig, TrainingSample, pretrain, substream, write_history
from .tuner import MODES, TunerConfig, ablation_pick, imitation_images, tune, write_trace

logger = logging.getLogger("emef")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
T = TypeVar("T")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- configuration
def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none") else int(text)


@dataclasses.dataclass
class RunConfig:
    """Flat key=value settings shared by all subcommands."""

    seed: int = 0
    jobs: int = 1
    size: int = 64
    base: int = 32
    depth: int = 4
    d_latent: int = 64
    eps: float = 1e-8
    head_hidden: int = 32
    lam: float = 0.002
    lr: float = 2e-4
    epochs: int = 40
    decay_start: Optional[int] = None
    soft_labels: bool = True
    checkpoint_every: int = 0
    alpha0: float = 0.05
    steps: int = 60
    decay_window: int = 20
    tol: float = 1e-4
    patience: int = 5
    mode: str = "style_code"

    _PARSERS: typing.ClassVar[dict] = {
        bool: _parse_bool, int: int, float: float, str: str, Optional[int]: _optional_int,
    }

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def update(self, values: Dict[str, str], origin: str) -> None:
        hints = {k: v for k, v in typing.get_type_hints(RunConfig).items() if k in self.keys()}
        for key, raw in values.items():
            if key not in hints:
                raise UsageError(f"{origin}: unknown key {key!r}; known keys: {', '.join(self.keys())}")
            try:
                setattr(self, key, self._PARSERS[hints[key]](raw) if isinstance(raw, str) else raw)
            except ValueError as exc:
                raise UsageError(f"{origin}: bad value for {key!r}: {exc}") from None

    def net(self) -> NetConfig:
        return NetConfig(size=self.size, base=self.base, depth=self.depth, n_styles=len(registry()),
                         d_latent=self.d_latent, eps=self.eps, head_hidden=self.head_hidden)

    def training(self, soft_labels: Optional[bool] = None) -> TrainingConfig:
        return TrainingConfig(lam=self.lam, lr=self.lr, epochs=self.epochs, decay_start=self.decay_start,
                              seed=self.seed, soft_labels=self.soft_labels if soft_labels is None else soft_labels,
                              checkpoint_every=self.checkpoint_every)

    def tuner(self, mode: Optional[str] = None) -> TunerConfig:
        return TunerConfig(alpha0=self.alpha0, steps=self.steps, decay_window=self.decay_window, tol=self.tol,
                           patience=self.patience, mode=mode or self.mode)


def read_config_file(path: Path) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        cfg.update(read_config_file(Path(args.config)), str(args.config))
    overrides = {k: getattr(args, k) for k in RunConfig.keys() if getattr(args, k, None) is not None}
    if args.set:
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            overrides.setdefault(key.strip().replace("-", "_"), value.strip())
    cfg.update(overrides, "command line")
    if cfg.jobs < 1:
        raise UsageError("jobs must be >= 1")
    try:
        cfg.net(), cfg.training(), cfg.tuner()
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return cfg


# ----------------------------------------------------------------- helpers
def parallel_map(fn: Callable[..., T], items: Sequence, jobs: int) -> List[T]:
    """Map in input order; ``jobs > 1`` uses a thread pool."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise FileNotFoundError(f"{what} directory not found: {path}")
    return path


def _writable_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_pairs(path: Path) -> List[ExposurePair]:
    pairs = load_pair_dir(_require_dir(path, "data"))
    if not pairs:
        raise PairError(f"no <name>_oe.ppm/<name>_ue.ppm pairs in {path}")
    return pairs


def _target_path(root: Path, name: str, index: int) -> Path:
    return root / f"{name}_t{index}.ppm"


def _csv_text(rows: List[List]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


# ----------------------------------------------------------------- subcommands
def cmd_synth_data(args, cfg: RunConfig) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = _writable_dir(Path(args.out))
    if args.offset < 0:
        raise UsageError("--offset must be >= 0")
    seeds = substream(cfg.seed, STREAM_DATA).integers(0, 2 ** 31 - 1, size=args.offset + args.count)
    for k in range(args.offset, args.offset + args.count):
        save_pair(synth_pair(int(seeds[k]), size=cfg.size), out, f"pair{k:04d}")
    logger.info("wrote %d pairs to %s", args.count, out)
    return EXIT_OK


def _run_targets(pairs: List[ExposurePair], out: Path, jobs: int) -> None:
    outputs = parallel_map(run_all_targets, pairs, jobs)
    for pair, targets in zip(pairs, outputs):
        for i, img in enumerate(targets):
            save_ppm(img, _target_path(out, pair.name, i))


def cmd_run_targets(args, cfg: RunConfig) -> int:
    pairs = _load_pairs(Path(args.data))
    out = _writable_dir(Path(args.out))
    _run_targets(pairs, out, cfg.jobs)
    logger.info("wrote %d x %d target images to %s", len(pairs), len(registry()), out)
    return EXIT_OK


def cmd_build_dataset(args, cfg: RunConfig) -> int:
    pairs = _load_pairs(Path(args.data))
    out = _writable_dir(Path(args.out))
    for pair in pairs:
        save_pair(pair, out, pair.name)
    _run_targets(pairs, out, cfg.jobs)
    rows = [["pair", "target_index", "target_name", "image"]]
    for pair in pairs:
        for f in registry():
            rows.append([pair.name, f.index, f.name, _target_path(out, pair.name, f.index).name])
    atomic_write_bytes(out / "index.csv", _csv_text(rows).encode("utf-8"))
    return EXIT_OK


def load_dataset_dir(path: Path) -> List[TrainingSample]:
    """Samples from a ``build-dataset`` directory (targets read from disk, not recomputed)."""
    pairs = _load_pairs(path)
    samples = []
    for pair in pairs:
        targets = []
        for f in registry():
            tp = _target_path(path, pair.name, f.index)
            if not tp.is_file():
                raise FileNotFoundError(f"missing target image {tp}; run build-dataset first")
            img = load_ppm(tp)
            if img.shape != pair.shape:
                raise PairError(f"{tp}: size {img.shape} does not match pair {pair.shape}")
            targets.append(img)
        samples.append(TrainingSample(pair, targets))
    return samples


def cmd_pretrain(args, cfg: RunConfig) -> int:
    dataset = load_dataset_dir(_require_dir(Path(args.dataset), "dataset"))
    out = Path(args.out)
    _writable_dir(out.parent)
    ckpt_dir = _writable_dir(Path(args.checkpoint_dir)) if args.checkpoint_dir else None
    soft = False if args.hard_labels else None
    result = pretrain(dataset, cfg.net(), cfg.training(soft), checkpoint_dir=ckpt_dir)
    save_generator(result.generator, out)
    write_history(result, Path(args.history) if args.history else out.with_suffix(".history.csv"))
    return EXIT_OK


def _load_checkpoint(path: str) -> Generator:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return load_generator(p)


def cmd_fuse(args, cfg: RunConfig) -> int:
    mode = args.mode or cfg.mode
    gen = _load_checkpoint(args.checkpoint)
    pairs = _load_pairs(Path(args.data))
    out = _writable_dir(Path(args.out))
    traces = _writable_dir(Path(args.traces)) if args.traces else out
    config = cfg.tuner(mode)
    gen.requires_grad_(False)
    if args.imitate is not None and not 0 <= args.imitate < gen.config.n_styles:
        raise UsageError(f"--imitate must lie in [0, {gen.config.n_styles})")

    def work(pair: ExposurePair):
        if args.imitate is not None:
            return imitation_images(pair, gen)[args.imitate], None
        if mode in ("style_code", "latent_code"):
            res = tune(pair, gen, config)
            return res.best_image, res
        return ablation_pick(pair, gen, mode, config=config), None

    for pair, (img, res) in zip(pairs, parallel_map(work, pairs, cfg.jobs)):
        save_ppm(img, out / f"{pair.name}.ppm")
        if res is not None:
            write_trace(res, traces / f"{pair.name}_trace.csv")
    logger.info("fused %d pairs (%s) into %s", len(pairs), mode, out)
    return EXIT_OK


def _fused_for(pairs: List[ExposurePair], fused_dir: Path) -> List[np.ndarray]:
    images = []
    for pair in pairs:
        path = fused_dir / f"{pair.name}.ppm"
        if not path.is_file():
            raise FileNotFoundError(f"missing fused image {path}")
        img = load_ppm(path)
        if img.shape[:2] != pair.shape[:2]:
            raise PairError(f"{path}: size {img.shape[:2]} does not match pair {pair.shape[:2]}")
        images.append(img)
    return images


def _metric_list(text: Optional[str]) -> List[str]:
    if not text:
        return list(DEFAULT_METRICS)
    names = [m.strip() for m in text.split(",") if m.strip()]
    unknown = [m for m in names if m not in METRICS]
    if unknown:
        raise UsageError(f"unknown metric(s) {unknown}; known: {', '.join(METRICS)}")
    return names


def cmd_eval(args, cfg: RunConfig) -> int:
    metrics = _metric_list(args.metrics)
    pairs = _load_pairs(Path(args.data))
    fused = _fused_for(pairs, _require_dir(Path(args.fused), "fused"))
    per_pair = parallel_map(lambda pf: score_images([pf[0].sources()], [pf[1]], metrics), list(zip(pairs, fused)),
                            cfg.jobs)
    rows = [["pair"] + metrics]
    for pair, scores in zip(pairs, per_pair):
        rows.append([pair.name] + [f"{scores[m]:.6f}" for m in metrics])
    rows.append(["mean"] + [f"{np.mean([s[m] for s in per_pair]):.6f}" for m in metrics])
    text = _csv_text(rows)
    if args.out:
        atomic_write_bytes(Path(args.out), text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_method(spec: str):
    if "=" not in spec:
        raise UsageError(f"--method expects NAME=DIR, got {spec!r}")
    name, path = spec.split("=", 1)
    return name.strip(), Path(path.strip())


def ordering_notes(report, emef: str, metric: str = "MEF-SSIM") -> List[str]:
    """Flag every method whose score beats the EMEF row on ``metric``."""
    if emef not in report.scores or metric not in report.metrics:
        return []
    ours = report.scores[emef][metric]
    return [f"ordering violation: {emef} {metric} {ours:.4f} is below {name} {s[metric]:.4f}"
            for name, s in report.scores.items() if name != emef and s[metric] > ours]


def cmd_report(args, cfg: RunConfig) -> int:
    if not args.method:
        raise UsageError("report needs at least one --method NAME=DIR")
    metrics = _metric_list(args.metrics)
    methods = [_parse_method(m) for m in args.method]
    names = [n for n, _ in methods]
    if len(set(names)) != len(names):
        raise UsageError("duplicate method names")
    pairs = _load_pairs(Path(args.data))
    sources = [p.sources() for p in pairs]
    fused = {name: _fused_for(pairs, _require_dir(path, f"method {name!r}")) for name, path in methods}
    scores = {name: score_images(sources, imgs, metrics) for name, imgs in fused.items()}
    report = rank_scores(scores, metrics)
    report.notes.extend(ordering_notes(report, args.emef))
    out = Path(args.out)
    _writable_dir(out.parent)
    atomic_write_bytes(out.with_suffix(".csv"), report.to_csv().encode("utf-8"))
    atomic_write_bytes(out.with_suffix(".txt"), report.to_text().encode("utf-8"))
    sys.stdout.write(report.to_text())
    return EXIT_OK


# ----------------------------------------------------------------- parser
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("shared options")
    g.add_argument("--config", help="key=value config file; '#' starts a comment; flags override it")
    g.add_argument("--seed", type=int, help="master seed; data, training and label streams derive from it")
    g.add_argument("--jobs", type=int, help="worker threads for per-pair work (output order is fixed)")
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help=f"override any config key ({', '.join(RunConfig.keys())})")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="emef", description="Ensemble-imitating multi-exposure fusion.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth-data", parents=[common], help="write synthetic exposure pairs as PPM files")
    p.add_argument("--count", type=int, required=True, help="number of pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, help="image side in pixels (default 64)")
    p.add_argument("--offset", type=int, default=0,
                   help="skip this many draws of the data stream (disjoint train/test sets from one seed)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("run-targets", parents=[common], help="run every ensemble fuser on each pair")
    p.add_argument("--data", required=True, help="directory of <name>_oe.ppm/<name>_ue.ppm pairs")
    p.add_argument("--out", required=True, help="output directory for <name>_t<i>.ppm")
    p.set_defaults(func=cmd_run_targets)

    p = sub.add_parser("build-dataset", parents=[common], help="write pairs plus all target images and an index")
    p.add_argument("--data", required=True, help="directory of input pairs")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("pretrain", parents=[common], help="train the style-controlled imitator")
    p.add_argument("--dataset", required=True, help="directory written by build-dataset")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--history", help="loss history CSV (default: <out>.history.csv)")
    p.add_argument("--checkpoint-dir", help="directory for periodic checkpoints (see checkpoint_every)")
    p.add_argument("--hard-labels", action="store_true", help="train with one-hot codes instead of soft labels")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("fuse", parents=[common], help="fuse pairs with a trained checkpoint")
    p.add_argument("--checkpoint", help="generator checkpoint (required)")
    p.add_argument("--data", required=True, help="directory of input pairs")
    p.add_argument("--out", required=True, help="output directory for <name>.ppm")
    p.add_argument("--traces", help="directory for <name>_trace.csv (default: --out)")
    p.add_argument("--mode", choices=MODES, help="search mode or ablation baseline")
    p.add_argument("--imitate", type=int, metavar="I",
                   help="skip the search and output the imitation of ensemble member I")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", parents=[common], help="score fused images against their sources")
    p.add_argument("--data", required=True, help="directory of source pairs")
    p.add_argument("--fused", required=True, help="directory of <name>.ppm fused images")
    p.add_argument("--metrics", help=f"comma-separated subset of {', '.join(METRICS)}")
    p.add_argument("--out", help="CSV output file (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="ranked comparison table of several methods")
    p.add_argument("--data", required=True, help="directory of source pairs")
    p.add_argument("--method", action="append", metavar="NAME=DIR", help="a method and its fused-image directory")
    p.add_argument("--emef", default="EMEF", help="row checked for MEF-SSIM ordering violations")
    p.add_argument("--metrics", help=f"comma-separated subset of {', '.join(METRICS)}")
    p.add_argument("--out", required=True, help="output prefix; writes <prefix>.csv and <prefix>.txt")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "fuse" and not args.checkpoint:
            raise UsageError("fuse requires --checkpoint")
        cfg = load_run_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"emef: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"emef: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImageFormatError, PairError, CheckpointError, OSError) as exc:
        print(f"emef: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
