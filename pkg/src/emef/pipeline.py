"""End-to-end desk-scale run built from the CLI subcommands.

Layout under ``root``::

    run.cfg            settings used by every step
    train/ test/       synthetic pairs (disjoint draws of one data stream)
    dataset/           training pairs with their target images
    model.emef         soft-label checkpoint (+ model.history.csv)
    fused/<method>/    one PPM per test pair for every compared method
    report.csv/.txt    ranked comparison of the main methods
    ablation.csv/.txt  EMEF against its ablations (hard labels, latent search)
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from .cli import main as cli_main
from .fusers import registry

logger = logging.getLogger(__name__)

EMEF = "EMEF"


def imitation_name(index: int) -> str:
    return f"T{index + 1}-imitation"


@dataclass
class PipelineRun:
    root: Path
    methods: Dict[str, Path] = field(default_factory=dict)
    ablations: Dict[str, Path] = field(default_factory=dict)
    cpu_seconds: Dict[str, float] = field(default_factory=dict)

    @property
    def checkpoint(self) -> Path:
        return self.root / "model.emef"

    @property
    def hard_checkpoint(self) -> Path:
        return self.root / "model_hard.emef"

    @property
    def report_txt(self) -> Path:
        return self.root / "report.txt"


class PipelineError(RuntimeError):
    pass


def _run(args: List[str], run: Optional[PipelineRun] = None, step: Optional[str] = None) -> None:
    logger.info("emef %s", " ".join(args))
    start = time.process_time()
    code = cli_main(args)
    if code != 0:
        raise PipelineError(f"'emef {' '.join(args)}' exited with status {code}")
    if run is not None:
        run.cpu_seconds[step or args[0]] = time.process_time() - start


def write_config(path: Path, settings: Mapping[str, object]) -> None:
    lines = ["# desk-scale pipeline settings"] + [f"{k} = {v}" for k, v in settings.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_pipeline(root, seed: int = 0, train_count: int = 64, test_count: int = 16,
                 settings: Optional[Mapping[str, object]] = None, ablations: bool = False,
                 jobs: int = 1) -> PipelineRun:
    """Synthesise data, pre-train, fuse the test pairs with every method and write the reports."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    run = PipelineRun(root)
    cfg = root / "run.cfg"
    write_config(cfg, {"seed": seed, "jobs": jobs, **(settings or {})})
    common = ["--config", str(cfg)]
    train, test, dataset, fused = root / "train", root / "test", root / "dataset", root / "fused"

    _run(["synth-data", *common, "--count", str(train_count), "--out", str(train)])
    _run(["synth-data", *common, "--count", str(test_count), "--offset", str(train_count), "--out", str(test)])
    _run(["build-dataset", *common, "--data", str(train), "--out", str(dataset)])
    _run(["pretrain", *common, "--dataset", str(dataset), "--out", str(run.checkpoint)], run, "pretrain")

    def fuse(name: str, checkpoint: Path, *extra: str) -> Path:
        out = fused / name
        _run(["fuse", *common, "--checkpoint", str(checkpoint), "--data", str(test), "--out", str(out),
              "--traces", str(root / "traces" / name), *extra], run, f"fuse:{name}")
        return out

    for f in registry():
        run.methods[imitation_name(f.index)] = fuse(imitation_name(f.index), run.checkpoint, "--imitate", str(f.index))
    run.methods["pick_gt"] = fuse("pick_gt", run.checkpoint, "--mode", "pick_gt")
    run.methods["pick_imitation"] = fuse("pick_imitation", run.checkpoint, "--mode", "pick_imitation")
    run.methods[EMEF] = fuse(EMEF, run.checkpoint, "--mode", "style_code")
    _report(common, test, run.methods, root / "report")

    if ablations:
        _run(["pretrain", *common, "--dataset", str(dataset), "--out", str(run.hard_checkpoint), "--hard-labels"], run,
             "pretrain:hard-labels")
        run.ablations[EMEF] = run.methods[EMEF]
        run.ablations["EMEF-hard-labels"] = fuse("EMEF-hard-labels", run.hard_checkpoint, "--mode", "style_code")
        run.ablations["EMEF-latent-code"] = fuse("EMEF-latent-code", run.checkpoint, "--mode", "latent_code")
        _report(common, test, run.ablations, root / "ablation")
    return run


def _report(common: List[str], test: Path, methods: Mapping[str, Path], prefix: Path) -> None:
    args = ["report", *common, "--data", str(test), "--out", str(prefix), "--emef", EMEF]
    for name, path in methods.items():
        args += ["--method", f"{name}={path}"]
    _run(args)
