"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criteria 5 to 9 share two seeded end-to-end pipeline runs (64 training pairs,
16 held-out pairs, 64x64). They take a while on one core; the other criteria
finish in seconds.
"""
import csv
import time
from pathlib import Path

import numpy as np
import pytest
from gradcases import op_cases

from emef.autodiff import Tensor, conv2d_modulated, modulate_weight, precision
from emef.autodiff.gradcheck import gradcheck
from emef.imaging import load_pair_dir, synth_pair
from emef.imitator import Generator, NetConfig, load_generator
from emef.metrics import (
    avg_gradient_ag,
    desired_patch,
    edge_intensity_ei,
    entropy_en,
    mef_ssim,
    psnr_fusion,
    spatial_frequency_sf,
    ssim,
)
from emef.pipeline import EMEF, imitation_name, run_pipeline
from emef.training import build_dataset, imitation_scores, sample_soft_label
from emef.tuner import TunerConfig, tune

from conftest import ACCEPTANCE_LINES

SEED = 0
# Desk-scale settings; every other value is the library default. Both were chosen on
# training data and a separate validation draw, never on the held-out pairs.
PIPELINE_SETTINGS = {"epochs": 160, "alpha0": 0.5}


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    first = run_pipeline(root / "run_a", seed=SEED, settings=PIPELINE_SETTINGS, ablations=True)
    second = run_pipeline(root / "run_b", seed=SEED, settings=PIPELINE_SETTINGS)
    return first, second


def read_scores(csv_path: Path, metric: str = "MEF-SSIM") -> dict:
    with open(csv_path, newline="") as fh:
        return {row["method"]: float(row[metric]) for row in csv.DictReader(fh)}


# ----------------------------------------------------------------- 1
def test_criterion_1_autodiff_correctness():
    start = time.perf_counter()
    worst_op = 0.0
    with precision(np.float64):
        for name in op_cases(np.random.default_rng(0)):
            fn, params = op_cases(np.random.default_rng(7))[name]
            worst_op = max(worst_op, gradcheck(fn, params, h=1e-5))
        pair = synth_pair(4, size=16)
        gen = Generator(NetConfig(size=16, base=4, depth=2, d_latent=8, head_hidden=4, max_channels=8),
                        seed=7, dtype=np.float64)
        gen.requires_grad_(False)
        code = Tensor(np.ones(4), requires_grad=True)
        head = gen.params["head.weight"]
        head.requires_grad = True
        composition = gradcheck(lambda: 1.0 - mef_ssim(pair.sources(), gen(pair.over, pair.under, code)),
                                [code, head])
    elapsed = time.perf_counter() - start
    ok = worst_op <= 1e-4 and composition <= 1e-3 and elapsed < 120
    record(1, ok, f"worst op rel err {worst_op:.2e}, composition {composition:.2e}, {elapsed:.1f}s")
    assert ok


# ----------------------------------------------------------------- 2
def test_criterion_2_demodulation_invariants():
    rng = np.random.default_rng(2)
    worst_norm = 0.0
    for _ in range(50):
        w = Tensor(rng.standard_normal((16, 8, 3, 3)))
        s = Tensor(rng.uniform(0.05, 4.0, 8))
        norms = (modulate_weight(w, s, eps=1e-8).data.astype(np.float64) ** 2).sum(axis=(1, 2, 3))
        worst_norm = max(worst_norm, float(np.abs(norms - 1.0).max()))
    worst_scale = 0.0
    with precision(np.float64):
        x = Tensor(rng.random((1, 8, 8, 8)))
        w = Tensor(rng.standard_normal((6, 8, 3, 3)))
        s = rng.uniform(0.2, 2.0, 8)
        base = conv2d_modulated(x, w, Tensor(s), eps=0.0, allow_zero_eps=True, pad=1).data
        for alpha in (0.5, 2.0, 4.0, 1024.0):
            out = conv2d_modulated(x, w, Tensor(alpha * s), eps=0.0, allow_zero_eps=True, pad=1).data
            worst_scale = max(worst_scale, float(np.abs(out - base).max()))
    ok = worst_norm <= 1e-3 and worst_scale == 0.0
    record(2, ok, f"max |norm-1| {worst_norm:.2e}, scale invariance max diff {worst_scale:.1e}")
    assert ok


# ----------------------------------------------------------------- 3
def test_criterion_3_metric_properties():
    p = synth_pair(9, size=32)
    a, b = p.over, p.under
    checks = {}
    checks["ssim identity"] = abs(ssim(a, a) - 1.0) < 1e-12
    checks["ssim symmetry"] = abs(ssim(a, b) - ssim(b, a)) < 1e-12
    fused = np.clip(0.5 * (a + b), 0.0, 0.85)
    checks["mef offset"] = abs(mef_ssim(p.sources(), fused + 0.1) - mef_ssim(p.sources(), fused)) < 1e-6
    stitched = np.zeros((32, 32))
    for top in range(0, 32, 8):
        for left in range(0, 32, 8):
            stitched[top:top + 8, left:left + 8] = desired_patch(p.sources(), top, left) + 0.5
    checks["mef stitched"] = mef_ssim(p.sources(), stitched, stride=8) >= 0.999
    const = np.full((16, 16), 0.37)
    checks["EN constant"] = entropy_en(const) == 0.0
    checks["EN uniform"] = abs(entropy_en(np.arange(256.0).reshape(16, 16) / 255.0) - 8.0) < 1e-12
    checks["AG/EI/SF constant"] = all(fn(const) == 0.0 for fn in (avg_gradient_ag, edge_intensity_ei,
                                                                   spatial_frequency_sf))
    checks["PSNR cap"] = psnr_fusion([a, a], a) == 100.0
    failed = [k for k, v in checks.items() if not v]
    record(3, not failed, f"{len(checks) - len(failed)}/{len(checks)} properties hold"
           + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed


# ----------------------------------------------------------------- 4
def test_criterion_4_soft_label_contract():
    rng = np.random.default_rng(4)
    n, draws, bad = 4, 100_000, 0
    for k in range(draws):
        idx = k % n
        v = sample_soft_label(idx, n, rng).values
        cold = np.delete(v, idx)
        if not (0.5 < v[idx] <= 1.0 and np.all((cold >= 0.0) & (cold < 0.5)) and int(np.argmax(v)) == idx):
            bad += 1
    record(4, bad == 0, f"{draws - bad}/{draws} draws satisfy the label contract")
    assert bad == 0


# ----------------------------------------------------------------- 5
def test_criterion_5_imitation_fidelity(runs):
    run = runs[0]
    gen = load_generator(run.checkpoint)
    held_out = build_dataset(load_pair_dir(run.root / "test"))
    means = imitation_scores(gen, held_out, soft=True).mean(axis=0)
    minutes = run.cpu_seconds["pretrain"] / 60.0
    ok = bool(np.all(means >= 0.85)) and minutes <= 30.0
    record(5, ok, "mean SSIM per target " + ", ".join(f"T{i + 1}={m:.3f}" for i, m in enumerate(means))
           + f" (>= 0.85), pretraining {minutes:.1f} CPU-min (<= 30)")
    assert ok


# ----------------------------------------------------------------- 6
def test_criterion_6_search_behaviour(runs):
    run = runs[0]
    gen = load_generator(run.checkpoint)
    gen.requires_grad_(False)
    pairs = load_pair_dir(run.root / "test")
    improved, ones_start, monotone, slowest = 0, 0, 0, 0.0
    for pair in pairs:
        start = time.process_time()
        res = tune(pair, gen, TunerConfig(alpha0=PIPELINE_SETTINGS["alpha0"]))
        slowest = max(slowest, time.process_time() - start)
        ones_start += np.array_equal(res.trace[0]["code"], np.ones(4))
        best = res.best_so_far()
        monotone += all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
        final = mef_ssim(pair.sources(), res.best_image)
        initial = mef_ssim(pair.sources(), gen.fuse(pair.over, pair.under, np.ones(4)))
        improved += final >= initial
    n = len(pairs)
    ok = improved == ones_start == monotone == n and slowest <= 60.0
    record(6, ok, f"all-ones start {ones_start}/{n}, monotone best-so-far {monotone}/{n}, "
           f"final >= initial {improved}/{n}, slowest pair {slowest:.1f} CPU-s (<= 60)")
    assert ok


# ----------------------------------------------------------------- 7
def test_criterion_7_ensemble_advantage(runs):
    run = runs[0]
    scores = read_scores(run.root / "report.csv")
    emef = scores[EMEF]
    imitations = {imitation_name(i): scores[imitation_name(i)] for i in range(4)}
    beats = {k: emef >= v for k, v in imitations.items()}
    pick_ok = emef >= scores["pick_imitation"] - 0.005
    ok = all(beats.values()) and pick_ok
    flagged = "ordering violation" in run.report_txt.read_text()
    detail = (f"EMEF {emef:.4f}; " + ", ".join(f"{k} {v:.4f}" for k, v in imitations.items())
              + f"; pick_imitation {scores['pick_imitation']:.4f} (margin 0.005)")
    if not ok:
        detail += f"; report flags violation: {flagged}"
    record(7, ok, detail)
    assert ok
    # a report that flags a violation must only do so when some row beats EMEF
    assert flagged == any(v > emef for k, v in scores.items() if k != EMEF)


# ----------------------------------------------------------------- 8
def test_criterion_8_hard_label_ablation(runs):
    run = runs[0]
    scores = read_scores(run.root / "ablation.csv")
    soft, hard = scores[EMEF], scores["EMEF-hard-labels"]
    ok = hard <= soft
    record(8, ok, f"hard-label EMEF {hard:.4f} <= soft-label EMEF {soft:.4f}")
    assert ok


# ----------------------------------------------------------------- 9
def test_criterion_9_reproducibility(runs):
    a, b = runs
    files = [Path("model.emef"), Path("model.history.csv"), Path("report.csv"), Path("report.txt")]
    for method_dir in sorted((a.root / "fused").iterdir()):
        if (b.root / "fused" / method_dir.name).is_dir():
            files += sorted(p.relative_to(a.root) for p in method_dir.iterdir())
    files += sorted(p.relative_to(a.root) for p in (a.root / "traces" / EMEF).iterdir())
    differing = [str(f) for f in files if (a.root / f).read_bytes() != (b.root / f).read_bytes()]
    ok = not differing
    record(9, ok, f"{len(files) - len(differing)}/{len(files)} artefacts byte-identical across two seeded runs"
           + (f"; differing: {differing[:3]}" if differing else ""))
    assert ok
