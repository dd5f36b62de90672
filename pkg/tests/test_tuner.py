import numpy as np
import pytest

from emef.autodiff import NonFiniteError, Tensor, no_grad, precision
from emef.autodiff.gradcheck import gradcheck
from emef.fusers import run_all_targets
from emef.imaging import synth_pair
from emef.imitator import Generator, NetConfig, tensor_to_image
from emef.metrics import mef_ssim
from emef.tuner import TunerConfig, ablation_pick, fuse, imitation_images, step_size, tune

SMALL = NetConfig(size=16, base=4, depth=2, d_latent=8, head_hidden=4, max_channels=8)


@pytest.fixture(scope="module")
def gen():
    return Generator(SMALL, seed=11)


@pytest.fixture(scope="module")
def pair():
    return synth_pair(21, size=16)


def test_step_schedule():
    cfg = TunerConfig(alpha0=0.4, decay_window=4)
    assert [step_size(t, cfg) for t in range(9)] == pytest.approx(
        [0.4, 0.3, 0.2, 0.1, 0.2, 0.15, 0.1, 0.05, 0.1])


def test_config_validation():
    for bad in ({"alpha0": 0.0}, {"steps": 0}, {"mode": "random"}, {"tol": -1.0}):
        with pytest.raises(ValueError):
            TunerConfig(**bad)


def test_tune_contract(gen, pair):
    res = tune(pair, gen, TunerConfig(steps=12, tol=0.0))
    np.testing.assert_array_equal(res.trace[0]["code"], np.ones(4))
    assert res.iterations_used == 12 == len(res.trace)
    best = res.best_so_far()
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert res.best_loss == min(r["loss"] for r in res.trace)
    assert res.best_loss <= res.initial_loss
    with no_grad():
        again = tensor_to_image(gen(pair.over, pair.under, res.best_code).data)
    np.testing.assert_array_equal(again, res.best_image)
    assert 1.0 - mef_ssim(pair.sources(), res.best_image) == pytest.approx(res.best_loss, abs=1e-6)
    header = res.trace_csv().splitlines()[0]
    assert header == "iteration,loss,alpha,c0,c1,c2,c3"


def test_tune_deterministic(gen, pair):
    a = tune(pair, gen, TunerConfig(steps=6))
    b = tune(pair, gen, TunerConfig(steps=6))
    assert a.trace_csv() == b.trace_csv()
    np.testing.assert_array_equal(a.best_image, b.best_image)


def test_tolerance_stops_early(gen, pair):
    res = tune(pair, gen, TunerConfig(steps=60, alpha0=1e-9, tol=1e-4, patience=5))
    assert res.iterations_used == 6  # first step sets the baseline, then five stalled steps


def test_code_gradient_matches_fd(pair):
    with precision(np.float64):
        g64 = Generator(SMALL, seed=11, dtype=np.float64)
        g64.requires_grad_(False)
        c = Tensor(np.ones(4), requires_grad=True)
        assert gradcheck(lambda: 1.0 - mef_ssim(pair.sources(), g64(pair.over, pair.under, c)), [c]) <= 1e-3


def test_latent_mode(gen, pair):
    res = tune(pair, gen, TunerConfig(steps=4, mode="latent_code"))
    assert res.best_code.shape == (SMALL.d_latent,)
    with no_grad():
        start = gen.map_style(np.ones(4)).data
    np.testing.assert_array_equal(res.trace[0]["code"], start.astype(np.float64))


def test_pick_modes(gen, pair):
    targets = run_all_targets(pair)
    picked = ablation_pick(pair, gen, "pick_gt")
    assert any(np.array_equal(picked, t) for t in targets)
    assert mef_ssim(pair.sources(), picked) == pytest.approx(max(mef_ssim(pair.sources(), t) for t in targets))
    imit = ablation_pick(pair, gen, "pick_imitation")
    for img in imitation_images(pair, gen):
        assert mef_ssim(pair.sources(), imit) >= mef_ssim(pair.sources(), img)
    out = fuse(pair, gen, TunerConfig(steps=3))
    assert out.shape == (16, 16, 3) and 0.0 <= out.min() and out.max() <= 1.0
    with pytest.raises(ValueError):
        ablation_pick(pair, gen, "style_code")


def test_errors(pair):
    g = Generator(SMALL, seed=1)
    with pytest.raises(ValueError):
        tune(synth_pair(0, size=32), g)
    with pytest.raises(ValueError):
        tune(pair, None)
    g.params["mlp.0.weight"].data[:] = np.nan
    with pytest.raises(NonFiniteError, match="iteration 0"):
        tune(pair, g, TunerConfig(steps=2))
