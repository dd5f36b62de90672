import itertools

import numpy as np
import pytest

from emef.fusers import (
    FuserId,
    fuse_average,
    fuse_gradient,
    fuse_pyramid,
    fuse_smoothed,
    get_fuser,
    registry,
    run_all_targets,
    run_target,
    well_exposedness_weights,
)
from emef.imaging import ExposurePair, synth_pair
from emef.metrics import mef_ssim
from emef.metrics.evaluation import avg_gradient_ag

ALL = [fuse_pyramid, fuse_smoothed, fuse_gradient, fuse_average]


@pytest.fixture(scope="module")
def pairs50():
    return [synth_pair(s) for s in range(50)]


@pytest.fixture(scope="module")
def outputs50(pairs50):
    return [run_all_targets(p) for p in pairs50]


def _same_pair(img):
    return ExposurePair(img, img.copy(), "same")


def test_weights_peak_and_normalisation():
    img = np.full((4, 4, 3), 0.5)
    w = well_exposedness_weights(_same_pair(img))
    np.testing.assert_allclose(w[0], 0.5)
    pair = ExposurePair(np.ones((4, 4, 3)), np.full((4, 4, 3), 0.5))
    w_over, w_under = well_exposedness_weights(pair)
    ratio = np.exp(-0.25 / 0.08)  # unnormalised weight of a saturated pixel
    np.testing.assert_allclose(w_under, 1.0 / (1.0 + ratio), rtol=1e-9)
    assert w_under.min() > 0.95
    rnd = synth_pair(3)
    total = np.sum(well_exposedness_weights(rnd), axis=0)
    np.testing.assert_allclose(total, 1.0, atol=1e-6)


@pytest.mark.parametrize("fuser", ALL)
def test_identical_sources_reproduce_source(fuser):
    img = synth_pair(5).over.copy()
    # full range: at least 1% of the values sit at each end, so the stretch is the identity
    img[:2] = 0.0
    img[-2:] = 1.0
    out = fuser(_same_pair(img))
    assert np.max(np.abs(out - img)) <= 1e-5


@pytest.mark.parametrize("fuser", ALL)
def test_outputs_valid_and_deterministic(fuser):
    pair = synth_pair(11)
    a, b = fuser(pair), fuser(pair)
    np.testing.assert_array_equal(a, b)
    assert a.shape == pair.shape and a.min() >= 0.0 and a.max() <= 1.0


def test_constant_mid_gray_stays_constant():
    img = np.full((16, 16, 3), 0.5)
    np.testing.assert_allclose(fuse_average(_same_pair(img)), 0.5)


def test_pyramid_single_level_is_weighted_average():
    pair = synth_pair(2)
    w = well_exposedness_weights(pair)
    direct = np.clip(pair.over * w[0][..., None] + pair.under * w[1][..., None], 0, 1)
    np.testing.assert_allclose(fuse_pyramid(pair, levels=1), direct, atol=1e-12)
    with pytest.raises(ValueError):
        fuse_pyramid(synth_pair(0, size=20), levels=4)


def test_smoothed_radius_zero_is_unsmoothed():
    pair = synth_pair(4)
    np.testing.assert_allclose(fuse_smoothed(pair, radius=0), fuse_pyramid(pair, levels=1), atol=1e-12)


def test_pyramid_beats_both_inputs_on_90_percent(pairs50, outputs50):
    wins = sum(mef_ssim(p.sources(), out[0]) > max(mef_ssim(p.sources(), p.over), mef_ssim(p.sources(), p.under))
               for p, out in zip(pairs50, outputs50))
    assert wins >= 45


def test_gradient_fuser_follows_textured_source():
    rng = np.random.default_rng(0)
    h = w = 32
    under = np.full((h, w, 3), 0.45)
    texture = 0.15 * rng.standard_normal((h, w, 1))
    under[:, :16] = np.clip(0.45 + texture[:, :16], 0, 1)
    over = np.full((h, w, 3), 0.55)
    pair = ExposurePair(over, under)
    out = fuse_gradient(pair)
    region = (slice(2, h - 2), slice(2, 14))
    corr = np.corrcoef(out[region].reshape(-1), under[region].reshape(-1))[0, 1]
    assert corr > 0.9


def test_gradient_fuser_is_detail_seeking(pairs50, outputs50):
    for out in outputs50:
        assert avg_gradient_ag(out[2]) >= 0.95 * max(avg_gradient_ag(out[0]), avg_gradient_ag(out[3]))


def test_targets_pairwise_distinct(outputs50):
    for out in outputs50:
        for i, j in itertools.combinations(range(4), 2):
            assert np.mean(np.abs(out[i] - out[j])) > 1e-3


def test_registry_dispatch():
    ids = registry()
    assert [f.index for f in ids] == [0, 1, 2, 3]
    assert [get_fuser(f) for f in ids] == ALL
    pair = synth_pair(1)
    np.testing.assert_array_equal(run_target(FuserId(2, "gradient"), pair), fuse_gradient(pair))
    np.testing.assert_array_equal(run_target("average", pair), run_target(3, pair))
    with pytest.raises(KeyError):
        run_target(7, pair)
    with pytest.raises(KeyError):
        get_fuser("nope")
