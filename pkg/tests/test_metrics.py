import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from oracles import rma_two_sum, rra_full_sort
from xaicanon.errors import DimensionError, EmptyMaskError, MetricError, ZeroMassError
from xaicanon.metrics import (
    FaithCorrConfig, RegionPerturbConfig, SensitivityConfig, aopc_region_perturbation, avg_sensitivity,
    faithfulness_correlation, faithfulness_correlation_detail, max_sensitivity, patch_ranking, pearson,
    perturbation_baseline, random_logit, rma, rra, sparseness_gini, ssim,
)


def rand_case(seed, shape=(6, 7)):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=shape)
    h[rng.random(shape) < 0.2] = 0.0  # ties
    mask = rng.random(shape) < 0.3
    mask.flat[rng.integers(mask.size)] = True
    return h, mask


def test_rra_hand_case():
    h = np.array([[0.9, 0.1], [0.8, 0.2]])
    assert rra(h, np.array([[1, 0], [0, 1]])) == 0.5
    assert rra(h, np.array([[1, 0], [1, 0]])) == 1.0


def test_rra_matches_full_sort_oracle():
    for seed in range(100):
        h, m = rand_case(seed)
        assert rra(h, m) == rra_full_sort(h, m)


def test_rma_matches_two_sum_oracle():
    for seed in range(100):
        h, m = rand_case(seed)
        if (h > 0).any():
            assert rma(h, m) == pytest.approx(rma_two_sum(h, m), rel=1e-12)


def test_rma_hand_and_raw():
    h = np.array([[3.0, -1.0], [1.0, 0.0]])
    m = np.array([[1, 1], [0, 0]])
    assert rma(h, m) == 0.75
    assert rma(h, m, raw=True) == pytest.approx(2 / 3)


def test_localization_errors():
    h = np.ones((3, 3))
    with pytest.raises(EmptyMaskError):
        rra(h, np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        rma(h, np.ones((4, 4)))
    with pytest.raises(ZeroMassError):
        rma(-h, np.ones((3, 3)))


def test_gini():
    assert sparseness_gini(np.array([[0.0, 0.0, 0.0, 1.0]])) == pytest.approx(0.75, abs=1e-9)
    assert sparseness_gini(np.ones((4, 4))) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ZeroMassError):
        sparseness_gini(np.zeros(5))


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=30), st.floats(0.1, 100))
@settings(max_examples=60, deadline=None)
def test_gini_bounds_and_scale_invariance(vals, c):
    v = np.array(vals)
    if not np.abs(v).sum() > 1e-6:
        return
    g = sparseness_gini(v)
    assert -1e-12 <= g <= 1 - 1 / v.size + 1e-9
    assert sparseness_gini(v * c) == pytest.approx(g, abs=1e-9)


def test_aopc_constant_model_is_zero():
    x = np.random.default_rng(0).uniform(0, 1, (3, 16, 16)).astype(np.float32)
    h = np.random.default_rng(1).normal(size=(16, 16))
    assert aopc_region_perturbation(lambda v: 2.5, x, h, RegionPerturbConfig(patch_size=4, steps=10)) == 0.0


def test_aopc_sum_model_hand_case():
    # score = sum; black baseline removes one 2x2 patch of ones per step
    x = np.ones((1, 4, 4), np.float32)
    h = np.arange(16.0).reshape(4, 4)
    cfg = RegionPerturbConfig(patch_size=2, steps=3, baseline="black")
    drops = [4, 8, 12]
    assert aopc_region_perturbation(lambda v: float(v.sum()), x, h, cfg) == pytest.approx(sum(drops) / 4)


def test_aopc_extra_steps_reuse_last_state():
    x = np.ones((1, 4, 4), np.float32)
    cfg = RegionPerturbConfig(patch_size=2, steps=6, baseline="black")
    # four patches, then two more steps at the fully perturbed input
    expected = (4 + 8 + 12 + 16 + 16 + 16) / 7
    assert aopc_region_perturbation(lambda v: float(v.sum()), x, np.ones((4, 4)), cfg) == pytest.approx(expected)


def test_patch_ranking_ties_row_major():
    assert patch_ranking(np.zeros((4, 4)), 2) == [(0, 0), (0, 2), (2, 0), (2, 2)]
    h = np.zeros((4, 4))
    h[3, 3] = 1.0
    assert patch_ranking(h, 2)[0] == (2, 2)


def test_baselines():
    x = np.random.default_rng(2).uniform(0, 1, (2, 8, 8))
    assert not perturbation_baseline(x, RegionPerturbConfig(baseline="black")).any()
    m = perturbation_baseline(x, RegionPerturbConfig(baseline="mean"))
    np.testing.assert_allclose(m[:, 0, 0], x.mean(axis=(1, 2)))
    c = np.full((1, 8, 8), 0.3)
    np.testing.assert_allclose(perturbation_baseline(c, RegionPerturbConfig()), c)


def test_config_validation():
    with pytest.raises(ValueError):
        RegionPerturbConfig(baseline="noise")
    with pytest.raises(ValueError):
        SensitivityConfig(samples=0)
    with pytest.raises(ValueError):
        FaithCorrConfig(subset_fraction=1.5)


def test_ssim_matches_skimage():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.normal(size=(12, 10))
        b = a + rng.normal(scale=0.5, size=a.shape)
        dr = float(max(a.max(), b.max()) - min(a.min(), b.min()))
        ref = structural_similarity(a, b, win_size=7, data_range=dr, gaussian_weights=False,
                                    use_sample_covariance=True, full=True)[1][3:-3, 3:-3].mean()
        assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_properties():
    a = np.random.default_rng(4).normal(size=(8, 8))
    assert ssim(a, a) == 1.0
    assert ssim(np.zeros((8, 8)), np.zeros((8, 8))) == 1.0
    noisy = a + np.random.default_rng(5).normal(scale=0.3, size=a.shape)
    assert ssim(a, -a) < ssim(a, noisy) < 1
    assert ssim(a, a[::-1]) == pytest.approx(ssim(a[::-1], a))
    # a 4x4 map still gets a score via the shrunken window
    assert -1 <= ssim(a[:4, :4], a[4:, 4:]) <= 1


def test_random_logit_draws_other_class():
    seen = set()
    rng = np.random.default_rng(5)
    h = np.ones((4, 4))

    def explain(x, cls):
        seen.add(cls)
        return np.full((4, 4), float(cls))

    for _ in range(50):
        random_logit(explain, None, h, 1, 4, rng)
    assert seen == {0, 2, 3}
    with pytest.raises(MetricError):
        random_logit(explain, None, h, 0, 1, rng)


def test_sensitivity():
    x = np.random.default_rng(6).uniform(0, 1, (1, 5, 5)).astype(np.float32)
    const = lambda v: np.ones((5, 5))  # noqa: E731
    cfg = SensitivityConfig(samples=5)
    assert avg_sensitivity(const, x, cfg, np.random.default_rng(0)) == 0.0
    ident = lambda v: v[0]  # noqa: E731
    a = avg_sensitivity(ident, x, cfg, np.random.default_rng(0))
    m = max_sensitivity(ident, x, cfg, np.random.default_rng(0))
    assert 0 < a <= m
    # radius bounds the perturbation, so the relative change is bounded too
    radius = 0.1 * float(x.max() - x.min())
    assert m <= radius * 5 / np.linalg.norm(x[0]) + 1e-6
    with pytest.raises(ZeroMassError):
        avg_sensitivity(lambda v: np.zeros((5, 5)), x, cfg, np.random.default_rng(0))


def test_faithfulness_linear_identity():
    rng = np.random.default_rng(7)
    w = rng.normal(size=(1, 8, 8))
    x = rng.uniform(0.5, 1.5, (1, 8, 8)).astype(np.float32)
    score = lambda v: float(np.sum(w * v))  # noqa: E731
    h = (w * x)[0]
    r = faithfulness_correlation(score, x, h, FaithCorrConfig(), np.random.default_rng(0))
    assert r == pytest.approx(1.0, abs=1e-9)


def test_faithfulness_zero_variance_flag():
    x = np.ones((1, 8, 8), np.float32)
    r, flag = faithfulness_correlation_detail(lambda v: 1.0, x, np.ones((8, 8)), FaithCorrConfig(),
                                              np.random.default_rng(0))
    assert (r, flag) == (0.0, True)
    with pytest.raises(MetricError):
        faithfulness_correlation(lambda v: 1.0, np.ones((1, 3, 3), np.float32), np.ones((3, 3)),
                                 FaithCorrConfig(subset_fraction=0.1), np.random.default_rng(0))


def test_pearson_bounds():
    r, flag = pearson([1, 2, 3], [2, 4, 6])
    assert r == pytest.approx(1.0, abs=1e-12) and not flag
    assert pearson([1, 2, 3], [3, 2, 1])[0] == pytest.approx(-1.0, abs=1e-12)
    assert pearson([1, 1, 1], [1, 2, 3]) == (0.0, True)


def test_metrics_are_deterministic_given_rng():
    x = np.random.default_rng(8).uniform(0, 1, (1, 8, 8)).astype(np.float32)
    score = lambda v: float(np.sum(v ** 2))  # noqa: E731
    h = np.random.default_rng(9).normal(size=(8, 8))
    a = faithfulness_correlation(score, x, h, FaithCorrConfig(), np.random.default_rng(42))
    b = faithfulness_correlation(score, x, h, FaithCorrConfig(), np.random.default_rng(42))
    assert a == b
