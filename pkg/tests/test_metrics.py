import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from soundsal.grid import RandomStream, resize_bilinear
from soundsal.masker import BlurFill, GrayFill, cheating_variant
from soundsal.metrics import (
    SALIENCY_GRID,
    MetricThresholds,
    completeness_score,
    deletion_curve,
    g_auc_sampled,
    insertion_curve,
    saliency_metric,
    soundness_score,
    top_s_binarize,
    tune_saliency_threshold,
    worst_case_metrics,
)

from _util import linear_bypass_model, random_model, zero_model


class FixedStream:
    """Stand-in stream that always yields the same integer."""

    def __init__(self, value):
        self.value = value

    def integers(self, low, high, size):
        return np.full(size, self.value)


# -- binarization ------------------------------------------------------------------


def test_top_s_extremes():
    m = np.random.default_rng(0).random((3, 3))
    assert top_s_binarize(m, 0).sum() == 0
    assert top_s_binarize(m, 9).sum() == 9


def test_top_s_decreasing_map():
    m = np.arange(12.0)[::-1].reshape(3, 4)
    assert np.array_equal(top_s_binarize(m, 5).ravel(), [1] * 5 + [0] * 7)


def test_top_s_ties_go_to_lower_index():
    assert np.array_equal(top_s_binarize(np.ones((2, 2)), 3).ravel(), [1, 1, 1, 0])


def test_top_s_out_of_range():
    with pytest.raises(ValueError):
        top_s_binarize(np.ones((2, 2)), 5)


# -- curves ----------------------------------------------------------------------


def test_insertion_last_point_is_full_image():
    rng = np.random.default_rng(1)
    model = random_model(rng, 16)
    x, m = rng.random((4, 4)), rng.random((4, 4))
    c = insertion_curve(model, x, 2, m)
    assert c.probs[-1] == pytest.approx(model.forward(x)[2], rel=1e-13)
    assert c.auc == pytest.approx(c.probs.mean(), rel=1e-15)
    assert c.fractions[-1] == 1.0 and len(c.probs) == 16


def test_constant_model_curves():
    model = zero_model(9, classes=3)
    x, m = np.random.default_rng(2).random((2, 3, 3))
    for curve in (insertion_curve(model, x, 0, m), deletion_curve(model, x, 0, m, BlurFill())):
        assert np.allclose(curve.probs, 1 / 3) and curve.auc == pytest.approx(1 / 3)


def test_insertion_two_by_two_by_hand():
    W = np.array([[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0]])
    model = linear_bypass_model(W)
    x = np.array([[0.9, 0.1], [0.4, 0.7]])
    m = np.array([[0.2, 0.9], [0.5, 0.1]])  # order: idx1, idx2, idx0, idx3
    keep_orders = [[1], [1, 2], [1, 2, 0], [1, 2, 0, 3]]
    flat = x.ravel()
    expected = []
    for keep in keep_orders:
        img = np.full(4, 0.5)
        img[keep] = flat[keep]
        logit = float(W[0] @ img)
        expected.append(1 / (1 + math.exp(-logit)))
    c = insertion_curve(model, x, 0, m, GrayFill(0.5))
    assert np.allclose(c.probs, expected, atol=1e-15)
    assert c.auc == pytest.approx(sum(expected) / 4, abs=1e-15)


def test_deletion_start_and_complement_identity():
    rng = np.random.default_rng(3)
    for _ in range(10):
        model = random_model(rng, 9, classes=3)
        x, m = rng.random((3, 3)), rng.normal(size=(3, 3))
        a = int(rng.integers(3))
        d = deletion_curve(model, x, a, m)
        # batched and single-row products may differ in the last bit
        assert d.start == pytest.approx(model.forward(x)[a], rel=1e-13)
        ins = insertion_curve(model, x, a, -m)
        # removing the top s of m keeps the top n-s of -m
        assert np.allclose(d.probs[:-1], ins.probs[::-1][1:], atol=1e-15)
        assert np.allclose(d.fractions, 1 - np.arange(1, 10) / 9)


def test_invalid_label():
    with pytest.raises(ValueError):
        insertion_curve(zero_model(4), np.zeros((2, 2)), 9, np.zeros((2, 2)))


# -- sampled estimator -------------------------------------------------------------


def test_sampled_with_forced_step_equals_curve_point():
    rng = np.random.default_rng(4)
    model = random_model(rng, 16)
    x, m = rng.random((4, 4)), rng.random((4, 4))
    c = insertion_curve(model, x, 1, m)
    assert g_auc_sampled(model, x, 1, m, 5, FixedStream(7)) == pytest.approx(c.probs[6], rel=1e-14)


def test_sampled_converges_and_is_reproducible():
    rng = np.random.default_rng(5)
    model = random_model(rng, 16, scale=2.0)
    x, m = rng.random((4, 4)), rng.random((4, 4))
    exact = insertion_curve(model, x, 0, m).auc
    est = g_auc_sampled(model, x, 0, m, 10**4, RandomStream(3, 0))
    assert abs(est - exact) < 0.01
    assert est == g_auc_sampled(model, x, 0, m, 10**4, RandomStream(3, 0))


def test_sampled_is_unbiased():
    rng = np.random.default_rng(6)
    model = random_model(rng, 16, scale=2.0)
    x, m = rng.random((4, 4)), rng.random((4, 4))
    exact = insertion_curve(model, x, 0, m).auc
    runs = np.array([g_auc_sampled(model, x, 0, m, 20, RandomStream(9, t)) for t in range(400)])
    assert abs(runs.mean() - exact) < 3 * runs.std(ddof=1) / math.sqrt(len(runs))


def test_sampled_rejects_zero_samples():
    with pytest.raises(ValueError):
        g_auc_sampled(zero_model(4), np.zeros((2, 2)), 0, np.zeros((2, 2)), 0, RandomStream(0))


# -- scores ------------------------------------------------------------------------


@pytest.mark.parametrize("g, f, eps, expected", [
    (0.65, 0.67, 0.0, 0.9701),
    (0.43, 0.67, 0.0, 0.6418),
    (0.0, 0.005, 0.01, 1.0),
])
def test_completeness_examples(g, f, eps, expected):
    assert completeness_score(g, f, eps) == pytest.approx(expected, abs=1e-4)


@pytest.mark.parametrize("f, g, eps, expected", [
    (0.13, 0.29, 0.0, 0.4483),
    (0.67, 0.65, 0.0, 1.0),
    (0.0, 0.5, 0.001, 0.002),
    (0.13, 0.15, 0.0, 0.8667),
])
def test_soundness_examples(f, g, eps, expected):
    assert soundness_score(f, g, eps) == pytest.approx(expected, abs=1e-4)


def test_score_degenerate_cases():
    with pytest.raises(ValueError):
        completeness_score(0.3, 0.0)
    assert soundness_score(0.2, 0.0) == 1.0


unit = st.floats(0.001, 1.0)


@given(unit, unit, unit)
def test_score_monotonicity(g1, g2, f):
    lo, hi = sorted((g1, g2))
    assert completeness_score(lo, f) <= completeness_score(hi, f)
    assert soundness_score(f, lo) >= soundness_score(f, hi)


@given(st.floats(0.01, 1.0))
def test_agreeing_scores_are_perfect(v):
    assert completeness_score(v, v, 0.01) == 1.0 and soundness_score(v, v, 0.001) == 1.0


def test_thresholds_validated():
    with pytest.raises(ValueError):
        MetricThresholds(eps1=1.5)


# -- worst case --------------------------------------------------------------------


def _setup(seed=7, n=4, C=3):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 9, classes=C, scale=2.0)
    return model, rng.random((n, 3, 3)), rng.random((n, C, 3, 3))


def test_worst_case_single_label():
    model, X, _ = _setup(C=1)
    maps = np.random.default_rng(0).random((4, 1, 3, 3))
    rep = worst_case_metrics(model, maps, X)
    assert np.array_equal(rep.worst_alpha, rep.alpha[:, 0])
    assert np.array_equal(rep.worst_beta, rep.beta[:, 0])


def test_worst_case_one_image_by_hand():
    model, X, maps = _setup(n=1)
    f = model.forward(X[0])
    g = np.array([insertion_curve(model, X[0], a, maps[0, a]).auc for a in range(3)])
    alpha = [min(max(g[a], 0.01) / f[a], 1) for a in range(3)]
    beta = [min(max(f[a], 0.001) / g[a], 1) for a in range(3)]
    rep = worst_case_metrics(model, maps, X)
    assert rep.mean_alpha == pytest.approx(min(alpha), rel=1e-12)
    assert rep.mean_beta == pytest.approx(min(beta), rel=1e-12)


def test_worst_case_subset_never_lower():
    model, X, maps = _setup()
    full = worst_case_metrics(model, maps, X)
    sub = worst_case_metrics(model, maps, X, labels=[0, 2], g=full.g)
    assert np.all(sub.worst_alpha >= full.worst_alpha)
    assert np.all(sub.worst_beta >= full.worst_beta)


def test_worst_case_needs_every_map():
    model, X, maps = _setup()
    with pytest.raises(ValueError):
        worst_case_metrics(model, maps[:, :2], X)


def test_cheating_never_lowers_soundness_on_random_instances():
    model, X, maps = _setup(n=6)
    pred = model.predict(X)
    honest = worst_case_metrics(model, maps, X)
    cheat = worst_case_metrics(model, cheating_variant(maps, pred), X)
    rows = np.arange(len(X))
    assert np.array_equal(honest.alpha[rows, pred], cheat.alpha[rows, pred])
    # the cheat hands every label the same map, so g per label is one curve per image
    assert cheat.g.shape == honest.g.shape


# -- saliency metric ---------------------------------------------------------------


def test_saliency_metric_whole_image():
    rng = np.random.default_rng(8)
    model = random_model(rng, 16)
    x = rng.random((4, 4))
    p = model.forward(x)[model.predict(x[None])[0]]
    assert saliency_metric(model, x, np.ones((4, 4)), 0.3) == pytest.approx(-math.log(p))


def test_saliency_metric_area_floor():
    rng = np.random.default_rng(9)
    model = random_model(rng, 256)
    x = rng.random((16, 16))
    m = np.zeros((16, 16))
    m[5, 5] = 1.0
    a = model.predict(x[None])[0]
    crop = resize_bilinear(x[5:6, 5:6], 16, 16)
    p = model.forward(crop)[a]
    assert saliency_metric(model, x, m, 0.5) == pytest.approx(math.log(0.05) - math.log(p))


def test_saliency_metric_two_by_two_box():
    rng = np.random.default_rng(10)
    model = random_model(rng, 16)
    x = rng.random((4, 4))
    m = np.zeros((4, 4))
    m[1:3, 2:4] = [[1.0, 0.8], [0.9, 0.7]]
    a = model.predict(x[None])[0]
    # the crop is two identical-size rows/cols, so resizing is a pure replication pattern
    p = model.forward(resize_bilinear(x[1:3, 2:4], 4, 4))[a]
    assert saliency_metric(model, x, m, 0.5) == pytest.approx(math.log(0.25) - math.log(p))


def test_saliency_metric_threshold_range():
    with pytest.raises(ValueError):
        saliency_metric(zero_model(4), np.zeros((2, 2)), np.zeros((2, 2)), 1.0)


def test_tune_threshold():
    rng = np.random.default_rng(11)
    model = random_model(rng, 16)
    X, maps = rng.random((2, 6, 4, 4))
    assert tune_saliency_threshold(model, X, maps, grid=[0.35]) == 0.35
    flat = [np.ones((4, 4))] * 6
    assert tune_saliency_threshold(model, X, flat) == 0.0
    best = tune_saliency_threshold(model, X, maps)
    means = {t: np.mean([saliency_metric(model, x, m, t) for x, m in zip(X, maps)])
             for t in SALIENCY_GRID}
    assert means[best] == min(means.values())
    with pytest.raises(ValueError):
        tune_saliency_threshold(model, X[:0], maps[:0])
