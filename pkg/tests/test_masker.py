import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from soundsal.grid import RandomStream, sigmoid
from soundsal.masker import (
    BlurFill,
    CenteredGaussian,
    GradientInput,
    GrayFill,
    MaskDivergenceError,
    MaskSaliency,
    RandomImageFill,
    RandomSaliency,
    centered_gaussian_map,
    cheating_variant,
    composite,
    gradient_input_map,
    learn_mask,
    learn_masks_all_labels,
    make_fill,
    mask_objective,
    random_map,
)
from soundsal.net import MlpClassifier

from _util import central_diff, linear_bypass_model, max_rel_err, random_model, zero_model

img4 = arrays(np.float64, (4, 4), elements=st.floats(0, 1))


# -- composite -----------------------------------------------------------------


def test_composite_full_mask_is_input():
    x = np.random.default_rng(0).random((4, 4))
    assert np.array_equal(composite(x, np.ones((4, 4)), GrayFill()), x)


def test_composite_empty_mask_is_gray():
    x = np.random.default_rng(0).random((4, 4))
    assert np.array_equal(composite(x, np.zeros((4, 4)), GrayFill(0.5)), np.full((4, 4), 0.5))


def test_composite_half_mask_formula():
    x = np.random.default_rng(1).random((3, 5))
    assert np.allclose(composite(x, np.full((3, 5), 0.5), GrayFill(0.5)), 0.5 * x + 0.25,
                       atol=1e-15)


@given(img4, img4, img4)
@settings(max_examples=50)
def test_composite_is_pixelwise_interpolation(x, m, bg):
    fill = RandomImageFill(np.stack([bg, np.full((4, 4), 2.0)])[:1])
    if np.array_equal(bg, x):
        return
    out = composite(x, m, fill, RandomStream(0))
    assert np.all(out >= np.minimum(x, bg) - 1e-12)
    assert np.all(out <= np.maximum(x, bg) + 1e-12)


def test_random_fill_never_returns_the_input():
    x = np.zeros((2, 2))
    pool = np.stack([x, np.ones((2, 2)), x])
    fill = RandomImageFill(pool)
    for t in range(50):
        assert np.array_equal(fill.background(x, RandomStream(0, t)), np.ones((2, 2)))


def test_random_fill_errors():
    with pytest.raises(ValueError):
        RandomImageFill(np.zeros((0, 2, 2))).background(np.ones((2, 2)), RandomStream(0))
    with pytest.raises(ValueError):
        make_fill("random")
    with pytest.raises(ValueError):
        make_fill("sepia")


def test_blur_fill_and_composite_shape_check():
    x = np.full((4, 4), 0.3)
    assert np.allclose(composite(x, np.zeros((4, 4)), BlurFill(1.0)), 0.3)
    with pytest.raises(ValueError):
        composite(x, np.zeros((2, 2)), GrayFill())
    with pytest.raises(ValueError):
        GrayFill(1.5)


# -- objective gradient ----------------------------------------------------------


@pytest.mark.parametrize("scale", [1, 2])
def test_mask_objective_gradient(scale):
    rng = np.random.default_rng(10 + scale)
    worst = 0.0
    for _ in range(10):
        model = random_model(rng, 16, hidden=6, classes=3)
        X = rng.random((2, 4, 4))
        labels = rng.integers(0, 3, size=2)
        D = rng.random((2, 3, 4, 4))
        W = rng.normal(size=(2, 4 // scale, 4 // scale))
        lam_tv, lam_l1 = 0.05, 0.01
        _, grad = mask_objective(model, X, labels, W, D, lam_tv, lam_l1, scale)
        for b in range(2):
            def f(w, b=b):
                Wb = W.copy()
                Wb[b] = w
                return mask_objective(model, X, labels, Wb, D, lam_tv, lam_l1, scale)[0][b]
            worst = max(worst, max_rel_err(grad[b], central_diff(f, W[b])))
    assert worst < 1e-4


def test_mask_objective_value():
    rng = np.random.default_rng(2)
    model = random_model(rng, 16, classes=2)
    x = rng.random((1, 4, 4))
    D = rng.random((1, 2, 4, 4))
    W = rng.normal(size=(1, 4, 4))
    obj, _ = mask_objective(model, x, np.array([1]), W, D, 0.1, 0.2, 1)
    M = sigmoid(W[0])
    comps = [M * x[0] + (1 - M) * d for d in D[0]]
    nll = np.mean([-np.log(model.forward(c)[1]) for c in comps])
    tv = np.abs(np.diff(M, axis=0)).sum() + np.abs(np.diff(M, axis=1)).sum()
    assert obj[0] == pytest.approx(nll + 0.1 * tv + 0.2 * M.sum(), rel=1e-12)


# -- optimizer behavior ----------------------------------------------------------


def _pool(n=20, seed=0):
    return np.random.default_rng(seed).random((n, 4, 4))


def test_huge_l1_empties_the_mask():
    rng = np.random.default_rng(3)
    model = random_model(rng, 16, classes=3)
    m = learn_mask(model, rng.random((4, 4)), 0, _pool(), lambda_tv=0.0, lambda_l1=1e3,
                   steps=300).raw
    assert m.mean() < 0.01


def test_region_model_mask_finds_the_region():
    h = w = 8
    region = np.zeros((h, w), dtype=bool)
    region[2:5, 3:7] = True
    weights = np.zeros((2, h * w))
    weights[0] = region.ravel() * 1.0
    model = MlpClassifier.from_params(np.eye(h * w), np.zeros(h * w), weights,
                                      np.array([0.0, 6.0]))
    x = np.random.default_rng(4).uniform(0.5, 1.0, (h, w))
    m = learn_mask(model, x, 0, fill="gray", gray_level=0.0, lambda_tv=0.0,
                   lambda_l1=4e-3, steps=400).raw
    k = int(region.sum())
    top = np.zeros(h * w, dtype=bool)
    top[np.argsort(-m.ravel(), kind="stable")[:k]] = True
    top = top.reshape(h, w)
    iou = (top & region).sum() / (top | region).sum()
    assert iou >= 0.8


def test_mask_in_unit_interval_and_shape_at_scale():
    rng = np.random.default_rng(5)
    model = random_model(rng, 64, classes=3)
    m = learn_mask(model, rng.random((8, 8)), 2, _pool(seed=1).repeat(2, 1).repeat(2, 2),
                   scale=4, steps=30).raw
    assert m.shape == (8, 8) and m.min() >= 0 and m.max() <= 1


def test_scale_must_divide():
    model = random_model(np.random.default_rng(0), 16)
    with pytest.raises(ValueError):
        learn_mask(model, np.zeros((4, 4)), 0, _pool(), scale=3, steps=2)


def test_mask_learning_is_deterministic_and_schedule_free():
    rng = np.random.default_rng(6)
    model = random_model(rng, 16, classes=3)
    X = rng.random((5, 4, 4))
    pool = _pool()
    base = dict(steps=25, seed=3)
    a = MaskSaliency(model, **base).fit(pool).explain_all_labels(X)
    b = MaskSaliency(model, **base).fit(pool).explain_all_labels(X)
    c = MaskSaliency(model, chunk_size=4, n_jobs=2, **base).fit(pool).explain_all_labels(X)
    d = MaskSaliency(model, chunk_size=4, n_jobs=1, **base).fit(pool).explain_all_labels(X)
    assert np.array_equal(a, b)
    assert np.array_equal(c, d)
    assert np.allclose(a, c, atol=1e-12)
    single = learn_mask(model, X[2], 1, pool, task_id=2 * 3 + 1, **base).raw
    assert np.allclose(single, a[2, 1], atol=1e-12)


def test_single_class_all_labels_matches_learn_mask():
    rng = np.random.default_rng(7)
    model = random_model(rng, 16, classes=1)
    x = rng.random((4, 4))
    maps = learn_masks_all_labels(model, x, _pool(), steps=20)
    assert len(maps) == 1
    assert np.array_equal(maps[0].raw, learn_mask(model, x, 0, _pool(), steps=20).raw)


def test_objective_decreases_on_held_out_distractors():
    rng = np.random.default_rng(8)
    model = random_model(rng, 16, classes=3, scale=2.0)
    X = rng.random((3, 4, 4))
    labels = np.array([0, 1, 2])
    est = MaskSaliency(model, steps=200).fit(_pool())
    est.explain(X, labels)
    held = np.broadcast_to(_pool(8, seed=9)[None], (3, 8, 4, 4))
    start, _ = mask_objective(model, X, labels, np.zeros_like(est.weights_), held, 0.01, 4e-3, 1)
    end, _ = mask_objective(model, X, labels, est.weights_, held, 0.01, 4e-3, 1)
    assert np.all(end < start)
    assert est.objective_trace_.shape == (200, 3)


def test_divergence_is_reported(monkeypatch):
    model = random_model(np.random.default_rng(0), 16)
    est = MaskSaliency(model, steps=3).fit(_pool())
    monkeypatch.setattr(model, "loss_and_input_grad",
                        lambda X, y: (np.full(len(X), np.nan), np.zeros(X.shape)))
    with pytest.raises(MaskDivergenceError, match="task ids"):
        est.explain(np.zeros((1, 4, 4)), [0])


def test_invalid_hyperparameters():
    model = random_model(np.random.default_rng(0), 16)
    for bad in (dict(lambda_tv=-1), dict(steps=0), dict(learning_rate=0)):
        with pytest.raises(ValueError):
            MaskSaliency(model, **bad).fit(_pool())
    with pytest.raises(ValueError):
        MaskSaliency(model, steps=2).fit(_pool()).explain(np.zeros((1, 4, 4)), [7])


# -- baselines ------------------------------------------------------------------


def test_gradient_input_zero_image():
    h = gradient_input_map(random_model(np.random.default_rng(0), 9), np.zeros((3, 3)), 1)
    assert np.array_equal(h.raw, np.zeros((3, 3)))
    assert np.all(h.normalized == 0.5)


def test_gradient_input_linear_bypass():
    W = np.arange(8.0).reshape(2, 4) - 3
    x = np.array([[0.1, 0.2], [0.3, 0.4]])
    h = gradient_input_map(linear_bypass_model(W), x, 0)
    assert np.allclose(h.raw, W[0].reshape(2, 2) * x)
    again = GradientInput(linear_bypass_model(W)).explain(x[None], [0])[0]
    assert np.array_equal(again, h.normalized)


def test_random_map():
    a = random_map(5, 5, RandomStream(1, 0)).normalized
    b = random_map(5, 5, RandomStream(1, 0)).normalized
    c = random_map(5, 5, RandomStream(2, 0)).normalized
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert a.min() == 0 and a.max() == 1
    model = zero_model(25)
    r = RandomSaliency(model, seed=1).explain(np.zeros((2, 5, 5)), [0, 0], [4, 5])
    assert not np.array_equal(r[0], r[1])


def test_centered_gaussian():
    m = centered_gaussian_map(6, 6).raw
    assert np.allclose(m, m[::-1]) and np.allclose(m, m[:, ::-1]) and np.allclose(m, m.T)
    assert np.isclose(m.max(), m[2:4, 2:4]).all()
    assert np.all(np.diff(m[2, 3:]) < 0)
    odd = centered_gaussian_map(5, 5).raw
    assert odd[2, 2] == 1.0
    out = CenteredGaussian(zero_model(36)).explain(np.zeros((1, 6, 6)), [0])
    assert np.array_equal(out[0], centered_gaussian_map(6, 6).normalized)


def test_cheating_variant():
    maps = np.random.default_rng(0).random((3, 4, 4))
    ch = cheating_variant(maps, 1)
    assert all(np.array_equal(ch[k], maps[1]) for k in range(3))
    assert np.array_equal(cheating_variant(ch, 1), ch)
    batch = np.random.default_rng(1).random((2, 3, 4, 4))
    chb = cheating_variant(batch, [2, 0])
    assert np.array_equal(chb[0, 1], batch[0, 2]) and np.array_equal(chb[1, 2], batch[1, 0])
