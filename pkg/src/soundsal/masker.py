"""Saliency methods: learned masks over random-image composites, plus baselines.

All methods follow the same estimator surface: construct with the model,
optionally ``fit`` (the mask learner needs a distractor pool), then call
``explain(X, labels)`` for raw heatmaps or ``explain_all_labels(X)``.
"""

from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator

from .grid import (
    RandomStream,
    bilinear_upsample,
    check_divisible,
    gaussian_blur,
    normalize_map,
    sigmoid,
    total_variation,
    tv_subgradient,
    upsample_adjoint,
)


class MaskDivergenceError(FloatingPointError):
    """The mask objective became non-finite during optimization."""


# -- input modification -------------------------------------------------------


@dataclass(frozen=True)
class GrayFill:
    level: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.level <= 1.0:
            raise ValueError(f"gray level must be in [0, 1], got {self.level}")

    def background(self, x, stream=None):
        return np.full(np.shape(x), float(self.level))


@dataclass(frozen=True)
class BlurFill:
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"blur sigma must be positive, got {self.sigma}")

    def background(self, x, stream=None):
        return gaussian_blur(x, self.sigma)


@dataclass(frozen=True, eq=False)
class RandomImageFill:
    """Draws distractors uniformly from ``pool``, never the input itself."""

    pool: np.ndarray

    def eligible(self, x):
        pool = np.asarray(self.pool)
        if len(pool) == 0:
            raise ValueError("distractor pool is empty")
        same = np.all(pool.reshape(len(pool), -1) == np.asarray(x).reshape(1, -1), axis=1)
        idx = np.flatnonzero(~same)
        if len(idx) == 0:
            raise ValueError("distractor pool holds no image other than the input")
        return idx

    def background(self, x, stream):
        idx = self.eligible(x)
        return np.asarray(self.pool[idx[stream.integers(0, len(idx))]], dtype=np.float64)


def make_fill(kind, level=0.5, sigma=1.0, pool=None):
    if kind == "gray":
        return GrayFill(level)
    if kind == "blur":
        return BlurFill(sigma)
    if kind == "random":
        if pool is None:
            raise ValueError("random-image fill needs a distractor pool")
        return RandomImageFill(pool)
    raise ValueError(f"unknown fill {kind!r}; expected gray, blur or random")


def composite(x, m, fill, stream=None):
    """``m * x + (1 - m) * background`` with the background chosen by ``fill``."""
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != x.shape:
        raise ValueError(f"mask shape {m.shape} does not match image shape {x.shape}")
    xbar = fill.background(x, stream)
    return m * x + (1.0 - m) * xbar


# -- heatmaps -----------------------------------------------------------------


@dataclass
class Heatmap:
    raw: np.ndarray

    @property
    def normalized(self):
        return normalize_map(self.raw)


def cheating_variant(maps, predicted):
    """Replace every label's map with the predicted label's map.

    ``maps`` is ``(C, h, w)`` for one image or ``(n, C, h, w)`` with one
    predicted label per image.
    """
    maps = np.asarray(maps)
    if maps.ndim == 3:
        return np.repeat(maps[int(predicted)][None], maps.shape[0], axis=0)
    predicted = np.asarray(predicted, dtype=int)
    chosen = maps[np.arange(len(maps)), predicted]
    return np.repeat(chosen[:, None], maps.shape[1], axis=1)


# -- mask objective -------------------------------------------------------------


def mask_objective(model, X, labels, W, distractors, lambda_tv, lambda_l1, scale):
    """Penalized mask loss and its gradient with respect to the pre-sigmoid weights.

    Batched over tasks: ``X`` is ``(B, h, w)``, ``W`` is ``(B, h/s, w/s)`` and
    ``distractors`` is ``(B, K, h, w)``. The loss term is the mean over the K
    distractors of ``-log f(composite, a)``. Returns ``(objective (B,), grad (B, h/s, w/s))``.
    """
    X = np.asarray(X, dtype=np.float64)
    B, h, w = X.shape
    K = distractors.shape[1]
    M = sigmoid(W)
    Mu = bilinear_upsample(M, scale)
    mu = Mu[:, None]
    xt = mu * X[:, None] + (1.0 - mu) * distractors
    rows = xt.reshape(B * K, h * w)
    loss, g = model.loss_and_input_grad(rows, np.repeat(labels, K))
    loss = loss.reshape(B, K).mean(axis=1)
    g = g.reshape(B, K, h, w)
    dMu = (g * (X[:, None] - distractors)).sum(axis=1) / K
    obj = loss + lambda_l1 * Mu.sum(axis=(1, 2))
    if lambda_tv:
        obj = obj + lambda_tv * total_variation(Mu)
        dMu = dMu + lambda_tv * tv_subgradient(Mu)
    dMu = dMu + lambda_l1
    dM = upsample_adjoint(dMu, scale)
    return obj, dM * M * (1.0 - M)


class _Adam:
    def __init__(self, shape, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return param - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- estimators -----------------------------------------------------------------


class SaliencyMethod(BaseEstimator):
    """Shared surface: ``explain`` raw heatmaps for (image, label) pairs."""

    def fit(self, X=None, y=None):
        return self

    def _explain_tasks(self, X, labels, task_ids):
        raise NotImplementedError

    def explain(self, X, labels, task_ids=None):
        """Raw heatmaps ``(n, h, w)`` for ``labels[i]`` on ``X[i]``.

        ``task_ids`` key each pair's random stream; they default to the label,
        so a single call agrees with the same pair inside a larger batch.
        """
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"expected images of shape (n, h, w), got {X.shape}")
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if len(labels) != len(X):
            raise ValueError("need one label per image")
        C = self.model.n_classes_
        if len(labels) and (labels.min() < 0 or labels.max() >= C):
            raise ValueError(f"labels must lie in [0, {C})")
        task_ids = labels if task_ids is None else np.asarray(task_ids, dtype=np.int64)
        return self._explain_tasks(X, labels, task_ids)

    def explain_all_labels(self, X, offset=0):
        """Heatmaps ``(n, C, h, w)``; pair ``(i, a)`` uses task id ``(offset + i) * C + a``."""
        X = np.asarray(X, dtype=np.float64)
        n, C = len(X), self.model.n_classes_
        labels = np.tile(np.arange(C), n)
        tasks = (offset + np.repeat(np.arange(n), C)) * C + labels
        maps = self.explain(np.repeat(X, C, axis=0), labels, tasks)
        return maps.reshape(n, C, *X.shape[1:])


class MaskSaliency(SaliencyMethod):
    """Learn a mask ``M = sigmoid(W)`` per (image, label) pair with Adam.

    The objective is the expected ``-log f(M x + (1 - M) xbar, a)`` over
    distractors ``xbar`` plus ``lambda_tv * TV(M)`` and ``lambda_l1 * |M|_1``,
    where M is learned at ``1/scale`` resolution and bilinearly upsampled.

    Parameters
    ----------
    model
        Fitted :class:`~soundsal.net.MlpClassifier`.
    lambda_tv, lambda_l1
        Penalty weights, applied to the full-resolution mask.
    scale
        Upsampling factor; image sides must be divisible by it.
    steps, learning_rate, beta1, beta2, eps
        Adam schedule. W starts at zero (M = 0.5 everywhere).
    distractors
        Distractors sampled fresh at every step for ``fill="random"``.
    fill, gray_level, blur_sigma
        Background used in the composite: ``random`` pool images, ``gray`` or ``blur``.
    seed
        Master seed; each pair draws from ``RandomStream(seed, task_id)``.
    chunk_size
        Pairs optimized together. Fixed chunks keep results independent of ``n_jobs``.
    n_jobs
        Parallel chunk workers (threads).
    """

    def __init__(self, model=None, lambda_tv=0.01, lambda_l1=4e-3, scale=1, steps=2000,
                 learning_rate=0.05, distractors=10, fill="random", gray_level=0.5,
                 blur_sigma=1.0, beta1=0.9, beta2=0.999, eps=1e-8, seed=0,
                 chunk_size=128, n_jobs=1):
        self.model = model
        self.lambda_tv = lambda_tv
        self.lambda_l1 = lambda_l1
        self.scale = scale
        self.steps = steps
        self.learning_rate = learning_rate
        self.distractors = distractors
        self.fill = fill
        self.gray_level = gray_level
        self.blur_sigma = blur_sigma
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.seed = seed
        self.chunk_size = chunk_size
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        """Store the distractor pool (required for ``fill="random"``)."""
        if self.lambda_tv < 0 or self.lambda_l1 < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.steps < 1 or self.distractors < 1 or not self.learning_rate > 0:
            raise ValueError("steps and distractors must be >= 1, learning_rate > 0")
        self.pool_ = None if X is None else np.asarray(X, dtype=np.float64)
        self.fill_ = make_fill(self.fill, self.gray_level, self.blur_sigma, self.pool_)
        return self

    def _distractor_plan(self, x, task_id):
        """Per-step distractor pool indices ``(steps, K)`` for one pair."""
        rs = RandomStream(self.seed, task_id)
        eligible = self.fill_.eligible(x)
        return eligible[rs.integers(0, len(eligible), size=(self.steps, self.distractors))]

    def _optimize_chunk(self, X, labels, task_ids):
        B, h, w = X.shape
        s = int(self.scale)
        W = np.zeros((B, h // s, w // s))
        adam = _Adam(W.shape, self.learning_rate, self.beta1, self.beta2, self.eps)
        random_fill = isinstance(self.fill_, RandomImageFill)
        if random_fill:
            plan = np.stack([self._distractor_plan(x, t) for x, t in zip(X, task_ids)])
        else:
            fixed = np.stack([self.fill_.background(x) for x in X])[:, None]
        trace = np.empty((self.steps, B))
        for step in range(self.steps):
            xb = self.pool_[plan[:, step]] if random_fill else fixed
            obj, grad = mask_objective(self.model, X, labels, W, xb,
                                       self.lambda_tv, self.lambda_l1, s)
            if not np.all(np.isfinite(obj)) or not np.all(np.isfinite(grad)):
                bad = task_ids[~np.isfinite(obj)] if not np.all(np.isfinite(obj)) else task_ids
                raise MaskDivergenceError(
                    f"non-finite mask objective at step {step} for task ids {bad.tolist()}"
                )
            trace[step] = obj
            W = adam.step(W, grad)
        return bilinear_upsample(sigmoid(W), s), W, trace

    def _explain_tasks(self, X, labels, task_ids):
        if not hasattr(self, "fill_"):
            self.fit()
        n, h, w = X.shape
        check_divisible(h, w, int(self.scale))
        if n == 0:
            return np.zeros((0, h, w))
        cs = int(self.chunk_size)
        chunks = [slice(i, min(i + cs, n)) for i in range(0, n, cs)]
        results = Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(self._optimize_chunk)(X[c], labels[c], task_ids[c]) for c in chunks
        )
        self.weights_ = np.concatenate([r[1] for r in results])
        self.objective_trace_ = np.concatenate([r[2] for r in results], axis=1)
        return np.concatenate([r[0] for r in results])


class GradientInput(SaliencyMethod):
    """Logit gradient times input, min-max normalized."""

    def __init__(self, model=None):
        self.model = model

    def _explain_tasks(self, X, labels, task_ids):
        return np.stack([gradient_input_map(self.model, x, a).normalized
                         for x, a in zip(X, labels)]) if len(X) else np.zeros(X.shape)


class RandomSaliency(SaliencyMethod):
    """IID standard Gaussian scores, normalized; a control baseline."""

    def __init__(self, model=None, seed=0):
        self.model = model
        self.seed = seed

    def _explain_tasks(self, X, labels, task_ids):
        h, w = X.shape[1:]
        out = np.zeros(X.shape)
        for i, t in enumerate(task_ids):
            out[i] = random_map(h, w, RandomStream(self.seed, t)).normalized
        return out


class CenteredGaussian(SaliencyMethod):
    """The same centered Gaussian bump for every image and label."""

    def __init__(self, model=None, sigma_fraction=0.25):
        self.model = model
        self.sigma_fraction = sigma_fraction

    def _explain_tasks(self, X, labels, task_ids):
        h, w = X.shape[1:]
        bump = centered_gaussian_map(h, w, self.sigma_fraction).normalized
        return np.repeat(bump[None], len(X), axis=0)


# -- functional forms -----------------------------------------------------------


def learn_mask(model, x, a, pool=None, task_id=None, **params):
    """Learned full-resolution mask for one (image, label) pair."""
    est = MaskSaliency(model, **params).fit(pool)
    task = [a if task_id is None else task_id]
    return Heatmap(est.explain(np.asarray(x)[None], [a], task)[0])


def learn_masks_all_labels(model, x, pool=None, **params):
    """One learned mask per label; label ``a`` uses task id ``a``."""
    est = MaskSaliency(model, **params).fit(pool)
    return [Heatmap(m) for m in est.explain_all_labels(np.asarray(x)[None])[0]]


def gradient_input_map(model, x, a):
    x = np.asarray(x, dtype=np.float64)
    return Heatmap(model.input_gradient(x, a) * x)


def random_map(h, w, stream):
    return Heatmap(stream.normal((h, w)))


def centered_gaussian_map(h, w, sigma_fraction=0.25):
    sigma = sigma_fraction * min(h, w)
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    i = np.arange(h)[:, None]
    j = np.arange(w)[None, :]
    return Heatmap(np.exp(-((i - ci) ** 2 + (j - cj) ** 2) / (2.0 * sigma * sigma)))
