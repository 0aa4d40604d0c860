"""Insertion/deletion games, completeness and soundness scores, saliency metric."""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import normalize_map, resize_bilinear
from .masker import GrayFill


@dataclass(frozen=True)
class MetricThresholds:
    """Probability floors: ``eps1`` for completeness, ``eps2`` for soundness."""

    eps1: float = 0.01
    eps2: float = 0.001

    def __post_init__(self):
        for v in (self.eps1, self.eps2):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"thresholds must lie in [0, 1], got {v}")


@dataclass
class CurveReport:
    fractions: np.ndarray
    probs: np.ndarray
    auc: float
    fill: str
    start: float = None

    def rows(self):
        return list(zip(self.fractions.tolist(), self.probs.tolist()))


def _ranks(m):
    """Rank of each pixel by descending score; ties go to the lower flat index."""
    flat = np.asarray(m, dtype=np.float64).ravel()
    order = np.argsort(-flat, kind="stable")
    ranks = np.empty(flat.size, dtype=np.int64)
    ranks[order] = np.arange(flat.size)
    return ranks


def top_s_binarize(m, s):
    m = np.asarray(m)
    n = m.size
    if not 0 <= s <= n:
        raise ValueError(f"s must be in [0, {n}], got {s}")
    return (_ranks(m) < s).reshape(m.shape).astype(np.int8)


def _fill_name(fill):
    return type(fill).__name__.replace("Fill", "").lower()


def _game_probs(model, x, a, m, fill, steps, insert=True):
    """f(x_s, a) for each retention count in ``steps``."""
    x = np.asarray(x, dtype=np.float64)
    bg = fill.background(x).ravel()
    ranks = _ranks(m)
    steps = np.asarray(steps)
    keep = ranks[None, :] < steps[:, None]
    if not insert:
        keep = ~keep
    imgs = np.where(keep, x.ravel()[None, :], bg[None, :])
    return model.predict_proba(imgs)[:, a]


def _check_label(model, a):
    if not 0 <= a < model.n_classes_:
        raise ValueError(f"label {a} out of range [0, {model.n_classes_})")


def insertion_curve(model, x, a, m, fill=None):
    """Reveal the top-s pixels for s = 1..n; AUC is the mean probability."""
    fill = fill or GrayFill()
    _check_label(model, a)
    n = np.size(x)
    s = np.arange(1, n + 1)
    probs = _game_probs(model, x, a, m, fill, s)
    return CurveReport(s / n, probs, float(probs.mean()), _fill_name(fill))


def deletion_curve(model, x, a, m, fill=None):
    """Remove the top-s pixels for s = 1..n; lower AUC is better.

    ``start`` holds f(x, a) before anything is removed.
    """
    fill = fill or GrayFill()
    _check_label(model, a)
    n = np.size(x)
    s = np.arange(0, n + 1)
    probs = _game_probs(model, x, a, m, fill, s, insert=False)
    return CurveReport(1.0 - s[1:] / n, probs[1:], float(probs[1:].mean()),
                       _fill_name(fill), start=float(probs[0]))


def g_auc_sampled(model, x, a, m, n_samples, stream, fill=None):
    """Monte-Carlo estimate of the insertion AUC with s drawn uniformly from 1..n."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    fill = fill or GrayFill()
    _check_label(model, a)
    n = np.size(x)
    s = np.asarray(stream.integers(1, n + 1, size=n_samples))
    uniq, counts = np.unique(s, return_counts=True)
    probs = _game_probs(model, x, a, m, fill, uniq)
    return float((probs * counts).sum() / n_samples)


def insertion_aucs(model, X, labels, maps, fill=None):
    """Exact insertion AUC for each ``(X[i], labels[i], maps[i])``."""
    fill = fill or GrayFill()
    return np.array([insertion_curve(model, x, int(a), m, fill).auc
                     for x, a, m in zip(X, labels, maps)])


def completeness_score(g, f, eps1=0.0):
    """min(max(g, eps1) / f, 1)."""
    g = np.asarray(g, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if np.any(f <= 0):
        raise ValueError("completeness is undefined for f = 0")
    out = np.clip(np.maximum(g, eps1) / f, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def soundness_score(f, g, eps2=0.0):
    """min(max(f, eps2) / g, 1), with the score taken as 1 when g = 0."""
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    safe = np.where(g > 0, g, 1.0)
    out = np.where(g > 0, np.clip(np.maximum(f, eps2) / safe, 0.0, 1.0), 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class WorstCaseReport:
    """Per-(image, label) scores and their per-image minima.

    ``wrong_alpha`` lists completeness over pairs whose label differs from the
    prediction and whose probability is at least ``wrong_min_prob``.
    """

    f: np.ndarray
    g: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    labels: np.ndarray
    predicted: np.ndarray
    worst_alpha: np.ndarray
    worst_beta: np.ndarray
    wrong_alpha: np.ndarray = field(default=None)

    @property
    def mean_alpha(self):
        return float(self.worst_alpha.mean())

    @property
    def mean_beta(self):
        return float(self.worst_beta.mean())

    @property
    def mean_wrong_alpha(self):
        return float(self.wrong_alpha.mean()) if len(self.wrong_alpha) else float("nan")


def worst_case_metrics(model, maps, X, thresholds=None, fill=None, labels=None,
                       min_prob=None, g=None, wrong_min_prob=0.01):
    """Worst-case completeness and soundness over labels.

    ``maps`` is ``(n, C, h, w)``. ``labels`` restricts the minimum to a subset
    of labels; ``min_prob`` further drops pairs with f below it. Precomputed
    insertion AUCs may be passed as ``g`` ``(n, C)``.
    """
    thresholds = thresholds or MetricThresholds()
    X = np.asarray(X, dtype=np.float64)
    maps = np.asarray(maps)
    n, C = len(X), model.n_classes_
    if maps.shape[:2] != (n, C):
        raise ValueError(f"need one map per (image, label): expected {(n, C)}, got {maps.shape[:2]}")
    labels = np.arange(C) if labels is None else np.asarray(labels, dtype=int)
    f = model.predict_proba(X)
    if g is None:
        g = np.zeros((n, C))
        for a in labels:
            g[:, a] = insertion_aucs(model, X, np.full(n, a), maps[:, a], fill)
    alpha = completeness_score(g, f, thresholds.eps1)
    beta = soundness_score(f, g, thresholds.eps2)
    use = np.zeros((n, C), dtype=bool)
    use[:, labels] = True
    if min_prob is not None:
        use &= f >= min_prob
    worst_alpha = np.where(use, alpha, np.inf).min(axis=1)
    worst_beta = np.where(use, beta, np.inf).min(axis=1)
    # images with no qualifying label impose no constraint
    worst_alpha[np.isinf(worst_alpha)] = 1.0
    worst_beta[np.isinf(worst_beta)] = 1.0
    predicted = f.argmax(axis=1)
    wrong = use & (np.arange(C)[None, :] != predicted[:, None]) & (f >= wrong_min_prob)
    return WorstCaseReport(f, g, alpha, beta, labels, predicted, worst_alpha, worst_beta,
                           alpha[wrong])


def bounding_box(mask):
    """Tightest ``(top, left, bottom, right)`` box (exclusive ends) or None."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        return None
    return rows[0], cols[0], rows[-1] + 1, cols[-1] + 1


def saliency_metric(model, x, m, threshold):
    """log(max(a, 0.05)) - log(p) for the box around normalized scores above ``threshold``.

    ``a`` is the box's area fraction; ``p`` is the probability of the class
    predicted on the full image, evaluated on the box crop resized to full size.
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"threshold must be in [0, 1), got {threshold}")
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape
    box = bounding_box(normalize_map(m) > threshold)
    if box is None:
        box = (0, 0, h, w)
    top, left, bottom, right = box
    area = (bottom - top) * (right - left) / (h * w)
    crop = resize_bilinear(x[top:bottom, left:right], h, w)
    label = int(model.predict(x[None])[0])
    p = float(model.predict_proba(crop[None])[0, label])
    if p <= 0.0:
        warnings.warn("saliency metric: zero class probability clamped to 1e-9", RuntimeWarning)
        p = 1e-9
    return math.log(max(area, 0.05)) - math.log(p)


SALIENCY_GRID = tuple(round(0.05 * k, 2) for k in range(20))


def tune_saliency_threshold(model, X, maps, grid=SALIENCY_GRID):
    """Threshold minimizing the mean saliency metric on a holdout; ties go low."""
    if len(X) == 0:
        raise ValueError("holdout set is empty")
    best, best_val = None, math.inf
    for t in sorted(grid):
        val = float(np.mean([saliency_metric(model, x, m, t) for x, m in zip(X, maps)]))
        if val < best_val:
            best, best_val = t, val
    return best
