"""Interval certificates for linear classifiers after a random coordinate shuffle.

A salient set ``S`` certifies label ``a`` for ``x -> sign(w . x)`` when
``a * sum_{i in S} w_i x_i > 0`` (all other coordinates zeroed). Restricting
``S`` to a contiguous interval, i.e. a TV budget of 2, makes the certificate
hard to fake for the wrong label; picking the top-L coordinates does not.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import binomtest

from .grid import RandomStream


@dataclass(frozen=True, eq=False)
class LinearInstance:
    w: np.ndarray
    x: np.ndarray
    y: int
    attempts: int = 1

    @property
    def d(self):
        return len(self.w)

    @property
    def gamma(self):
        return float(self.y * (self.w @ self.x))

    def check(self):
        bound = 10.0 / np.sqrt(self.d)
        assert abs(np.linalg.norm(self.w) - 1.0) < 1e-9
        assert abs(np.linalg.norm(self.x) - 1.0) < 1e-9
        assert np.all(np.abs(self.w) <= bound) and np.all(np.abs(self.x) <= bound)
        assert self.y in (-1, 1) and self.gamma > 0


@dataclass(frozen=True)
class IntervalMask:
    start: int
    length: int

    def indices(self):
        return np.arange(self.start, self.start + self.length)


def sample_instance(d, gamma_target, stream, max_tries=10**6, batch=256):
    """Rejection-sample unit Gaussian directions ``(w, x)`` with margin >= ``gamma_target``.

    Candidates are drawn in batches but accepted in draw order, so the
    result depends only on the stream. ``y`` is the sign of ``w . x``.
    """
    bound = 10.0 / np.sqrt(d)
    tries = 0
    while tries < max_tries:
        k = min(batch, max_tries - tries)
        W = stream.normal((k, d))
        X = stream.normal((k, d))
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        dots = np.einsum("ij,ij->i", W, X)
        ok = ((np.abs(W) <= bound).all(axis=1) & (np.abs(X) <= bound).all(axis=1)
              & (np.abs(dots) >= gamma_target) & (dots != 0))
        hits = np.flatnonzero(ok)
        if len(hits):
            i = hits[0]
            return LinearInstance(W[i], X[i], int(np.sign(dots[i])), tries + i + 1)
        tries += k
    raise RuntimeError(f"no instance with margin {gamma_target} in d={d} after {max_tries} draws")


def shuffle_coords(inst, stream):
    """Apply one uniformly random permutation to ``w`` and ``x`` jointly."""
    perm = np.asarray(stream.permutation(inst.d))
    return replace(inst, w=inst.w[perm], x=inst.x[perm])


def interval_certify(inst, a, L):
    """First length-``L`` interval (by start) whose window sum certifies ``a``, else None."""
    d = inst.d
    if not 1 <= L <= d:
        raise ValueError(f"interval length must be in [1, {d}], got {L}")
    p = a * inst.w * inst.x
    window = p[:L].sum()
    if window > 0:
        return IntervalMask(0, L)
    for start in range(1, d - L + 1):
        window += p[start + L - 1] - p[start - 1]
        if window > 0:
            return IntervalMask(start, L)
    return None


def greedy_certify(inst, a, L):
    """Top-``L`` coordinates by ``a w_i x_i`` (ties to the lower index) and whether they certify."""
    p = a * inst.w * inst.x
    chosen = np.sort(np.argsort(-p, kind="stable")[:L])
    return chosen, bool(p[chosen].sum() > 0)


@dataclass
class FrequencyTable:
    L: list
    trials: int
    completeness: np.ndarray
    soundness_violation: np.ndarray
    greedy_violation: np.ndarray

    @staticmethod
    def _ci(freq, n):
        ci = binomtest(int(round(freq * n)), n).proportion_ci(0.95, method="wilson")
        return float(ci.low), float(ci.high)

    def rows(self):
        out = []
        for i, L in enumerate(self.L):
            row = {"L": L}
            for name, col in (("completeness", self.completeness),
                              ("soundness_violation", self.soundness_violation),
                              ("greedy_violation", self.greedy_violation)):
                lo, hi = self._ci(col[i], self.trials)
                row[f"{name}_freq"] = float(col[i])
                row[f"{name}_ci_low"] = lo
                row[f"{name}_ci_high"] = hi
            out.append(row)
        return out

    def to_csv(self, path):
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _trial(d, gamma, L_values, seed, t, sampler):
    stream = RandomStream(seed, t)
    inst = sampler(stream) if sampler else sample_instance(d, gamma, stream)
    inst = shuffle_coords(inst, stream)
    y = inst.y
    return np.array([
        [interval_certify(inst, y, L) is not None,
         interval_certify(inst, -y, L) is not None,
         greedy_certify(inst, -y, L)[1]]
        for L in L_values
    ])


def theorem_experiment(d, gamma, L_values, trials, seed=0, sampler=None, n_jobs=1):
    """Certification frequencies per interval length over independent trials.

    Trial ``t`` draws from ``RandomStream(seed, t)``, so results do not depend
    on ``n_jobs``. ``sampler(stream)`` may replace the default instance draw.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    L_values = [int(L) for L in L_values]
    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_trial)(d, gamma, L_values, seed, t, sampler) for t in range(trials)
    )
    freq = np.mean(np.stack(outcomes), axis=0)
    return FrequencyTable(L_values, trials, freq[:, 0], freq[:, 1], freq[:, 2])
