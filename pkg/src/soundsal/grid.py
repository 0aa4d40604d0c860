"""Dense 2-D grid numerics shared by the rest of the package.

Grids are plain ``numpy`` arrays of shape ``(h, w)`` (or ``(..., h, w)``
where batching is supported) in double precision.
"""

import math

import numpy as np

_MASK64 = (1 << 64) - 1


class RandomStream:
    """Counter-based random stream keyed by ``(master_seed, task_id)``.

    Backed by numpy's Philox generator with a 128-bit key built from both
    values, so the sequence for one task never depends on what other tasks
    drew or in which order tasks ran.
    """

    def __init__(self, master_seed, task_id=0):
        self.master_seed = int(master_seed) & _MASK64
        self.task_id = int(task_id) & _MASK64
        key = (self.task_id << 64) | self.master_seed
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RandomStream(master_seed={self.master_seed}, task_id={self.task_id})"

    def next_real(self):
        """Next uniform draw in [0, 1)."""
        return float(self._gen.random())

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None):
        return self._gen.choice(a, size=size)


def check_grid(m, name="grid"):
    """Return ``m`` as a finite float64 2-D array or raise ``ValueError``."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def interpolation_matrix(n_in, n_out):
    """Bilinear weights mapping ``n_in`` samples onto ``n_out`` samples.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) * n_in / n_out - 0.5``
    (half-pixel centers), clamped to ``[0, n_in - 1]``. Each row has at most two
    nonzero weights summing to one.
    """
    A = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(A, 1.0)
        return A
    u = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    u = np.clip(u, 0.0, n_in - 1)
    k0 = np.floor(u).astype(int)
    k1 = np.minimum(k0 + 1, n_in - 1)
    frac = u - k0
    rows = np.arange(n_out)
    A[rows, k0] += 1.0 - frac
    A[rows, k1] += frac
    return A


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize of a 2-D grid (or a stack of them) to ``out_h x out_w``."""
    img = np.asarray(img, dtype=np.float64)
    Ah = interpolation_matrix(img.shape[-2], out_h)
    Aw = interpolation_matrix(img.shape[-1], out_w)
    return Ah @ img @ Aw.T


def bilinear_upsample(low, s, out_shape=None):
    """Upsample by an integer factor ``s`` with half-pixel centers and edge clamping.

    Accepts a single grid or a stack ``(..., h/s, w/s)``. If ``out_shape`` is
    given it must be exactly ``s`` times the input shape.
    """
    s = int(s)
    if s < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {s}")
    low = np.asarray(low, dtype=np.float64)
    if out_shape is not None:
        check_divisible(out_shape[0], out_shape[1], s)
        if tuple(out_shape) != (low.shape[-2] * s, low.shape[-1] * s):
            raise ValueError(
                f"low-resolution grid {low.shape[-2:]} does not match {tuple(out_shape)} / {s}"
            )
    if s == 1:
        return low.copy()
    return resize_bilinear(low, low.shape[-2] * s, low.shape[-1] * s)


def upsample_adjoint(grad, s):
    """Adjoint (transpose) of :func:`bilinear_upsample`, used for backprop."""
    s = int(s)
    grad = np.asarray(grad, dtype=np.float64)
    if s == 1:
        return grad.copy()
    h, w = grad.shape[-2:]
    if h % s or w % s:
        raise ValueError(f"grid {h}x{w} is not divisible by factor {s}")
    Ah = interpolation_matrix(h // s, h)
    Aw = interpolation_matrix(w // s, w)
    return Ah.T @ grad @ Aw


def check_divisible(h, w, s):
    if s < 1 or h % s or w % s:
        raise ValueError(f"grid {h}x{w} is not divisible by factor {s}")


def total_variation(m):
    """Anisotropic TV: summed absolute horizontal plus vertical neighbor differences.

    Reduces over the last two axes, so a stack of grids gives one value each.
    """
    m = np.asarray(m, dtype=np.float64)
    dh = np.abs(np.diff(m, axis=-1)).sum(axis=(-2, -1))
    dv = np.abs(np.diff(m, axis=-2)).sum(axis=(-2, -1))
    return dh + dv


def tv_subgradient(m):
    """Subgradient of :func:`total_variation`; ties contribute 0."""
    m = np.asarray(m, dtype=np.float64)
    g = np.zeros_like(m)
    sh = np.sign(np.diff(m, axis=-1))
    g[..., :, 1:] += sh
    g[..., :, :-1] -= sh
    sv = np.sign(np.diff(m, axis=-2))
    g[..., 1:, :] += sv
    g[..., :-1, :] -= sv
    return g


def gaussian_kernel(sigma):
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(x, sigma):
    """Separable Gaussian blur, radius ``ceil(3 sigma)``, half-sample symmetric boundary."""
    x = np.asarray(x, dtype=np.float64)
    k = gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    out = x
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            acc += kv * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def normalize_map(m):
    """Min-max rescale to [0, 1] over the last two axes; constant maps become 0.5."""
    m = np.asarray(m, dtype=np.float64)
    lo = m.min(axis=(-2, -1), keepdims=True)
    hi = m.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    flat = span == 0
    out = (m - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, out)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    # two branches keep exp() from overflowing
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
