"""One-hidden-layer ReLU classifier with analytic gradients.

The model works on flattened images. Everything is float64 so gradients can
be checked against finite differences at tight tolerances.
"""

import struct

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .grid import RandomStream

MODEL_MAGIC = b"SSMF"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Raised when a model file is malformed."""


def _as_rows(X, n_features=None):
    """Flatten ``(n, h, w)`` or ``(n, d)`` input to a float64 ``(n, d)`` array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        raise ValueError("expected a batch of inputs, got a 1-D array")
    X = X.reshape(X.shape[0], -1)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"input has {X.shape[1]} features, model expects {n_features}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    return X


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class MlpClassifier(ClassifierMixin, BaseEstimator):
    """Softmax classifier ``softmax(W2 relu(W1 x + b1) + b2)``.

    Trained with plain minibatch gradient descent on mean cross-entropy.

    Parameters
    ----------
    hidden_dim
        Width of the ReLU layer.
    n_classes
        Number of classes; inferred as ``max(y) + 1`` when None.
    epochs, batch_size, learning_rate
        Minibatch SGD schedule.
    seed
        Controls initialization and shuffling. Training is a pure function of
        ``(X, y, params)``.
    """

    def __init__(self, hidden_dim=64, n_classes=None, epochs=30, batch_size=32,
                 learning_rate=0.1, seed=0):
        self.hidden_dim = hidden_dim
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    @classmethod
    def from_params(cls, W1, b1, W2, b2):
        """Build a fitted model directly from weight arrays."""
        W1 = np.array(W1, dtype=np.float64, ndmin=2)
        W2 = np.array(W2, dtype=np.float64, ndmin=2)
        b1 = np.array(b1, dtype=np.float64).reshape(-1)
        b2 = np.array(b2, dtype=np.float64).reshape(-1)
        H, D = W1.shape
        C = W2.shape[0]
        if b1.shape != (H,) or W2.shape != (C, H) or b2.shape != (C,):
            raise ValueError("inconsistent parameter shapes")
        for p in (W1, b1, W2, b2):
            if not np.all(np.isfinite(p)):
                raise ValueError("parameters must be finite")
        model = cls(hidden_dim=H, n_classes=C)
        model._set_params(W1, b1, W2, b2)
        return model

    def _set_params(self, W1, b1, W2, b2):
        self.W1_, self.b1_, self.W2_, self.b2_ = W1, b1, W2, b2
        self.n_features_in_ = W1.shape[1]
        self.n_classes_ = W2.shape[0]
        self.classes_ = np.arange(self.n_classes_)

    def _init_params(self, D, C):
        H = self.hidden_dim
        rs = RandomStream(self.seed, 0)
        W1 = rs.normal((H, D)) / np.sqrt(D)
        W2 = rs.normal((C, H)) / np.sqrt(H)
        self._set_params(W1, np.zeros(H), W2, np.zeros(C))

    # -- forward ---------------------------------------------------------

    def _hidden(self, X):
        z1 = X @ self.W1_.T + self.b1_
        return z1, np.maximum(z1, 0.0)

    def decision_function(self, X):
        """Pre-softmax logits, shape ``(n, C)``."""
        check_is_fitted(self, "W1_")
        X = _as_rows(X, self.n_features_in_)
        _, h1 = self._hidden(X)
        return h1 @ self.W2_.T + self.b2_

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def forward(self, x):
        """Probability vector for a single image."""
        return self.predict_proba(np.asarray(x)[None])[0]

    # -- gradients -------------------------------------------------------

    def _check_label(self, a):
        if not 0 <= int(a) < self.n_classes_ or int(a) != a:
            raise ValueError(f"label {a} out of range [0, {self.n_classes_})")
        return int(a)

    def input_gradient(self, x, a):
        """d logit_a / d x, same shape as ``x``."""
        check_is_fitted(self, "W1_")
        a = self._check_label(a)
        x = np.asarray(x, dtype=np.float64)
        z1, _ = self._hidden(_as_rows(x[None], self.n_features_in_))
        g = ((self.W2_[a] * (z1[0] > 0)) @ self.W1_)
        return g.reshape(x.shape)

    def loss_and_input_grad(self, X, labels):
        """Batched ``-log f(x, a)`` and its gradient with respect to ``x``.

        ``X`` is ``(n, d)`` float64 rows; returns ``(loss (n,), grad (n, d))``.
        """
        z1, h1 = self._hidden(X)
        logp = log_softmax(h1 @ self.W2_.T + self.b2_)
        rows = np.arange(X.shape[0])
        loss = -logp[rows, labels]
        dlogits = np.exp(logp)
        dlogits[rows, labels] -= 1.0
        dz1 = (dlogits @ self.W2_) * (z1 > 0)
        return loss, dz1 @ self.W1_

    def loss_input_gradient(self, x, a):
        """d(-log f(x, a)) / d x, same shape as ``x``."""
        check_is_fitted(self, "W1_")
        a = self._check_label(a)
        x = np.asarray(x, dtype=np.float64)
        _, g = self.loss_and_input_grad(_as_rows(x[None], self.n_features_in_), np.array([a]))
        return g[0].reshape(x.shape)

    def loss_and_param_grads(self, X, y):
        """Mean cross-entropy and its gradients for ``(W1, b1, W2, b2)``."""
        n = X.shape[0]
        z1, h1 = self._hidden(X)
        logp = log_softmax(h1 @ self.W2_.T + self.b2_)
        rows = np.arange(n)
        loss = -logp[rows, y].mean()
        d = np.exp(logp)
        d[rows, y] -= 1.0
        d /= n
        gW2 = d.T @ h1
        gb2 = d.sum(axis=0)
        dz1 = (d @ self.W2_) * (z1 > 0)
        gW1 = dz1.T @ X
        gb1 = dz1.sum(axis=0)
        return loss, (gW1, gb1, gW2, gb2)

    # -- training --------------------------------------------------------

    def fit(self, X, y):
        X = _as_rows(X)
        y = np.asarray(y)
        if X.shape[0] == 0:
            raise ValueError("cannot fit on an empty dataset")
        if y.shape != (X.shape[0],):
            raise ValueError("X and y have inconsistent lengths")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs and batch_size must be >= 1 and learning_rate > 0")
        C = int(y.max()) + 1 if self.n_classes is None else int(self.n_classes)
        if y.min() < 0 or y.max() >= C or not np.all(y == np.round(y)):
            raise ValueError(f"labels must be integers in [0, {C})")
        y = y.astype(np.int64)
        self._init_params(X.shape[1], C)
        shuffler = RandomStream(self.seed, 1)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = shuffler.permutation(X.shape[0])
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                loss, grads = self.loss_and_param_grads(X[idx], y[idx])
                total += loss * len(idx)
                for p, g in zip((self.W1_, self.b1_, self.W2_, self.b2_), grads):
                    p -= self.learning_rate * g
            self.loss_curve_.append(total / X.shape[0])
        return self


def randomize_last_layer(model, seed):
    """Copy of ``model`` with ``W2, b2`` redrawn from zero-mean Gaussians.

    Each tensor keeps the standard deviation of its trained values.
    """
    check_is_fitted(model, "W1_")
    rs = RandomStream(seed, 0)
    W2 = rs.normal(model.W2_.shape) * model.W2_.std()
    b2 = rs.normal(model.b2_.shape) * model.b2_.std()
    out = MlpClassifier.from_params(model.W1_.copy(), model.b1_.copy(), W2, b2)
    out.set_params(**{k: v for k, v in model.get_params().items() if k != "n_classes"})
    return out


def save_model(model, path):
    check_is_fitted(model, "W1_")
    H, D = model.W1_.shape
    header = MODEL_MAGIC + struct.pack("<IIII", MODEL_VERSION, D, H, model.n_classes_)
    body = b"".join(
        np.ascontiguousarray(p, dtype="<f8").tobytes()
        for p in (model.W1_, model.b1_, model.W2_, model.b2_)
    )
    with open(path, "wb") as fh:
        fh.write(header + body)


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 20:
        raise ModelFormatError(f"{path}: truncated header")
    version, D, H, C = struct.unpack("<IIII", data[4:20])
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    sizes = [H * D, H, C * H, C]
    if len(data) != 20 + 8 * sum(sizes):
        raise ModelFormatError(f"{path}: expected {20 + 8 * sum(sizes)} bytes, got {len(data)}")
    flat = np.frombuffer(data, dtype="<f8", offset=20).astype(np.float64)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return MlpClassifier.from_params(
        parts[0].reshape(H, D), parts[1], parts[2].reshape(C, H), parts[3]
    )
