"""Differentiable client objectives with hand-coded gradients.

Three families are supported:

* ``quadratic`` -- every example ``j`` carries a target vector ``c_j`` and
  contributes ``0.5 * a * ||x - c_j||^2``.
* ``logistic`` -- multinomial logistic regression (softmax + cross entropy).
  With two classes this is ordinary binary logistic regression.
* ``mlp`` -- one tanh hidden layer followed by a softmax output. Non-convex,
  used only for smoke tests.

Losses are means over examples, so a client's size only matters through the
aggregation weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import ClientDataset

KINDS = ("quadratic", "logistic", "mlp")


@dataclass(frozen=True)
class GradientSample:
    vector: np.ndarray
    batch_size: int
    eval_count: int


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax_residual(logits: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """(softmax(logits) - onehot) / n, the cross-entropy gradient wrt logits."""
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    e /= e.sum(axis=1, keepdims=True)
    e -= onehot
    e /= len(onehot)
    return e


class Objective:
    """Base class. Subclasses implement ``_loss`` and ``_grad`` on raw arrays."""

    kind: str = ""
    dim: int = 0

    def _rows(self, data: ClientDataset, idx):
        if idx is None:
            return data.features, data.targets
        feats = None if data.features is None else data.features[idx]
        return feats, data.targets[idx]

    def loss(self, x: np.ndarray, data: ClientDataset, idx=None) -> float:
        feats, targets = self._rows(data, idx)
        return self._loss(x, feats, targets)

    def gradient(self, x: np.ndarray, data: ClientDataset, idx=None) -> np.ndarray:
        feats, targets = self._rows(data, idx)
        return self._grad(x, feats, targets)

    def init_params(self, seed: int = 0) -> np.ndarray:
        return np.zeros(self.dim)

    @property
    def is_classifier(self) -> bool:
        return False

    def _loss(self, x, feats, targets) -> float:  # pragma: no cover - abstract
        raise NotImplementedError

    def _grad(self, x, feats, targets) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError


class QuadraticObjective(Objective):
    kind = "quadratic"

    def __init__(self, dim: int, curvature: float = 1.0):
        if dim < 1:
            raise ValueError("dim must be positive")
        if curvature <= 0:
            raise ValueError("curvature must be positive")
        self.dim = int(dim)
        self.curvature = float(curvature)

    def _loss(self, x, feats, targets):
        diff = x - targets
        return float(0.5 * self.curvature * np.mean(np.einsum("ij,ij->i", diff, diff)))

    def _grad(self, x, feats, targets):
        return self.curvature * (x - targets.mean(axis=0))


class LogisticObjective(Objective):
    """Softmax regression; parameters are ``W`` (classes x features) then bias."""

    kind = "logistic"

    def __init__(self, n_features: int, n_classes: int = 2):
        if n_features < 1 or n_classes < 2:
            raise ValueError("need n_features >= 1 and n_classes >= 2")
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)
        self.dim = self.n_classes * (self.n_features + 1)
        self._eye = np.eye(self.n_classes)

    @property
    def is_classifier(self) -> bool:
        return True

    def _unpack(self, x):
        cp = self.n_classes * self.n_features
        return x[:cp].reshape(self.n_classes, self.n_features), x[cp:]

    def logits(self, x, feats):
        w, b = self._unpack(x)
        return feats @ w.T + b

    def _loss(self, x, feats, targets):
        logp = _log_softmax(self.logits(x, feats))
        return float(-np.mean(logp[np.arange(len(targets)), targets]))

    def _grad(self, x, feats, targets):
        resid = _softmax_residual(self.logits(x, feats), self._eye[targets])
        return np.concatenate(((resid.T @ feats).ravel(), resid.sum(axis=0)))


class MLPObjective(Objective):
    """One hidden tanh layer, softmax output. Layout: W1, b1, W2, b2 (row-major)."""

    kind = "mlp"

    def __init__(self, n_features: int, hidden: int = 8, n_classes: int = 2):
        if n_features < 1 or hidden < 1 or n_classes < 2:
            raise ValueError("invalid MLP shape")
        self.n_features = int(n_features)
        self.hidden = int(hidden)
        self.n_classes = int(n_classes)
        p, h, c = self.n_features, self.hidden, self.n_classes
        self._shapes = ((h, p), (h,), (c, h), (c,))
        self.dim = h * p + h + c * h + c
        self._eye = np.eye(c)

    @property
    def is_classifier(self) -> bool:
        return True

    def init_params(self, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        parts = []
        for shape in self._shapes:
            fan_in = shape[1] if len(shape) == 2 else 1
            scale = 1.0 / np.sqrt(fan_in) if len(shape) == 2 else 0.0
            parts.append((rng.standard_normal(shape) * scale).ravel())
        return np.concatenate(parts)

    def _unpack(self, x):
        out, pos = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(x[pos:pos + size].reshape(shape))
            pos += size
        return out

    def _forward(self, x, feats):
        w1, b1, w2, b2 = self._unpack(x)
        hid = np.tanh(feats @ w1.T + b1)
        return hid, hid @ w2.T + b2

    def logits(self, x, feats):
        return self._forward(x, feats)[1]

    def _loss(self, x, feats, targets):
        logp = _log_softmax(self.logits(x, feats))
        return float(-np.mean(logp[np.arange(len(targets)), targets]))

    def _grad(self, x, feats, targets):
        _, _, w2, _ = self._unpack(x)
        hid, logits = self._forward(x, feats)
        d_out = _softmax_residual(logits, self._eye[targets])
        d_hid = (d_out @ w2) * (1.0 - hid * hid)
        return np.concatenate((
            (d_hid.T @ feats).ravel(), d_hid.sum(axis=0),
            (d_out.T @ hid).ravel(), d_out.sum(axis=0),
        ))


def make_objective(kind: str, dim: int | None = None, *, n_features: int | None = None,
                   n_classes: int = 2, hidden: int = 8, curvature: float = 1.0) -> Objective:
    if kind == "quadratic":
        if dim is None:
            raise ValueError("quadratic objective needs dim")
        return QuadraticObjective(dim, curvature)
    if kind == "logistic":
        return LogisticObjective(n_features, n_classes)
    if kind == "mlp":
        return MLPObjective(n_features, hidden, n_classes)
    raise ValueError(f"unknown objective kind {kind!r}; expected one of {KINDS}")


def _check_point(obj: Objective, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (obj.dim,):
        raise ValueError(f"parameter vector has shape {x.shape}, expected ({obj.dim},)")
    if not np.all(np.isfinite(x)):
        raise ValueError("parameter vector is not finite")
    return x


def full_gradient(obj: Objective, x, data: ClientDataset) -> GradientSample:
    """Exact mean gradient over every example held by ``data``."""
    if data.size == 0:
        raise ValueError("empty client")
    x = _check_point(obj, x)
    return GradientSample(obj.gradient(x, data), data.size, data.size)


def minibatch_gradient(obj: Objective, x, data: ClientDataset, batch) -> GradientSample:
    batch = np.asarray(batch, dtype=np.intp)
    if batch.ndim != 1 or batch.size == 0:
        raise ValueError("batch must be a non-empty 1-d index list")
    if batch.min() < 0 or batch.max() >= data.size:
        raise IndexError(f"batch index out of range for client of size {data.size}")
    x = _check_point(obj, x)
    return GradientSample(obj.gradient(x, data, batch), int(batch.size), int(batch.size))


def loss(obj: Objective, x, data: ClientDataset) -> float:
    if data.size == 0:
        raise ValueError("empty client")
    return obj.loss(_check_point(obj, x), data)


def global_loss(obj: Objective, x, clients, weighting: str = "size") -> float:
    """Weighted mean of client losses.

    ``weighting="uniform"`` matches the 1/m average of the ERM objective,
    ``"size"`` weights each client by its example count like the server
    aggregation does.
    """
    clients = sorted(clients, key=lambda c: c.client_id)
    if not clients:
        raise ValueError("need at least one client")
    if weighting == "uniform":
        weights = np.full(len(clients), 1.0 / len(clients))
    elif weighting == "size":
        sizes = np.array([c.size for c in clients], dtype=float)
        weights = sizes / sizes.sum()
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    total = 0.0
    for w, c in zip(weights, clients):
        total += w * loss(obj, x, c)
    return float(total)


def accuracy(obj: Objective, x, data: ClientDataset) -> float:
    if not obj.is_classifier:
        raise ValueError(f"{obj.kind} objective has no accuracy")
    pred = np.argmax(obj.logits(np.asarray(x, dtype=float), data.features), axis=1)
    return float(np.mean(pred == data.targets))
