"""Online hyperparameter controller for FATHOM.

Each round the server turns the aggregated model step into two scalars:

* ``h_bar`` -- negative cosine between this round's step and the smoothed
  previous step. It drives both the learning-rate and the epoch updates.
* ``g_bar`` -- ``-eta * sum_i (nu_i / nu) * phi_i`` where ``phi_i`` is the
  worst alignment a client saw between its running gradient sum and its next
  gradient. It pushes epochs down and batch size up once local gradients stop
  agreeing.

Hyperparameters move multiplicatively (``x * exp(-gamma * signal)``) so they
stay strictly positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GAMMA_ETA = 0.01
GAMMA_EPOCHS = 0.01
GAMMA_BATCH = 0.1
ALPHA = 0.5
NORM_FLOOR = 1e-12


def smooth(delta_sm_prev, delta_bar, alpha: float) -> np.ndarray:
    """One step of a single-pole IIR filter, no bias correction."""
    prev = np.asarray(delta_sm_prev, dtype=float)
    cur = np.asarray(delta_bar, dtype=float)
    if prev.shape != cur.shape:
        raise ValueError("smooth: length mismatch")
    return alpha * prev + (1.0 - alpha) * cur


def _unit(v: np.ndarray):
    """``v / ||v||`` computed without overflow, or None below the norm floor."""
    scale = float(np.max(np.abs(v))) if v.size else 0.0
    if not math.isfinite(scale) or scale == 0.0:
        return None
    w = v / scale
    nw = float(np.linalg.norm(w))
    if scale * nw < NORM_FLOOR:
        return None
    return w / nw


def cosine(a, b) -> float:
    """Cosine similarity; 0 when either vector is (numerically) zero or non-finite."""
    ua = _unit(np.asarray(a, dtype=float))
    ub = _unit(np.asarray(b, dtype=float))
    if ua is None or ub is None:
        return 0.0
    return float(np.clip(np.dot(ua, ub), -1.0, 1.0))


def normalized_hypergradient(delta_bar, delta_sm_prev) -> float:
    return -cosine(delta_bar, delta_sm_prev)


class AlignmentTracker:
    """Running minimum of cos(sum of earlier gradients, current gradient).

    Feed gradients in step order. The first step has no earlier sum and is
    skipped, so a single-step client reports the neutral value 0.
    """

    def __init__(self, dim: int):
        self._cum = np.zeros(dim)
        self._steps = 0
        self._phi = math.inf

    def observe(self, grad: np.ndarray) -> None:
        if self._steps > 0:
            gg = float(np.dot(grad, grad))
            cc = float(np.dot(self._cum, self._cum))
            prod = gg * cc
            if gg == 0.0 or cc == 0.0:
                cand = 0.0
            elif 0.0 < prod < math.inf:
                cand = float(np.dot(self._cum, grad)) / math.sqrt(prod)
                cand = min(1.0, max(-1.0, cand))
            else:  # tiny or huge magnitudes: rescale first
                cand = cosine(self._cum, grad)
            if cand < self._phi:
                self._phi = cand
        self._cum += grad
        self._steps += 1

    @property
    def value(self) -> float:
        return 0.0 if math.isinf(self._phi) else self._phi


def client_min_alignment(grads) -> float:
    grads = [np.asarray(g, dtype=float) for g in grads]
    if not grads:
        return 0.0
    tracker = AlignmentTracker(len(grads[0]))
    for g in grads:
        tracker.observe(g)
    return tracker.value


def aggregate_g(phis, nus, eta: float) -> float:
    phis = np.asarray(phis, dtype=float)
    nus = np.asarray(nus, dtype=float)
    if phis.size == 0 or phis.shape != nus.shape:
        raise ValueError("aggregate_g needs matching non-empty phi and nu lists")
    return float(-eta * np.dot(nus / nus.sum(), phis))


def update_learning_rate(eta: float, h_bar: float, gamma: float = GAMMA_ETA) -> float:
    return eta * math.exp(-gamma * h_bar)


def update_epochs(epochs: float, h_bar: float, g_bar: float, gamma: float = GAMMA_EPOCHS) -> float:
    return epochs * math.exp(-gamma * (h_bar + g_bar))


def update_batch(batch: float, g_bar: float, gamma: float = GAMMA_BATCH) -> float:
    return batch * math.exp(-gamma * (-g_bar))


@dataclass
class GuardRails:
    """Optional clamps applied after each update. Off unless passed in."""

    eta: tuple[float, float] = (1e-5, 10.0)
    epochs: tuple[float, float] = (1.0 / 64.0, 64.0)
    batch: tuple[float, float] = (1.0, math.inf)


@dataclass
class HyperSignals:
    h_bar: float
    g_bar: float


@dataclass
class HyperState:
    eta: float
    epochs: float
    batch: float
    delta_sm: np.ndarray
    alpha: float = ALPHA
    gamma_eta: float = GAMMA_ETA
    gamma_epochs: float = GAMMA_EPOCHS
    gamma_batch: float = GAMMA_BATCH
    t: int = 0
    guard: GuardRails | None = field(default=None, repr=False)

    def __post_init__(self):
        if min(self.eta, self.epochs, self.batch) <= 0:
            raise ValueError("eta, epochs and batch must be strictly positive")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")
        if min(self.gamma_eta, self.gamma_epochs, self.gamma_batch) < 0:
            raise ValueError("meta step sizes must be non-negative")
        self.delta_sm = np.asarray(self.delta_sm, dtype=float)

    @classmethod
    def initial(cls, dim: int, eta: float, epochs: float, batch: float, **kw) -> "HyperState":
        return cls(eta=eta, epochs=epochs, batch=batch, delta_sm=np.zeros(dim), **kw)

    def step(self, delta_bar, phis, nus) -> HyperSignals:
        """Consume one round's aggregate and move eta, epochs and batch."""
        h_bar = normalized_hypergradient(delta_bar, self.delta_sm)
        g_bar = aggregate_g(phis, nus, self.eta)
        try:
            eta = update_learning_rate(self.eta, h_bar, self.gamma_eta)
            epochs = update_epochs(self.epochs, h_bar, g_bar, self.gamma_epochs)
            batch = update_batch(self.batch, g_bar, self.gamma_batch)
        except OverflowError:
            eta = epochs = batch = math.inf
        if self.guard is not None:
            eta = min(max(eta, self.guard.eta[0]), self.guard.eta[1])
            epochs = min(max(epochs, self.guard.epochs[0]), self.guard.epochs[1])
            batch = min(max(batch, self.guard.batch[0]), self.guard.batch[1])
        if not all(0.0 < v < math.inf for v in (eta, epochs, batch)):
            raise FloatingPointError(
                f"hyperparameters left the positive reals: eta={eta!r} epochs={epochs!r} batch={batch!r}")
        self.eta, self.epochs, self.batch = eta, epochs, batch
        self.delta_sm = smooth(self.delta_sm, delta_bar, self.alpha)
        self.t += 1
        return HyperSignals(h_bar, g_bar)
