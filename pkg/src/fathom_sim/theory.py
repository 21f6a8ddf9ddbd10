"""Convergence-bound evaluators and derivative oracles on frozen round replays.

Bounds take user-supplied or estimated constants: ``L`` (gradient Lipschitz
constant), ``sigma_L`` (local minibatch noise), ``G`` (gradient norm bound),
``D`` (initial optimality gap), ``m`` (clients) and ``T`` (rounds).

A :class:`FrozenRound` records everything random about one round: the sampled
clients, their batch streams and their step counts. Re-running it under a
different learning rate or a different number of local steps changes nothing
else, which is what makes finite-difference checks meaningful.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .federation import (batch_schedule, derive_seed, effective_batch, local_steps_for,
                         sample_clients)
from .objectives import Objective, global_loss

# ---------------------------------------------------------------------------
# bound algebra


@dataclass(frozen=True)
class TheoryParams:
    L: float
    sigma_L: float
    G: float
    D: float
    m: int
    T: int

    def __post_init__(self):
        for name in ("L", "sigma_L", "G", "D", "m", "T"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class Trajectory:
    etas: tuple
    ks: tuple

    def __post_init__(self):
        etas = tuple(float(e) for e in self.etas)
        ks = tuple(float(k) for k in self.ks)
        if len(etas) != len(ks):
            raise ValueError("etas and ks must have equal length")
        if any(not (v > 0 and math.isfinite(v)) for v in etas + ks):
            raise ValueError("trajectory entries must be positive and finite")
        object.__setattr__(self, "etas", etas)
        object.__setattr__(self, "ks", ks)

    @classmethod
    def constant(cls, eta: float, k: float, rounds: int) -> "Trajectory":
        return cls((eta,) * rounds, (k,) * rounds)

    def __len__(self) -> int:
        return len(self.etas)

    @property
    def constant_path(self) -> bool:
        return len(set(self.etas)) <= 1 and len(set(self.ks)) <= 1

    # a mean of identical floats is not always bit-exact; return the value itself
    @property
    def eta_bar(self) -> float:
        return self.etas[0] if len(set(self.etas)) == 1 else float(np.mean(self.etas))

    @property
    def k_bar(self) -> float:
        return self.ks[0] if len(set(self.ks)) == 1 else float(np.mean(self.ks))


@dataclass(frozen=True)
class BetaCoefficients:
    beta0: float
    beta1: float
    beta2: float
    beta3: float


def _arrays(traj: Trajectory):
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    return np.asarray(traj.etas), np.asarray(traj.ks)


def beta_coefficients(traj: Trajectory) -> BetaCoefficients:
    """The four trajectory ratios, each equal to 1 for constant (eta, K)."""
    eta, k = _arrays(traj)
    if traj.constant_path:
        return BetaCoefficients(1.0, 1.0, 1.0, 1.0)
    T = len(eta)
    eb, kb = eta.mean(), k.mean()
    s = np.sum(eta * k)
    return BetaCoefficients(
        beta0=float(s / (T * eb * kb)),
        beta1=float(s * eb / np.sum(eta**2 * k)),
        beta2=float(s * eb**2 * kb / np.sum(eta**3 * k**2)),
        beta3=float(s * eb**2 * kb**2 / np.sum(eta**3 * k**3)),
    )


def _bound_terms(p: TheoryParams, eta: float, k: float, T: float, b: BetaCoefficients):
    s2, g2, L = p.sigma_L**2, p.G**2, p.L
    return (
        2.0 * b.beta0 * p.D / (eta * k * T),
        b.beta1 * eta * L * (s2 + g2) / p.m,
        5.0 * b.beta2 * eta**2 * k * L**2 * s2,
        5.0 * b.beta3 * eta**2 * k**2 * L**2 * g2,
    )


def fathom_bound(p: TheoryParams, traj: Trajectory) -> float:
    """Progress term plus three deviation terms, weighted by the betas.

    ``p.T`` is the horizon used in the progress term; it is normally
    ``len(traj)``.
    """
    b = beta_coefficients(traj)
    return float(sum(_bound_terms(p, traj.eta_bar, traj.k_bar, p.T, b)))


def fedavg_bound(p: TheoryParams, eta: float, k: float) -> float:
    if eta > 1.0 / p.L:
        raise ValueError(f"step-size condition violated: eta={eta!r} > 1/L={1.0 / p.L!r}")
    if eta <= 0 or k <= 0:
        raise ValueError("eta and k must be positive")
    return float(sum(_bound_terms(p, eta, k, p.T, BetaCoefficients(1.0, 1.0, 1.0, 1.0))))


def trajectory_bound(p: TheoryParams, traj: Trajectory) -> float:
    """The same bound written with raw trajectory sums instead of betas.

    Agrees with :func:`fathom_bound` on constant trajectories. On varying ones
    the two differ, because each beta as defined is the reciprocal of the
    ratio that would make them agree.
    """
    eta, k = _arrays(traj)
    s = np.sum(eta * k)
    s2, g2, L = p.sigma_L**2, p.G**2, p.L
    return float(2.0 * p.D / s
                 + L * np.sum(eta**2 * k) * (s2 + g2) / (p.m * s)
                 + 5.0 * L**2 * np.sum(eta**3 * k**2) * s2 / s
                 + 5.0 * L**2 * np.sum(eta**3 * k**3) * g2 / s)


@dataclass
class EtaCondition:
    satisfied: bool
    eta_bar: float
    caps: tuple
    binding: int
    violations: list = field(default_factory=list)

    @property
    def cap(self) -> float:
        return min(self.caps)


CAP_NAMES = ("deviation1", "deviation2", "deviation3")


def eta_bar_condition(p: TheoryParams, traj: Trajectory) -> EtaCondition:
    """Check the average step size against the three caps and every step against 1/L.

    ``binding`` indexes the smallest cap. ``violations`` lists the 1-based
    rounds whose step size exceeds 1/L.
    """
    eta, k = _arrays(traj)
    b = beta_coefficients(traj)
    kb, L, T = k.mean(), p.L, p.T
    s2, g2 = p.sigma_L**2, p.G**2
    caps = (
        math.sqrt(2.0 * b.beta0 * p.m * p.D / (b.beta1 * kb * L * T * (s2 + g2))),
        (b.beta0 * p.D / (2.5 * b.beta2 * kb**2 * L**2 * s2 * T)) ** (1.0 / 3.0),
        (b.beta0 * p.D / (2.5 * b.beta3 * kb**3 * L**2 * g2 * T)) ** (1.0 / 3.0),
    )
    violations = [int(i) + 1 for i in np.flatnonzero(eta > 1.0 / L)]
    eta_bar = float(eta.mean())
    ok = bool(eta_bar <= min(caps) and not violations)
    caps = tuple(float(c) for c in caps)
    return EtaCondition(ok, eta_bar, caps, int(np.argmin(caps)), violations)


def bound_report(p: TheoryParams, traj: Trajectory) -> dict:
    """Per-round bound evaluations over each trajectory prefix, keyed by round."""
    out = {}
    for t in range(1, len(traj) + 1):
        prefix = Trajectory(traj.etas[:t], traj.ks[:t])
        pt = TheoryParams(p.L, p.sigma_L, p.G, p.D, p.m, t)
        cond = eta_bar_condition(pt, prefix)
        out[str(t)] = {
            "eta_bar": prefix.eta_bar,
            "k_bar": prefix.k_bar,
            "betas": asdict(beta_coefficients(prefix)),
            "fathom_bound": fathom_bound(pt, prefix),
            "trajectory_bound": trajectory_bound(pt, prefix),
            "caps": list(cond.caps),
            "binding": CAP_NAMES[cond.binding],
            "satisfied": cond.satisfied,
            "violations": cond.violations,
        }
    return out


def write_bound_report(path, p: TheoryParams, traj: Trajectory) -> None:
    with open(path, "w") as fh:
        json.dump({"params": asdict(p), "rounds": bound_report(p, traj)}, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# frozen replays


@dataclass
class FrozenClient:
    data: object
    batch: int
    seed: int
    steps: int

    def batches(self, steps: int | None = None):
        """Index lists for ``steps`` local steps; ``None`` entries mean full batch."""
        steps = self.steps if steps is None else steps
        if self.batch >= self.data.size:
            return [None] * steps
        return batch_schedule(self.data.size, steps, self.batch, self.seed)


@dataclass
class FrozenRound:
    """One recorded round: start point, step size and per-client batch streams.

    ``population`` defines the objective ``f`` (size-weighted loss). It
    defaults to the participating clients.
    """

    objective: Objective
    x_start: np.ndarray
    eta: float
    clients: list
    population: list | None = None

    def __post_init__(self):
        self.x_start = np.asarray(self.x_start, dtype=float)
        self.clients = sorted(self.clients, key=lambda c: c.data.client_id)
        if not self.clients:
            raise ValueError("a frozen round needs at least one client")
        if self.population is None:
            self.population = [c.data for c in self.clients]

    @property
    def weights(self) -> np.ndarray:
        nu = np.array([c.data.size for c in self.clients], dtype=float)
        return nu / nu.sum()

    def f(self, x) -> float:
        return global_loss(self.objective, x, self.population, "size")

    def grad_f(self, x) -> np.ndarray:
        nu = np.array([c.size for c in self.population], dtype=float)
        w = nu / nu.sum()
        return sum(wi * self.objective.gradient(np.asarray(x, float), c)
                   for wi, c in zip(w, self.population))

    def local_gradients(self, client: FrozenClient, eta: float, steps: int) -> list[np.ndarray]:
        """Gradients along one client's local trajectory, one per step."""
        x = self.x_start.copy()
        out = []
        for idx in client.batches(steps):
            g = self.objective.gradient(x, client.data, idx)
            out.append(g)
            x = x - eta * g
        return out

    def delta_bar(self, eta: float | None = None, steps: int | None = None) -> np.ndarray:
        eta = self.eta if eta is None else eta
        total = np.zeros_like(self.x_start)
        for w, c in zip(self.weights, self.clients):
            grads = self.local_gradients(c, eta, c.steps if steps is None else steps)
            total += w * (-eta * np.sum(grads, axis=0))
        return total

    def x_next(self, eta: float | None = None, steps: int | None = None) -> np.ndarray:
        return self.x_start + self.delta_bar(eta, steps)


def freeze_round(obj: Objective, x_t, clients, *, t: int, master_seed: int, n_sampled: int,
                 eta: float, epochs: float, batch: float, population=None) -> FrozenRound:
    """Record the round ``run_round`` would execute with the same arguments."""
    sampled = sample_clients(len(clients), n_sampled, derive_seed(master_seed, t))
    frozen = []
    for cid in sampled:
        data = clients[cid]
        frozen.append(FrozenClient(data, effective_batch(batch, data.size),
                                   derive_seed(master_seed, t, int(cid)),
                                   local_steps_for(data.size, epochs, batch)))
    return FrozenRound(obj, np.asarray(x_t, float), eta, frozen,
                       list(population) if population is not None else None)


def hypergradient_eta(replay: FrozenRound) -> float:
    """Analytical step-size hypergradient: grad f(x_next) . (delta_bar / eta)."""
    delta = replay.delta_bar()
    return float(replay.grad_f(replay.x_start + delta) @ (delta / replay.eta))


def finite_diff_eta_oracle(replay: FrozenRound, eps: float) -> float:
    """Central difference of f(x_next) with respect to the round's step size."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if eps >= replay.eta:
        raise ValueError("eps must be smaller than the step size")
    hi = replay.f(replay.x_next(replay.eta + eps))
    lo = replay.f(replay.x_next(replay.eta - eps))
    return (hi - lo) / (2.0 * eps)


def _fractional_point(replay: FrozenRound, k0: int, frac: float) -> tuple[np.ndarray, np.ndarray]:
    """Point after ``k0 - 1`` full steps plus ``frac`` of step ``k0 - 1``, and that step's mean."""
    if k0 < 1:
        raise ValueError("k0 must be >= 1")
    full = np.zeros_like(replay.x_start)
    last = np.zeros_like(replay.x_start)
    for w, c in zip(replay.weights, replay.clients):
        grads = replay.local_gradients(c, replay.eta, k0)
        full += w * np.sum(grads[:-1], axis=0) if k0 > 1 else 0.0
        last += w * grads[-1]
    x = replay.x_start - replay.eta * (full + frac * last)
    return x, last


def fractional_step_loss(replay: FrozenRound, k0: int, frac: float) -> float:
    """Loss with ``k0 - 1`` full local steps and a ``frac`` share of step ``k0 - 1``.

    ``frac = 0`` gives the ``(k0 - 1)``-step loss and ``frac -> 1`` the
    ``k0``-step loss, so consecutive pieces join continuously.
    """
    if not 0.0 <= frac <= 1.0:
        raise ValueError("frac must lie in [0, 1]")
    x, _ = _fractional_point(replay, k0, frac)
    return replay.f(x)


def k_subgradient(replay: FrozenRound, k0: int, frac: float = 1.0) -> float:
    """Slope of the fractional-step loss: grad f(x) . (-eta * mean last-step gradient).

    The gradient of ``f`` is taken at the fractional point itself, so this is
    the exact derivative of :func:`fractional_step_loss` in ``frac``.
    """
    x, last = _fractional_point(replay, k0, frac)
    return float(replay.grad_f(x) @ (-replay.eta * last))


@dataclass(frozen=True)
class ProxyBias:
    n_proxy: float
    true_subgrad: float
    bias: float


def n_proxy_bias_check(replay: FrozenRound) -> ProxyBias:
    """Compare the cheap proxy grad f(x_next) . delta_bar with the last-step subgradient.

    Both use the full round of ``steps`` local steps. ``bias`` is
    ``n_proxy - true_subgrad``.
    """
    steps = {c.steps for c in replay.clients}
    if len(steps) != 1:
        raise ValueError("proxy check needs a common step count across clients")
    k = steps.pop()
    delta = replay.delta_bar()
    n = float(replay.grad_f(replay.x_start + delta) @ delta)
    true = k_subgradient(replay, k, 1.0)
    return ProxyBias(n, true, n - true)


# ---------------------------------------------------------------------------
# constant estimation


def estimate_smoothness(obj: Objective, clients, x, iters: int = 50, h: float = 1e-5,
                        seed: int = 0) -> float:
    """Largest Hessian eigenvalue of the size-weighted objective at ``x``.

    Power iteration on Hessian-vector products built from central gradient
    differences; exact up to rounding on quadratics.
    """
    replay = FrozenRound(obj, x, 1.0, [FrozenClient(c, c.size, 0, 1) for c in clients])
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(len(replay.x_start))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        hv = (replay.grad_f(replay.x_start + h * v) - replay.grad_f(replay.x_start - h * v)) / (2 * h)
        lam = float(np.linalg.norm(hv))
        if lam == 0.0:
            return 0.0
        v = hv / lam
    return lam


def estimate_noise_and_second_moment(obj: Objective, clients, probes, batch: int,
                                     draws: int = 8, seed: int = 0) -> tuple[float, float]:
    """Empirical (sigma_L, G): worst minibatch deviation and worst client gradient norm."""
    rng = np.random.default_rng(seed)
    sigma2, g_max = 0.0, 0.0
    for x in probes:
        x = np.asarray(x, float)
        for c in clients:
            full = obj.gradient(x, c)
            g_max = max(g_max, float(np.linalg.norm(full)))
            b = min(batch, c.size)
            if b >= c.size:
                continue
            dev = [np.sum((obj.gradient(x, c, rng.choice(c.size, b, replace=False)) - full) ** 2)
                   for _ in range(draws)]
            sigma2 = max(sigma2, float(np.mean(dev)))
    return math.sqrt(sigma2), g_max


def estimate_gap(obj: Objective, clients, x0, eta: float, steps: int = 2000) -> float:
    """f(x0) minus the best loss seen by full-batch gradient descent from x0."""
    replay = FrozenRound(obj, x0, eta, [FrozenClient(c, c.size, 0, 1) for c in clients])
    x = replay.x_start.copy()
    f0 = best = replay.f(x)
    for _ in range(steps):
        x = x - eta * replay.grad_f(x)
        best = min(best, replay.f(x))
    return f0 - best


def estimate_params(obj: Objective, clients, x0, *, rounds: int, batch: int,
                    probes=None, eta: float | None = None, seed: int = 0) -> TheoryParams:
    """Estimate every constant the bounds need from the data at hand.

    Zero estimates (for example no minibatch noise when every client fits in
    one batch) are floored at a tiny positive value so the bounds stay finite.
    """
    x0 = np.asarray(x0, float)
    L = estimate_smoothness(obj, clients, x0, seed=seed)
    probes = [x0] if probes is None else list(probes)
    sigma, G = estimate_noise_and_second_moment(obj, clients, probes, batch, seed=seed)
    D = estimate_gap(obj, clients, x0, eta if eta is not None else 1.0 / max(L, 1e-12))
    tiny = 1e-12
    return TheoryParams(max(L, tiny), max(sigma, tiny), max(G, tiny), max(D, tiny),
                        len(clients), rounds)
