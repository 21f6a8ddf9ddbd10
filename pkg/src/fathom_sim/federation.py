"""FedAvg round engine: sampling, local SGD, weighted aggregation, accounting.

Sign convention: a client's delta is ``x_local_final - x_t`` and the server
applies ``x_{t+1} = x_t + delta_bar``.

Randomness is hierarchical. The master seed and round index fix the sampled
client set; the master seed, round index and client id fix that client's
batch stream. Two runs that share a master seed therefore see the same
clients and, when batch sizes coincide, the same minibatches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .controller import AlignmentTracker
from .datagen import ClientDataset
from .objectives import Objective


class DivergenceError(RuntimeError):
    def __init__(self, round_index, client_id=None, what: str = "iterate"):
        where = what if client_id is None else f"{what}, client {client_id}"
        super().__init__(f"divergence: non-finite {where} in round {round_index}")
        self.round_index = round_index
        self.client_id = client_id


@dataclass
class ClientReport:
    client_id: int
    delta: np.ndarray
    nu: int
    phi: float
    steps: int
    batch: int
    grad_evals: int


@dataclass
class RoundCost:
    floats_down: int
    floats_up: int
    grad_evals: int


@dataclass
class RoundResult:
    t: int
    sampled: np.ndarray
    reports: list[ClientReport]
    delta_bar: np.ndarray
    x_next: np.ndarray
    cost: RoundCost


def derive_seed(master: int, *key: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sample_clients(m: int, n: int, round_seed: int) -> np.ndarray:
    """``n`` distinct client ids drawn uniformly without replacement, ascending."""
    if not 1 <= n <= m:
        raise ValueError(f"cannot sample {n} of {m} clients")
    if n == m:
        return np.arange(m)
    rng = np.random.default_rng(round_seed)
    return np.sort(rng.choice(m, size=n, replace=False))


def local_steps_for(nu: int, epochs: float, batch: float) -> int:
    if nu < 1 or epochs <= 0 or batch <= 0:
        raise ValueError("need nu >= 1, epochs > 0, batch > 0")
    return max(1, math.floor(nu * epochs / batch))


def effective_batch(batch: float, nu: int) -> int:
    return int(min(max(math.floor(batch + 0.5), 1), nu))


def batch_schedule(nu: int, steps: int, batch: int, seed: int) -> list[np.ndarray]:
    """Index lists for ``steps`` local steps of size ``batch``.

    Each epoch reshuffles and walks consecutive batches; the trailing partial
    batch is dropped. A schedule for ``K + 1`` steps extends the one for ``K``.
    """
    if batch >= nu:
        full = np.arange(nu)
        return [full] * steps
    rng = np.random.default_rng(seed)
    per_epoch = nu // batch
    out, perm = [], None
    for k in range(steps):
        pos = k % per_epoch
        if pos == 0:
            perm = rng.permutation(nu)
        out.append(perm[pos * batch:(pos + 1) * batch])
    return out


@dataclass
class LocalResult:
    delta: np.ndarray
    phi: float
    grads: list[np.ndarray] | None = None


def local_sgd(obj: Objective, x_t, data: ClientDataset, eta: float, batches, *,
              track_alignment: bool = True, record: bool = False,
              round_index=None) -> LocalResult:
    x = np.array(x_t, dtype=float)
    tracker = AlignmentTracker(len(x)) if track_alignment else None
    grads = [] if record else None
    nu = data.size
    with np.errstate(over="ignore", invalid="ignore"):
        for idx in batches:
            g = obj.gradient(x, data, None if idx is None or len(idx) == nu else idx)
            if tracker is not None:
                tracker.observe(g)
            if grads is not None:
                grads.append(g)
            x -= eta * g
    if not np.all(np.isfinite(x)):
        raise DivergenceError(round_index, data.client_id)
    return LocalResult(x - x_t, tracker.value if tracker else 0.0, grads)


def run_local(obj: Objective, x_t, data: ClientDataset, eta: float, steps: int,
              batch: float, client_seed: int, *, track_alignment: bool = True,
              round_index=None) -> ClientReport:
    if eta <= 0 or steps < 1:
        raise ValueError("need eta > 0 and steps >= 1")
    b = effective_batch(batch, data.size)
    batches = batch_schedule(data.size, steps, b, client_seed)
    res = local_sgd(obj, x_t, data, eta, batches,
                    track_alignment=track_alignment, round_index=round_index)
    return ClientReport(data.client_id, res.delta, data.size, res.phi, steps, b, steps * b)


def aggregate(reports) -> np.ndarray:
    """Size-weighted mean of client deltas, summed in ascending client id."""
    reports = sorted(reports, key=lambda r: r.client_id)
    if not reports:
        raise ValueError("no client reports to aggregate")
    dim = len(reports[0].delta)
    if any(len(r.delta) != dim for r in reports):
        raise ValueError("client deltas differ in length")
    total = float(sum(r.nu for r in reports))
    out = np.zeros(dim)
    for r in reports:
        out += (r.nu / total) * r.delta
    return out


def apply_update(x, delta_bar) -> np.ndarray:
    return np.asarray(x, dtype=float) + np.asarray(delta_bar, dtype=float)


def account_round(reports, dim: int, adaptive: bool = True) -> RoundCost:
    """Floats moved and per-example gradients spent in one round.

    Adaptive rounds broadcast the model plus (eta, E, B) and collect the delta
    plus (nu, phi). Plain FedAvg broadcasts the model and collects delta + nu.
    """
    n = len(reports)
    evals = sum(r.grad_evals for r in reports)
    if adaptive:
        return RoundCost(n * (dim + 3), n * (dim + 2), evals)
    return RoundCost(n * dim, n * (dim + 1), evals)


def run_round(obj: Objective, x_t, clients, *, t: int, master_seed: int, n_sampled: int,
              eta: float, epochs: float, batch: float, adaptive: bool = True) -> RoundResult:
    sampled = sample_clients(len(clients), n_sampled, derive_seed(master_seed, t))
    reports = []
    for cid in sampled:
        data = clients[cid]
        steps = local_steps_for(data.size, epochs, batch)
        reports.append(run_local(obj, x_t, data, eta, steps, batch,
                                 derive_seed(master_seed, t, int(cid)),
                                 track_alignment=adaptive, round_index=t))
    delta_bar = aggregate(reports)
    return RoundResult(t, sampled, reports, delta_bar, apply_update(x_t, delta_bar),
                       account_round(reports, len(delta_bar), adaptive))
