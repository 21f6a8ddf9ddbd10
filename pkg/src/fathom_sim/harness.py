"""Experiment orchestration: FATHOM / FedAvg runs, grid search, metrics files."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config
from .controller import GuardRails, HyperState
from .datagen import FederationSpec, fresh_eval_pool, holdout_split, synth_federation
from .federation import DivergenceError, run_round
from .objectives import accuracy, global_loss, loss, make_objective

log = logging.getLogger(__name__)

CSV_HEADER = ("t", "train_loss", "eval_loss", "eval_acc", "eta", "epochs", "batch", "mean_k",
              "h_bar", "g_bar", "floats_up", "floats_down", "cum_grad_evals")


@dataclass
class RoundRecord:
    t: int
    train_loss: float
    eval_loss: float | None
    eval_acc: float | None
    eta: float
    epochs: float
    batch: float
    mean_k: float
    h_bar: float | None
    g_bar: float | None
    floats_up: int
    floats_down: int
    cum_grad_evals: int
    # per-round detail kept for accounting checks, not written to CSV
    steps: list[int] = field(default_factory=list, repr=False)
    batches: list[int] = field(default_factory=list, repr=False)


@dataclass
class RunSummary:
    algorithm: str
    seed: int
    rounds_completed: int
    diverged: bool
    rounds_to_target: dict
    grad_evals_to_target: dict
    final_train_loss: float | None
    final_eval_loss: float | None
    final_eval_acc: float | None
    total_floats_up: int
    total_floats_down: int
    total_grad_evals: int
    eta: list[float]
    epochs: list[float]
    batch: list[float]
    mean_k: list[float]


@dataclass
class RunResult:
    config: RunConfig
    summary: RunSummary
    records: list[RoundRecord]


@dataclass
class Problem:
    """Objective, training clients, eval pool and starting point for a config."""

    objective: object
    clients: list
    eval_pool: object
    x0: np.ndarray


def build_problem(cfg: RunConfig) -> Problem:
    obj = make_objective(cfg.objective, cfg.n_features, n_features=cfg.n_features,
                         n_classes=cfg.n_classes, hidden=cfg.hidden, curvature=cfg.curvature)
    spec = FederationSpec(
        num_clients=cfg.num_clients, size_law=cfg.size_law, size_median=cfg.size_median,
        size_sigma=cfg.size_sigma, min_size=cfg.min_size, max_size=cfg.max_size,
        dirichlet_beta=cfg.dirichlet_beta, n_features=cfg.n_features, n_classes=cfg.n_classes,
        class_sep=cfg.class_sep, feature_offset=cfg.feature_offset, dispersion=cfg.dispersion, spread=cfg.spread, seed=cfg.data_seed)
    clients = synth_federation(spec, cfg.objective)
    if cfg.eval_mode == "holdout":
        clients, pool = holdout_split(clients, cfg.eval_fraction, cfg.data_seed)
    else:
        total = sum(c.size for c in clients)
        pool = fresh_eval_pool(spec, cfg.objective, round(cfg.eval_fraction * total))
    return Problem(obj, clients, pool, obj.init_params(cfg.data_seed))


def target_labels(cfg: RunConfig) -> list[tuple[str, str, float]]:
    out = [(f"eval_loss<={tau!r}", "eval_loss", tau) for tau in cfg.target_loss]
    out += [(f"eval_acc>={tau!r}", "eval_acc", tau) for tau in cfg.target_acc]
    return out


def rounds_to_target(records, metric: str, tau: float) -> int | None:
    """First round whose evaluation meets the target, or None if none does."""
    for r in records:
        if metric == "eval_loss":
            if r.eval_loss is not None and r.eval_loss <= tau:
                return r.t
        elif metric == "eval_acc":
            if r.eval_acc is not None and r.eval_acc >= tau:
                return r.t
        else:
            raise ValueError(f"unknown target metric {metric!r}")
    return None


def _summarize(cfg, problem, records, x_final, diverged) -> RunSummary:
    reached, evals = {}, {}
    for label, metric, tau in target_labels(cfg):
        t = rounds_to_target(records, metric, tau)
        reached[label] = t
        evals[label] = None if t is None else records[t - 1].cum_grad_evals
    evaluated = [r for r in records if r.eval_loss is not None]
    last = evaluated[-1] if evaluated else None
    final_train = None
    if x_final is not None and not diverged:
        final_train = global_loss(problem.objective, x_final, problem.clients, "size")
    return RunSummary(
        algorithm=cfg.algorithm, seed=cfg.seed, rounds_completed=len(records), diverged=diverged,
        rounds_to_target=reached, grad_evals_to_target=evals,
        final_train_loss=final_train,
        final_eval_loss=last.eval_loss if last else None,
        final_eval_acc=last.eval_acc if last else None,
        total_floats_up=sum(r.floats_up for r in records),
        total_floats_down=sum(r.floats_down for r in records),
        total_grad_evals=records[-1].cum_grad_evals if records else 0,
        eta=[r.eta for r in records], epochs=[r.epochs for r in records],
        batch=[r.batch for r in records], mean_k=[r.mean_k for r in records])


def run_experiment(cfg: RunConfig, out_dir=None, problem: Problem | None = None) -> RunResult:
    """Run ``cfg.rounds`` rounds of FATHOM or static FedAvg.

    Records carry the hyperparameters *used* in their round. In ``fedavg``
    mode the controller is never consulted. On divergence the partial records
    are written (if ``out_dir`` is given) and the ``DivergenceError`` is
    re-raised with a ``result`` attribute holding them.
    """
    problem = problem or build_problem(cfg)
    obj, clients, pool = problem.objective, problem.clients, problem.eval_pool
    adaptive = cfg.algorithm == "fathom"
    state = HyperState.initial(
        obj.dim, cfg.eta0, cfg.epochs0, cfg.batch0, alpha=cfg.alpha, gamma_eta=cfg.gamma_eta,
        gamma_epochs=cfg.gamma_epochs, gamma_batch=cfg.gamma_batch,
        guard=GuardRails(batch=(1.0, float(max(c.size for c in clients)))) if cfg.guard_rails else None)
    eta, epochs, batch = cfg.eta0, cfg.epochs0, cfg.batch0
    x = problem.x0.copy()
    records: list[RoundRecord] = []
    cum_evals = 0
    diverged = False
    try:
        for t in range(1, cfg.rounds + 1):
            res = run_round(obj, x, clients, t=t, master_seed=cfg.seed,
                            n_sampled=cfg.clients_per_round, eta=eta, epochs=epochs,
                            batch=batch, adaptive=adaptive)
            x = res.x_next
            cum_evals += res.cost.grad_evals
            sampled = [clients[i] for i in res.sampled]
            with np.errstate(over="ignore", invalid="ignore"):
                train = global_loss(obj, x, sampled, "size")
            if not math.isfinite(train):
                raise DivergenceError(t, None, "training loss")
            ev_loss = ev_acc = None
            if t % cfg.eval_every == 0 or t == cfg.rounds:
                ev_loss = loss(obj, x, pool)
                ev_acc = accuracy(obj, x, pool) if obj.is_classifier else None
            h_bar = g_bar = None
            if adaptive:
                try:
                    sig = state.step(res.delta_bar, [r.phi for r in res.reports],
                                     [r.nu for r in res.reports])
                except FloatingPointError:
                    raise DivergenceError(t, None, "hyperparameters") from None
                h_bar, g_bar = sig.h_bar, sig.g_bar
            steps = [r.steps for r in res.reports]
            records.append(RoundRecord(
                t=t, train_loss=train, eval_loss=ev_loss, eval_acc=ev_acc, eta=eta,
                epochs=epochs, batch=batch, mean_k=float(np.mean(steps)), h_bar=h_bar,
                g_bar=g_bar, floats_up=res.cost.floats_up, floats_down=res.cost.floats_down,
                cum_grad_evals=cum_evals, steps=steps, batches=[r.batch for r in res.reports]))
            if adaptive:
                eta, epochs, batch = state.eta, state.epochs, state.batch
    except DivergenceError as exc:
        diverged = True
        log.warning("%s; %d rounds completed", exc, len(records))
        result = RunResult(cfg, _summarize(cfg, problem, records, None, True), records)
        if out_dir is not None:
            emit_metrics(result, out_dir)
        exc.result = result
        raise
    result = RunResult(cfg, _summarize(cfg, problem, records, x, diverged), records)
    if out_dir is not None:
        emit_metrics(result, out_dir)
    return result


def _cell(value) -> str:
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, float) else str(value)


def records_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow([_cell(getattr(r, name)) for name in CSV_HEADER])
    return buf.getvalue()


def read_records_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append({k: (None if v == "" else (int(v) if k in ("t", "floats_up", "floats_down",
                                                              "cum_grad_evals") else float(v)))
                    for k, v in row.items()})
    return out


def _json_default(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    raise TypeError(type(value))


def emit_metrics(result: RunResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rounds.csv").write_text(records_csv(result.records))
    (out / "summary.json").write_text(json.dumps(asdict(result.summary), indent=2, sort_keys=True) + "\n")
    (out / "config.toml").write_text(dump_config(result.config))
    return out


@dataclass
class GridCell:
    eta: float
    batch: float
    summary: RunSummary


@dataclass
class GridResult:
    best_eta: float
    best_batch: float
    reached_target: bool
    target: str | None
    cells: list[GridCell]

    @property
    def best(self) -> GridCell:
        return next(c for c in self.cells if c.eta == self.best_eta and c.batch == self.best_batch)


def _cell_key(cell: GridCell, label):
    s = cell.summary
    return (s.rounds_to_target[label], s.grad_evals_to_target[label], cell.eta)


def _final_loss(cell: GridCell) -> float:
    s = cell.summary
    return math.inf if s.diverged or s.final_eval_loss is None else s.final_eval_loss


def grid_search(cfg: RunConfig, etas, batches, problem: Problem | None = None) -> GridResult:
    """Static FedAvg over every (eta, batch) cell with a shared seed schedule.

    The winner reaches the first configured target in the fewest rounds, then
    with the fewest gradient evaluations, then with the smaller eta. If no
    cell reaches it (or no target is set) the lowest final eval loss wins and
    ``reached_target`` is False.
    """
    etas, batches = list(etas), list(batches)
    if not etas or not batches:
        raise ValueError("grid needs at least one eta and one batch value")
    problem = problem or build_problem(cfg)
    cells = []
    for eta in etas:
        for b in batches:
            run_cfg = cfg.replace(algorithm="fedavg", eta0=float(eta), batch0=float(b))
            try:
                summary = run_experiment(run_cfg, problem=problem).summary
            except DivergenceError as exc:
                summary = exc.result.summary
            cells.append(GridCell(float(eta), float(b), summary))
    labels = target_labels(cfg)
    label = labels[0][0] if labels else None
    hits = [c for c in cells if label is not None and c.summary.rounds_to_target[label] is not None]
    if hits:
        best = min(hits, key=lambda c: _cell_key(c, label))
    else:
        best = min(cells, key=lambda c: (_final_loss(c), c.eta))
    return GridResult(best.eta, best.batch, bool(hits), label, cells)
