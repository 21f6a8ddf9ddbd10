import numpy as np
import pytest

from fathom_sim import controller
from fathom_sim.config import RunConfig
from fathom_sim.federation import DivergenceError
from fathom_sim.harness import (CSV_HEADER, RoundRecord, build_problem, grid_search, read_records_csv,
                                records_csv, rounds_to_target, run_experiment)


def small_logistic(**kw):
    base = dict(objective="logistic", rounds=15, num_clients=12, clients_per_round=4,
                size_median=40, class_sep=3.0, eta0=0.3, batch0=10.0, target_loss=[0.5])
    base.update(kw)
    return RunConfig(**base)


def small_quadratic(**kw):
    base = dict(objective="quadratic", rounds=30, num_clients=10, clients_per_round=3,
                size_median=20, n_features=5, eta0=0.1, batch0=5.0)
    base.update(kw)
    return RunConfig(**base)


def rec(t, loss):
    return RoundRecord(t, 0.0, loss, None, 0.1, 1.0, 1.0, 1.0, None, None, 0, 0, 0)


def test_rounds_to_target_examples():
    records = [rec(1, 1.0), rec(2, 0.5), rec(3, 0.2)]
    assert rounds_to_target(records, "eval_loss", 0.4) == 3
    assert rounds_to_target(records, "eval_loss", 1.0) == 1
    assert rounds_to_target(records, "eval_loss", 0.1) is None
    assert rounds_to_target([rec(1, None), rec(2, 0.3)], "eval_loss", 0.4) == 2
    with pytest.raises(ValueError):
        rounds_to_target(records, "f1", 0.5)


@pytest.mark.parametrize("cfg", [small_logistic(), small_quadratic(), small_logistic(objective="mlp"),
                                 small_logistic(algorithm="fedavg", eval_mode="holdout")])
def test_runs_are_bit_identical(cfg):
    a = records_csv(run_experiment(cfg).records)
    b = records_csv(run_experiment(cfg).records)
    assert a == b
    lines = a.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == cfg.rounds + 1


def test_zero_meta_steps_match_fedavg():
    cfg = small_logistic(gamma_eta=0.0, gamma_epochs=0.0, gamma_batch=0.0)
    fa = run_experiment(cfg).records
    fd = run_experiment(cfg.replace(algorithm="fedavg")).records
    for a, b in zip(fa, fd):
        assert (a.train_loss, a.eval_loss, a.eta, a.epochs, a.batch, a.cum_grad_evals) == \
               (b.train_loss, b.eval_loss, b.eta, b.epochs, b.batch, b.cum_grad_evals)
        assert a.floats_up - b.floats_up == cfg.clients_per_round


def test_first_round_neutral():
    res = run_experiment(small_logistic(rounds=1))
    assert len(res.records) == 1
    assert res.records[0].eta == 0.3 and res.records[0].h_bar == 0.0
    two = run_experiment(small_logistic(rounds=2))
    assert two.records[1].eta == 0.3


def test_quadratic_descent_over_200_rounds():
    cfg = small_quadratic(rounds=200, eval_every=50)
    res = run_experiment(cfg)
    p = build_problem(cfg)
    from fathom_sim.objectives import global_loss
    initial = global_loss(p.objective, p.x0, p.clients, "size")
    assert res.summary.final_train_loss < initial


def test_grad_evals_recount_and_monotone_counters():
    res = run_experiment(small_logistic(rounds=25))
    total = 0
    for r in res.records:
        total += sum(k * b for k, b in zip(r.steps, r.batches))
        assert r.cum_grad_evals == total
    assert res.summary.total_grad_evals == total
    assert np.all(np.diff([r.cum_grad_evals for r in res.records]) > 0)


def test_fedavg_never_consults_controller(monkeypatch):
    cfg = small_logistic(algorithm="fedavg")
    before = records_csv(run_experiment(cfg).records)

    def boom(*a, **k):
        raise AssertionError("controller used in fedavg mode")
    monkeypatch.setattr(controller.HyperState, "step", boom)
    assert records_csv(run_experiment(cfg).records) == before
    assert all(r.h_bar is None for r in run_experiment(cfg).records)


def test_emitted_files(tmp_path):
    res = run_experiment(small_logistic(), out_dir=tmp_path)
    rows = read_records_csv(tmp_path / "rounds.csv")
    assert len(rows) == 15 and rows[0]["t"] == 1
    assert rows[-1]["cum_grad_evals"] == res.summary.total_grad_evals
    assert (tmp_path / "summary.json").is_file() and (tmp_path / "config.toml").is_file()
    assert (tmp_path / "rounds.csv").read_bytes().count(b"\r") == 0


def test_divergence_flushes_partial_records(tmp_path):
    cfg = small_quadratic(rounds=60, eta0=1000.0, batch0=100.0, algorithm="fedavg")
    with pytest.raises(DivergenceError) as info:
        run_experiment(cfg, out_dir=tmp_path)
    partial = info.value.result
    assert partial.summary.diverged and 0 < len(partial.records) < 60
    assert len(read_records_csv(tmp_path / "rounds.csv")) == len(partial.records)


def test_grid_singleton_and_divergent_cell():
    cfg = small_quadratic(rounds=40, target_loss=[6.0], eval_mode="holdout")
    p = build_problem(cfg)
    one = grid_search(cfg, [0.1], [5.0], problem=p)
    assert (one.best_eta, one.best_batch) == (0.1, 5.0)
    both = grid_search(cfg.replace(batch0=5.0), [0.5, 5.0], [5.0], problem=p)
    assert both.best_eta == 0.5 and both.reached_target
    bad = next(c for c in both.cells if c.eta == 5.0)
    assert bad.summary.diverged or bad.summary.rounds_to_target[both.target] is None


def test_grid_without_hits_falls_back_to_final_loss():
    cfg = small_logistic(target_loss=[1e-9])
    res = grid_search(cfg, [0.1, 0.3], [10.0])
    assert not res.reached_target
    finals = {c.eta: c.summary.final_eval_loss for c in res.cells}
    assert res.best_eta == min(finals, key=finals.get)
    with pytest.raises(ValueError):
        grid_search(cfg, [], [10.0])


def test_grid_cells_share_samples():
    cfg = small_logistic(rounds=5)
    a = run_experiment(cfg.replace(algorithm="fedavg", eta0=0.1)).records
    b = run_experiment(cfg.replace(algorithm="fedavg", eta0=1.0)).records
    # same clients each round means the same per-round communication and step counts
    assert [r.steps for r in a] == [r.steps for r in b]
