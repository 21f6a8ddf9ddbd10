"""Command line interface.

Exit codes: 0 success, 2 configuration or input error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ConfigError, RunConfig, parse_config
from .federation import DivergenceError
from .harness import build_problem, grid_search, read_records_csv, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _floats(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None
    if not values or any(v <= 0 for v in values):
        raise ConfigError(f"expected positive comma-separated numbers, got {text!r}")
    return values


def _load(path) -> RunConfig:
    return parse_config(path)


def cmd_run(args) -> int:
    cfg = _load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.algo is not None:
        changes["algorithm"] = args.algo
    if args.rounds is not None:
        changes["rounds"] = args.rounds
    if args.out is not None:
        changes["out_dir"] = args.out
    cfg = cfg.replace(**changes) if changes else cfg
    try:
        result = run_experiment(cfg, out_dir=cfg.out_dir)
    except DivergenceError as exc:
        print(f"error: {exc}; partial metrics in {cfg.out_dir}", file=sys.stderr)
        return EXIT_DIVERGED
    s = result.summary
    print(f"{s.algorithm} seed={s.seed} rounds={s.rounds_completed} "
          f"final_eval_loss={s.final_eval_loss!r} grad_evals={s.total_grad_evals}")
    for label, t in s.rounds_to_target.items():
        print(f"  {label}: {'NA' if t is None else t}")
    print(f"wrote {cfg.out_dir}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _load(args.config)
    etas, batches = _floats(args.eta), _floats(args.batch)
    res = grid_search(cfg, etas, batches)
    label = res.target
    print(f"{'eta':>10} {'batch':>8} {'rounds':>7} {'grad_evals':>11} {'final_eval_loss':>16}")
    rows = []
    for c in res.cells:
        s = c.summary
        t = s.rounds_to_target.get(label) if label else None
        ev = s.grad_evals_to_target.get(label) if label else None
        loss_text = "diverged" if s.diverged else f"{s.final_eval_loss:.6g}"
        print(f"{c.eta:>10g} {c.batch:>8g} {'NA' if t is None else t:>7} "
              f"{'NA' if ev is None else ev:>11} {loss_text:>16}")
        rows.append({"eta": c.eta, "batch": c.batch, "rounds_to_target": t,
                     "grad_evals_to_target": ev, "diverged": s.diverged,
                     "final_eval_loss": s.final_eval_loss})
    flag = "" if res.reached_target else " (no cell reached the target; lowest final eval loss)"
    print(f"best: eta={res.best_eta:g} batch={res.best_batch:g}{flag}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = {"target": label, "reached_target": res.reached_target,
               "best_eta": res.best_eta, "best_batch": res.best_batch, "cells": rows}
        (out / "grid.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _run_dirs(root: Path) -> list[Path]:
    if (root / "summary.json").is_file():
        return [root]
    return sorted(p.parent for p in root.glob("*/summary.json"))


def cmd_report(args) -> int:
    root = Path(args.input)
    dirs = _run_dirs(root)
    if not dirs:
        raise ConfigError(f"no summary.json under {root}")
    summaries = [(d, json.loads((d / "summary.json").read_text())) for d in dirs]
    labels = []
    for _, s in summaries:
        labels += [k for k in s["rounds_to_target"] if k not in labels]
    head = f"{'run':<24} {'algo':<7} {'seed':>5} {'rounds':>7} {'grad_evals':>11}"
    print(head + "".join(f" {lab:>22}" for lab in labels))
    for d, s in summaries:
        cells = []
        for lab in labels:
            t = s["rounds_to_target"].get(lab)
            cells.append(f" {'NA' if t is None else t:>22}")
        name = d.name or str(d)
        print(f"{name:<24} {s['algorithm']:<7} {s['seed']:>5} {s['rounds_completed']:>7} "
              f"{s['total_grad_evals']:>11}" + "".join(cells))
    return EXIT_OK


def cmd_bounds(args) -> int:
    from .theory import Trajectory, estimate_params, write_bound_report

    run_dir = Path(args.input)
    cfg = parse_config(run_dir / "config.toml")
    rows = read_records_csv(run_dir / "rounds.csv")
    if not rows:
        raise ConfigError(f"{run_dir / 'rounds.csv'} has no rounds")
    problem = build_problem(cfg)
    params = estimate_params(problem.objective, problem.clients, problem.x0,
                             rounds=len(rows), batch=max(1, round(cfg.batch0)), seed=cfg.data_seed)
    traj = Trajectory([r["eta"] for r in rows], [r["mean_k"] for r in rows])
    out = Path(args.out) if args.out else run_dir / "bounds.json"
    write_bound_report(out, params, traj)
    print(json.dumps(asdict(params)))
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fathom-sim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one FATHOM or FedAvg experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--algo", choices=("fathom", "fedavg"))
    p.add_argument("--rounds", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="static FedAvg grid search over (eta, batch)")
    p.add_argument("--config", required=True)
    p.add_argument("--eta", required=True, help="comma-separated learning rates")
    p.add_argument("--batch", required=True, help="comma-separated batch sizes")
    p.add_argument("--out", help="directory for grid.json")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="print a rounds-to-target table")
    p.add_argument("--in", dest="input", required=True, help="run directory or a parent of several")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bounds", help="per-round convergence bounds for a finished run")
    p.add_argument("--in", dest="input", required=True, help="run directory")
    p.add_argument("--out", help="output JSON path (default: <run>/bounds.json)")
    p.set_defaults(func=cmd_bounds)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
