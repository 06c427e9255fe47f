"""Command-line interface: data generation, solving, training, streams and reports."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .data import days_needed, export_csv, generate_synthetic, ingest_csv, task_profile
from .port_model import (InfeasibleInstance, StaticParams, build_real_time, evaluate_cost, load_fixture,
                         load_task_json, solve_hard_demand, validate_schedule)
from .scheduler import InstanceTooLarge, brute_force_tiny, export_solution_json, solve_logistics


def _task(spec: str, T: int):
    if spec.isdigit():
        return load_fixture(int(spec), StaticParams(T=T))
    return load_task_json(spec)


def cmd_gen_data(a) -> int:
    prof = task_profile(a.task) if a.task else None
    ds = generate_synthetic(a.seed, a.days, prof, name=Path(a.out).stem)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    export_csv(ds, a.out)
    print(f"wrote {ds.hours} hourly rows to {a.out}")
    return 0


def cmd_solve(a) -> int:
    task = _task(a.task, a.T)
    T = task.T
    if a.data:
        ds = ingest_csv(a.data)
    else:
        tid = task.id if 1 <= task.id <= 6 else 1
        ds = generate_synthetic(a.seed, max(14, a.day + 2 + (T + 23) // 24), task_profile(tid))
    pi, p = ds.window(a.day, T)
    try:
        da = brute_force_tiny(task, pi, p) if a.mode == "exact" else solve_logistics(task, pi, p)
    except (InstanceTooLarge, InfeasibleInstance) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rt, pt = solve_hard_demand(lambda soft: build_real_time(task, da, pi, p, soft))
    cost = evaluate_cost(da.P_b, pt.x[rt.var_blocks["P_b_prime"]], pi, task.static.rho_plus, task.static.rho_minus)
    viol = validate_schedule(task, da)
    print(json.dumps({"task": task.id, "day": a.day, "mode": a.mode, "objective": da.objective,
                      "realised_cost": cost, "violations": [str(v) for v in viol]}, indent=1))
    if a.out:
        export_solution_json(da, a.out)
    return 0 if not viol else 1


def cmd_train(a) -> int:
    from .forecaster import ForecasterPair
    from .soft_knn import MemoryBank
    from .trainer import FisherState, TrainMode, evaluate, eval_indices, train_task

    cfg = bench.load_config(a.config)
    hyper = cfg.hyper_for(cfg.seed_list[0] if cfg.seed_list else 0)
    td = bench.load_task_data(a.task, cfg)
    pair = ForecasterPair.load(a.init) if a.init else None
    fisher = FisherState.load(a.fisher) if a.fisher else None
    bank = MemoryBank(hyper.knn_metric, hyper.knn_k, hyper.mem_cap or None)
    res = train_task(pair, td, TrainMode(a.mode), hyper, fisher=fisher, bank=bank)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    res.pair.save(out / "model.json")
    res.log.to_csv(out / "trainlog.csv")
    if not res.fisher.empty:
        res.fisher.save(out / "fisher.json")
    ev = evaluate(res.pair, td, eval_indices(td, cfg.eval_days), hyper.sched)
    (out / f"eval_task{a.task}.json").write_text(json.dumps(ev.to_dict()))
    print(json.dumps({"mode": a.mode, "task": a.task, "train_s": res.wall_s, "skipped": res.skipped,
                      "mean_regret": ev.mean_regret, "mae_price": ev.mae_price, "mae_load": ev.mae_load}, indent=1))
    return 0


def cmd_stream(a) -> int:
    cfg = bench.load_config(a.config)
    rep = bench.run_stream(cfg, a.out)
    _print_summary(rep)
    return 0 if not rep.aborted else 1


def cmd_eval(a) -> int:
    run = Path(a.run_dir)
    old = bench.StreamReport.load(run)
    new = bench.recompute(run)
    worst = 0.0
    for r_old, r_new in zip(old.rows, new.rows):
        for f in ("mean_regret", "cum_regret", "rr", "fm"):
            worst = max(worst, abs(r_old[f] - r_new[f]) / max(1.0, abs(r_old[f])))
    new.save(run)
    print(f"recomputed {len(new.rows)} rows from stored forecasts; max relative change {worst:.2e}")
    _print_summary(new)
    return 0


def cmd_gradcheck(a) -> int:
    from .gradcheck import run_suite

    res = run_suite(a.suite, a.seed)
    print(json.dumps(res))
    return 0 if res["passed"] else 1


def cmd_report(a) -> int:
    run = Path(a.run_dir)
    rep = bench.StreamReport.load(run)
    if a.format == "csv":
        rep.to_csv(run / "report.csv")
        print((run / "report.csv").read_text(), end="")
    elif a.format == "json":
        doc = {"summary": bench.summarize(rep), **rep.to_dict()}
        print(json.dumps(doc, indent=1))
    else:
        for p in bench.plot_report(rep, run / "plots"):
            print(p)
    return 0


def _print_summary(rep) -> None:
    cols = ("mode", "seeds", "mae_price", "mae_load", "mean_regret", "cum_regret", "rr", "fm", "cum_train_s")
    print("  ".join(f"{c:>12}" for c in cols))
    for s in bench.summarize(rep):
        print("  ".join(f"{s[c]:>12.3f}" if isinstance(s[c], float) else f"{s[c]:>12}" for c in cols))
    for seed, gaps in rep.transfer.items():
        print(f"seed {seed} transfer gaps: " + ", ".join(f"task {t}: {g['gap']:.2f}%" for t, g in gaps.items()))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="portdfcl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic hourly CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--days", type=int, default=days_needed(402, 400))
    p.add_argument("--task", type=int, default=0, help="use this task's generator profile")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("solve", help="schedule one day with perfect foresight")
    p.add_argument("--task", required=True, help="fixture id 1..6 or a task JSON file")
    p.add_argument("--day", type=int, default=7)
    p.add_argument("--mode", choices=("exact", "heuristic"), default="heuristic")
    p.add_argument("--seed", type=int, default=0, help="synthetic data seed")
    p.add_argument("--data", help="hourly CSV instead of synthetic data")
    p.add_argument("--T", type=int, default=32)
    p.add_argument("--out", help="write the day-ahead solution as JSON")
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("train", help="train one task under one mode")
    p.add_argument("--mode", required=True)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--init", help="starting model checkpoint")
    p.add_argument("--fisher", help="starting FisherState checkpoint")
    p.add_argument("--out", default="train_out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("stream", help="run the continual-learning benchmark")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_stream)

    p = sub.add_parser("eval", help="recompute a run's report from stored forecasts")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--suite", choices=("autodiff", "qp", "softknn", "pipeline"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="emit a run's report")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--format", choices=("csv", "json", "plots"), default="csv")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return a.fn(a)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
