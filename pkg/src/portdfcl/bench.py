"""Continual-learning benchmark over a task stream.

For every (mode, seed) cell the runner trains on the tasks in order, and after
task k evaluates the current model on the test sets of tasks 1..k.  Regrets
are always recomputed through the evaluation pipeline from the stored
forecasts.  Everything lands under one run directory::

    run_dir/config.txt
    run_dir/report.csv, report.json
    run_dir/<mode>/seed<s>/task<id>/{model.json,trainlog.csv,fisher.json}
    run_dir/<mode>/seed<s>/task<id>/eval_task<j>.json
    run_dir/transfer.json
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Dataset, SyntheticProfile, days_needed, generate_synthetic, ingest_csv, task_profile
from .forecaster import ForecasterPair
from .metrics import metric_fm, metric_gap, metric_rr
from .port_model import StaticParams, load_fixture
from .scheduler import SearchConfig
from .soft_knn import MemoryBank
from .trainer import (EvalResult, FisherState, Hyper, TaskData, TrainingDiverged, TrainMode, TrainResult,
                      consolidate, ensure_memory, eval_indices, eval_pipeline, evaluate, train_task)

log = logging.getLogger(__name__)

CONTINUAL = (TrainMode.DFL_Adam, TrainMode.DFCL_AdamF, TrainMode.DFCL_EWC)
REPORT_FIELDS = ("mode", "seed", "k", "task_id", "mae_price", "mae_load", "mean_regret", "cum_regret",
                 "cum_cost", "rr", "fm", "train_s", "cum_train_s")


@dataclass
class StreamConfig:
    """Benchmark configuration; every key may be set in a ``key = value`` file."""

    modes: str = "SBL,DFL_taskwise,DFL_Adam,DFCL_AdamF,DFCL_EWC,Joint"
    seeds: str = "0,1,2"
    tasks: str = "1,2,3,4,5,6"
    T: int = 32
    n_train: int = 402
    n_test: int = 400
    eval_days: int = 100  # evenly spaced test days per task, 0 = all
    data_seed: int = 0
    data_dir: str = ""  # CSV files task<id>.csv (or shared.csv); synthetic data when empty
    data_mode: str = "per_task"  # per_task: a generator profile per task; shared: one series for every task
    transfer: bool = True
    hyper: Hyper = field(default_factory=Hyper)

    @property
    def mode_list(self) -> list[TrainMode]:
        return [TrainMode(m.strip()) for m in self.modes.split(",") if m.strip()]

    @property
    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    @property
    def task_list(self) -> list[int]:
        return [int(t) for t in self.tasks.split(",") if t.strip()]

    def hyper_for(self, seed: int) -> Hyper:
        return Hyper(**{**asdict(self.hyper), "seed": seed})

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self) if f.name != "hyper"]
        lines += [f"{k} = {v}" for k, v in asdict(self.hyper).items() if k != "seed"]
        return "\n".join(lines) + "\n"


def _coerce(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_config(text: str) -> StreamConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    base = StreamConfig()
    top = {f.name: getattr(base, f.name) for f in fields(base) if f.name != "hyper"}
    hyp = {k: v for k, v in asdict(base.hyper).items() if k != "seed"}
    vals_top, vals_hyp = {}, {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in top:
            vals_top[key] = _coerce(value, top[key], key)
        elif key in hyp:
            vals_hyp[key] = _coerce(value, hyp[key], key)
        else:
            raise ValueError(f"config line {n}: unknown key {key!r}")
    cfg = StreamConfig(**vals_top, hyper=Hyper(**{**hyp, **vals_hyp}))
    cfg.mode_list, cfg.seed_list  # validate
    if any(t not in range(1, 7) for t in cfg.task_list):
        raise ValueError("tasks must be fixture ids 1..6")
    if cfg.data_mode not in ("shared", "per_task"):
        raise ValueError("data_mode must be 'shared' or 'per_task'")
    return cfg


def load_config(path) -> StreamConfig:
    return parse_config(Path(path).read_text()) if path else StreamConfig()


def load_dataset(task_id: int, cfg: StreamConfig) -> Dataset:
    shared = cfg.data_mode == "shared"
    if cfg.data_dir:
        return ingest_csv(Path(cfg.data_dir) / ("shared.csv" if shared else f"task{task_id}.csv"))
    days = days_needed(cfg.n_train, cfg.n_test, cfg.T)
    if shared:
        return generate_synthetic(1000 * cfg.data_seed, days, SyntheticProfile(), name="shared")
    return generate_synthetic(1000 * cfg.data_seed + task_id, days, task_profile(task_id), name=f"task{task_id}")


def load_task_data(task_id: int, cfg: StreamConfig, ds: Dataset | None = None) -> TaskData:
    task = load_fixture(task_id, StaticParams(T=cfg.T))
    ds = ds if ds is not None else load_dataset(task_id, cfg)
    tr, te = ds.split(cfg.n_train, cfg.n_test, cfg.T)
    return TaskData(task, ds, tr, te)


def load_stream_data(cfg: StreamConfig) -> dict:
    shared = load_dataset(cfg.task_list[0], cfg) if cfg.data_mode == "shared" else None
    return {tid: load_task_data(tid, cfg, shared) for tid in cfg.task_list}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class StreamReport:
    rows: list = field(default_factory=list)
    history: dict = field(default_factory=dict)  # "mode/seed" -> regret history matrix (ragged)
    transfer: dict = field(default_factory=dict)  # seed -> {task: {transfer, specific, gap}}
    aborted: dict = field(default_factory=dict)  # "mode/seed" -> message

    def select(self, mode=None, seed=None, k=None) -> list[dict]:
        mode = None if mode is None else TrainMode(mode).value
        return [r for r in self.rows if (mode is None or r["mode"] == mode) and (seed is None or r["seed"] == seed)
                and (k is None or r["k"] == k)]

    def final(self, mode, seed) -> dict:
        rows = self.select(mode, seed)
        return max(rows, key=lambda r: r["k"])

    def to_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in REPORT_FIELDS})

    def to_dict(self) -> dict:
        return {"rows": self.rows, "history": self.history, "transfer": self.transfer, "aborted": self.aborted}

    def save(self, run_dir) -> None:
        run_dir = Path(run_dir)
        self.to_csv(run_dir / "report.csv")
        (run_dir / "report.json").write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, run_dir) -> "StreamReport":
        d = json.loads((Path(run_dir) / "report.json").read_text())
        return cls(d["rows"], d["history"], {int(k): v for k, v in d["transfer"].items()}, d.get("aborted", {}))


def checkpoint_row(mode, seed, k, task_id, evals: list[EvalResult], history, train_s, cum_train_s) -> dict:
    """Metrics after the k-th task from evaluations on tasks 1..k."""
    cum_regret = float(sum(e.regrets.sum() for e in evals))
    cum_cost = float(sum(e.costs.sum() for e in evals))
    return {"mode": TrainMode(mode).value, "seed": int(seed), "k": int(k), "task_id": int(task_id),
            "mae_price": float(np.mean([e.mae_price for e in evals])),
            "mae_load": float(np.mean([e.mae_load for e in evals])),
            "mean_regret": float(np.mean([e.mean_regret for e in evals])),
            "cum_regret": cum_regret, "cum_cost": cum_cost, "rr": metric_rr(cum_regret, cum_cost),
            "fm": float(metric_fm(history)) if k >= 2 else 0.0, "train_s": float(train_s), "cum_train_s": float(cum_train_s)}


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

class SeedContext:
    """Per-seed caches shared by all modes: fresh models, memory sets and evaluations."""

    def __init__(self, seed, cfg, tds, run_dir):
        self.seed = seed
        self.cfg = cfg
        self.hyper = cfg.hyper_for(seed)
        self.tds = tds
        self.bank = MemoryBank(self.hyper.knn_metric, self.hyper.knn_k, self.hyper.mem_cap or None)
        self.fresh: dict = {}
        self.first_fisher: dict = {}
        self.evals: dict = {}
        self.idx = {tid: eval_indices(td, cfg.eval_days) for tid, td in tds.items()}
        self.sched = self.hyper.sched

    def fresh_model(self, mode: TrainMode, tid: int) -> TrainResult:
        """Fresh SBL or DFL model for one task, trained once per seed."""
        key = (TrainMode.SBL if mode is TrainMode.SBL else TrainMode.DFL_taskwise, tid)
        if key not in self.fresh:
            ensure_memory(self.bank, self.tds[tid], self.hyper)
            self.fresh[key] = train_task(None, self.tds[tid], key[0], self.hyper, bank=self.bank)
        return self.fresh[key]

    def ewc_start(self, tid: int) -> FisherState:
        if tid not in self.first_fisher:
            res = self.fresh_model(TrainMode.DFL_taskwise, tid)
            t0 = time.perf_counter()
            st = FisherState(ewc_scale=self.hyper.ewc_scale, mode=self.hyper.fisher)
            consolidate(st, res.pair, self.tds[tid], ensure_memory(self.bank, self.tds[tid], self.hyper), self.hyper)
            self.first_fisher[tid] = (st, time.perf_counter() - t0)
        return self.first_fisher[tid]

    def evaluate(self, pair: ForecasterPair, tid: int) -> EvalResult:
        key = (id(pair), tid)
        if key not in self.evals:
            self.evals[key] = (pair, evaluate(pair, self.tds[tid], self.idx[tid], self.sched))
        return self.evals[key][1]


def _save_checkpoint(d: Path, res: TrainResult, fisher: FisherState | None, evals: dict):
    d.mkdir(parents=True, exist_ok=True)
    res.pair.save(d / "model.json")
    res.log.to_csv(d / "trainlog.csv")
    if fisher is not None and not fisher.empty:
        fisher.save(d / "fisher.json")
    for j, e in evals.items():
        (d / f"eval_task{j}.json").write_text(json.dumps(e.to_dict()))


def run_cell(ctx: SeedContext, mode: TrainMode, report: StreamReport, run_dir: Path | None):
    cfg, hyper, tasks = ctx.cfg, ctx.hyper, ctx.cfg.task_list
    pair, fisher, seen = None, None, []
    history, cum_train = [], 0.0
    own: dict = {}  # DFL_taskwise: task -> its own model
    for k, tid in enumerate(tasks, start=1):
        td = ctx.tds[tid]
        ensure_memory(ctx.bank, td, hyper)  # scheduler labels are shared data, kept out of the timings
        if mode in (TrainMode.SBL, TrainMode.DFL_taskwise) or (k == 1 and mode in CONTINUAL):
            res = ctx.fresh_model(mode, tid)
            train_s = res.wall_s
            if mode is TrainMode.DFCL_EWC:
                fisher, extra = ctx.ewc_start(tid)
                train_s += extra
        else:
            res = train_task(pair, td, mode, hyper, fisher=fisher, bank=ctx.bank, seen=seen)
            train_s = res.wall_s
            if mode is TrainMode.DFCL_EWC:
                fisher = res.fisher
        pair = res.pair
        seen.append(td)
        own[tid] = pair
        cum_train += train_s
        models = {j: (own[j] if mode is TrainMode.DFL_taskwise else pair) for j in tasks[:k]}
        evals = {j: ctx.evaluate(m, j) for j, m in models.items()}
        history.append([evals[j].mean_regret for j in tasks[:k]])
        row = checkpoint_row(mode, ctx.seed, k, tid, list(evals.values()), history, train_s, cum_train)
        report.rows.append(row)
        log.info("%s seed %d task %d: mean regret %.2f rr %.2f%% fm %.2f (%.0f s)", mode.value, ctx.seed, tid,
                 row["mean_regret"], row["rr"], row["fm"], train_s)
        if run_dir is not None:
            _save_checkpoint(run_dir / mode.value / f"seed{ctx.seed}" / f"task{tid}", res,
                             fisher if mode is TrainMode.DFCL_EWC else None, evals)
    report.history[f"{mode.value}/{ctx.seed}"] = history


def transfer_gaps(ctx: SeedContext) -> dict:
    """Task-1 DFL model evaluated on later tasks against each task's own DFL model."""
    tasks = ctx.cfg.task_list
    src = ctx.fresh_model(TrainMode.DFL_taskwise, tasks[0]).pair
    out = {}
    for tid in tasks[1:]:
        own = ctx.fresh_model(TrainMode.DFL_taskwise, tid).pair
        r_t = ctx.evaluate(src, tid).mean_regret
        r_s = ctx.evaluate(own, tid).mean_regret
        out[tid] = {"transfer": r_t, "specific": r_s, "gap": metric_gap(r_t, r_s)}
    return out


def run_stream(cfg: StreamConfig, run_dir=None, tds: dict | None = None, contexts: dict | None = None) -> StreamReport:
    """Run every (mode, seed) cell; a diverging cell is logged and skipped.

    ``contexts``, when given, receives the per-seed :class:`SeedContext` so
    callers can reuse its trained models and evaluations.
    """
    run_dir = Path(run_dir) if run_dir else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(cfg.to_text())
    tds = tds or load_stream_data(cfg)
    report = StreamReport()
    for seed in cfg.seed_list:
        ctx = SeedContext(seed, cfg, tds, run_dir)
        if contexts is not None:
            contexts[seed] = ctx
        for mode in cfg.mode_list:
            try:
                run_cell(ctx, mode, report, run_dir)
            except TrainingDiverged as exc:
                log.error("%s seed %d aborted: %s", mode.value, seed, exc)
                report.aborted[f"{mode.value}/{seed}"] = str(exc)
        if cfg.transfer and len(cfg.task_list) > 1:
            report.transfer[seed] = transfer_gaps(ctx)
    if run_dir is not None:
        report.save(run_dir)
        if report.transfer:
            (run_dir / "transfer.json").write_text(json.dumps(report.transfer, indent=1))
    return report


# ---------------------------------------------------------------------------
# recomputation and plots
# ---------------------------------------------------------------------------

def recompute(run_dir, tds: dict | None = None) -> StreamReport:
    """Rebuild the report from stored forecasts by re-running the evaluation pipeline."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.txt")
    tds = tds or load_stream_data(cfg)
    old = StreamReport.load(run_dir)
    report = StreamReport(transfer=old.transfer, aborted=old.aborted)
    cache: dict = {}
    for seed in cfg.seed_list:
        hyper = cfg.hyper_for(seed)
        sched = hyper.sched
        for mode in cfg.mode_list:
            if f"{mode.value}/{seed}" in old.aborted:
                continue
            history = []
            for k, tid in enumerate(cfg.task_list, start=1):
                d = run_dir / mode.value / f"seed{seed}" / f"task{tid}"
                evals = []
                for j in cfg.task_list[:k]:
                    e = json.loads((d / f"eval_task{j}.json").read_text())
                    td = tds[j]
                    pos = np.searchsorted(td.test_days, e["days"])
                    costs, perfect = [], []
                    for n, i in enumerate(pos):
                        pi, p = td.truth("test", int(i))
                        pi_hat = np.asarray(e["forecasts_price"][n])
                        p_hat = np.asarray(e["forecasts_load"][n])
                        key = (j, int(i), pi_hat.tobytes(), p_hat.tobytes())
                        if key not in cache:
                            cache[key] = eval_pipeline(td.task, pi_hat, p_hat, pi, p, sched)
                        costs.append(cache[key])
                        pkey = (j, int(i))
                        if pkey not in cache:
                            cache[pkey] = eval_pipeline(td.task, pi, p, pi, p, sched)
                        perfect.append(cache[pkey])
                    fp, fl = np.asarray(e["forecasts_price"]), np.asarray(e["forecasts_load"])
                    y_p, y_l = td.y["test"]["price"][pos], td.y["test"]["load"][pos]
                    evals.append(EvalResult(j, np.asarray(e["days"]), fp, fl, np.array(costs), np.array(perfect),
                                            float(np.mean(np.abs(fp - y_p))), float(np.mean(np.abs(fl - y_l)))))
                history.append([ev.mean_regret for ev in evals])
                prev = [r for r in old.rows if r["mode"] == mode.value and r["seed"] == seed and r["k"] == k]
                train_s = prev[0]["train_s"] if prev else float("nan")
                cum = prev[0]["cum_train_s"] if prev else float("nan")
                report.rows.append(checkpoint_row(mode, seed, k, tid, evals, history, train_s, cum))
            report.history[f"{mode.value}/{seed}"] = history
    return report


def plot_report(report: StreamReport, out_dir) -> list[Path]:
    """Regret trajectories per mode and per-task training time, as PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modes = list(dict.fromkeys(r["mode"] for r in report.rows))
    paths = []
    for metric, fname, label in (("mean_regret", "regret_trajectories.png", "mean test regret"),
                                 ("train_s", "timing.png", "training time per task [s]")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for m in modes:
            ks = sorted({r["k"] for r in report.rows if r["mode"] == m})
            vals = [np.mean([r[metric] for r in report.rows if r["mode"] == m and r["k"] == k]) for k in ks]
            ax.plot(ks, vals, marker="o", label=m)
        ax.set_xlabel("task index k")
        ax.set_ylabel(label)
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out_dir / fname, dpi=120)
        plt.close(fig)
        paths.append(out_dir / fname)
    return paths


def summarize(report: StreamReport) -> list[dict]:
    """Final-checkpoint metrics per mode, averaged over seeds."""
    out = []
    for m in dict.fromkeys(r["mode"] for r in report.rows):
        seeds = sorted({r["seed"] for r in report.rows if r["mode"] == m})
        fin = [report.final(m, s) for s in seeds]
        out.append({"mode": m, "seeds": len(seeds),
                    **{f: float(np.mean([r[f] for r in fin])) for f in
                       ("mae_price", "mae_load", "mean_regret", "cum_regret", "rr", "fm", "cum_train_s")}})
    return out
