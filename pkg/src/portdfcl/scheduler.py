"""Discrete day-ahead scheduling: heuristic search, exhaustive oracle, memory sets.

Given berthing intervals, the remaining discrete choices decompose: cranes
beyond ``C_min`` only add load (the duration bounds already encode the
handling work), and shore charging fills the cheapest berthed slots.  Candidates are scored with
these marginal costs; the continuous part of the final plan is then re-solved
exactly by the LP in :mod:`portdfcl.qp`.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import qp
from .port_model import (DiscreteAssignment, InfeasibleInstance, ScheduleSolution, Task,
                         assign_crane_indices, build_day_ahead, check_static_feasibility,
                         day_ahead_solution, gantt_rows, solve_hard_demand)

log = logging.getLogger(__name__)


class TimeBudgetExceeded(RuntimeError):
    pass


class InstanceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    restarts: int = 3
    time_budget_ms: float = 20000.0
    seed: int = 0
    max_sweeps: int = 20

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


# ---------------------------------------------------------------------------
# candidate scoring
# ---------------------------------------------------------------------------

def marginal_prices(pi) -> np.ndarray:
    """Marginal cost of one extra MW in each slot under the bid-follows-plan optimum."""
    return np.asarray(pi, dtype=np.float64).copy()


class _Scorer:
    """Per-task cache of vessel candidates and their stand-alone costs."""

    def __init__(self, task: Task, m: np.ndarray):
        self.task = task
        self.m = m
        st = task.static
        self.K = st.n_cranes
        self.rated = st.crane_rated_power
        self.T = task.T
        self.cands: list[list[tuple[int, int]]] = []
        self.cost: list[np.ndarray] = []
        self.usage: list[np.ndarray] = []  # (n_cand, T) crane counts under stand-alone allocation
        for j, v in enumerate(task.vessels):
            lo, hi = task.window(j)
            t_lo, t_hi = task.t_in_range(j)
            cl, cost, use = [], [], []
            for t_in in range(t_lo, t_hi + 1):
                for D in range(task.min_slots(j), task.max_slots(j) + 1):
                    t_out = t_in + D - 1
                    if t_out > hi:
                        break
                    c, u = self._standalone(j, t_in, t_out)
                    if not math.isfinite(c):
                        continue
                    cl.append((t_in, t_out))
                    cost.append(c)
                    use.append(u)
            if not cl:
                raise InfeasibleInstance(f"vessel {j} has no admissible berthing interval")
            order = np.argsort(cost, kind="stable")
            self.cands.append([cl[i] for i in order])
            self.cost.append(np.asarray(cost)[order])
            self.usage.append(np.asarray(use)[order])

    def _slots_by_price(self, t_in, t_out):
        ts = np.arange(t_in, t_out + 1)
        return ts[np.argsort(self.m[ts], kind="stable")]

    def _standalone(self, j, t_in, t_out):
        # extra cranes only add load, so a berthed vessel runs at its minimum crane count
        v = self.task.vessels[j]
        m = self.m
        use = np.zeros(self.T)
        use[t_in:t_out + 1] = v.min_quay_crane
        cost = self.rated * (m @ use) + v.base_power_load * m[t_in:t_out + 1].sum()
        need = v.charge_power_demand
        if need > 0:
            for t in self._slots_by_price(t_in, t_out):
                q = min(v.charge_power_max, need)
                cost += q * m[t]
                need -= q
                if need <= 1e-12:
                    break
            if need > 1e-9:
                return math.inf, use
        return float(cost), use

    def evaluate(self, choice) -> tuple[float, np.ndarray | None]:
        """Total cost and crane matrix for candidate indices ``choice`` (inf if infeasible)."""
        J = self.task.J
        usage = np.array([self.usage[j][choice[j]] for j in range(J)])
        if np.any(usage.sum(axis=0) > self.K):
            return math.inf, None
        return float(sum(self.cost[j][choice[j]] for j in range(J))), usage


# ---------------------------------------------------------------------------
# berth packing
# ---------------------------------------------------------------------------

def _pack(L, lens, t_in, t_out, max_nodes=20000):
    """Backtracking berth placement; candidate positions are 0 and right edges of neighbours."""
    lens = np.asarray(lens, float)
    n = lens.size
    order = list(np.lexsort((-lens, t_in)))
    pos = np.full(n, np.nan)
    nodes = [0]

    def place(k):
        if k == n:
            return True
        j = order[k]
        nb = [i for i in order[:k] if t_in[i] <= t_out[j] and t_in[j] <= t_out[i]]
        cands = sorted({0.0} | {pos[i] + lens[i] for i in nb})
        for x in cands:
            if x + lens[j] > L + 1e-9:
                break
            if any(min(x + lens[j], pos[i] + lens[i]) - max(x, pos[i]) > 1e-9 for i in nb):
                continue
            nodes[0] += 1
            if nodes[0] > max_nodes:
                return False
            pos[j] = x
            if place(k + 1):
                return True
            pos[j] = np.nan
        return False

    return pos.copy() if place(0) else None


def pack_berths(task: Task, t_in, t_out) -> np.ndarray | None:
    """Berth positions on a 1 m grid for the given intervals; None if none found."""
    lens = [v.length for v in task.vessels]
    return _pack(task.static.berth_length, lens, np.asarray(t_in), np.asarray(t_out))


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

def _interval_arrays(sc: _Scorer, choice):
    iv = np.array([sc.cands[j][c] for j, c in enumerate(choice)], dtype=np.int64)
    return iv[:, 0], iv[:, 1]


def _feasible(task, sc, choice):
    cost, usage = sc.evaluate(choice)
    if not math.isfinite(cost):
        return math.inf, None, None
    t_in, t_out = _interval_arrays(sc, choice)
    pos = pack_berths(task, t_in, t_out)
    if pos is None:
        return math.inf, None, None
    return cost, usage, pos


def _greedy(task, sc, order, max_nodes=20000):
    """Cheapest-first construction in ``order`` with backtracking on dead ends."""
    J = task.J
    choice = [None] * J
    nodes = [0]

    def extend(k):
        if k == len(order):
            return True
        j = order[k]
        for c in range(len(sc.cands[j])):
            nodes[0] += 1
            if nodes[0] > max_nodes:
                return False
            choice[j] = c
            if _partial_ok(task, sc, choice, order[:k + 1]) and extend(k + 1):
                return True
        choice[j] = None
        return False

    return list(choice) if extend(0) else None


def _partial_ok(task, sc, choice, sub):
    """Feasibility of the vessels in ``sub`` only."""
    K = sc.K
    load = np.zeros(task.T)
    for j in sub:
        a, b = sc.cands[j][choice[j]]
        load[a:b + 1] += task.vessels[j].min_quay_crane
    if np.any(load > K):
        return False
    lens = [task.vessels[j].length for j in sub]
    sub_task_in = np.array([sc.cands[j][choice[j]][0] for j in sub])
    sub_task_out = np.array([sc.cands[j][choice[j]][1] for j in sub])
    return _pack_subset(task.static.berth_length, lens, sub_task_in, sub_task_out)


def _pack_subset(L, lens, t_in, t_out):
    return _pack(L, lens, t_in, t_out) is not None


def _local_search(task, sc, choice, deadline, trace):
    best, _, _ = _feasible(task, sc, choice)
    if not math.isfinite(best):
        return choice, best
    J = task.J
    improved = True
    sweeps = 0
    while improved and sweeps < 50:
        improved = False
        sweeps += 1
        # single-vessel moves: shift t_in / change berthing length
        for j in range(J):
            cur = choice[j]
            for c in range(len(sc.cands[j])):
                if c == cur or (c > cur and sc.cost[j][c] >= sc.cost[j][cur]):
                    continue
                trial = list(choice)
                trial[j] = c
                val, _, _ = _feasible(task, sc, trial)
                if val < best - 1e-9:
                    choice, best = trial, val
                    trace.append(best)
                    improved = True
                    break
            if time.perf_counter() > deadline:
                raise TimeBudgetExceeded
        if improved:
            continue
        # pair moves: re-time two vessels jointly (changes berth order / crane sharing)
        for i, j in itertools.combinations(range(J), 2):
            top_i = range(min(len(sc.cands[i]), choice[i] + 1))
            top_j = range(min(len(sc.cands[j]), choice[j] + 1))
            done = False
            for ci in top_i:
                for cj in top_j:
                    if ci == choice[i] and cj == choice[j]:
                        continue
                    trial = list(choice)
                    trial[i], trial[j] = ci, cj
                    val, _, _ = _feasible(task, sc, trial)
                    if val < best - 1e-9:
                        choice, best = trial, val
                        trace.append(best)
                        improved = done = True
                        break
                if done:
                    break
            if done:
                break
            if time.perf_counter() > deadline:
                raise TimeBudgetExceeded
    return choice, best


def search_assignment(task: Task, pi, cfg: SearchConfig = SearchConfig()) -> tuple[DiscreteAssignment, dict]:
    """Best discrete assignment found by greedy construction and local search."""
    check_static_feasibility(task)
    sc = _Scorer(task, marginal_prices(pi))
    rng = np.random.default_rng(cfg.seed)
    deadline = time.perf_counter() + cfg.time_budget_ms / 1000.0
    J = task.J
    deadlines = [task.window(j)[1] for j in range(J)]
    orders = [list(np.lexsort((np.arange(J), deadlines)))]
    for _ in range(cfg.restarts - 1):
        # jittered deadline order keeps restarts close to the EDF construction
        key = np.asarray(deadlines, float) + rng.uniform(0.0, 4.0, J)
        orders.append(list(np.argsort(key, kind="stable")))
    best_choice, best_val = None, math.inf
    trace: list[float] = []
    timed_out = False
    for order in orders:
        choice = _greedy(task, sc, order, max_nodes=2000 if best_choice is not None else 50000)
        if choice is None:
            continue
        try:
            choice, val = _local_search(task, sc, choice, deadline, trace)
        except TimeBudgetExceeded:
            timed_out = True
            val, _, _ = _feasible(task, sc, choice)
        if val < best_val - 1e-9:
            best_choice, best_val = choice, val
        if timed_out:
            break
    if best_choice is None:
        raise InfeasibleInstance("no berth/crane plan satisfies the deadlines")
    cost, usage, pos = _feasible(task, sc, best_choice)
    t_in, t_out = _interval_arrays(sc, best_choice)
    a = DiscreteAssignment(pos, t_in, t_out, usage.astype(np.int64))
    assign_crane_indices(a, task.static.n_cranes)
    return a, {"score": cost, "trace": trace, "timed_out": timed_out}


def solve_fixed(task: Task, pi, p, a: DiscreteAssignment, eps: float = 0.0) -> ScheduleSolution:
    """Solve the continuous day-ahead LP for a fixed discrete assignment."""
    fix = (a.qc_power(task.static), a.V)
    prog, pt = solve_hard_demand(lambda soft: build_day_ahead(task, pi, p, fix=fix, soft_demand=soft), eps)
    return day_ahead_solution(task, prog, pt.x, a, pt.objective)


def solve_logistics(task: Task, pi, p, cfg: SearchConfig = SearchConfig()) -> ScheduleSolution:
    """Heuristic solution of the full day-ahead problem for prices ``pi`` and net load ``p``."""
    a, info = search_assignment(task, pi, cfg)
    sol = solve_fixed(task, pi, p, a)
    sol.info.update(score=info["score"], timed_out=info["timed_out"], improvements=len(info["trace"]))
    sol.info["trace"] = info["trace"]
    if info["timed_out"]:
        log.warning("task %s: time budget exceeded, returning best plan so far", task.id)
    return sol


# ---------------------------------------------------------------------------
# exhaustive oracle
# ---------------------------------------------------------------------------

def brute_force_tiny(task: Task, pi, p) -> ScheduleSolution:
    """Exact optimum by enumerating every discrete assignment (tiny instances only)."""
    st = task.static
    L = int(st.berth_length)
    lens = [int(round(v.length)) for v in task.vessels]
    if task.J > 3 or task.T > 8 or st.n_cranes > 3 or any(L - l + 1 > 8 for l in lens):
        raise InstanceTooLarge("brute force needs J<=3, T<=8, K<=3 and at most 8 berth positions")
    check_static_feasibility(task)
    T, K = task.T, st.n_cranes
    per_vessel = []
    for j, v in enumerate(task.vessels):
        lo, hi = task.window(j)
        opts = []
        for t_in in range(v.arrival_time, min(v.arrival_time + v.max_waiting_time, hi) + 1):
            for t_out in range(t_in, hi + 1):
                D = t_out - t_in + 1
                if not (task.min_slots(j) <= D <= task.max_slots(j)):
                    continue
                if v.charge_power_max * D + 1e-9 < v.charge_power_demand:
                    continue
                for counts in itertools.product(range(v.min_quay_crane, v.max_quay_crane + 1), repeat=D):
                    row = np.zeros(T, dtype=np.int64)
                    row[t_in:t_out + 1] = counts
                    opts.append((t_in, t_out, row))
        per_vessel.append(opts)
    positions = [range(0, L - l + 1) for l in lens]
    cache: dict = {}
    best, best_a = math.inf, None
    for combo in itertools.product(*per_vessel):
        cranes = np.array([c[2] for c in combo], dtype=np.int64).reshape(task.J, T)
        if np.any(cranes.sum(axis=0) > K):
            continue
        t_in = np.array([c[0] for c in combo], dtype=np.int64)
        t_out = np.array([c[1] for c in combo], dtype=np.int64)
        pos = None
        for b in itertools.product(*positions):
            ok = True
            for i in range(task.J):
                for j in range(i + 1, task.J):
                    if t_in[i] <= t_out[j] and t_in[j] <= t_out[i] and \
                            min(b[i] + lens[i], b[j] + lens[j]) > max(b[i], b[j]):
                        ok = False
            if ok:
                pos = np.array(b, dtype=float)
                break
        if pos is None:
            continue
        a = DiscreteAssignment(pos, t_in, t_out, cranes)
        key = (a.V.tobytes(), cranes.sum(axis=0).tobytes())
        if key not in cache:
            try:
                cache[key] = solve_fixed(task, pi, p, a).objective
            except qp.SolverError:
                cache[key] = math.inf
        if cache[key] < best - 1e-9:
            best, best_a = cache[key], a
    if best_a is None:
        raise InfeasibleInstance("no feasible assignment")
    assign_crane_indices(best_a, K)
    sol = solve_fixed(task, pi, p, best_a)
    sol.info["lp_solves"] = len(cache)
    return sol


# ---------------------------------------------------------------------------
# memory set construction and export
# ---------------------------------------------------------------------------

@dataclass
class MemoryEntry:
    features: np.ndarray  # [p̂, π̂]
    P_QC: np.ndarray
    V: np.ndarray  # (J, T)
    t_in: np.ndarray
    t_out: np.ndarray
    task_id: int


def build_memory_set(task: Task, samples, cfg: SearchConfig = SearchConfig()) -> list[MemoryEntry]:
    """Label each (p̂, π̂) sample with the discrete decisions of :func:`search_assignment`."""
    samples = list(samples)
    if not samples:
        raise ValueError("samples must be non-empty")
    out = []
    for p_hat, pi_hat in samples:
        try:
            a, _ = search_assignment(task, pi_hat, cfg)
        except InfeasibleInstance as exc:
            log.warning("memory sample skipped: %s", exc)
            continue
        out.append(MemoryEntry(np.concatenate([p_hat, pi_hat]).astype(float), a.qc_power(task.static),
                               a.V, a.t_in.copy(), a.t_out.copy(), task.id))
    return out


def memory_samples(prices, loads, n_truth: int = 32, n_noisy: int = 32, sigma: float = 0.05,
                   seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Ground-truth days plus Gaussian-perturbed copies (σ relative to signal std)."""
    rng = np.random.default_rng(seed)
    prices = np.asarray(prices, float)
    loads = np.asarray(loads, float)
    n = prices.shape[0]
    idx = rng.choice(n, size=min(n_truth, n), replace=False)
    out = [(loads[i].copy(), prices[i].copy()) for i in sorted(idx)]
    sp_, sl = prices.std(), loads.std()
    for _ in range(n_noisy):
        i = int(rng.integers(n))
        out.append((loads[i] + rng.normal(0, sigma * sl, loads.shape[1]),
                    prices[i] + rng.normal(0, sigma * sp_, prices.shape[1])))
    return out


def export_solution_json(sol: ScheduleSolution, path) -> None:
    Path(path).write_text(json.dumps(sol.to_dict()))


def export_gantt_csv(task: Task, sol: ScheduleSolution, path) -> None:
    rows = gantt_rows(task, sol)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["vessel", "t_in", "t_out", "berth_pos", "crane_slots"])
        w.writeheader()
        w.writerows(rows)
