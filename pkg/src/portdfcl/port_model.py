"""Port power-logistics model: domain types, day-ahead and real-time programs.

Time is split into ``T`` hourly slots ``0..T-1``.  A vessel berthed over
``t_in..t_out`` (inclusive) occupies the quay during hours ``[t_in, t_out+1)``,
so its deadline reads ``t_out + 1 ≤ max_leave_time`` and its berthing length is
``D = t_out - t_in + 1`` slots with

    ceil(N / (η_qc C_max)) ≤ D ≤ ceil(N / (η_qc C_min)).

Day-ahead decision vector (continuous part)::

    P_b, P_b', ΔP⁺, ΔP⁻, P_ES.ch, P_ES.dch, E (T+1), P_chg (admissible slots)

With the discrete part fixed to (P_QC, V), the day-ahead problem is an LP whose
data are affine in η = [π̂, p̂, P_QC, V].  The real-time program re-dispatches
shore charging with η = [P_b, P_ES.ch − P_ES.dch, P_QC, V].
"""
from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .conic import NONNEG, ZERO, ConicProgram, ProgramBuilder
from .fixtures import COLUMNS, fixture_rows

log = logging.getLogger(__name__)


class InfeasibleInstance(ValueError):
    """Static data admit no feasible schedule."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StaticParams:
    T: int = 32
    n_cranes: int = 10
    crane_rated_power: float = 0.32  # MW
    crane_efficiency: float = 70.0  # TEU/h
    berth_length: float = 800.0  # m
    ess_pmax: float = 5.0  # MW
    e_min: float = 0.0  # MWh
    e_max: float = 15.0  # MWh
    e_init: float | None = None  # defaults to the midpoint
    eta_ch: float = 0.9
    eta_dch: float = 0.9
    rho_plus: float = 1.8
    rho_minus: float = 0.5
    grid_limit: float = 100.0  # MW, bound on the day-ahead bid
    demand_penalty: float = 1000.0  # currency/MWh, soft charging-demand mode only

    def __post_init__(self):
        if self.e_init is None:
            object.__setattr__(self, "e_init", self.e_min + 0.5 * (self.e_max - self.e_min))
        if not (self.rho_plus >= 1.0 >= self.rho_minus >= 0.0):
            raise ValueError("need rho_plus >= 1 >= rho_minus >= 0")
        if not (self.e_min <= self.e_init <= self.e_max):
            raise ValueError("need e_min <= e_init <= e_max")
        if not (0 < self.eta_ch <= 1 and 0 < self.eta_dch <= 1):
            raise ValueError("efficiencies must lie in (0, 1]")


@dataclass(frozen=True)
class VesselSpec:
    arrival_time: int
    max_leave_time: int
    cargo_volume: float
    min_quay_crane: int
    max_quay_crane: int
    base_power_load: float
    charge_power_demand: float
    charge_power_max: float
    length: float
    max_waiting_time: int

    def __post_init__(self):
        if self.arrival_time >= self.max_leave_time:
            raise ValueError("arrival_time must precede max_leave_time")
        if not (1 <= self.min_quay_crane <= self.max_quay_crane):
            raise ValueError("need 1 <= min_quay_crane <= max_quay_crane")
        if self.charge_power_demand == 0 and self.charge_power_max != 0:
            raise ValueError("charge_power_max must be 0 when there is no charging demand")

    @classmethod
    def from_dict(cls, d: dict) -> "VesselSpec":
        missing = [c for c in COLUMNS if c not in d]
        if missing:
            raise KeyError(f"vessel row missing columns {missing}")
        ints = {"arrival_time", "max_leave_time", "min_quay_crane", "max_quay_crane", "max_waiting_time"}
        return cls(**{c: int(d[c]) if c in ints else float(d[c]) for c in COLUMNS})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Task:
    id: int
    static: StaticParams
    vessels: tuple[VesselSpec, ...]
    dataset: str = ""

    def __post_init__(self):
        T = self.static.T
        fixed = []
        for v in self.vessels:
            if v.max_leave_time > T:
                log.warning("task %s: deadline %d clamped to horizon %d", self.id, v.max_leave_time, T)
                v = replace(v, max_leave_time=T)
            if v.length > self.static.berth_length:
                raise InfeasibleInstance(f"vessel length {v.length} exceeds berth length "
                                         f"{self.static.berth_length}")
            if v.max_quay_crane > self.static.n_cranes:
                raise InfeasibleInstance("max_quay_crane exceeds the number of cranes")
            fixed.append(v)
        object.__setattr__(self, "vessels", tuple(fixed))

    @property
    def J(self) -> int:
        return len(self.vessels)

    @property
    def T(self) -> int:
        return self.static.T

    def min_slots(self, j: int) -> int:
        v = self.vessels[j]
        return int(math.ceil(v.cargo_volume / (self.static.crane_efficiency * v.max_quay_crane) - 1e-9))

    def max_slots(self, j: int) -> int:
        v = self.vessels[j]
        return int(math.ceil(v.cargo_volume / (self.static.crane_efficiency * v.min_quay_crane) - 1e-9))

    def window(self, j: int) -> tuple[int, int]:
        """First and last slot (inclusive) in which vessel j may be at berth."""
        v = self.vessels[j]
        return v.arrival_time, min(v.max_leave_time, self.T) - 1

    def t_in_range(self, j: int) -> tuple[int, int]:
        v = self.vessels[j]
        lo, hi = self.window(j)
        return v.arrival_time, min(v.arrival_time + v.max_waiting_time, hi + 1 - self.min_slots(j))

    @functools.cached_property
    def admissible(self) -> list[tuple[int, int]]:
        """(vessel, slot) pairs where V may be nonzero, ordered by vessel then slot."""
        out = []
        for j in range(self.J):
            lo, hi = self.window(j)
            out.extend((j, t) for t in range(lo, hi + 1))
        return out

    @functools.cached_property
    def adm_index(self) -> np.ndarray:
        """J×T array mapping (j, t) to its admissible position, -1 if inadmissible."""
        idx = -np.ones((self.J, self.T), dtype=np.int64)
        for i, (j, t) in enumerate(self.admissible):
            idx[j, t] = i
        return idx

    def v_to_adm(self, V) -> np.ndarray:
        V = np.asarray(V, dtype=np.float64)
        mask = self.adm_index >= 0
        if np.any(np.abs(V[~mask]) > 1e-12):
            raise ValueError("V has nonzero entries outside the admissible window")
        return V[mask]

    def adm_to_v(self, v_adm) -> np.ndarray:
        V = np.zeros((self.J, self.T))
        V[self.adm_index >= 0] = v_adm
        return V

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "dataset": self.dataset, "static": asdict(self.static),
                           "vessels": [v.to_dict() for v in self.vessels]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Task":
        d = json.loads(text)
        static = StaticParams(**d.get("static", {}))
        return cls(d.get("id", 0), static, tuple(VesselSpec.from_dict(r) for r in d["vessels"]),
                   d.get("dataset", ""))


def load_fixture(task_id: int, static: StaticParams | None = None) -> Task:
    rows = fixture_rows(task_id)
    return Task(task_id, static or StaticParams(), tuple(VesselSpec.from_dict(r) for r in rows),
                dataset=f"synthetic-task{task_id}")


def load_task_json(path) -> Task:
    return Task.from_json(Path(path).read_text())


def check_static_feasibility(task: Task) -> None:
    """Raise :class:`InfeasibleInstance` for data that no schedule can satisfy."""
    K = task.static.n_cranes
    forced = np.zeros(task.T)
    for j, v in enumerate(task.vessels):
        lo, hi = task.t_in_range(j)
        if lo > hi:
            raise InfeasibleInstance(f"vessel {j}: cannot finish {v.cargo_volume} TEU before its deadline")
        if task.max_slots(j) < task.min_slots(j):
            raise InfeasibleInstance(f"vessel {j}: empty berthing-duration range")
        w_lo, w_hi = task.window(j)
        cap = v.charge_power_max * min(task.max_slots(j), w_hi - w_lo + 1)
        if cap + 1e-9 < v.charge_power_demand:
            raise InfeasibleInstance(f"vessel {j}: charging demand exceeds deliverable energy")
        # slots in which the vessel is at berth under every admissible plan
        f_lo, f_hi = hi, lo + task.min_slots(j) - 1
        if f_lo <= f_hi:
            forced[f_lo:f_hi + 1] += v.min_quay_crane
    if np.any(forced > K):
        t = int(np.argmax(forced > K))
        raise InfeasibleInstance(f"slot {t}: forced minimum crane count {forced[t]:.0f} exceeds {K}")


# ---------------------------------------------------------------------------
# discrete assignment and solutions
# ---------------------------------------------------------------------------

@dataclass
class DiscreteAssignment:
    berth: np.ndarray  # (J,) m
    t_in: np.ndarray  # (J,) slot
    t_out: np.ndarray  # (J,) last berthed slot
    cranes: np.ndarray  # (J, T) crane counts σ_jt
    C: np.ndarray | None = None  # (K, J, T) binary, filled by assign_crane_indices

    @property
    def V(self) -> np.ndarray:
        J, T = self.cranes.shape
        t = np.arange(T)[None, :]
        return ((t >= self.t_in[:, None]) & (t <= self.t_out[:, None])).astype(np.float64)

    def qc_power(self, static: StaticParams) -> np.ndarray:
        return static.crane_rated_power * self.cranes.sum(axis=0)

    def to_dict(self) -> dict:
        return {"berth": self.berth.tolist(), "t_in": self.t_in.tolist(), "t_out": self.t_out.tolist(),
                "cranes": self.cranes.tolist()}

    @classmethod
    def from_dict(cls, d: dict, K: int | None = None) -> "DiscreteAssignment":
        a = cls(np.asarray(d["berth"], float), np.asarray(d["t_in"], int), np.asarray(d["t_out"], int),
                np.asarray(d["cranes"], int))
        if K is not None:
            assign_crane_indices(a, K)
        return a


def assign_crane_indices(a: DiscreteAssignment, K: int) -> np.ndarray:
    """Give each berthed vessel a contiguous block of crane indices per slot.

    Blocks follow berth order along the quay, so cranes never cross.
    """
    J, T = a.cranes.shape
    C = np.zeros((K, J, T), dtype=np.int8)
    order = np.argsort(a.berth, kind="stable")
    for t in range(T):
        k = 0
        for j in order:
            n = int(a.cranes[j, t])
            if n:
                C[k:k + n, j, t] = 1
                k += n
    a.C = C
    return C


@dataclass
class ScheduleSolution:
    P_b: np.ndarray
    P_b_prime: np.ndarray
    P_ch: np.ndarray
    P_dch: np.ndarray
    P_QC: np.ndarray
    P_s: np.ndarray
    P_chg: np.ndarray  # (J, T)
    E: np.ndarray  # (T+1,)
    discrete: DiscreteAssignment | None
    objective: float
    net_load: np.ndarray  # net load used in the power balance
    price: np.ndarray  # price the objective was evaluated on
    info: dict = field(default_factory=dict)

    @property
    def V(self) -> np.ndarray:
        return self.discrete.V

    def to_dict(self) -> dict:
        out = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()
               if k not in ("discrete", "info")}
        out["info"] = {k: v for k, v in self.info.items() if isinstance(v, (int, float, str, bool))}
        out["discrete"] = None if self.discrete is None else self.discrete.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict, K: int | None = None) -> "ScheduleSolution":
        kw = {k: (np.asarray(v, dtype=float) if isinstance(v, list) else v) for k, v in d.items()
              if k != "discrete"}
        kw["objective"] = float(kw["objective"])
        disc = None if d.get("discrete") is None else DiscreteAssignment.from_dict(d["discrete"], K)
        return cls(discrete=disc, **kw)


def evaluate_cost(P_b, P_b_prime, pi, rho_plus: float = 1.8, rho_minus: float = 0.5) -> float:
    """Settlement cost πᵀP_b + ρ⁺πᵀΔP⁺ − ρ⁻πᵀΔP⁻ with ΔP = P_b' − P_b split into parts."""
    P_b = np.asarray(P_b, dtype=np.float64)
    d = np.asarray(P_b_prime, dtype=np.float64) - P_b
    pi = np.asarray(pi, dtype=np.float64)
    if not (P_b.shape == d.shape == pi.shape):
        raise ValueError("P_b, P_b' and pi must have equal lengths")
    return float(pi @ P_b + rho_plus * (pi @ np.maximum(d, 0.0)) - rho_minus * (pi @ np.maximum(-d, 0.0)))


# ---------------------------------------------------------------------------
# conic programs
# ---------------------------------------------------------------------------

def _charging_pairs(task: Task) -> np.ndarray:
    """Admissible positions of vessels that can draw charging power."""
    return np.array([i for i, (j, t) in enumerate(task.admissible)
                     if task.vessels[j].charge_power_max > 0], dtype=np.int64)


def _shore_rows(b: ProgramBuilder, task: Task, bal_rows, chg, chg_pos, eta_v, soft: bool):
    """Shore-power coupling, charging bounds and demand rows shared by both stages."""
    adm = task.admissible
    ves = task.vessels
    # power balance: -Σ_j V_jt chg_jt on the left, Σ_j base_j V_jt on the right
    for i, (j, t) in enumerate(adm):
        b.rhs_eta(bal_rows[t], eta_v[i], ves[j].base_power_load)
    for col, pos in zip(chg, chg_pos):
        j, t = adm[pos]
        b.coef_eta(bal_rows[t], col, eta_v[pos], -1.0)
    # 0 ≤ chg ≤ P_max V
    if chg.size:
        r = b.rows("charge_lower", chg.size, NONNEG)
        b.coef(r, chg, -1.0)
        r = b.rows("charge_upper", chg.size, NONNEG)
        b.coef(r, chg, 1.0)
        b.rhs_eta(r, eta_v[chg_pos], [ves[adm[p][0]].charge_power_max for p in chg_pos])
    # Σ_t chg_jt ≥ demand
    dem = [j for j in range(task.J) if ves[j].charge_power_demand > 0]
    slack = b.var("demand_slack", len(dem)) if soft else None
    if dem:
        r = b.rows("charge_demand", len(dem), NONNEG)
        owner = np.array([adm[p][0] for p in chg_pos], dtype=np.int64)
        for row, j in zip(r, dem):
            cols = chg[owner == j]
            b.coef(np.full(cols.size, row), cols, -1.0)
            b.rhs(row, -ves[j].charge_power_demand)
        if soft:
            b.coef(r, slack, -1.0)
            b.cost(slack, task.static.demand_penalty)
            b.bound("demand_slack", slack, lo=0.0)


@functools.lru_cache(maxsize=64)
def day_ahead_template(task: Task, soft_demand: bool = False) -> ConicProgram:
    """Convexified day-ahead LP with η = [π̂, p̂, P_QC, V_adm] (η left at zero)."""
    st, T = task.static, task.T
    n_adm = len(task.admissible)
    b = ProgramBuilder()
    e_pi = b.eta_block("pi", T)
    e_p = b.eta_block("p", T)
    e_qc = b.eta_block("P_QC", T)
    e_v = b.eta_block("V", n_adm)
    Pb = b.var("P_b", T)
    Pbp = b.var("P_b_prime", T)
    dp = b.var("dP_plus", T)
    dm = b.var("dP_minus", T)
    ch = b.var("P_ch", T)
    dch = b.var("P_dch", T)
    E = b.var("E", T + 1)
    chg_pos = _charging_pairs(task)
    chg = b.var("P_chg", chg_pos.size)

    b.cost_eta(Pb, e_pi, 1.0)
    b.cost_eta(dp, e_pi, st.rho_plus)
    b.cost_eta(dm, e_pi, -st.rho_minus)

    r = b.rows("imbalance_split", T, ZERO)
    b.coef(r, dp, 1.0)
    b.coef(r, dm, -1.0)
    b.coef(r, Pbp, -1.0)
    b.coef(r, Pb, 1.0)
    bal = b.rows("power_balance", T, ZERO)
    b.coef(bal, Pbp, 1.0)
    b.coef(bal, ch, -1.0)
    b.coef(bal, dch, 1.0)
    b.rhs_eta(bal, e_qc, 1.0)
    b.rhs_eta(bal, e_p, 1.0)
    _shore_rows(b, task, bal, chg, chg_pos, e_v, soft_demand)

    r = b.rows("ess_initial", 1, ZERO)
    b.coef(r, E[0], 1.0)
    b.rhs(r, st.e_init)
    r = b.rows("ess_dynamics", T, ZERO)
    b.coef(r, E[1:], 1.0)
    b.coef(r, E[:-1], -1.0)
    b.coef(r, ch, -st.eta_ch)
    b.coef(r, dch, 1.0 / st.eta_dch)
    b.bound("ess_energy", E[1:], lo=st.e_min, hi=st.e_max)
    r = b.rows("ess_terminal", 1, NONNEG)
    b.coef(r, E[T], -1.0)
    b.rhs(r, -st.e_init)
    b.bound("ess_charge", ch, lo=0.0, hi=st.ess_pmax)
    b.bound("ess_discharge", dch, lo=0.0, hi=st.ess_pmax)
    b.bound("imbalance_plus", dp, lo=0.0, hi=2 * st.grid_limit)
    b.bound("imbalance_minus", dm, lo=0.0, hi=2 * st.grid_limit)
    b.bound("grid_limit", Pb, lo=-st.grid_limit, hi=st.grid_limit)
    return b.build(meta={"stage": "day_ahead", "chg_pos": chg_pos, "soft_demand": soft_demand})


@functools.lru_cache(maxsize=64)
def real_time_template(task: Task, soft_demand: bool = False) -> ConicProgram:
    """Real-time LP with η = [P_b, P_ch − P_dch, P_QC, V_adm]; π and p enter as data.

    The price-dependent cost is inserted by :func:`build_real_time`.
    """
    st, T = task.static, task.T
    n_adm = len(task.admissible)
    b = ProgramBuilder()
    e_pb = b.eta_block("P_b", T)
    e_ess = b.eta_block("ess_net", T)
    e_qc = b.eta_block("P_QC", T)
    e_v = b.eta_block("V", n_adm)
    Pbp = b.var("P_b_prime", T)
    dp = b.var("dP_plus", T)
    dm = b.var("dP_minus", T)
    chg_pos = _charging_pairs(task)
    chg = b.var("P_chg", chg_pos.size)

    r = b.rows("imbalance_split", T, ZERO)
    b.coef(r, dp, 1.0)
    b.coef(r, dm, -1.0)
    b.coef(r, Pbp, -1.0)
    b.rhs_eta(r, e_pb, -1.0)
    bal = b.rows("power_balance", T, ZERO)
    b.coef(bal, Pbp, 1.0)
    b.rhs_eta(bal, e_qc, 1.0)
    b.rhs_eta(bal, e_ess, 1.0)
    _shore_rows(b, task, bal, chg, chg_pos, e_v, soft_demand)
    b.bound("imbalance_plus", dp, lo=0.0, hi=4 * st.grid_limit)
    b.bound("imbalance_minus", dm, lo=0.0, hi=4 * st.grid_limit)
    return b.build(meta={"stage": "real_time", "chg_pos": chg_pos, "soft_demand": soft_demand})


def _with_data(prog: ConicProgram, q0=None, b0=None) -> ConicProgram:
    return ConicProgram(prog.q0 if q0 is None else q0, prog.A0, prog.b0 if b0 is None else b0,
                        prog.cones, prog.p_diag, prog.Q, prog.B, prog.dA, prog.eta.copy(),
                        prog.var_blocks, prog.row_blocks, prog.eta_blocks, dict(prog.meta))


def real_time_program(task: Task, pi, p, soft_demand: bool = False) -> ConicProgram:
    """Real-time template with the realised price and net load inserted (η still free)."""
    st, T = task.static, task.T
    tmpl = real_time_template(task, soft_demand)
    pi = np.asarray(pi, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    q0 = tmpl.q0.copy()
    q0[tmpl.var_blocks["dP_plus"]] += st.rho_plus * pi
    q0[tmpl.var_blocks["dP_minus"]] -= st.rho_minus * pi
    b0 = tmpl.b0.copy()
    b0[tmpl.row_blocks["power_balance"]] += p
    prog = _with_data(tmpl, q0, b0)
    prog.meta.update(pi=pi, p=p)
    return prog


def day_ahead_eta(task: Task, pi_hat, p_hat, P_QC, V) -> np.ndarray:
    return np.concatenate([np.asarray(pi_hat, float), np.asarray(p_hat, float),
                           np.asarray(P_QC, float), task.v_to_adm(V)])


@dataclass
class MixedIntegerProgram:
    """Big-M mixed-integer description of the full day-ahead problem.

    Rows read ``row_lo ≤ A x ≤ row_hi``; variable bounds ``lb ≤ x ≤ ub``.
    """
    c: np.ndarray
    A: sp.csr_matrix
    row_lo: np.ndarray
    row_hi: np.ndarray
    row_names: list
    lb: np.ndarray
    ub: np.ndarray
    integer: np.ndarray
    var_blocks: dict
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.c.size

    def violations(self, x, tol: float = 1e-6) -> list[tuple[str, float]]:
        ax = self.A @ x
        out = []
        bad = np.where((ax < self.row_lo - tol) | (ax > self.row_hi + tol))[0]
        for i in bad:
            mag = max(self.row_lo[i] - ax[i], ax[i] - self.row_hi[i])
            out.append((self.row_names[i], float(mag)))
        vb = np.where((x < self.lb - tol) | (x > self.ub + tol))[0]
        out.extend(("variable_bound", float(max(self.lb[i] - x[i], x[i] - self.ub[i]))) for i in vb)
        frac = np.where(self.integer & (np.abs(x - np.round(x)) > tol))[0]
        out.extend(("integrality", float(abs(x[i] - round(x[i])))) for i in frac)
        return out

    def encode(self, task: Task, sol: ScheduleSolution) -> np.ndarray:
        """Map a schedule onto this variable layout (all auxiliary binaries included)."""
        a = sol.discrete
        if a.C is None:
            assign_crane_indices(a, task.static.n_cranes)
        x = np.zeros(self.n)
        vb = self.var_blocks
        T = task.T
        t = np.arange(T)[None, :]
        put = {"P_b": sol.P_b, "P_b_prime": sol.P_b_prime,
               "dP_plus": np.maximum(sol.P_b_prime - sol.P_b, 0), "dP_minus": np.maximum(sol.P_b - sol.P_b_prime, 0),
               "P_ch": sol.P_ch, "P_dch": sol.P_dch, "E": sol.E, "P_QC": sol.P_QC, "P_s": sol.P_s,
               "P_chg": sol.P_chg.ravel(), "t_in": a.t_in, "t_out": a.t_out, "berth": a.berth,
               "v": a.V.ravel(), "after_in": (t >= a.t_in[:, None]).ravel(),
               "before_out": (t <= a.t_out[:, None]).ravel(), "c": a.C.ravel()}
        for k, v in put.items():
            x[vb[k]] = np.asarray(v, dtype=float).ravel()
        pairs = self.meta["pairs"]
        lens = np.array([v.length for v in task.vessels])
        sl, st_ = [], []
        for i, j in pairs:
            sl.append([a.berth[i] + lens[i] <= a.berth[j], a.berth[j] + lens[j] <= a.berth[i]])
            st_.append([a.t_out[i] < a.t_in[j], a.t_out[j] < a.t_in[i]])
        if pairs:
            x[vb["left_of"]] = np.asarray(sl, float).ravel()
            x[vb["before"]] = np.asarray(st_, float).ravel()
        return x


class _MipBuilder:
    def __init__(self):
        self.n = 0
        self.blocks = {}
        self.lb, self.ub, self.integer = [], [], []
        self.r, self.c, self.v = [], [], []
        self.lo, self.hi, self.names = [], [], []

    def var(self, name, shape, lb, ub, integer=False):
        size = int(np.prod(shape))
        idx = np.arange(self.n, self.n + size).reshape(shape)
        self.blocks[name] = slice(self.n, self.n + size)
        self.n += size
        self.lb.extend(np.broadcast_to(lb, (size,)).tolist())
        self.ub.extend(np.broadcast_to(ub, (size,)).tolist())
        self.integer.extend([integer] * size)
        return idx

    def row(self, name, cols, vals, lo=-np.inf, hi=np.inf):
        i = len(self.lo)
        cols = np.atleast_1d(cols).ravel()
        vals = np.broadcast_to(vals, cols.shape)
        self.r.extend([i] * cols.size)
        self.c.extend(cols.tolist())
        self.v.extend(np.asarray(vals, float).tolist())
        self.lo.append(lo)
        self.hi.append(hi)
        self.names.append(name)


def build_mixed_integer(task: Task, pi_hat, p_hat) -> MixedIntegerProgram:
    st, T, J, K = task.static, task.T, task.J, task.static.n_cranes
    ves = task.vessels
    pi_hat = np.asarray(pi_hat, float)
    p_hat = np.asarray(p_hat, float)
    G = st.grid_limit
    Mt, Ml = float(T), float(st.berth_length)
    b = _MipBuilder()
    Pb = b.var("P_b", T, -G, G)
    Pbp = b.var("P_b_prime", T, -np.inf, np.inf)
    dp = b.var("dP_plus", T, 0, 2 * G)
    dm = b.var("dP_minus", T, 0, 2 * G)
    ch = b.var("P_ch", T, 0, st.ess_pmax)
    dch = b.var("P_dch", T, 0, st.ess_pmax)
    E = b.var("E", T + 1, st.e_min, st.e_max)
    pqc = b.var("P_QC", T, 0, np.inf)
    ps = b.var("P_s", T, -np.inf, np.inf)
    chg = b.var("P_chg", (J, T), 0, np.inf)
    tin = b.var("t_in", J, 0, T - 1, True)
    tout = b.var("t_out", J, 0, T - 1, True)
    berth = b.var("berth", J, 0, st.berth_length, True)
    v = b.var("v", (J, T), 0, 1, True)
    a_in = b.var("after_in", (J, T), 0, 1, True)
    d_out = b.var("before_out", (J, T), 0, 1, True)
    c = b.var("c", (K, J, T), 0, 1, True)
    pairs = [(i, j) for i in range(J) for j in range(i + 1, J)]
    left = b.var("left_of", (len(pairs), 2), 0, 1, True)
    before = b.var("before", (len(pairs), 2), 0, 1, True)

    cost = np.zeros(b.n)
    cost[Pb] = pi_hat
    cost[dp] = st.rho_plus * pi_hat
    cost[dm] = -st.rho_minus * pi_hat

    for t in range(T):
        b.row("imbalance_split", [dp[t], dm[t], Pbp[t], Pb[t]], [1, -1, -1, 1], 0, 0)
        b.row("power_balance", [Pbp[t], ps[t], pqc[t], dch[t], ch[t]], [1, -1, -1, 1, -1], p_hat[t], p_hat[t])
        b.row("ess_dynamics", [E[t + 1], E[t], ch[t], dch[t]], [1, -1, -st.eta_ch, 1 / st.eta_dch], 0, 0)
        b.row("qc_power", np.concatenate([[pqc[t]], c[:, :, t].ravel()]),
              np.concatenate([[1.0], np.full(K * J, -st.crane_rated_power)]), 0, 0)
        # chg ≤ P_max v makes chg ⊙ v = chg exact
        b.row("shore_power", np.concatenate([[ps[t]], v[:, t], chg[:, t]]),
              np.concatenate([[1.0], [-x.base_power_load for x in ves], -np.ones(J)]), 0, 0)
    b.row("ess_initial", [E[0]], [1.0], st.e_init, st.e_init)
    b.row("ess_terminal", [E[T]], [1.0], st.e_init, np.inf)
    for j, x in enumerate(ves):
        lo, hi = task.window(j)
        b.row("arrival", [tin[j]], [1], x.arrival_time)
        b.row("max_wait", [tin[j]], [1], hi=x.arrival_time + x.max_waiting_time)
        b.row("deadline", [tout[j]], [1], hi=hi)
        b.row("duration_min", [tout[j], tin[j]], [1, -1], task.min_slots(j) - 1)
        b.row("duration_max", [tout[j], tin[j]], [1, -1], hi=task.max_slots(j) - 1)
        b.row("berth_bounds", [berth[j]], [1], 0, st.berth_length - x.length)
        b.row("charge_demand", chg[j], 1.0, x.charge_power_demand)
        for t in range(T):
            # after_in = 1 ⇔ t_in ≤ t ; before_out = 1 ⇔ t ≤ t_out
            b.row("indicator_in", [tin[j], a_in[j, t]], [1, Mt], t + 1 - 0.0, t + Mt)
            b.row("indicator_out", [tout[j], d_out[j, t]], [-1, Mt], 1 - t, Mt - t)
            b.row("berthing_link", [v[j, t], a_in[j, t]], [1, -1], hi=0)
            b.row("berthing_link", [v[j, t], d_out[j, t]], [1, -1], hi=0)
            b.row("berthing_link", [v[j, t], a_in[j, t], d_out[j, t]], [1, -1, -1], -1)
            b.row("crane_count_min", np.concatenate([c[:, j, t], [v[j, t]]]),
                  np.concatenate([np.ones(K), [-x.min_quay_crane]]), 0)
            b.row("crane_count_max", np.concatenate([c[:, j, t], [v[j, t]]]),
                  np.concatenate([np.ones(K), [-x.max_quay_crane]]), hi=0)
            b.row("charge_bound", [chg[j, t], v[j, t]], [1, -x.charge_power_max], hi=0)
            for k in range(1, K - 1):
                b.row("crane_contiguity", [c[k + 1, j, t], c[k - 1, j, t], c[k, j, t]], [1, 1, -1], hi=1)
    for k in range(K):
        for t in range(T):
            b.row("crane_exclusive", c[k, :, t], 1.0, hi=1)
    lens = [x.length for x in ves]
    for p, (i, j) in enumerate(pairs):
        b.row("berth_space", [berth[i], berth[j], left[p, 0]], [1, -1, Ml], hi=Ml - lens[i])
        b.row("berth_space", [berth[j], berth[i], left[p, 1]], [1, -1, Ml], hi=Ml - lens[j])
        b.row("berth_time", [tout[i], tin[j], before[p, 0]], [1, -1, Mt], hi=Mt - 1)
        b.row("berth_time", [tout[j], tin[i], before[p, 1]], [1, -1, Mt], hi=Mt - 1)
        b.row("berth_disjunction", [left[p, 0], left[p, 1], before[p, 0], before[p, 1]], 1.0, 1)
    A = sp.csr_matrix((b.v, (b.r, b.c)), shape=(len(b.lo), b.n))
    return MixedIntegerProgram(cost, A, np.asarray(b.lo, float), np.asarray(b.hi, float), b.names,
                               np.asarray(b.lb, float), np.asarray(b.ub, float), np.asarray(b.integer),
                               b.blocks, {"pairs": pairs, "big_m_time": Mt, "big_m_space": Ml})


def build_day_ahead(task: Task, pi_hat, p_hat, fix=None, soft_demand: bool = False):
    """Day-ahead problem for forecasts (π̂, p̂).

    With ``fix = (P_QC, V)`` returns the convexified :class:`ConicProgram`
    (V may be fractional); otherwise the big-M :class:`MixedIntegerProgram`.
    """
    T = task.T
    pi_hat = np.asarray(pi_hat, float)
    p_hat = np.asarray(p_hat, float)
    if pi_hat.shape != (T,) or p_hat.shape != (T,):
        raise ValueError(f"forecasts must have length {T}")
    check_static_feasibility(task)
    if fix is None:
        return build_mixed_integer(task, pi_hat, p_hat)
    P_QC, V = fix
    V = np.asarray(V, float)
    if V.shape != (task.J, T):
        raise ValueError(f"V must have shape {(task.J, T)}")
    if np.any(V < -1e-12) or np.any(V > 1 + 1e-12):
        raise ValueError("V entries must lie in [0, 1]")
    return day_ahead_template(task, soft_demand).with_eta(day_ahead_eta(task, pi_hat, p_hat, P_QC, V))


def build_real_time(task: Task, day_ahead: ScheduleSolution, pi, p, soft_demand: bool = False) -> ConicProgram:
    """Real-time LP given the day-ahead plan; only shore charging and P_b' remain free."""
    V = day_ahead.discrete.V if day_ahead.discrete is not None else None
    if V is None:
        raise ValueError("day-ahead solution carries no discrete assignment")
    if not soft_demand:
        for j, x in enumerate(task.vessels):
            cap = x.charge_power_max * V[j].sum()
            if cap + 1e-9 < x.charge_power_demand:
                raise InfeasibleInstance(f"vessel {j}: berthing plan cannot deliver charging demand "
                                         f"({cap:.3f} < {x.charge_power_demand:.3f} MWh)")
    prog = real_time_program(task, pi, p, soft_demand)
    eta = np.concatenate([day_ahead.P_b, day_ahead.P_ch - day_ahead.P_dch, day_ahead.P_QC, task.v_to_adm(V)])
    out = prog.with_eta(eta)
    out.meta.update(prog.meta)
    return out


def solve_hard_demand(make, eps: float = 0.0):
    """Solve ``make(False)``; if that fails numerically, solve ``make(True)`` and require zero slack.

    A hard charging-demand row admits no strict interior when a vessel's demand
    equals its charging capacity, which interior-point duals cannot handle.  The
    soft form always has an interior and shares the optimum whenever its slack
    is zero.
    """
    from . import qp

    prog = make(False)
    try:
        return prog, qp.solve(prog, eps=eps)
    except qp.SolverError as exc:
        if isinstance(exc, qp.Unbounded):
            raise
        first = exc
    prog = make(True)
    pt = qp.solve(prog, eps=eps)
    slack = pt.x[prog.var_blocks["demand_slack"]] if "demand_slack" in prog.var_blocks else np.zeros(0)
    if slack.size and slack.max() > 1e-6:
        raise InfeasibleInstance(f"charging demand cannot be met ({first})")
    return prog, pt


def chg_matrix(task: Task, prog: ConicProgram, x) -> np.ndarray:
    M = np.zeros((task.J, task.T))
    pos = prog.meta["chg_pos"]
    vals = x[prog.var_blocks["P_chg"]]
    adm = task.admissible
    for p, val in zip(pos, vals):
        j, t = adm[p]
        M[j, t] = val
    return M


def _shore_power(task: Task, V, chg):
    base = np.array([x.base_power_load for x in task.vessels])
    return ((base[:, None] + chg) * V).sum(axis=0)


def day_ahead_solution(task: Task, prog: ConicProgram, x, discrete: DiscreteAssignment,
                       objective: float | None = None) -> ScheduleSolution:
    T = task.T
    eta = prog.eta
    P_QC = eta[prog.eta_blocks["P_QC"]]
    V = task.adm_to_v(eta[prog.eta_blocks["V"]])
    chg = chg_matrix(task, prog, x)
    vb = prog.var_blocks
    obj = prog.objective(x) if objective is None else objective
    return ScheduleSolution(x[vb["P_b"]].copy(), x[vb["P_b_prime"]].copy(), x[vb["P_ch"]].copy(),
                            x[vb["P_dch"]].copy(), P_QC.copy(), _shore_power(task, V, chg), chg,
                            x[vb["E"]].copy(), discrete, float(obj), eta[prog.eta_blocks["p"]].copy(),
                            eta[prog.eta_blocks["pi"]].copy())


def real_time_solution(task: Task, day_ahead: ScheduleSolution, prog: ConicProgram, x) -> ScheduleSolution:
    vb = prog.var_blocks
    chg = chg_matrix(task, prog, x)
    V = day_ahead.discrete.V
    pi = prog.meta["pi"]
    Pbp = x[vb["P_b_prime"]].copy()
    st = task.static
    return ScheduleSolution(day_ahead.P_b.copy(), Pbp, day_ahead.P_ch.copy(), day_ahead.P_dch.copy(),
                            day_ahead.P_QC.copy(), _shore_power(task, V, chg), chg, day_ahead.E.copy(),
                            day_ahead.discrete, evaluate_cost(day_ahead.P_b, Pbp, pi, st.rho_plus, st.rho_minus),
                            np.asarray(prog.meta["p"]).copy(), pi.copy())


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    constraint: str
    row: int
    magnitude: float


def validate_schedule(task: Task, sol: ScheduleSolution, tol: float = 1e-6) -> list[Violation]:
    """Check every constraint group; an empty list means the schedule is feasible."""
    st, T, J, K = task.static, task.T, task.J, task.static.n_cranes
    out: list[Violation] = []

    def check(name, excess, offset=0):
        excess = np.atleast_1d(np.asarray(excess, dtype=float)).ravel()
        for i in np.where(excess > tol)[0]:
            out.append(Violation(name, int(i) + offset, float(excess[i])))

    E = sol.E
    check("ess_initial", abs(E[0] - st.e_init))
    check("ess_dynamics", np.abs(E[1:] - E[:-1] - st.eta_ch * sol.P_ch + sol.P_dch / st.eta_dch))
    check("ess_energy_max", E - st.e_max)
    check("ess_energy_min", st.e_min - E)
    check("ess_terminal", st.e_init - E[T])
    check("ess_power", np.maximum(np.maximum(sol.P_ch - st.ess_pmax, -sol.P_ch),
                                  np.maximum(sol.P_dch - st.ess_pmax, -sol.P_dch)))
    check("grid_limit", np.abs(sol.P_b) - st.grid_limit)
    a = sol.discrete
    if a is None:
        out.append(Violation("discrete_missing", 0, 1.0))
        return out
    V = a.V
    sigma = a.cranes
    check("power_balance", np.abs(sol.P_b_prime - (sol.P_s + sol.P_QC - sol.P_dch + sol.P_ch + sol.net_load)))
    check("qc_power", np.abs(sol.P_QC - st.crane_rated_power * sigma.sum(axis=0)))
    check("shore_power", np.abs(sol.P_s - _shore_power(task, V, sol.P_chg)))
    for j, x in enumerate(task.vessels):
        lo, hi = task.window(j)
        check("arrival", x.arrival_time - a.t_in[j], j)
        check("max_wait", a.t_in[j] - x.arrival_time - x.max_waiting_time, j)
        check("deadline", a.t_out[j] - hi, j)
        dur = a.t_out[j] - a.t_in[j] + 1
        check("duration_min", task.min_slots(j) - dur, j)
        check("duration_max", dur - task.max_slots(j), j)
        check("crane_count_min", (x.min_quay_crane * V[j] - sigma[j]), j * T)
        check("crane_count_max", (sigma[j] - x.max_quay_crane * V[j]), j * T)
        check("berth_bounds", max(-a.berth[j], a.berth[j] + x.length - st.berth_length), j)
        check("charge_bound", np.maximum(sol.P_chg[j] - x.charge_power_max * V[j], -sol.P_chg[j]), j * T)
        check("charge_demand", x.charge_power_demand - sol.P_chg[j].sum(), j)
    check("crane_total", sigma.sum(axis=0) - K)
    if a.C is not None:
        C = a.C
        check("crane_assignment", np.abs(C.sum(axis=0) - sigma))
        check("crane_exclusive", C.sum(axis=1) - 1)
        contig = C[2:] + C[:-2] - C[1:-1] - 1
        check("crane_contiguity", contig)
    for i in range(J):
        for j in range(i + 1, J):
            li, lj = task.vessels[i].length, task.vessels[j].length
            s_ov = min(a.berth[i] + li, a.berth[j] + lj) - max(a.berth[i], a.berth[j])
            t_ov = min(a.t_out[i], a.t_out[j]) - max(a.t_in[i], a.t_in[j]) + 1
            if s_ov > tol and t_ov > 0:
                out.append(Violation("berth_overlap", i * J + j, float(s_ov)))
    return out


def gantt_rows(task: Task, sol: ScheduleSolution) -> list[dict]:
    a = sol.discrete
    rows = []
    for j in range(task.J):
        slots = ";".join(f"{t}:{int(a.cranes[j, t])}" for t in range(task.T) if a.cranes[j, t] > 0)
        rows.append({"vessel": j, "t_in": int(a.t_in[j]), "t_out": int(a.t_out[j]),
                     "berth_pos": float(a.berth[j]), "crane_slots": slots})
    return rows
