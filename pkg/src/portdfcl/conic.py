"""Standard-form conic QP with parameter-affine problem data.

    minimize    ½ xᵀ P x + qᵀ x
    subject to  A x + s = b,   s_i = 0 (zero rows),  s_i ≥ 0 (nonneg rows)

``q``, ``b`` and ``A`` are affine in a parameter vector η:

    q = q0 + Q η,    b = b0 + B η,    A = A0 + Σ_k η_k ∂A_k

where ∂A is stored as sparse triplets (row, col, eta_index, coef).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

ZERO = 0
NONNEG = 1


@dataclass
class ConicProgram:
    q0: np.ndarray
    A0: sp.csr_matrix
    b0: np.ndarray
    cones: np.ndarray  # ZERO / NONNEG per row
    p_diag: np.ndarray  # diagonal of P (Tikhonov term is added by the solver)
    Q: sp.csr_matrix  # n × |η|
    B: sp.csr_matrix  # m × |η|
    dA: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]  # rows, cols, eta_idx, coef
    eta: np.ndarray
    var_blocks: dict = field(default_factory=dict)
    row_blocks: dict = field(default_factory=dict)
    eta_blocks: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._cache = None

    @property
    def n(self) -> int:
        return self.q0.size

    @property
    def m(self) -> int:
        return self.b0.size

    @property
    def n_eta(self) -> int:
        return self.eta.size

    def data(self):
        """Return (q, A, b) instantiated at the current η."""
        if self._cache is None:
            eta = self.eta
            q = self.q0 + self.Q @ eta
            b = self.b0 + self.B @ eta
            r, c, k, coef = self.dA
            if r.size:
                dA = sp.csr_matrix((coef * eta[k], (r, c)), shape=self.A0.shape)
                A = (self.A0 + dA).tocsr()
            else:
                A = self.A0
            self._cache = (q, A, b)
        return self._cache

    def with_eta(self, eta) -> "ConicProgram":
        eta = np.asarray(eta, dtype=np.float64)
        if eta.shape != self.eta.shape:
            raise ValueError(f"eta has shape {eta.shape}, expected {self.eta.shape}")
        return ConicProgram(self.q0, self.A0, self.b0, self.cones, self.p_diag, self.Q, self.B,
                            self.dA, eta.copy(), self.var_blocks, self.row_blocks,
                            self.eta_blocks, self.meta)

    def objective(self, x, eps: float = 0.0) -> float:
        q, _, _ = self.data()
        return float(0.5 * x @ ((self.p_diag + eps) * x) + q @ x)

    def var(self, x, name):
        return x[self.var_blocks[name]]

    def check(self) -> None:
        n, m, k = self.n, self.m, self.n_eta
        if self.A0.shape != (m, n) or self.cones.shape != (m,) or self.p_diag.shape != (n,):
            raise ValueError("inconsistent program dimensions")
        if self.Q.shape != (n, k) or self.B.shape != (m, k):
            raise ValueError("inconsistent parameter map dimensions")
        if np.any(self.p_diag < 0):
            raise ValueError("P must be positive semidefinite")


class ProgramBuilder:
    """Incrementally assemble a :class:`ConicProgram` from named blocks."""

    def __init__(self, n_eta: int = 0):
        self.n = 0
        self.m = 0
        self.n_eta = n_eta
        self.var_blocks: dict[str, slice] = {}
        self.row_blocks: dict[str, slice] = {}
        self.eta_blocks: dict[str, slice] = {}
        self._q: dict[int, float] = {}
        self._a_r: list = []
        self._a_c: list = []
        self._a_v: list = []
        self._b: list = []
        self._cones: list = []
        self._q_trip: list = []  # (var, eta, coef)
        self._b_trip: list = []  # (row, eta, coef)
        self._da_trip: list = []  # (row, col, eta, coef)
        self._pdiag: dict[int, float] = {}

    def eta_block(self, name: str, size: int) -> np.ndarray:
        start = self.n_eta
        self.n_eta += size
        self.eta_blocks[name] = slice(start, self.n_eta)
        return np.arange(start, self.n_eta)

    def var(self, name: str, size: int) -> np.ndarray:
        start = self.n
        self.n += size
        self.var_blocks[name] = slice(start, self.n)
        return np.arange(start, self.n)

    def cost(self, idx, coef) -> None:
        for i, c in zip(np.atleast_1d(idx), np.broadcast_to(coef, np.shape(np.atleast_1d(idx)))):
            self._q[int(i)] = self._q.get(int(i), 0.0) + float(c)

    def cost_eta(self, var_idx, eta_idx, coef) -> None:
        v = np.atleast_1d(var_idx)
        e = np.broadcast_to(eta_idx, v.shape)
        c = np.broadcast_to(coef, v.shape)
        self._q_trip.extend(zip(v.tolist(), e.tolist(), c.tolist()))

    def rows(self, name: str, count: int, cone: int) -> np.ndarray:
        """Reserve ``count`` rows; coefficients are added with :meth:`coef`."""
        start = self.m
        self.m += count
        if name in self.row_blocks:
            old = self.row_blocks[name]
            if old.stop != start:
                raise ValueError(f"row block {name!r} must be contiguous")
            self.row_blocks[name] = slice(old.start, self.m)
        else:
            self.row_blocks[name] = slice(start, self.m)
        self._b.extend([0.0] * count)
        self._cones.extend([cone] * count)
        return np.arange(start, self.m)

    def coef(self, rows, cols, vals) -> None:
        r = np.atleast_1d(rows)
        c = np.broadcast_to(cols, r.shape)
        v = np.broadcast_to(vals, r.shape)
        self._a_r.extend(r.tolist())
        self._a_c.extend(c.tolist())
        self._a_v.extend(np.asarray(v, dtype=float).tolist())

    def rhs(self, rows, vals) -> None:
        r = np.atleast_1d(rows)
        v = np.broadcast_to(vals, r.shape)
        for i, x in zip(r.tolist(), np.asarray(v, dtype=float).tolist()):
            self._b[i] += x

    def rhs_eta(self, rows, eta_idx, coef) -> None:
        r = np.atleast_1d(rows)
        e = np.broadcast_to(eta_idx, r.shape)
        c = np.broadcast_to(coef, r.shape)
        self._b_trip.extend(zip(r.tolist(), e.tolist(), np.asarray(c, dtype=float).tolist()))

    def coef_eta(self, rows, cols, eta_idx, coef) -> None:
        r = np.atleast_1d(rows)
        c = np.broadcast_to(cols, r.shape)
        e = np.broadcast_to(eta_idx, r.shape)
        k = np.broadcast_to(coef, r.shape)
        self._da_trip.extend(zip(r.tolist(), c.tolist(), e.tolist(), np.asarray(k, dtype=float).tolist()))

    def bound(self, name: str, idx, lo=None, hi=None) -> None:
        """Add ``lo ≤ x[idx] ≤ hi`` as nonneg rows."""
        idx = np.atleast_1d(idx)
        if lo is not None:
            r = self.rows(name + ".lo", idx.size, NONNEG)
            self.coef(r, idx, -1.0)
            self.rhs(r, -np.broadcast_to(lo, idx.shape))
        if hi is not None:
            r = self.rows(name + ".hi", idx.size, NONNEG)
            self.coef(r, idx, 1.0)
            self.rhs(r, np.broadcast_to(hi, idx.shape))

    def quad(self, idx, coef) -> None:
        for i in np.atleast_1d(idx).tolist():
            self._pdiag[i] = self._pdiag.get(i, 0.0) + float(coef)

    def build(self, eta=None, meta=None) -> ConicProgram:
        n, m, k = self.n, self.m, self.n_eta
        q0 = np.zeros(n)
        for i, v in self._q.items():
            q0[i] = v
        A0 = sp.csr_matrix((self._a_v, (self._a_r, self._a_c)), shape=(m, n))
        A0.sum_duplicates()

        def trip(t, shape):
            if not t:
                return sp.csr_matrix(shape)
            a, e, c = zip(*t)
            return sp.csr_matrix((c, (a, e)), shape=shape)

        Q = trip(self._q_trip, (n, k))
        B = trip(self._b_trip, (m, k))
        if self._da_trip:
            arr = np.array(self._da_trip, dtype=float)
            dA = (arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64),
                  arr[:, 2].astype(np.int64), arr[:, 3])
        else:
            z = np.zeros(0, dtype=np.int64)
            dA = (z, z, z, np.zeros(0))
        pd = np.zeros(n)
        for i, v in self._pdiag.items():
            pd[i] = v
        eta = np.zeros(k) if eta is None else np.asarray(eta, dtype=np.float64)
        prog = ConicProgram(q0, A0, np.asarray(self._b, dtype=float), np.asarray(self._cones, dtype=np.int8),
                            pd, Q, B, dA, eta, dict(self.var_blocks), dict(self.row_blocks),
                            dict(self.eta_blocks), dict(meta or {}))
        prog.check()
        return prog
