"""Primal-dual interior point solver and KKT adjoint for :class:`ConicProgram`.

The solver is an infeasible-start Mehrotra predictor-corrector method on the
augmented (quasi-definite) Newton system

    [ P+εI   A_Eᵀ   A_Iᵀ ] [dx]
    [ A_E    -δ      0   ] [dy]  = rhs
    [ A_I     0     -W   ] [dz]

with ``W = S Z⁻¹``.  The same matrix, with the converged ``W``, gives the
adjoint system used by :func:`differentiate`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import autodiff as ad
from .conic import ZERO, ConicProgram

log = logging.getLogger(__name__)

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"
MAXITER = "MaxIter"

DENSE_LIMIT = 120
DEFAULT_EPS = 1e-6
EPS_LADDER = (1e-6, 1e-5, 1e-4)
ENDGAME_TOL = 1e-6  # accepted residuals when the Newton system breaks down near the optimum


class SolverError(RuntimeError):
    def __init__(self, msg, point=None):
        super().__init__(msg)
        self.point = point


class Infeasible(SolverError):
    pass


class Unbounded(SolverError):
    pass


class MaxIterReached(SolverError):
    pass


class SingularKkt(SolverError):
    def __init__(self, msg, pivot: float = 0.0):
        super().__init__(msg)
        self.pivot = pivot


@dataclass
class KktPoint:
    x: np.ndarray
    s: np.ndarray
    lam: np.ndarray
    status: str
    eps: float
    objective: float
    iterations: int
    residuals: dict

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


class _Factor:
    """LU factorisation of a square matrix, dense or sparse."""

    def __init__(self, K, pivot_thresh: float = 0.0):
        self.dense = not sp.issparse(K)
        if self.dense:
            self.lu = sla.lu_factor(K, check_finite=False)
        else:
            self.lu = spla.splu(K.tocsc(), permc_spec="COLAMD", diag_pivot_thresh=pivot_thresh)

    @property
    def pivot(self) -> float:
        if self.dense:
            return float(np.min(np.abs(np.diag(self.lu[0]))))
        return float(np.min(np.abs(self.lu.U.diagonal())))

    def solve(self, rhs):
        if self.dense:
            return sla.lu_solve(self.lu, rhs, check_finite=False)
        return self.lu.solve(rhs)


class _KktPattern:
    """Sparse [[diag, Aᵀ], [A, diag]] built once; only the diagonal changes afterwards."""

    def __init__(self, A):
        m, n = A.shape
        K = sp.bmat([[sp.identity(n), A.T], [A, sp.identity(m)]], format="csc")
        K.sort_indices()
        cols = np.repeat(np.arange(n + m), np.diff(K.indptr))
        self.pos = np.where(K.indices == cols)[0]
        self.K = K

    def matrix(self, diag):
        self.K.data[self.pos] = diag
        return self.K


def _kkt_matrix(P_diag, A, eq, diag_lower, dense: bool):
    """Symmetric [[diag(P_diag), Aᵀ], [A, diag(diag_lower)]] with A rows in program order."""
    n = P_diag.size
    m = A.shape[0]
    if dense:
        K = np.zeros((n + m, n + m))
        Ad = A.toarray() if sp.issparse(A) else A
        K[:n, n:] = Ad.T
        K[n:, :n] = Ad
        idx = np.arange(n + m)
        K[idx, idx] = np.concatenate([P_diag, diag_lower])
        return K
    return _KktPattern(sp.csr_matrix(A)).matrix(np.concatenate([P_diag, diag_lower])).copy()


def _solve_refined(fac, K, rhs, steps=2):
    sol = fac.solve(rhs)
    for _ in range(steps):
        r = rhs - K @ sol
        sol = sol + fac.solve(r)
    return sol


def solve(prog: ConicProgram, eps: float = 0.0, tol: float = 1e-9, max_iter: int = 100,
          raise_on_fail: bool = True) -> KktPoint:
    """Solve the program with Tikhonov term ``eps``.

    Residuals are measured relative to the data scale, e.g. the stationarity
    residual is ``‖Px+q+Aᵀλ‖∞ / (1 + ‖q‖∞)``.
    """
    q, A, b = prog.data()
    n, m = prog.n, prog.m
    eq = prog.cones == ZERO
    ineq = ~eq
    Pd = prog.p_diag + eps
    dense = (n + m) <= DENSE_LIMIT
    Ad = A.toarray() if dense else A
    AT = Ad.T
    delta = 1e-10
    ni = int(ineq.sum())

    pattern = None if dense else _KktPattern(A)

    def mat(w):
        low = np.where(eq, -delta, -w - delta)
        if dense:
            return _kkt_matrix(Pd + delta, Ad, eq, low, True)
        return pattern.matrix(np.concatenate([Pd + delta, low]))

    # initial point
    w0 = np.ones(m)
    K = mat(np.where(ineq, 1.0, 0.0))
    fac = _Factor(K)
    sol = fac.solve(np.concatenate([-q, b]))
    x = sol[:n]
    lam = sol[n:].copy()
    s = np.where(ineq, b - Ad @ x, 0.0)
    z = np.where(ineq, lam, 0.0)
    if ni:
        si, zi = s[ineq], z[ineq]
        ds_ = max(-1.5 * si.min(), 0.0)
        dz_ = max(-1.5 * zi.min(), 0.0)
        si = si + ds_
        zi = zi + dz_
        prod = si @ zi
        si = si + 0.5 * prod / max(zi.sum(), 1e-12) + 1e-3
        zi = zi + 0.5 * prod / max(si.sum(), 1e-12) + 1e-3
        s[ineq], z[ineq] = si, zi
    lam = np.where(eq, lam, z)

    nb = 1.0 + np.max(np.abs(b), initial=0.0)
    nq = 1.0 + np.max(np.abs(q), initial=0.0)
    status = MAXITER
    res = {}
    best = None  # (largest scaled residual, x, s, lam, residuals) of the best iterate so far
    it = 0
    for it in range(1, max_iter + 1):
        if best is not None and not (np.isfinite(x).all() and np.isfinite(s).all() and np.isfinite(lam).all()):
            break
        rd = Pd * x + q + AT @ lam
        rp = Ad @ x + s - b
        mu = (s[ineq] @ lam[ineq]) / ni if ni else 0.0
        obj = 0.5 * x @ (Pd * x) + q @ x
        res = {"stationarity": float(np.max(np.abs(rd), initial=0.0) / nq),
               "primal": float(np.max(np.abs(rp), initial=0.0) / nb),
               "complementarity": float(abs(s @ lam) / (1.0 + abs(obj))),
               "mu": float(mu)}
        merit = max(res["stationarity"], res["primal"], res["complementarity"])
        if best is None or merit < best[0]:
            best = (merit, x.copy(), s.copy(), lam.copy(), res)
        if res["stationarity"] < tol and res["primal"] < tol and res["complementarity"] < tol:
            status = OPTIMAL
            break
        # infeasibility / unboundedness certificates
        lmax = np.max(np.abs(lam), initial=0.0)
        if lmax > 1e8:
            lh = lam / lmax
            by = b @ lh
            if by < -1e-9 * nb and np.max(np.abs(AT @ lh)) <= 1e-9 * abs(by):
                status = INFEASIBLE
                break
            if lmax > 1e14:
                # duals diverge without a certificate: no strict interior
                status = MAXITER
                break
        nx = np.max(np.abs(x))
        if nx > 1e10:
            d = x / nx
            Ax = Ad @ d
            if q @ d < 0 and np.max(np.abs(np.where(eq, Ax, np.maximum(Ax, 0.0)))) < 1e-7 \
                    and np.max(np.abs(Pd * d)) < 1e-7:
                status = UNBOUNDED
                break

        w = np.where(ineq, s / np.maximum(lam, 1e-300), 0.0)
        K = mat(w)
        try:
            fac = _Factor(K)
        except (RuntimeError, ValueError, np.linalg.LinAlgError):
            try:
                fac = _Factor(K, pivot_thresh=1.0)
            except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
                if best[0] < ENDGAME_TOL:
                    break
                raise SingularKkt(f"Newton system singular: {exc}")

        def direction(rc):
            # rc: complementarity target residual on inequality rows
            rhs_low = np.where(ineq, -rp + rc / np.maximum(lam, 1e-300), -rp)
            d = _solve_refined(fac, K, np.concatenate([-rd, rhs_low]), steps=1)
            dx, dl = d[:n], d[n:]
            ds = np.where(ineq, -(rc + s * dl) / np.maximum(lam, 1e-300), 0.0)
            return dx, dl, ds

        def max_step(v, dv):
            mask = ineq & (dv < 0)
            if not mask.any():
                return 1.0
            return float(min(1.0, np.min(-v[mask] / dv[mask])))

        # predictor
        rc_aff = np.where(ineq, s * lam, 0.0)
        dx_a, dl_a, ds_a = direction(rc_aff)
        ap = max_step(s, ds_a)
        ad_ = max_step(lam, dl_a)
        a = min(ap, ad_)
        mu_aff = ((s + a * ds_a)[ineq] @ (lam + a * dl_a)[ineq]) / ni if ni else 0.0
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        sigma = min(max(sigma, 0.0), 1.0)
        # corrector
        rc = np.where(ineq, s * lam + ds_a * dl_a - sigma * mu, 0.0)
        dx, dl, ds = direction(rc)
        a = min(1.0, 0.99 * min(max_step(s, ds), max_step(lam, dl)))
        x = x + a * dx
        s = s + a * ds
        lam = lam + a * dl
        s[ineq] = np.maximum(s[ineq], 1e-300)
        lam[ineq] = np.maximum(lam[ineq], 1e-300)

    if status == MAXITER and best is not None and best[0] < ENDGAME_TOL:
        # the Newton system lost accuracy after reaching a near-optimal point
        _, x, s, lam, res = best
        status = OPTIMAL
    obj = float(0.5 * x @ (Pd * x) + q @ x)
    pt = KktPoint(x, np.where(eq, 0.0, s), lam, status, eps, obj, it, res)
    if status != OPTIMAL and raise_on_fail:
        err = {INFEASIBLE: Infeasible, UNBOUNDED: Unbounded}.get(status, MaxIterReached)
        raise err(f"{status} after {it} iterations, residuals {res}", pt)
    return pt


def kkt_residuals(prog: ConicProgram, pt: KktPoint) -> dict:
    """Absolute KKT residuals of a point (unscaled)."""
    q, A, b = prog.data()
    Pd = prog.p_diag + pt.eps
    ineq = prog.cones != ZERO
    return {
        "stationarity": float(np.max(np.abs(Pd * pt.x + q + A.T @ pt.lam), initial=0.0)),
        "primal": float(np.max(np.abs(A @ pt.x + pt.s - b), initial=0.0)),
        "cone": float(max(-np.min(pt.s[ineq], initial=0.0), -np.min(pt.lam[ineq], initial=0.0), 0.0)),
        "complementarity": float(abs(pt.s @ pt.lam)),
    }


def differentiate(prog: ConicProgram, pt: KktPoint, grad_x) -> np.ndarray:
    """Adjoint of ``x*(η)``: returns ``∂L/∂η`` given ``∂L/∂x*``.

    Solves ``[[P+εI, Aᵀ], [A, -D]] [w; u] = [g; 0]`` with ``D = S Λ⁻¹`` on
    inequality rows (zero on equality rows), then contracts with the
    derivatives of (q, A, b) with respect to η.
    """
    if pt.status != OPTIMAL:
        raise SolverError("differentiate needs an optimal point")
    if pt.eps <= 0 and not np.any(prog.p_diag > 0):
        raise SingularKkt("differentiation needs eps > 0", 0.0)
    g = np.asarray(grad_x, dtype=np.float64)
    q, A, b = prog.data()
    n, m = prog.n, prog.m
    eq = prog.cones == ZERO
    D = np.where(eq, 0.0, pt.s / np.maximum(pt.lam, 1e-300))
    D = np.minimum(D, 1e30)
    dense = (n + m) <= DENSE_LIMIT
    K = _kkt_matrix(prog.p_diag + pt.eps, A, eq, -D, dense)
    try:
        fac = _Factor(K, pivot_thresh=1.0)  # active rows have zero diagonal
    except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        raise SingularKkt(f"adjoint system singular: {exc}", 0.0)
    rhs = np.concatenate([g, np.zeros(m)])
    sol = _solve_refined(fac, K, rhs, steps=2)
    if not np.all(np.isfinite(sol)):
        raise SingularKkt("adjoint solve produced non-finite values", fac.pivot)
    resid = np.max(np.abs(K @ sol - rhs)) / (1.0 + np.max(np.abs(g)))
    if resid > 1e-6:
        raise SingularKkt(f"adjoint residual {resid:.2e}", fac.pivot)
    w, u = sol[:n], sol[n:]
    grad = -(prog.Q.T @ w) + prog.B.T @ u
    r, c, k, coef = prog.dA
    if r.size:
        contrib = -coef * (pt.lam[r] * w[c] + u[r] * pt.x[c])
        grad = grad + np.bincount(k, weights=contrib, minlength=prog.n_eta)
    return grad


def solve_differentiable(prog: ConicProgram, eps: float = DEFAULT_EPS) -> KktPoint:
    return solve(prog, eps=eps)


# ---------------------------------------------------------------------------
# autodiff node
# ---------------------------------------------------------------------------

@dataclass
class QpNodeLog:
    solves: int = 0
    escalations: int = 0
    skipped: int = 0


NODE_LOG = QpNodeLog()


def _qp_forward(eta, program: ConicProgram, eps: float = DEFAULT_EPS):
    prog = program.with_eta(eta)
    pt = solve(prog, eps=eps)
    NODE_LOG.solves += 1
    return pt.x.copy(), (prog, pt)


def _qp_backward(ctx, g):
    prog, pt = ctx
    ladder = [pt.eps] + [e for e in EPS_LADDER if e > pt.eps]
    for eps in ladder:
        try:
            if eps != pt.eps:
                NODE_LOG.escalations += 1
                pt = solve(prog, eps=eps)
            return (differentiate(prog, pt, g),)
        except SolverError as exc:
            log.warning("qp adjoint failed at eps=%g: %s", eps, exc)
            err = exc
    NODE_LOG.skipped += 1
    raise SingularKkt(f"adjoint failed up to eps={ladder[-1]:g}: {err}", 0.0)


QP_NODE = "qp_solve"
ad.register_custom_node(QP_NODE, _qp_forward, _qp_backward)


def qp_node(graph: ad.Graph, eta: ad.Ref, program: ConicProgram, eps: float = DEFAULT_EPS) -> ad.Ref:
    """Insert ``x*(η)`` for ``program`` into ``graph``."""
    return graph.custom(QP_NODE, eta, program=program, eps=eps)
