import numpy as np
import pytest
import scipy.sparse as sp

from portdfcl import autodiff as ad
from portdfcl import qp
from portdfcl.conic import NONNEG, ZERO, ConicProgram, ProgramBuilder
from portdfcl.port_model import StaticParams, Task, VesselSpec, build_day_ahead
from oracles import central_difference, simplex_min


def _unconstrained(q, eps):
    b = ProgramBuilder()
    e = b.eta_block("q", 1)
    x = b.var("x", 1)
    b.cost(x, q)
    b.cost_eta(x, e, 1.0)
    return b.build(), eps


def _bound_program(c=1.0, lo=3.0):
    # eta = [c, l]
    b = ProgramBuilder()
    e = b.eta_block("p", 2)
    x = b.var("x", 1)
    b.cost_eta(x, e[0], 1.0)
    r = b.rows("lower", 1, NONNEG)
    b.coef(r, x, -1.0)
    b.rhs_eta(r, e[1], -1.0)
    return b.build(eta=np.array([c, lo]))


class TestClosedForm:
    def test_unconstrained_quadratic(self):
        prog, eps = _unconstrained(2.0, 1.0)
        pt = qp.solve(prog, eps=eps)
        np.testing.assert_allclose(pt.x, [-2.0], atol=1e-9)
        np.testing.assert_allclose(qp.differentiate(prog, pt, [1.0]), [-1.0], atol=1e-9)

    def test_dx_dq_is_minus_identity_over_eps(self):
        b = ProgramBuilder()
        e = b.eta_block("q", 3)
        x = b.var("x", 3)
        b.cost_eta(x, e, 1.0)
        prog = b.build(eta=np.array([1.0, -2.0, 0.5]))
        pt = qp.solve(prog, eps=0.5)
        np.testing.assert_allclose(pt.x, [-2.0, 4.0, -1.0], atol=1e-9)
        for i in range(3):
            g = np.eye(3)[i]
            np.testing.assert_allclose(qp.differentiate(prog, pt, g), -g / 0.5, atol=1e-8)

    def test_active_lower_bound(self):
        prog = _bound_program()
        pt = qp.solve(prog, eps=1e-6)
        np.testing.assert_allclose(pt.x, [3.0], atol=1e-6)
        np.testing.assert_allclose(pt.lam, [1.0], atol=1e-5)
        grad = qp.differentiate(prog, pt, [1.0])
        np.testing.assert_allclose(grad, [0.0, 1.0], atol=1e-5)

    def test_lp_needs_positive_eps_to_differentiate(self):
        prog = _bound_program()
        pt = qp.solve(prog, eps=0.0)
        with pytest.raises(qp.SingularKkt):
            qp.differentiate(prog, pt, [1.0])


class TestStatus:
    def test_infeasible(self):
        b = ProgramBuilder()
        x = b.var("x", 1)
        b.bound("x", x, lo=2.0, hi=1.0)
        with pytest.raises(qp.Infeasible):
            qp.solve(b.build())

    def test_unbounded(self):
        b = ProgramBuilder()
        x = b.var("x", 1)
        b.cost(x, 1.0)
        b.bound("x", x, hi=0.0)
        with pytest.raises(qp.Unbounded):
            qp.solve(b.build())

    def test_raise_off_returns_point(self):
        b = ProgramBuilder()
        x = b.var("x", 1)
        b.bound("x", x, lo=2.0, hi=1.0)
        pt = qp.solve(b.build(), raise_on_fail=False)
        assert pt.status == qp.INFEASIBLE


def random_lp(rng, n=None, m_ub=None, m_eq=None):
    """Feasible, bounded LP: min cᵀx, G x ≤ h, E x = f, |x| ≤ 10."""
    n = n or int(rng.integers(2, 21))
    m_ub = m_ub if m_ub is not None else int(rng.integers(1, 40 - 2 * n if 40 - 2 * n > 1 else 2))
    m_eq = m_eq if m_eq is not None else int(rng.integers(0, max(1, min(3, n // 2)) + 1))
    x0 = rng.uniform(-1, 1, n)
    G = rng.normal(size=(m_ub, n))
    h = G @ x0 + rng.uniform(0.1, 2.0, m_ub)
    E = rng.normal(size=(m_eq, n))
    f = E @ x0
    c = rng.normal(size=n)
    return c, G, h, E, f


def lp_program(c, G, h, E, f, box=10.0):
    n = c.size
    b = ProgramBuilder()
    x = b.var("x", n)
    b.cost(x, c)
    if E.shape[0]:
        r = b.rows("eq", E.shape[0], ZERO)
        for i in range(E.shape[0]):
            b.coef(np.full(n, r[i]), x, E[i])
        b.rhs(r, f)
    r = b.rows("ub", G.shape[0], NONNEG)
    for i in range(G.shape[0]):
        b.coef(np.full(n, r[i]), x, G[i])
    b.rhs(r, h)
    b.bound("box", x, lo=-box, hi=box)
    return b.build()


def test_random_lps_match_simplex_oracle():
    rng = np.random.default_rng(2024)
    for trial in range(50):
        c, G, h, E, f = random_lp(rng)
        n = c.size
        A_ub = np.vstack([G, np.eye(n), -np.eye(n)])
        b_ub = np.concatenate([h, np.full(n, 10.0), np.full(n, 10.0)])
        status, ref, _ = simplex_min(c, A_ub, b_ub, E, f)
        assert status == "optimal"
        prog = lp_program(c, G, h, E, f)
        pt = qp.solve(prog)
        assert pt.status == qp.OPTIMAL
        assert abs(pt.objective - ref) <= 1e-6 * max(1.0, abs(ref)), trial
        res = qp.kkt_residuals(prog, pt)
        assert res["stationarity"] <= 1e-8 * (1 + np.abs(c).max())
        assert res["primal"] <= 1e-8 * (1 + np.abs(b_ub).max())
        assert res["cone"] == 0.0
        assert res["complementarity"] <= 1e-8 * (1 + abs(ref))


def random_param_program(rng):
    """Parameterized LP/QP with q, b and A all depending on η."""
    n = int(rng.integers(2, 11))
    m_ub = int(rng.integers(1, 2 * n + 1))
    k = int(rng.integers(2, 7))
    quad = rng.random() < 0.5
    b = ProgramBuilder()
    e = b.eta_block("eta", k)
    x = b.var("x", n)
    x0 = rng.uniform(-1, 1, n)
    b.cost(x, rng.normal(size=n))
    for i in range(n):
        b.cost_eta(x[i], e[int(rng.integers(k))], rng.normal())
    if quad:
        b.quad(x, rng.uniform(0.5, 2.0))
    G = rng.normal(size=(m_ub, n))
    r = b.rows("ub", m_ub, NONNEG)
    for i in range(m_ub):
        b.coef(np.full(n, r[i]), x, G[i])
        b.rhs_eta(r[i], e[int(rng.integers(k))], rng.normal() * 0.3)
        b.coef_eta(r[i], x[int(rng.integers(n))], e[int(rng.integers(k))], rng.normal() * 0.1)
    b.rhs(r, G @ x0 + rng.uniform(0.5, 2.0, m_ub))
    if n >= 3:
        r = b.rows("eq", 1, ZERO)
        w = rng.normal(size=n)
        b.coef(np.full(n, r[0]), x, w)
        b.rhs(r, w @ x0)
        b.rhs_eta(r, e[0], 0.2)
    b.bound("box", x, lo=-5.0, hi=5.0)
    eta = rng.normal(size=k) * 0.2
    return b.build(eta=eta), rng.normal(size=n)


def _nondegenerate(prog, pt):
    ineq = prog.cones == NONNEG
    gap = np.minimum(pt.s[ineq], pt.lam[ineq])
    active = np.maximum(pt.s[ineq], pt.lam[ineq])
    return np.all(np.abs(pt.s[ineq] - pt.lam[ineq]) > 1e-4) and gap.max(initial=0) < 1e-6 and active.min() > 1e-4


def test_random_parameterized_adjoints_match_finite_differences():
    rng = np.random.default_rng(7)
    eps, h = 1e-6, 1e-5
    checked = 0
    while checked < 50:
        prog, c = random_param_program(rng)
        pt = qp.solve(prog, eps=eps, tol=1e-12)
        if not _nondegenerate(prog, pt):
            continue
        grad = qp.differentiate(prog, pt, c)
        f = lambda e: c @ qp.solve(prog.with_eta(e), eps=eps, tol=1e-12).x
        num = central_difference(f, prog.eta, h)
        scale = max(1.0, np.abs(num).max())
        assert np.abs(grad - num).max() <= 1e-3 * scale, (checked, grad, num)
        checked += 1


def test_eps_limit_leaves_lp_objective():
    rng = np.random.default_rng(11)
    for _ in range(10):
        prog = lp_program(*random_lp(rng))
        f0 = qp.solve(prog, eps=0.0).objective
        f8 = qp.solve(prog, eps=1e-8).objective
        assert abs(f8 - f0) <= 1e-5 * max(1.0, abs(f0))


def _toy_task():
    st = StaticParams(T=8, n_cranes=3, berth_length=200.0)
    v = VesselSpec(1, 7, 140.0, 1, 2, 2.0, 3.0, 1.5, 150.0, 2)
    return Task(0, st, (v,))


def test_day_ahead_toy_adjoint_vs_finite_differences():
    task = _toy_task()
    T = task.T
    rng = np.random.default_rng(5)
    pi = 40 + 10 * rng.random(T)
    p = 3 + rng.random(T)
    # interior V keeps every perturbed program feasible (chg <= Pmax V)
    V = task.adm_to_v(rng.uniform(0.3, 0.9, len(task.admissible)))
    P_QC = 0.32 * np.array([0, 0, 1, 1, 1, 0, 0, 0.0])
    prog = build_day_ahead(task, pi, p, fix=(P_QC, V))
    w = rng.normal(size=prog.n)
    eps, h = 1e-6, 1e-5
    pt = qp.solve(prog, eps=eps, tol=1e-12)
    grad = qp.differentiate(prog, pt, w)
    f = lambda e: w @ qp.solve(prog.with_eta(e), eps=eps, tol=1e-12).x
    num = central_difference(f, prog.eta, h)
    scale = max(1.0, np.abs(num).max())
    assert np.abs(grad - num).max() <= 1e-3 * scale


def test_qp_node_in_graph():
    prog, eps = _unconstrained(0.0, 2.0)
    g = ad.Graph()
    eta = g.param("eta", np.array([3.0]))
    x = qp.qp_node(g, eta, prog, eps=eps)
    g.output("l", g.sum(x * x))
    g.forward({})
    # x = -eta/2, l = eta²/4, dl/deta = eta/2
    np.testing.assert_allclose(g.value("l"), 2.25, atol=1e-9)
    np.testing.assert_allclose(g.backward("l")["eta"], [1.5], atol=1e-8)


def test_dense_and_sparse_paths_agree(monkeypatch):
    rng = np.random.default_rng(3)
    prog = lp_program(*random_lp(rng, n=8, m_ub=10, m_eq=1))
    dense = qp.solve(prog, eps=1e-6)
    monkeypatch.setattr(qp, "DENSE_LIMIT", 0)
    sparse = qp.solve(prog, eps=1e-6)
    np.testing.assert_allclose(dense.x, sparse.x, atol=1e-7)


def _breaking_factor(monkeypatch, fail_from):
    calls = {"n": 0}
    real = qp._Factor

    class Flaky(real):
        def __init__(self, K, pivot_thresh=0.0):
            calls["n"] += 1
            if calls["n"] >= fail_from:
                raise RuntimeError("Factor is exactly singular")
            super().__init__(K, pivot_thresh)
    monkeypatch.setattr(qp, "_Factor", Flaky)
    return calls


def test_newton_breakdown_near_optimum_keeps_last_point(monkeypatch):
    c, G, h, E, f = random_lp(np.random.default_rng(5))
    prog = lp_program(c, G, h, E, f)
    ref = qp.solve(prog)
    calls = _breaking_factor(monkeypatch, 10**9)
    qp.solve(prog)
    total = calls["n"]
    _breaking_factor(monkeypatch, total)  # last factorisation fails, residuals already tiny
    pt = qp.solve(prog)
    assert pt.status == qp.OPTIMAL and pt.iterations == ref.iterations - 1
    assert abs(pt.objective - ref.objective) <= 1e-5 * (1 + abs(ref.objective))
    assert max(pt.residuals["stationarity"], pt.residuals["primal"]) < qp.ENDGAME_TOL


def test_newton_breakdown_far_from_optimum_raises(monkeypatch):
    c, G, h, E, f = random_lp(np.random.default_rng(5))
    prog = lp_program(c, G, h, E, f)
    _breaking_factor(monkeypatch, 2)
    with pytest.raises(qp.SingularKkt):
        qp.solve(prog)


def test_unreachable_tolerance_returns_best_iterate():
    c, G, h, E, f = random_lp(np.random.default_rng(6))
    prog = lp_program(c, G, h, E, f)
    ref = qp.solve(prog)
    pt = qp.solve(prog, tol=1e-30, max_iter=60)
    assert pt.status == qp.OPTIMAL
    assert max(pt.residuals["stationarity"], pt.residuals["primal"], pt.residuals["complementarity"]) \
        < qp.ENDGAME_TOL
    assert abs(pt.objective - ref.objective) <= 1e-6 * (1 + abs(ref.objective))


def test_early_iteration_cap_still_raises():
    c, G, h, E, f = random_lp(np.random.default_rng(6))
    with pytest.raises(qp.MaxIterReached):
        qp.solve(lp_program(c, G, h, E, f), max_iter=2)
