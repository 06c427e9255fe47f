"""Finite-difference gradient checks and the small instances they run on."""
from __future__ import annotations

import numpy as np

from . import qp
from .conic import NONNEG, ZERO, ProgramBuilder
from .data import SyntheticProfile, generate_synthetic
from .forecaster import ForecasterPair, ForecastModel, FeatureBundle, ModelConfig, Normalizer, context_dim
from .port_model import StaticParams, Task, VesselSpec
from .scheduler import build_memory_set, memory_samples
from .soft_knn import MemorySet, soft_topk_vjp, soft_topk_with_threshold, surrogate, surrogate_vjp
from .trainer import TaskData, fit_normalizers, regret_backward

SUITES = ("autodiff", "qp", "softknn", "pipeline")
TOLERANCE = {"autodiff": 1e-4, "qp": 1e-3, "softknn": 1e-4, "pipeline": 1e-2}


def central_difference(f, x, h: float):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

def toy_task(T: int = 8) -> Task:
    """One vessel, three cranes, a 14 m berth and a small battery."""
    st = StaticParams(T=T, n_cranes=3, berth_length=14.0, ess_pmax=2.0, e_max=4.0)
    return Task(101, st, (VesselSpec(0, T, 140.0, 1, 2, 2.0, 2.0, 2.0, 10.0, 2),))


def toy_data(T: int = 8, n_train: int = 6, n_test: int = 4, seed: int = 3) -> TaskData:
    ds = generate_synthetic(seed, 7 + n_train + n_test + 2, SyntheticProfile(load_level=3.0, pv_capacity=1.0))
    tr, te = ds.split(n_train, n_test, T)
    return TaskData(toy_task(T), ds, tr, te)


def toy_memory(td: TaskData, k: int = 3, seed: int = 0) -> MemorySet:
    samples = memory_samples(td.y["train"]["price"], td.y["train"]["load"], 6, 6, 0.05, seed=seed)
    return MemorySet.from_entries(build_memory_set(td.task, samples), metric="cosine", k=k)


def random_param_program(rng, max_rows: int = 40):
    """Random LP/QP (n < 20, m ≤ ``max_rows``) whose q, b and A depend on η; returns (program, cotangent)."""
    n = int(rng.integers(2, min(20, (max_rows - 2) // 2) + 1))
    m_ub = int(rng.integers(1, max_rows - 2 * n))
    k = int(rng.integers(2, 7))
    b = ProgramBuilder()
    e = b.eta_block("eta", k)
    x = b.var("x", n)
    x0 = rng.uniform(-1, 1, n)
    b.cost(x, rng.normal(size=n))
    for i in range(n):
        b.cost_eta(x[i], e[int(rng.integers(k))], rng.normal())
    if rng.random() < 0.5:
        b.quad(x, rng.uniform(0.5, 2.0))
    G = rng.normal(size=(m_ub, n))
    r = b.rows("ub", m_ub, NONNEG)
    for i in range(m_ub):
        b.coef(np.full(n, r[i]), x, G[i])
        b.rhs_eta(r[i], e[int(rng.integers(k))], rng.normal() * 0.3)
        b.coef_eta(r[i], x[int(rng.integers(n))], e[int(rng.integers(k))], rng.normal() * 0.1)
    b.rhs(r, G @ x0 + rng.uniform(0.5, 2.0, m_ub))
    r = b.rows("eq", 1, ZERO)
    w = rng.normal(size=n)
    b.coef(np.full(n, r[0]), x, w)
    b.rhs(r, w @ x0)
    b.rhs_eta(r, e[0], 0.2)
    b.bound("box", x, lo=-5.0, hi=5.0)
    return b.build(eta=rng.normal(size=k) * 0.2), rng.normal(size=n)


def nondegenerate(prog, pt, gap: float = 1e-4) -> bool:
    """Strict complementarity with margin ``gap``: finite differences are then well defined."""
    ineq = prog.cones == NONNEG
    s, lam = pt.s[ineq], pt.lam[ineq]
    return bool(np.all(np.maximum(s, lam) > gap) and np.all(np.minimum(s, lam) < 1e-6))


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def _rel(a, b, floor):
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))))


def check_autodiff(seed: int = 0, n_models: int = 2) -> dict:
    """Forecaster gradients of the mean output against central differences."""
    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    for kind in ("price", "load")[:n_models]:
        m = ForecastModel(ModelConfig(kind, T=6, embed=5, attn=4, hidden=7, seed=int(rng.integers(1 << 30))))
        d = context_dim(kind)
        m.set_normalizer(Normalizer(np.zeros(d), np.ones(d), 1.0, 2.0))
        b = FeatureBundle(kind, rng.normal(size=(2, d)), rng.uniform(0, 1, (3, 10)), np.arange(2))
        y = m.predict(b)
        g = m.flatten(m.vjp(np.full_like(y, 1.0 / y.size)))
        theta = m.flatten()

        def f(th):
            m.set_flat(th)
            return float(m.predict(b).mean())
        num = central_difference(f, theta, 1e-6)
        m.set_flat(theta)
        worst = max(worst, _rel(g, num, 1e-3 * np.abs(g).max()))
        count += theta.size
    return {"suite": "autodiff", "checked": count, "max_rel_err": worst}


def check_qp(seed: int = 7, n_programs: int = 50, eps: float = 1e-6, h: float = 1e-5) -> dict:
    """Implicit-differentiation adjoints of random parameterized programs against central differences."""
    rng = np.random.default_rng(seed)
    worst, checked, tried = 0.0, 0, 0
    while checked < n_programs:
        tried += 1
        prog, c = random_param_program(rng)
        pt = qp.solve(prog, eps=eps, tol=1e-12)
        if not nondegenerate(prog, pt):
            continue
        grad = qp.differentiate(prog, pt, c)
        num = central_difference(lambda e: c @ qp.solve(prog.with_eta(e), eps=eps, tol=1e-12).x, prog.eta, h)
        worst = max(worst, float(np.abs(grad - num).max() / max(1.0, np.abs(num).max())))
        checked += 1
    return {"suite": "qp", "checked": checked, "tried": tried, "max_rel_err": worst}


def check_softknn(seed: int = 0, n_cases: int = 50) -> dict:
    """Soft top-k and surrogate vector-Jacobian products against central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        N = int(rng.integers(3, 20))
        k = int(rng.integers(1, N))
        x = rng.normal(size=N)
        g = rng.normal(size=N)
        _, lam = soft_topk_with_threshold(x, k)
        ana = soft_topk_vjp(x, lam, g)
        num = central_difference(lambda z: g @ soft_topk_with_threshold(z, k)[0], x, 1e-6)
        worst = max(worst, _rel(ana, num, 1.0))
    T, J = 4, 2
    for metric in ("cosine", "euclidean", "diff-cosine"):
        M = 8
        mem = MemorySet(rng.normal(size=(M, 2 * T)), rng.uniform(0, 3, (M, T)),
                        (rng.random((M, J * T)) < 0.5).astype(float), metric, 3)
        q = rng.normal(size=2 * T)
        gP, gV = rng.normal(size=T), rng.normal(size=J * T)
        _, _, ctx = surrogate(q, mem)
        ana = surrogate_vjp(ctx, gP, gV)

        def f(z):
            P, V, _ = surrogate(z, mem)
            return gP @ P + gV @ V
        num = central_difference(f, q, 1e-6)
        worst = max(worst, _rel(ana, num, 1.0))
    return {"suite": "softknn", "checked": n_cases + 3, "max_rel_err": worst}


def check_pipeline(seed: int = 0, n_params: int = 20, h: float = 1e-4) -> dict:
    """Toy regret_backward against central differences over ``n_params`` forecaster parameters.

    Parameters are drawn among those whose gradient is at least 1e-3 of the
    largest, so the relative error is not dominated by round-off.
    """
    td = toy_data()
    mem = toy_memory(td)
    pair = ForecasterPair.create(T=td.task.T, seed=seed)
    fit_normalizers(pair, [td])
    idx = np.arange(3)
    _, g, _ = regret_backward(pair, td, idx, mem)
    theta = pair.flatten()
    cand = np.where(np.abs(g) > 1e-3 * np.abs(g).max())[0]
    sel = np.random.default_rng(seed).choice(cand, n_params, replace=False)

    def f(v):
        th = theta.copy()
        th[sel] = v
        pair.set_flat(th)
        return regret_backward(pair, td, idx, mem)[0]
    num = central_difference(f, theta[sel], h)
    pair.set_flat(theta)
    err = float(np.max(np.abs(g[sel] - num) / np.maximum(np.abs(g[sel]), np.abs(num))))
    return {"suite": "pipeline", "checked": n_params, "max_rel_err": err}


def run_suite(name: str, seed: int = 0) -> dict:
    fn = {"autodiff": check_autodiff, "qp": check_qp, "softknn": check_softknn, "pipeline": check_pipeline}[name]
    res = fn(seed=seed) if name != "qp" else fn(seed=seed + 7)
    res["tolerance"] = TOLERANCE[name]
    res["passed"] = res["max_rel_err"] <= TOLERANCE[name]
    return res
