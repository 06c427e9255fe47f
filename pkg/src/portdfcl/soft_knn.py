"""Differentiable KNN surrogate mapping forecasts to (P_QC, V) estimates.

A query ``u = [p̂, π̂]`` is scored against every memory row, the scores are
turned into a smooth top-k mask by thresholding ``Σ φ(x_i - λ) = k`` and the
stored labels are averaged with the normalized mask as weights.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

METRICS = ("cosine", "euclidean", "diff-cosine")
EPS_NORM = 1e-8
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# soft top-k
# ---------------------------------------------------------------------------

def phi(t):
    """Soft step: 1 - e^{-t}/2 for t > 0, e^{t}/2 otherwise."""
    t = np.asarray(t, dtype=np.float64)
    e = 0.5 * np.exp(-np.abs(t))
    return np.where(t > 0, 1.0 - e, e)


def _log_sqrt_plus(delta, s):
    """log(√(Δ² + eˢ) + Δ) without cancellation, elementwise."""
    with np.errstate(divide="ignore"):
        la = np.log(np.abs(delta))
    h = 0.5 * np.logaddexp(2 * la, s)  # log √(Δ² + eˢ)
    pos = delta >= 0
    out = np.empty_like(h)
    out[pos] = np.logaddexp(h[pos], la[pos])
    # Δ < 0: √(Δ²+eˢ) + Δ = eˢ / (√(Δ²+eˢ) − Δ)
    neg = ~pos
    out[neg] = s[neg] - np.logaddexp(h[neg], la[neg])
    return out


def soft_topk_threshold(x, k):
    """Return (λ*, ok). ``ok`` is False when no interval validates."""
    x = np.asarray(x, dtype=np.float64)
    N = x.size
    xs = np.sort(x)
    l1 = np.logaddexp.accumulate(xs)
    l2 = np.empty(N)
    l2[-1] = -np.inf
    if N > 1:
        l2[:-1] = np.logaddexp.accumulate(-xs[::-1])[::-1][1:]
    m = np.arange(N - 1, -1, -1, dtype=np.float64)
    delta = k - m
    with np.errstate(invalid="ignore"):
        lam = l1 - _log_sqrt_plus(delta, l1 + l2)
    upper = np.append(xs[1:], np.inf)
    valid = np.where((lam >= xs) & (lam <= upper))[0]
    if valid.size:
        return float(lam[valid[0]]), True
    # λ below every score: N − ½ e^{λ} Σ e^{−x} = k
    lam0 = np.log(2.0 * (N - k)) - np.logaddexp.reduce(-xs)
    if lam0 <= xs[0]:
        return float(lam0), True
    return np.nan, False


def soft_topk_with_threshold(x, k):
    """Return ``(w, λ*)``; λ* is nan when the zero-mask fallback is used."""
    x = np.asarray(x, dtype=np.float64)
    N = x.size
    if k == N:
        warnings.warn("soft_topk with k = N returns the all-ones mask", RuntimeWarning, stacklevel=3)
        return np.ones(N), -np.inf
    if not (1 <= k < N):
        raise ValueError(f"k must satisfy 1 <= k < N (got k={k}, N={N})")
    lam, ok = soft_topk_threshold(x, k)
    if not ok:
        log.warning("soft_topk: no valid interval, returning the zero mask")
        return np.zeros(N), np.nan
    return phi(x - lam), lam


def soft_topk(x, k) -> np.ndarray:
    """Smooth top-k mask ``w_i = φ(x_i − λ*)`` with ``Σ w = k``."""
    return soft_topk_with_threshold(x, k)[0]


def soft_topk_vjp(x, lam, g) -> np.ndarray:
    """Pull ``g = ∂L/∂w`` back to ``x`` using implicit differentiation of Σφ = k."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(lam):
        return np.zeros_like(x)
    d = 0.5 * np.exp(-np.abs(x - lam))  # φ'
    return d * g - d * (d @ g) / d.sum()


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------

def _block_diff(v, T):
    """First differences inside each length-T block (price and load separately)."""
    v = np.atleast_2d(v)
    parts = [np.diff(v[:, i:i + T], axis=1) for i in range(0, v.shape[1], T)]
    return np.concatenate(parts, axis=1)


def _block_diff_T(g, T, width):
    # adjoint of _block_diff for a single vector
    out = np.zeros(width)
    for b, i in enumerate(range(0, width, T)):
        gb = g[b * (T - 1):(b + 1) * (T - 1)]
        out[i:i + T - 1] -= gb
        out[i + 1:i + T] += gb
    return out


def _cosine(q, F):
    nq = np.linalg.norm(q)
    nf = np.linalg.norm(F, axis=1)
    if nq == 0:
        return np.zeros(F.shape[0]), nq, nf
    with np.errstate(invalid="ignore", divide="ignore"):
        s = (F @ q) / (nf * nq)
    return np.where(nf > 0, s, 0.0), nq, nf


def raw_similarity(q, F, metric: str, T: int):
    """Scores of query ``q`` against rows of ``F`` (no standardization)."""
    q = np.asarray(q, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if metric == "cosine":
        return _cosine(q, F)[0]
    if metric == "euclidean":
        d = F - q
        return -np.einsum("ij,ij->i", d, d)
    if metric == "diff-cosine":
        return _cosine(_block_diff(q, T)[0], _block_diff(F, T))[0]
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def raw_similarity_vjp(q, F, metric: str, T: int, g):
    q = np.asarray(q, dtype=np.float64)
    if metric == "euclidean":
        return -2.0 * (g.sum() * q - g @ F)
    if metric == "diff-cosine":
        dq = _block_diff(q, T)[0]
        return _block_diff_T(_cosine_vjp(dq, _block_diff(F, T), g), T, q.size)
    return _cosine_vjp(q, F, g)


def _cosine_vjp(q, F, g):
    s, nq, nf = _cosine(q, F)
    if nq == 0:
        return np.zeros_like(q)
    Fh = np.where(nf[:, None] > 0, F / np.where(nf > 0, nf, 1.0)[:, None], 0.0)
    qh = q / nq
    v = Fh.T @ g
    return (v - qh * (qh @ v)) / nq


# ---------------------------------------------------------------------------
# memory set
# ---------------------------------------------------------------------------

@dataclass
class MemorySet:
    features: np.ndarray  # (M, 2T) rows [p̂, π̂]
    labels_PQC: np.ndarray  # (M, T)
    labels_V: np.ndarray  # (M, J*T)
    metric: str = "cosine"
    k: int = 5
    standardize: bool = True
    cap: int | None = None
    task_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels_PQC = np.atleast_2d(np.asarray(self.labels_PQC, dtype=np.float64))
        self.labels_V = np.atleast_2d(np.asarray(self.labels_V, dtype=np.float64))
        if not self.task_ids:
            self.task_ids = [0] * self.M
        self.validate()

    @property
    def M(self) -> int:
        return self.features.shape[0]

    @property
    def T(self) -> int:
        return self.labels_PQC.shape[1]

    def validate(self) -> None:
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if not (self.labels_PQC.shape[0] == self.labels_V.shape[0] == self.M == len(self.task_ids)):
            raise ValueError("features and labels must have the same number of rows")
        if self.features.shape[1] != 2 * self.T:
            raise ValueError("feature width must be 2T")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("memory features must be finite")
        if not np.all((self.labels_V == 0) | (self.labels_V == 1)):
            raise ValueError("V labels must be binary")
        if self.M and not (1 <= self.k < self.M):
            raise ValueError(f"need 1 <= k < M (k={self.k}, M={self.M})")

    @classmethod
    def from_entries(cls, entries, metric="cosine", k=5, cap=None, standardize=True) -> "MemorySet":
        entries = list(entries)
        if not entries:
            raise ValueError("no memory entries")
        return cls(np.array([e.features for e in entries]), np.array([e.P_QC for e in entries]),
                   np.array([np.asarray(e.V, float).ravel() for e in entries]), metric, k, standardize,
                   cap, [int(e.task_id) for e in entries])

    def append(self, entries) -> None:
        """Append scheduler entries, evicting the oldest rows beyond ``cap``."""
        entries = list(entries)
        if not entries:
            return
        F = np.vstack([self.features, [e.features for e in entries]])
        P = np.vstack([self.labels_PQC, [e.P_QC for e in entries]])
        V = np.vstack([self.labels_V, [np.asarray(e.V, float).ravel() for e in entries]])
        ids = self.task_ids + [int(e.task_id) for e in entries]
        if self.cap is not None and F.shape[0] > self.cap:
            cut = F.shape[0] - self.cap
            F, P, V, ids = F[cut:], P[cut:], V[cut:], ids[cut:]
        self.features, self.labels_PQC, self.labels_V, self.task_ids = F, P, V, ids
        self.__dict__.pop("_stats", None)
        self.validate()

    def stats(self):
        st = self.__dict__.get("_stats")
        if st is None:
            mu = self.features.mean(axis=0)
            sd = self.features.std(axis=0)
            sd = np.where(sd > 1e-12, sd, 1.0)
            st = self.__dict__["_stats"] = (mu, sd)
        return st

    def labels(self) -> np.ndarray:
        return np.hstack([self.labels_PQC, self.labels_V])

    def to_json(self) -> str:
        return json.dumps({"version": FORMAT_VERSION, "features": self.features.tolist(),
                           "labels_PQC": self.labels_PQC.tolist(), "labels_V": self.labels_V.tolist(),
                           "metric": self.metric, "k": self.k, "standardize": self.standardize,
                           "cap": self.cap, "task_ids": self.task_ids})

    @classmethod
    def from_json(cls, text: str) -> "MemorySet":
        d = json.loads(text)
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported memory-set version {d.get('version')}")
        return cls(np.asarray(d["features"]), np.asarray(d["labels_PQC"]), np.asarray(d["labels_V"]),
                   d["metric"], int(d["k"]), bool(d.get("standardize", True)), d.get("cap"),
                   list(d.get("task_ids", [])))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "MemorySet":
        return cls.from_json(Path(path).read_text())


def _prepare(query, mem: MemorySet):
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (mem.features.shape[1],):
        raise ValueError(f"query has shape {q.shape}, expected ({mem.features.shape[1]},)")
    if mem.standardize:
        mu, sd = mem.stats()
        return (q - mu) / sd, (mem.features - mu) / sd, sd
    return q, mem.features, None


def similarity(query, mem: MemorySet) -> np.ndarray:
    q, F, _ = _prepare(query, mem)
    return raw_similarity(q, F, mem.metric, mem.T)


def normalize_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return w / (w.sum() + EPS_NORM)


def aggregate(weights, mem: MemorySet):
    """Weighted label average. Returns (P_QC, V (flat), flagged)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (mem.M,):
        raise ValueError("weights must have one entry per memory row")
    if not np.any(w):
        return np.zeros(mem.T), np.zeros(mem.labels_V.shape[1]), True
    a = normalize_weights(w)
    return a @ mem.labels_PQC, np.clip(a @ mem.labels_V, 0.0, 1.0), False


def surrogate(query, mem: MemorySet):
    """Forward pass; returns (P_QC, V flat, ctx)."""
    q, F, sd = _prepare(query, mem)
    s = raw_similarity(q, F, mem.metric, mem.T)
    w, lam = soft_topk_with_threshold(s, mem.k)
    P, V, flagged = aggregate(w, mem)
    return P, V, {"q": q, "F": F, "sd": sd, "s": s, "w": w, "lam": lam, "flagged": flagged, "mem": mem}


def surrogate_vjp(ctx, g_P, g_V) -> np.ndarray:
    """Gradient of ⟨g_P, P⟩ + ⟨g_V, V⟩ with respect to the raw query."""
    mem = ctx["mem"]
    w = ctx["w"]
    if ctx["flagged"]:
        return np.zeros(mem.features.shape[1])
    Y = mem.labels()
    gy = np.concatenate([np.ravel(g_P), np.ravel(g_V)])
    Z = w.sum() + EPS_NORM
    ga = Y @ gy  # ∂L/∂α
    a = w / Z
    gw = (ga - a @ ga) / Z
    gs = soft_topk_vjp(ctx["s"], ctx["lam"], gw)
    gq = raw_similarity_vjp(ctx["q"], ctx["F"], mem.metric, mem.T, gs)
    return gq if ctx["sd"] is None else gq / ctx["sd"]


# ---------------------------------------------------------------------------
# autodiff node
# ---------------------------------------------------------------------------

SURROGATE_NODE = "softknn_surrogate"


def _node_forward(query, mem: MemorySet):
    P, V, ctx = surrogate(query, mem)
    return np.concatenate([P, V]), ctx


def _node_backward(ctx, g):
    T = ctx["mem"].T
    return (surrogate_vjp(ctx, g[:T], g[T:]),)


ad.register_custom_node(SURROGATE_NODE, _node_forward, _node_backward)


def surrogate_node(graph: ad.Graph, query: ad.Ref, mem: MemorySet) -> ad.Ref:
    """Insert the surrogate; the output is ``[P_QC (T), V (J*T)]``."""
    return graph.custom(SURROGATE_NODE, query, mem=mem)


class MemoryBank:
    """Per-task memory sets (V labels depend on the task's vessel list)."""

    def __init__(self, metric="cosine", k=5, cap=None, standardize=True):
        self.metric, self.k, self.cap, self.standardize = metric, k, cap, standardize
        self.sets: dict[int, MemorySet] = {}

    def add(self, task_id: int, entries) -> MemorySet:
        entries = list(entries)
        if task_id in self.sets:
            self.sets[task_id].append(entries)
        else:
            self.sets[task_id] = MemorySet.from_entries(entries, self.metric, self.k, self.cap, self.standardize)
        return self.sets[task_id]

    def __getitem__(self, task_id: int) -> MemorySet:
        return self.sets[task_id]

    def __contains__(self, task_id: int) -> bool:
        return task_id in self.sets
