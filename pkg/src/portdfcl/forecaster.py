"""Price and net-load forecasters built on the autodiff graph.

Each model combines a permutation-invariant vessel encoder (per-vessel affine
embedding, single-head self-attention, mean pooling) with an MLP head over
contextual features.  Feature layout, version 1::

    past 72 hourly values | 24 values one week before | hour-of-day one-hot (24)
    | day-of-week one-hot (7) | [load model only] 24 irradiance values of the day

Vessel rows are the ten fixture columns divided by ``VESSEL_SCALE``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .fixtures import COLUMNS

LAYOUT_VERSION = 1
FORMAT_VERSION = 1
KINDS = ("price", "load")
VESSEL_SCALE = np.array([32, 32, 3000, 5, 5, 5, 10, 3, 300, 10], dtype=np.float64)
HEAD_PARAMS = ("W3", "b3")


class LayoutMismatch(ValueError):
    pass


def context_dim(kind: str) -> int:
    return 72 + 24 + 24 + 7 + (24 if kind == "load" else 0)


def vessel_matrix(task) -> np.ndarray:
    rows = [[getattr(v, c) for c in COLUMNS] for v in task.vessels]
    return np.asarray(rows, dtype=np.float64).reshape(-1, len(COLUMNS)) / VESSEL_SCALE


@dataclass
class FeatureBundle:
    kind: str
    context: np.ndarray  # (n_days, context_dim)
    vessels: np.ndarray  # (J, 10)
    days: np.ndarray
    version: int = LAYOUT_VERSION

    def __post_init__(self):
        self.context = np.atleast_2d(np.asarray(self.context, dtype=np.float64))
        self.vessels = np.asarray(self.vessels, dtype=np.float64).reshape(-1, len(COLUMNS))
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.context.shape[1] != context_dim(self.kind):
            raise LayoutMismatch(f"{self.kind} context must have {context_dim(self.kind)} columns")
        if not (np.all(np.isfinite(self.context)) and np.all(np.isfinite(self.vessels))):
            raise ValueError("features must be finite")

    def subset(self, idx) -> "FeatureBundle":
        idx = np.asarray(idx)
        return FeatureBundle(self.kind, self.context[idx], self.vessels, self.days[idx], self.version)

    def __len__(self):
        return self.context.shape[0]


def build_features(ds: Dataset, days, task, kind: str) -> FeatureBundle:
    """Contextual features for forecasting ``kind`` on each day in ``days``."""
    series = ds.price if kind == "price" else ds.net_load
    off = ds.hour_offset()
    rows = []
    for d in np.asarray(days, dtype=np.int64):
        s = off + 24 * int(d)
        if s < 168:
            raise IndexError(f"day {d} lacks a one-week lookback")
        hod = np.zeros(24)
        hod[int(ds.timestamps[s].astype(np.int64) % 24)] = 1.0
        dow = np.zeros(7)
        dow[int((ds.timestamps[s].astype("datetime64[D]").astype(np.int64) + 3) % 7)] = 1.0
        parts = [series[s - 72:s], series[s - 168:s - 144], hod, dow]
        if kind == "load":
            parts.append(ds.irradiance[s:s + 24] / 1000.0)
        rows.append(np.concatenate(parts))
    return FeatureBundle(kind, np.array(rows).reshape(-1, context_dim(kind)), vessel_matrix(task),
                         np.asarray(days, dtype=np.int64))


def targets(ds: Dataset, days, T: int, kind: str) -> np.ndarray:
    k = 0 if kind == "price" else 1
    return np.array([ds.window(int(d), T)[k] for d in days]).reshape(-1, T)


def mse_loss(y_hat, y) -> float:
    y_hat, y = np.asarray(y_hat, float), np.asarray(y, float)
    if y_hat.shape != y.shape:
        raise ValueError("mse_loss needs equal shapes")
    return float(np.mean((y_hat - y) ** 2))


def mae(y_hat, y) -> float:
    y_hat, y = np.asarray(y_hat, float), np.asarray(y, float)
    if y_hat.shape != y.shape:
        raise ValueError("mae needs equal shapes")
    return float(np.mean(np.abs(y_hat - y)))


@dataclass
class ModelConfig:
    kind: str
    T: int = 32
    embed: int = 32
    attn: int = 32
    hidden: int = 64
    use_vessels: bool = True
    seed: int = 0


@dataclass
class Normalizer:
    ctx_mean: np.ndarray
    ctx_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def fit(cls, context, y) -> "Normalizer":
        context = np.asarray(context, float)
        sd = context.std(axis=0)
        y = np.asarray(y, float)
        return cls(context.mean(axis=0), np.where(sd > 1e-8, sd, 1.0), float(y.mean()), float(max(y.std(), 1e-8)))

    @classmethod
    def identity(cls, d: int) -> "Normalizer":
        return cls(np.zeros(d), np.ones(d))

    def apply(self, context) -> np.ndarray:
        return (np.asarray(context, float) - self.ctx_mean) / self.ctx_std

    def to_dict(self) -> dict:
        return {"ctx_mean": self.ctx_mean.tolist(), "ctx_std": self.ctx_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(np.asarray(d["ctx_mean"], float), np.asarray(d["ctx_std"], float), float(d["y_mean"]),
                   float(d["y_std"]))


def _uniform(rng, fan_in, shape):
    r = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-r, r, shape)


class ForecastModel:
    """Vessel encoder plus MLP head producing a length-T forecast."""

    def __init__(self, config: ModelConfig, normalizer: Normalizer | None = None):
        self.config = c = config
        d = context_dim(c.kind)
        self.norm = normalizer or Normalizer.identity(d)
        rng = np.random.default_rng(c.seed)
        nv = len(COLUMNS)
        p = {}
        p["enc_W"] = _uniform(rng, nv, (nv, c.embed))
        p["enc_b"] = _uniform(rng, nv, (c.embed,))
        p["Wq"] = _uniform(rng, c.embed, (c.embed, c.attn))
        p["Wk"] = _uniform(rng, c.embed, (c.embed, c.attn))
        p["Wv"] = _uniform(rng, c.embed, (c.embed, c.attn))
        p["null"] = _uniform(rng, c.attn, (1, c.attn))
        fan1 = d + c.attn
        p["W1c"] = _uniform(rng, fan1, (d, c.hidden))
        p["W1v"] = _uniform(rng, fan1, (c.attn, c.hidden))
        p["b1"] = _uniform(rng, fan1, (c.hidden,))
        p["W2"] = _uniform(rng, c.hidden, (c.hidden, c.hidden))
        p["b2"] = _uniform(rng, c.hidden, (c.hidden,))
        p["W3"] = _uniform(rng, c.hidden, (c.hidden, c.T))
        p["b3"] = _uniform(rng, c.hidden, (c.T,))
        self.params: dict[str, np.ndarray] = p
        self.names = list(p)
        self._graphs: dict[bool, tuple] = {}
        self._last = None

    # -- graph -----------------------------------------------------------
    def _graph(self, with_vessels: bool):
        if with_vessels in self._graphs:
            return self._graphs[with_vessels]
        g = ad.Graph()
        P = {n: g.param(n, self.params[n]) for n in self.names}
        ctx = g.input("ctx")
        if with_vessels:
            emb = g.tanh(g.affine(g.input("ves"), P["enc_W"], P["enc_b"]))
            att = g.attention(emb @ P["Wq"], emb @ P["Wk"], emb @ P["Wv"])
            pooled = g.reshape(g.mean(att, axis=0), (1, self.config.attn))
        else:
            pooled = P["null"]
        h = g.tanh(g.add(g.affine(ctx, P["W1c"], P["b1"]), pooled @ P["W1v"]))
        h = g.tanh(g.affine(h, P["W2"], P["b2"]))
        out = g.affine(h, P["W3"], P["b3"])
        y = g.add(g.scale(out, self.norm.y_std), g.const(self.norm.y_mean))
        g.output("y", y)
        self._graphs[with_vessels] = (g, y)
        return g, y

    def _inputs(self, bundle: FeatureBundle):
        if bundle.kind != self.config.kind or bundle.version != LAYOUT_VERSION:
            raise LayoutMismatch(f"bundle {bundle.kind}/v{bundle.version} does not match "
                                 f"model {self.config.kind}/v{LAYOUT_VERSION}")
        use = self.config.use_vessels and bundle.vessels.shape[0] > 0
        inputs = {"ctx": self.norm.apply(bundle.context)}
        if use:
            inputs["ves"] = bundle.vessels
        return use, inputs

    def predict(self, bundle: FeatureBundle) -> np.ndarray:
        """Forecasts of shape (n_days, T); the graph is kept for :meth:`vjp`."""
        use, inputs = self._inputs(bundle)
        g, y = self._graph(use)
        g.forward(inputs)
        self._last = (g, y)
        return np.array(g.value(y))

    def vjp(self, cotangent) -> dict[str, np.ndarray]:
        if self._last is None:
            raise ad.BackwardBeforeForward("predict must run before vjp")
        g, y = self._last
        return g.vjp(y, cotangent)

    def mse_grad(self, bundle: FeatureBundle, y) -> tuple[float, dict]:
        y_hat = self.predict(bundle)
        return mse_loss(y_hat, y), self.vjp(2.0 * (y_hat - y) / y_hat.size)

    # -- flat parameter view ----------------------------------------------
    @property
    def size(self) -> int:
        return sum(self.params[n].size for n in self.names)

    def flatten(self, grads: dict | None = None) -> np.ndarray:
        src = self.params if grads is None else grads
        return np.concatenate([np.ravel(src[n]) for n in self.names])

    def unflatten(self, theta) -> dict[str, np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.size:
            raise ValueError(f"theta has {theta.size} entries, model has {self.size}")
        out, i = {}, 0
        for n in self.names:
            k = self.params[n].size
            out[n] = theta[i:i + k].reshape(self.params[n].shape).copy()
            i += k
        return out

    def set_flat(self, theta) -> None:
        for n, v in self.unflatten(theta).items():
            self.params[n][...] = v  # in place: graphs hold references

    def param_slices(self) -> dict[str, slice]:
        out, i = {}, 0
        for n in self.names:
            out[n] = slice(i, i + self.params[n].size)
            i += self.params[n].size
        return out

    def head_mask(self) -> np.ndarray:
        """Boolean mask over Θ selecting the final layer."""
        m = np.zeros(self.size, dtype=bool)
        for n, s in self.param_slices().items():
            m[s] = n in HEAD_PARAMS
        return m

    def copy(self) -> "ForecastModel":
        m = ForecastModel(self.config, Normalizer(self.norm.ctx_mean.copy(), self.norm.ctx_std.copy(),
                                                  self.norm.y_mean, self.norm.y_std))
        m.set_flat(self.flatten())
        return m

    def set_normalizer(self, norm: Normalizer) -> None:
        self.norm = norm
        self._graphs.clear()
        self._last = None

    # -- checkpoint ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "layout_version": LAYOUT_VERSION,
                "config": asdict(self.config), "normalizer": self.norm.to_dict(),
                "params": {n: {"shape": list(self.params[n].shape), "data": self.params[n].ravel().tolist()}
                           for n in self.names}}

    @classmethod
    def from_dict(cls, d: dict) -> "ForecastModel":
        if d.get("format_version") != FORMAT_VERSION or d.get("layout_version") != LAYOUT_VERSION:
            raise ValueError("unsupported forecaster checkpoint version")
        m = cls(ModelConfig(**d["config"]), Normalizer.from_dict(d["normalizer"]))
        params = ad.params_from_json({"format_version": ad.FORMAT_VERSION, "params": d["params"]})
        if set(params) != set(m.names):
            raise ValueError("checkpoint parameters do not match the model")
        for n, v in params.items():
            if v.shape != m.params[n].shape:
                raise ValueError(f"parameter {n} has shape {v.shape}, expected {m.params[n].shape}")
            m.params[n][...] = v
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ForecastModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ForecasterPair:
    """Independent price and net-load models; Θ = [Θ_p, Θ_l]."""

    price: ForecastModel
    load: ForecastModel

    @classmethod
    def create(cls, T: int = 32, seed: int = 0, use_vessels: bool = True, **kw) -> "ForecasterPair":
        return cls(ForecastModel(ModelConfig("price", T, seed=seed, use_vessels=use_vessels, **kw)),
                   ForecastModel(ModelConfig("load", T, seed=seed + 7919, use_vessels=use_vessels, **kw)))

    @property
    def size(self) -> int:
        return self.price.size + self.load.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.price.flatten(), self.load.flatten()])

    def flatten_grads(self, g_price: dict, g_load: dict) -> np.ndarray:
        return np.concatenate([self.price.flatten(g_price), self.load.flatten(g_load)])

    def set_flat(self, theta) -> None:
        theta = np.asarray(theta, float)
        self.price.set_flat(theta[:self.price.size])
        self.load.set_flat(theta[self.price.size:])

    def head_mask(self) -> np.ndarray:
        return np.concatenate([self.price.head_mask(), self.load.head_mask()])

    def copy(self) -> "ForecasterPair":
        return ForecasterPair(self.price.copy(), self.load.copy())

    def to_dict(self) -> dict:
        return {"price": self.price.to_dict(), "load": self.load.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "ForecasterPair":
        return cls(ForecastModel.from_dict(d["price"]), ForecastModel.from_dict(d["load"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ForecasterPair":
        return cls.from_dict(json.loads(Path(path).read_text()))
