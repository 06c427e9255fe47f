"""Hourly price/load/PV datasets: synthetic generation, CSV ingest and splitting.

The synthetic generator is a desk-scale stand-in for market and weather data.
Each task gets its own profile (price level, spike rate, PV capacity, ...) so a
task stream exhibits distribution shift.

Generator bounds (checked by the tests):

* irradiance in [0, 1000] W/m², zero between sunset and sunrise;
* pv in [0, pv_capacity] MW and zero whenever irradiance is zero;
* load in [0.2 load_level, 3 load_level] MW;
* price unbounded above (spikes) and ≥ -20.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

HEADER = ("timestamp", "price", "load", "pv", "irradiance")
LOOKBACK_DAYS = 7
START = np.datetime64("2021-01-04T00", "h")  # a Monday


class DatasetError(ValueError):
    """Malformed dataset; ``problems`` lists every offending row."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems[:5]) + (" ..." if len(self.problems) > 5 else ""))


@dataclass
class Dataset:
    timestamps: np.ndarray  # datetime64[h]
    price: np.ndarray
    load: np.ndarray
    pv: np.ndarray
    irradiance: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[h]")
        for f in ("price", "load", "pv", "irradiance"):
            setattr(self, f, np.asarray(getattr(self, f), dtype=np.float64))
        n = self.timestamps.size
        if any(getattr(self, f).shape != (n,) for f in ("price", "load", "pv", "irradiance")):
            raise DatasetError(["all series must have one value per timestamp"])
        problems = check_hourly(self.timestamps)
        for f in ("price", "load", "pv", "irradiance"):
            bad = np.where(~np.isfinite(getattr(self, f)))[0]
            problems += [f"{self.timestamps[i]}: non-finite {f}" for i in bad[:10]]
        if problems:
            raise DatasetError(problems)

    @property
    def hours(self) -> int:
        return self.timestamps.size

    @property
    def days(self) -> int:
        return self.hours // 24

    @property
    def net_load(self) -> np.ndarray:
        return self.load - self.pv

    def hour_offset(self) -> int:
        """Index of the first midnight."""
        h = int((self.timestamps[0] - self.timestamps[0].astype("datetime64[D]")).astype(int))
        return (24 - h) % 24

    def window(self, day: int, T: int) -> tuple[np.ndarray, np.ndarray]:
        """Realised (price, net load) over the T hours starting at midnight of ``day``."""
        s = self.hour_offset() + 24 * day
        if s < 0 or s + T > self.hours:
            raise IndexError(f"day {day} with horizon {T} exceeds the dataset")
        return self.price[s:s + T].copy(), self.net_load[s:s + T].copy()

    def usable_days(self, T: int, lookback_days: int = LOOKBACK_DAYS) -> np.ndarray:
        first = lookback_days
        last = (self.hours - self.hour_offset() - T) // 24
        return np.arange(first, last + 1)

    def split(self, n_train: int = 402, n_test: int = 400, T: int = 32,
              lookback_days: int = LOOKBACK_DAYS) -> tuple[np.ndarray, np.ndarray]:
        """Chronological train/test day indices after a lookback warm-up."""
        days = self.usable_days(T, lookback_days)
        if days.size < n_train + n_test:
            raise DatasetError([f"need {n_train + n_test} usable days after a {lookback_days}-day warm-up, "
                                f"dataset has {days.size}"])
        return days[:n_train], days[n_train:n_train + n_test]

    def slice_days(self, first: int, n: int) -> "Dataset":
        s = self.hour_offset() + 24 * first
        sl = slice(s, s + 24 * n)
        return Dataset(self.timestamps[sl], self.price[sl], self.load[sl], self.pv[sl], self.irradiance[sl],
                       self.name)


def days_needed(n_train: int, n_test: int, T: int = 32, lookback_days: int = LOOKBACK_DAYS) -> int:
    return lookback_days + n_train + n_test + math.ceil(max(T - 24, 0) / 24)


def check_hourly(ts) -> list[str]:
    ts = np.asarray(ts, dtype="datetime64[h]")
    problems = []
    if ts.size < 2:
        return problems
    step = np.diff(ts).astype(np.int64)
    for i in np.where(step <= 0)[0]:
        problems.append(f"non-monotone timestamp {ts[i + 1]} after {ts[i]}")
    for i in np.where(step > 1)[0]:
        problems.append(f"gap: missing {ts[i] + np.timedelta64(1, 'h')} (next row is {ts[i + 1]})")
    return problems


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticProfile:
    price_level: float = 50.0
    price_amplitude: float = 0.35  # relative size of the daily peaks
    morning_peak: float = 8.0
    evening_peak: float = 19.0
    spike_rate: float = 0.01  # per hour
    spike_scale: float = 40.0
    load_level: float = 6.0  # MW
    load_amplitude: float = 0.3
    pv_capacity: float = 3.0  # MW
    cloudiness: float = 0.35
    noise: float = 0.08


def task_profile(task_id: int) -> SyntheticProfile:
    """Deterministic per-task profile used by the default stream."""
    r = np.random.default_rng(1000 + int(task_id))
    return replace(SyntheticProfile(),
                   price_level=float(r.uniform(35, 75)),
                   price_amplitude=float(r.uniform(0.2, 0.5)),
                   morning_peak=float(r.uniform(6.5, 10.0)),
                   evening_peak=float(r.uniform(17.0, 21.0)),
                   spike_rate=float(r.uniform(0.004, 0.02)),
                   load_level=float(r.uniform(4.0, 9.0)),
                   pv_capacity=float(r.uniform(1.0, 5.0)),
                   cloudiness=float(r.uniform(0.2, 0.5)))


def _ar1(rng, n, phi, sigma):
    e = rng.normal(0.0, sigma, n)
    out = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = phi * acc + e[i]
        out[i] = acc
    return out


def generate_synthetic(seed: int, days: int, profile: SyntheticProfile | None = None,
                       start=START, name: str = "") -> Dataset:
    """Deterministic synthetic hourly dataset of ``days`` days."""
    if days < 14:
        raise ValueError("generate_synthetic needs at least 14 days")
    pr = profile or SyntheticProfile()
    rng = np.random.default_rng(seed)
    n = 24 * days
    ts = np.datetime64(start, "h") + np.arange(n).astype("timedelta64[h]")
    hour = np.arange(n) % 24
    day = np.arange(n) // 24
    doy = (day + 3) % 365
    dow = (ts.astype("datetime64[D]").astype(np.int64) + 3) % 7  # 0 = Monday
    weekend = dow >= 5

    # irradiance: clear-sky bell between sunrise and sunset times a daily cloud factor
    season = np.cos(2 * np.pi * (doy - 172) / 365.0)
    half_len = 6.0 + 2.0 * season
    x = (hour + 0.5 - 12.5) / half_len
    clear = np.where(np.abs(x) < 1, np.cos(0.5 * np.pi * np.clip(x, -1, 1)) ** 1.5, 0.0) * (800 + 150 * season)
    cloud_day = rng.beta(2.0, 2.0 / max(pr.cloudiness, 1e-3) - 2.0 + 1e-9, days)
    cloud = np.clip(1.0 - cloud_day[day] + rng.normal(0, 0.05, n), 0.0, 1.0)
    irr = np.clip(clear * cloud, 0.0, 1000.0)
    pv = np.where(irr > 0, pr.pv_capacity * np.clip(irr / 1000.0 * (1 + rng.normal(0, 0.03, n)), 0, 1), 0.0)

    # load: morning and evening peaks, lower at weekends, AR(1) noise
    bump = lambda c, w: np.exp(-0.5 * ((hour - c) / w) ** 2)
    shape = 1.0 + pr.load_amplitude * (bump(pr.morning_peak + 1, 2.0) + 0.8 * bump(pr.evening_peak, 2.5))
    level = pr.load_level * (1.0 - 0.12 * weekend + 0.1 * season)
    load = level * shape * (1.0 + _ar1(rng, n, 0.9, pr.noise / 2))
    load = np.clip(load, 0.2 * pr.load_level, 3.0 * pr.load_level)

    # price: bimodal profile, tracks net load, AR(1) noise and heavy-tailed spikes
    pshape = 1.0 + pr.price_amplitude * (bump(pr.morning_peak, 1.5) + 1.2 * bump(pr.evening_peak, 2.0))
    net_rel = (load - pv) / pr.load_level
    price = pr.price_level * pshape * (0.75 + 0.25 * net_rel) * (1.0 - 0.08 * weekend)
    price = price * (1.0 + _ar1(rng, n, 0.95, pr.noise / 2)) + _ar1(rng, n, 0.8, 0.05 * pr.price_level)
    spikes = rng.random(n) < pr.spike_rate
    price = price + spikes * pr.spike_scale * rng.gamma(2.0, 0.5, n)
    price = np.maximum(price, -20.0)
    return Dataset(ts, np.round(price, 6), np.round(load, 6), np.round(pv, 6), np.round(irr, 6), name)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def export_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for i in range(ds.hours):
            w.writerow([str(ds.timestamps[i]) + ":00", repr(float(ds.price[i])), repr(float(ds.load[i])),
                        repr(float(ds.pv[i])), repr(float(ds.irradiance[i]))])


def ingest_csv(path, name: str | None = None) -> Dataset:
    """Read and validate an hourly CSV with header ``timestamp,price,load,pv,irradiance``."""
    problems = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(["empty file"])
        header = [h.strip() for h in header]
        missing = [c for c in HEADER if c not in header]
        if missing:
            raise DatasetError([f"missing columns: {', '.join(missing)}"])
        col = {c: header.index(c) for c in HEADER}
        ts, vals = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t = np.datetime64(row[col["timestamp"]].strip().replace(" ", "T"), "h")
                v = [float(row[col[c]]) for c in HEADER[1:]]
            except (ValueError, IndexError) as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
            ts.append(t)
            vals.append(v)
    if problems:
        raise DatasetError(problems)
    if not ts:
        raise DatasetError(["no data rows"])
    ts = np.array(ts, dtype="datetime64[h]")
    problems = check_hourly(ts)
    if problems:
        raise DatasetError(problems)
    v = np.array(vals)
    return Dataset(ts, v[:, 0], v[:, 1], v[:, 2], v[:, 3], name if name is not None else Path(path).stem)


def kurtosis(x) -> float:
    """Plain (non-excess) sample kurtosis."""
    x = np.asarray(x, dtype=np.float64)
    d = x - x.mean()
    return float(np.mean(d ** 4) / np.mean(d ** 2) ** 2)
