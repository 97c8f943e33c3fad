"""Operational load time-series pipeline.

Produces per-load half-hourly (p, q) series by the same recipe whether the
source is the synthetic meter generator or an ingested smart-meter CSV:
select customers with few gaps, impute the rest by low-rank alternating
least squares, sum disjoint customer blocks per load point, normalize each
summed series by its time-average, and scale by the feeder's snapshot load
so the spatial loading pattern is preserved.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import LoadDataError
from .feeder import Feeder

METER_STEP = timedelta(minutes=30)
DEFAULT_START = datetime(2021, 1, 4, 0, 0)  # an arbitrary Monday midnight
STEPS_PER_DAY = 48
STEPS_PER_WEEK = 336


@dataclass(frozen=True)
class MeterMatrix:
    """customers x timestamps kWh readings; NaN where mask is False."""

    values: np.ndarray
    mask: np.ndarray
    start_time: datetime = DEFAULT_START
    step: timedelta = METER_STEP

    @property
    def n_customers(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def missing_fraction(self) -> np.ndarray:
        return (~self.mask).mean(axis=1)


@dataclass(frozen=True)
class LoadSeries:
    """Per-load-point (p, q) series in per unit, shape (n_loads, horizon)."""

    p: np.ndarray
    q: np.ndarray
    start_time: datetime = DEFAULT_START

    @property
    def n_loads(self) -> int:
        return self.p.shape[0]

    @property
    def horizon(self) -> int:
        return self.p.shape[1]


def generate_synthetic(n_customers: int, n_steps: int, seed: int) -> MeterMatrix:
    """Seeded synthetic half-hourly kWh with daily/weekly shape, lognormal
    noise and ~2% missing entries."""
    if n_customers < 1 or n_steps < 1:
        raise LoadDataError("n_customers and n_steps must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps)
    # evening-peaked daily shape (max at step 38 of each day) and a mild weekly swing
    daily = 1.0 + 0.35 * np.sin(2.0 * np.pi * (t - 26) / STEPS_PER_DAY)
    weekly = 1.0 + 0.06 * np.sin(2.0 * np.pi * t / STEPS_PER_WEEK - np.pi / 3)
    base = rng.lognormal(mean=math.log(0.25), sigma=0.35, size=n_customers)
    noise = rng.lognormal(mean=-0.5 * 0.12**2, sigma=0.12, size=(n_customers, n_steps))
    values = base[:, None] * daily[None, :] * weekly[None, :] * noise
    mask = rng.random((n_customers, n_steps)) >= 0.02
    values = values.copy()
    values[~mask] = np.nan
    return MeterMatrix(values=values, mask=mask)


def select_customers(m: MeterMatrix, max_missing_frac: float) -> MeterMatrix:
    """Keep customers whose missing fraction is strictly below the
    threshold, preserving order."""
    if not 0.0 <= max_missing_frac <= 1.0:
        raise LoadDataError("max_missing_frac must be in [0, 1]")
    keep = m.missing_fraction() < max_missing_frac
    if not keep.any():
        raise LoadDataError("no qualifying customers")
    return replace(m, values=m.values[keep], mask=m.mask[keep])


def als_factorize(
    values: np.ndarray,
    mask: np.ndarray,
    rank: int,
    reg: float,
    iters: int,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Masked alternating least squares with ridge regularization.

    Returns (U, V, objective_history) with values ~ U @ V.T on observed
    entries.  Each half-sweep minimizes the joint objective
    sum_observed (x - UV^T)^2 + reg*(|U|_F^2 + |V|_F^2) exactly, so the
    history is non-increasing.
    """
    n_rows, n_cols = values.shape
    row_obs = mask.sum(axis=1)
    col_obs = mask.sum(axis=0)
    if (row_obs == 0).any():
        raise LoadDataError(f"row {int(np.argmin(row_obs))} has no observed entries")
    if (col_obs == 0).any():
        raise LoadDataError(f"column {int(np.argmin(col_obs))} has no observed entries")

    rng = np.random.default_rng(0)  # fixed init; imputation is deterministic
    obs_mean = float(values[mask].mean())
    scale = math.sqrt(max(abs(obs_mean), 1e-12) / rank)
    u = rng.normal(size=(n_rows, rank)) * scale
    v = rng.normal(size=(n_cols, rank)) * scale
    eye = np.eye(rank)

    def objective() -> float:
        diff = np.where(mask, values - u @ v.T, 0.0)
        return float((diff**2).sum() + reg * ((u**2).sum() + (v**2).sum()))

    history = [objective()]
    for _ in range(iters):
        for i in range(n_rows):
            cols = mask[i]
            vi = v[cols]
            u[i] = np.linalg.solve(vi.T @ vi + reg * eye, vi.T @ values[i, cols])
        for j in range(n_cols):
            rows = mask[:, j]
            uj = u[rows]
            v[j] = np.linalg.solve(uj.T @ uj + reg * eye, uj.T @ values[rows, j])
        history.append(objective())
    return u, v, history


def impute(m: MeterMatrix, rank: int = 8, reg: float = 0.1, iters: int = 50) -> MeterMatrix:
    """Fill missing entries by rank-`rank` ALS factorization; observed
    entries are returned bit-for-bit unchanged, negative fills are clamped
    to zero."""
    if m.mask.all():
        return replace(m, values=m.values.copy(), mask=m.mask.copy())
    u, v, _ = als_factorize(m.values, m.mask, rank, reg, iters)
    filled = m.values.copy()
    fill = (u @ v.T)[~m.mask]
    filled[~m.mask] = np.maximum(fill, 0.0)
    return replace(m, values=filled, mask=np.ones_like(m.mask))


def build_load_series(
    feeder: Feeder,
    m: MeterMatrix,
    customers_per_load: int = 5,
    power_factor: float | None = None,
    seed: int = 0,
) -> LoadSeries:
    """Per-load (p, q) series from a fully observed meter matrix.

    Each load point gets the sum of a disjoint block of customers (blocks
    assigned by a seeded shuffle), normalized to unit time-average and
    scaled by the snapshot load.  q follows the snapshot power factor of
    each load unless a constant ``power_factor`` is forced.
    """
    if not m.mask.all():
        raise LoadDataError("meter matrix has missing entries; impute first")
    n_loads = len(feeder.load_points)
    need = n_loads * customers_per_load
    if need > m.n_customers:
        raise LoadDataError(
            f"insufficient customers: need {need} "
            f"({n_loads} loads x {customers_per_load}), have {m.n_customers}"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(m.n_customers)
    p = np.empty((n_loads, m.n_steps))
    q = np.empty((n_loads, m.n_steps))
    for k, lp in enumerate(feeder.load_points):
        block = perm[k * customers_per_load : (k + 1) * customers_per_load]
        summed = m.values[block].sum(axis=0)
        avg = summed.mean()
        if avg <= 0:
            raise LoadDataError(f"load {k}: customer block has zero time-average")
        base = summed / avg
        p[k] = base * lp.p_snapshot
        if power_factor is None:
            q[k] = base * lp.q_snapshot
        else:
            q[k] = p[k] * math.tan(math.acos(power_factor))
    return LoadSeries(p=p, q=q, start_time=m.start_time)


def round_ami(x):
    """Round to the nearest 0.1 with ties away from zero (AMI resolution).

    Applied to physical-unit values at logging boundaries only; internal
    solver values stay unrounded.
    """
    scaled = np.multiply(x, 10.0)
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5) / 10.0
    if np.isscalar(x):
        return float(rounded)
    return rounded


def timestamps(start: datetime, n: int) -> list[datetime]:
    return [start + k * METER_STEP for k in range(n)]


def read_meter_csv(path: str | Path) -> MeterMatrix:
    """Ingest a smart-meter CSV with header customer_id,timestamp,kwh.

    Timestamps must be half-hour aligned ISO-8601; a missing (customer,
    timestamp) row marks a missing reading.  Customers keep first-appearance
    order; the time grid spans min..max timestamp seen.
    """
    path = Path(path)
    rows: list[tuple[str, datetime, float]] = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["customer_id", "timestamp", "kwh"]:
            raise LoadDataError(
                f"{path}: expected header customer_id,timestamp,kwh, got {reader.fieldnames}"
            )
        for i, row in enumerate(reader):
            try:
                ts = datetime.fromisoformat(row["timestamp"])
                rows.append((row["customer_id"], ts, float(row["kwh"])))
            except (ValueError, TypeError) as exc:
                raise LoadDataError(f"{path}: bad row {i + 2}: {exc}") from None
    if not rows:
        raise LoadDataError(f"{path}: no data rows")

    t_min = min(ts for _, ts, _ in rows)
    t_max = max(ts for _, ts, _ in rows)
    n_steps = int((t_max - t_min) / METER_STEP) + 1
    customers: dict[str, int] = {}
    for cid, _, _ in rows:
        if cid not in customers:
            customers[cid] = len(customers)
    values = np.full((len(customers), n_steps), np.nan)
    mask = np.zeros((len(customers), n_steps), dtype=bool)
    for cid, ts, kwh in rows:
        offset = (ts - t_min) / METER_STEP
        if offset != int(offset):
            raise LoadDataError(f"{path}: timestamp {ts.isoformat()} not half-hour aligned")
        values[customers[cid], int(offset)] = kwh
        mask[customers[cid], int(offset)] = True
    return MeterMatrix(values=values, mask=mask, start_time=t_min)


def write_load_series_csv(series: LoadSeries, path: str | Path) -> Path:
    """Per-unit load series CSV: timestamp,load_id,p_pu,q_pu."""
    path = Path(path)
    ts = timestamps(series.start_time, series.horizon)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "load_id", "p_pu", "q_pu"])
        for t in range(series.horizon):
            stamp = ts[t].isoformat()
            for k in range(series.n_loads):
                writer.writerow([stamp, k, repr(float(series.p[k, t])), repr(float(series.q[k, t]))])
    return path


def read_load_series_csv(path: str | Path) -> LoadSeries:
    path = Path(path)
    by_load: dict[int, list[tuple[datetime, float, float]]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["timestamp", "load_id", "p_pu", "q_pu"]:
            raise LoadDataError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            by_load.setdefault(int(row["load_id"]), []).append(
                (datetime.fromisoformat(row["timestamp"]), float(row["p_pu"]), float(row["q_pu"]))
            )
    if not by_load:
        raise LoadDataError(f"{path}: no data rows")
    n_loads = len(by_load)
    if sorted(by_load) != list(range(n_loads)):
        raise LoadDataError(f"{path}: load ids must be dense 0..{n_loads - 1}")
    horizon = len(by_load[0])
    p = np.empty((n_loads, horizon))
    q = np.empty((n_loads, horizon))
    start = min(r[0] for r in by_load[0])
    for k in range(n_loads):
        rows = sorted(by_load[k])
        if len(rows) != horizon:
            raise LoadDataError(f"{path}: load {k} has {len(rows)} rows, expected {horizon}")
        p[k] = [r[1] for r in rows]
        q[k] = [r[2] for r in rows]
    return LoadSeries(p=p, q=q, start_time=start)


def write_load_kw_csv(series: LoadSeries, mva_base: float, path: str | Path) -> Path:
    """Physical-unit operational load data (kW/kVAr, AMI-rounded)."""
    path = Path(path)
    ts = timestamps(series.start_time, series.horizon)
    kw = round_ami(series.p * mva_base * 1000.0)
    kvar = round_ami(series.q * mva_base * 1000.0)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "load_id", "p_kw", "q_kvar"])
        for t in range(series.horizon):
            stamp = ts[t].isoformat()
            for k in range(series.n_loads):
                writer.writerow([stamp, k, repr(float(kw[k, t])), repr(float(kvar[k, t]))])
    return path
