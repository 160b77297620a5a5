"""Sensor series ingestion, normalization, windowing, splits and metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateChannelError, FormatError, SizingError

SECONDS_PER_DAY = 86400
# 1970-01-01 was a Thursday; index 0 is Monday.
_EPOCH_WEEKDAY = 3
MAPE_FLOOR = 1.0


@dataclass
class SensorSeries:
    sensor_ids: list[str]
    timestamps: np.ndarray  # int64 epoch seconds, shape (steps,)
    values: np.ndarray  # float64, shape (steps, N)
    missing_mask: np.ndarray  # bool, shape (steps, N)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.missing_mask is None:
            self.missing_mask = np.zeros(self.values.shape, dtype=bool)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.values.shape != (len(self.timestamps), len(self.sensor_ids)):
            raise FormatError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.timestamps)} timestamps x {len(self.sensor_ids)} sensors"
            )

    @property
    def n_steps(self) -> int:
        return len(self.timestamps)

    @property
    def n_sensors(self) -> int:
        return len(self.sensor_ids)

    @property
    def interval(self) -> int:
        if self.n_steps < 2:
            return 0
        return int(self.timestamps[1] - self.timestamps[0])

    def slice(self, start: int, stop: int) -> SensorSeries:
        return SensorSeries(
            list(self.sensor_ids),
            self.timestamps[start:stop],
            self.values[start:stop],
            self.missing_mask[start:stop],
        )


def week_index(timestamps) -> np.ndarray:
    """Day of week for epoch seconds, 0 = Monday ... 6 = Sunday (UTC)."""
    days = np.floor_divide(np.asarray(timestamps, dtype=np.int64), SECONDS_PER_DAY)
    return (days + _EPOCH_WEEKDAY) % 7


def time_of_day(timestamps) -> np.ndarray:
    return np.mod(np.asarray(timestamps, dtype=np.int64), SECONDS_PER_DAY) / SECONDS_PER_DAY


# -- CSV ----------------------------------------------------------------------

def _parse_timestamp(text: str, row: int) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        value = float(text)
        if math.isfinite(value):
            return int(round(value))
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise FormatError(f"row {row}: unparseable timestamp {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp()))


def load_csv(path) -> SensorSeries:
    """Read ``timestamp,<id1>,<id2>,...``; empty cells are missing values."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if len(header) < 2 or header[0].strip().lower() != "timestamp":
            raise FormatError(f"{path}: header must start with 'timestamp' followed by sensor ids")
        ids = [h.strip() for h in header[1:]]
        if len(set(ids)) != len(ids):
            raise FormatError(f"{path}: duplicate sensor ids in header")
        stamps: list[int] = []
        rows: list[list[float]] = []
        missing: list[list[bool]] = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise FormatError(f"row {lineno}: expected {len(header)} fields, got {len(rec)}")
            ts = _parse_timestamp(rec[0], lineno)
            if stamps:
                if ts == stamps[-1]:
                    raise FormatError(f"row {lineno}: duplicate timestamp {rec[0]}")
                if ts < stamps[-1]:
                    raise FormatError(f"row {lineno}: timestamps must increase, got {rec[0]}")
                if len(stamps) >= 2 and ts - stamps[-1] != stamps[1] - stamps[0]:
                    raise FormatError(
                        f"row {lineno}: irregular interval {ts - stamps[-1]}s, "
                        f"expected {stamps[1] - stamps[0]}s"
                    )
            vals, miss = [], []
            for cell in rec[1:]:
                cell = cell.strip()
                if cell == "":
                    vals.append(0.0)
                    miss.append(True)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise FormatError(f"row {lineno}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    vals.append(0.0)
                    miss.append(True)
                else:
                    vals.append(v)
                    miss.append(False)
            stamps.append(ts)
            rows.append(vals)
            missing.append(miss)
    if not stamps:
        raise FormatError(f"{path}: no data rows")
    return SensorSeries(ids, np.array(stamps), np.array(rows), np.array(missing))


def write_csv(series: SensorSeries, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(["timestamp", *series.sensor_ids]) + "\n")
        for ts, vals, miss in zip(series.timestamps, series.values, series.missing_mask):
            cells = ["" if m else repr(float(v)) for v, m in zip(vals, miss)]
            fh.write(f"{int(ts)}," + ",".join(cells) + "\n")


# -- normalization --------------------------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.std = np.atleast_1d(np.asarray(self.std, dtype=np.float64))
        if np.any(self.std <= 1e-8):
            raise DegenerateChannelError(f"channel std must exceed 1e-8, got {self.std.tolist()}")

    def transform(self, values):
        return (np.asarray(values) - self.mean[0]) / self.std[0]

    def inverse(self, values):
        return np.asarray(values) * self.std[0] + self.mean[0]


def zscore_fit_transform(series: SensorSeries, fit_range=None) -> tuple[SensorSeries, NormStats]:
    """Fit population mean/std over observed entries in ``fit_range`` rows.

    The speed readings form one channel; statistics are pooled over sensors.
    Missing entries stay masked and are set to 0 (the normalized mean).
    """
    if fit_range is None:
        fit_range = range(series.n_steps)
    rows = np.arange(series.n_steps)[_as_slice(fit_range)]
    if rows.size == 0:
        raise SizingError("normalization fit range is empty")
    vals = series.values[rows]
    observed = ~series.missing_mask[rows]
    if not observed.any():
        raise DegenerateChannelError("speed channel has no observed values in the fit range")
    sample = vals[observed]
    mu = float(sample.mean())
    sd = float(sample.std())
    if sd <= 1e-8:
        raise DegenerateChannelError("speed channel is constant over the fit range (std = 0)")
    stats = NormStats([mu], [sd])
    out = np.where(series.missing_mask, 0.0, stats.transform(series.values))
    return replace(series, values=out, missing_mask=series.missing_mask.copy()), stats


def _as_slice(r) -> slice:
    if isinstance(r, slice):
        return r
    if isinstance(r, range):
        return slice(r.start, r.stop, r.step)
    start, stop = r
    return slice(start, stop)


# -- windows ----------------------------------------------------------------------

@dataclass
class TrafficWindow:
    x: np.ndarray  # (T_in, N, F)
    y: np.ndarray  # (T_out, N, 1)
    x_timestamps: np.ndarray
    y_timestamps: np.ndarray
    y_mask: np.ndarray  # (T_out, N, 1), True where observed
    normalized: bool = False


@dataclass
class WindowSet:
    """Windows stacked along a leading axis; indexing yields TrafficWindow views."""

    x: np.ndarray  # (W, T_in, N, F)
    y: np.ndarray  # (W, T_out, N, 1)
    x_timestamps: np.ndarray  # (W, T_in)
    y_timestamps: np.ndarray  # (W, T_out)
    y_mask: np.ndarray  # (W, T_out, N, 1)
    normalized: bool = False
    sensor_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, idx):
        if isinstance(idx, (slice, np.ndarray, list)):
            return WindowSet(
                self.x[idx], self.y[idx], self.x_timestamps[idx], self.y_timestamps[idx],
                self.y_mask[idx], self.normalized, self.sensor_ids,
            )
        return TrafficWindow(
            self.x[idx], self.y[idx], self.x_timestamps[idx], self.y_timestamps[idx],
            self.y_mask[idx], self.normalized,
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_windows(cls, windows: Sequence[TrafficWindow], sensor_ids=()) -> WindowSet:
        if not windows:
            raise SizingError("no windows to stack")
        return cls(
            np.stack([w.x for w in windows]),
            np.stack([w.y for w in windows]),
            np.stack([w.x_timestamps for w in windows]),
            np.stack([w.y_timestamps for w in windows]),
            np.stack([w.y_mask for w in windows]),
            windows[0].normalized,
            list(sensor_ids),
        )


def window_set(
    series: SensorSeries,
    t_in: int = 12,
    t_out: int = 12,
    stride: int = 1,
    add_time_of_day: bool = False,
    normalized: bool = False,
) -> WindowSet:
    steps = series.n_steps
    if t_in < 1 or t_out < 1 or stride < 1:
        raise SizingError("t_in, t_out and stride must be positive")
    if steps < t_in + t_out:
        raise SizingError(f"series has {steps} steps, need at least {t_in + t_out}")
    feats = [series.values]
    if add_time_of_day:
        feats.append(np.broadcast_to(time_of_day(series.timestamps)[:, None], series.values.shape))
    data = np.stack(feats, axis=-1)  # (steps, N, F)
    observed = ~series.missing_mask
    span = t_in + t_out
    # (W, N, F, span) -> (W, span, N, F)
    win = sliding_window_view(data, span, axis=0)[::stride]
    win = np.moveaxis(win, -1, 1)
    obs = np.moveaxis(sliding_window_view(observed, span, axis=0)[::stride], -1, 1)
    ts = sliding_window_view(series.timestamps, span)[::stride]
    return WindowSet(
        x=np.ascontiguousarray(win[:, :t_in]),
        y=np.ascontiguousarray(win[:, t_in:, :, :1]),
        x_timestamps=np.ascontiguousarray(ts[:, :t_in]),
        y_timestamps=np.ascontiguousarray(ts[:, t_in:]),
        y_mask=np.ascontiguousarray(obs[:, t_in:, :, None]),
        normalized=normalized,
        sensor_ids=list(series.sensor_ids),
    )


def make_windows(series: SensorSeries, t_in: int = 12, t_out: int = 12, stride: int = 1, **kw) -> list[TrafficWindow]:
    """Contiguous windows: input rows ``[s, s+t_in)``, targets ``[s+t_in, s+t_in+t_out)``."""
    return list(window_set(series, t_in, t_out, stride, **kw))


def split_sizes(n: int, ratios=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise SizingError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    return n_train, n_val, n - n_train - n_val


def chrono_split(windows, ratios=(0.7, 0.1, 0.2), purge: bool = False):
    """Chronological train/val/test split, floor-rounded with remainder to test.

    With ``purge``, leading val/test windows whose inputs overlap the previous
    split's targets are dropped so no target value is seen twice.
    """
    n_train, n_val, _ = split_sizes(len(windows), ratios)
    parts = [windows[:n_train], windows[n_train:n_train + n_val], windows[n_train + n_val:]]
    if purge:
        for k in (1, 2):
            prev, cur = parts[k - 1], parts[k]
            if len(prev) == 0:
                continue
            cutoff = _y_ts(prev[len(prev) - 1])[-1]
            drop = 0
            while drop < len(cur) and _x_ts(cur[drop])[0] <= cutoff:
                drop += 1
            parts[k] = cur[drop:]
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) == 0:
            raise SizingError(f"{name} split is empty ({len(windows)} windows, ratios {tuple(ratios)})")
    return tuple(parts)


def _x_ts(w):
    return w.x_timestamps


def _y_ts(w):
    return w.y_timestamps


def train_step_range(n_steps: int, t_in: int, t_out: int, ratios=(0.7, 0.1, 0.2)) -> range:
    """Series rows touched by the training windows (inputs and targets)."""
    n_windows = n_steps - t_in - t_out + 1
    if n_windows < 1:
        raise SizingError(f"series has {n_steps} steps, need at least {t_in + t_out}")
    n_train, _, _ = split_sizes(n_windows, ratios)
    if n_train < 1:
        raise SizingError("train split is empty")
    return range(0, n_train + t_in + t_out - 1)


# -- synthetic traffic --------------------------------------------------------------

SYNTH_START = 1330905600  # 2012-03-05 00:00 UTC, a Monday


def _bump(hour: np.ndarray, centre: np.ndarray, sharpness: int) -> np.ndarray:
    return ((1.0 + np.cos(2.0 * np.pi * (hour - centre) / 24.0)) / 2.0) ** sharpness


def gen_synthetic(
    n_sensors: int,
    days: int,
    interval_min: int = 5,
    seed: int = 0,
    start: int = SYNTH_START,
    noise_std: float = 0.8,
    incident_rate_per_day: float = 0.2,
) -> SensorSeries:
    """Ring-road speed readings with rush hours, weekends and incidents.

    Each sensor gets a base speed plus two daily dips (morning and evening
    rush, raised-cosine shaped) that shrink on weekends, white-in-time noise
    smoothed over ring neighbours, and rare incidents that drop speed for
    30-90 minutes.
    """
    if n_sensors < 2:
        raise SizingError("synthetic data needs at least 2 sensors")
    if days < 1:
        raise SizingError("synthetic data needs at least 1 day")
    rng = np.random.default_rng(seed)
    steps_per_day = SECONDS_PER_DAY // (interval_min * 60)
    steps = days * steps_per_day
    ts = start + np.arange(steps, dtype=np.int64) * interval_min * 60
    hour = time_of_day(ts)[:, None] * 24.0
    weekend = (week_index(ts) >= 5)[:, None]

    base = rng.uniform(55.0, 68.0, size=n_sensors)
    am_amp = rng.uniform(14.0, 24.0, size=n_sensors)
    pm_amp = rng.uniform(16.0, 26.0, size=n_sensors)
    # rush hour propagates around the ring
    lag = np.arange(n_sensors) / n_sensors * 0.75
    dips = am_amp * _bump(hour, 8.0 + lag, 10) + pm_amp * _bump(hour, 17.5 + lag, 8)
    weekly = np.where(weekend, 0.25, 1.0)
    signal = base + np.where(weekend, 2.5, 0.0) - weekly * dips

    white = rng.normal(0.0, 1.0, size=(steps, n_sensors))
    ring = white + 0.5 * (np.roll(white, 1, axis=1) + np.roll(white, -1, axis=1))
    noise = noise_std * ring / math.sqrt(1.5)

    incidents = np.zeros((steps, n_sensors))
    n_inc = rng.poisson(incident_rate_per_day * days * n_sensors)
    for _ in range(n_inc):
        s = rng.integers(0, n_sensors)
        t0 = rng.integers(0, steps)
        dur = int(rng.integers(30, 91) // interval_min)
        depth = rng.uniform(10.0, 25.0)
        shape = np.linspace(1.0, 0.0, dur + 1)[:-1]
        t1 = min(steps, t0 + dur)
        incidents[t0:t1, s] -= depth * shape[: t1 - t0]

    values = np.clip(signal + noise + incidents, 3.0, 80.0)
    ids = [f"s{i:03d}" for i in range(n_sensors)]
    return SensorSeries(ids, ts, values, np.zeros(values.shape, dtype=bool))


# -- metrics ------------------------------------------------------------------------

class Metrics(NamedTuple):
    mae: float
    rmse: float
    mape: float


def metrics(pred, target, mask=None) -> Metrics:
    """MAE, RMSE and MAPE (percent) over observed entries, in data units.

    MAPE skips entries with ``|target| < 1.0``; it is NaN if none remain.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise SizingError(f"prediction shape {pred.shape} != target shape {target.shape}")
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    if not mask.any():
        raise SizingError("metrics mask selects no entries")
    err = (pred - target)[mask]
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    tgt = target[mask]
    keep = np.abs(tgt) >= MAPE_FLOOR
    mape = float(np.mean(np.abs(err[keep] / tgt[keep])) * 100.0) if keep.any() else float("nan")
    return Metrics(mae, rmse, mape)


def horizon_metrics(pred, target, mask=None) -> list[tuple[str, Metrics]]:
    """Per-horizon rows ``("1".."T", Metrics)`` plus an ``("avg", Metrics)`` row.

    Arrays are shaped (W, T_out, N, ...).
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.broadcast_to(mask, pred.shape)
    rows = [(str(h + 1), metrics(pred[:, h], target[:, h], mask[:, h])) for h in range(pred.shape[1])]
    rows.append(("avg", metrics(pred, target, mask)))
    return rows


def node_metrics(pred, target, mask, sensor_ids) -> list[tuple[str, str, Metrics]]:
    pred = np.asarray(pred)
    target = np.asarray(target)
    mask = np.broadcast_to(mask, pred.shape)
    out = []
    for n, sid in enumerate(sensor_ids):
        for h in range(pred.shape[1]):
            m = mask[:, h, n]
            if m.any():
                out.append((sid, str(h + 1), metrics(pred[:, h, n], target[:, h, n], m)))
    return out


def persistence_forecast(ws: WindowSet) -> np.ndarray:
    """Repeat the last observed speed over the whole horizon."""
    last = ws.x[:, -1:, :, :1]
    return np.repeat(last, ws.y.shape[1], axis=1)


def write_horizon_csv(rows, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["horizon_step", "mae", "rmse", "mape"])
        for step, m in rows:
            w.writerow([step, repr(m.mae), repr(m.rmse), repr(m.mape)])


def write_node_csv(rows, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor_id", "horizon_step", "mae", "rmse", "mape"])
        for sid, step, m in rows:
            w.writerow([sid, step, repr(m.mae), repr(m.rmse), repr(m.mape)])
