"""DTW distances between sensors and the thresholded Gaussian prior graph."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .dataset import SensorSeries
from .errors import ConfigError, FormatError, SizingError

log = logging.getLogger(__name__)


@numba.njit(cache=True, nogil=True)
def _dtw_dp(a, b, band):
    n, m = a.shape[0], b.shape[0]
    inf = np.inf
    prev = np.full(m + 1, inf)
    cur = np.full(m + 1, inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[:] = inf
        lo, hi = 1, m
        if band >= 0:
            # Sakoe-Chiba band around the rescaled diagonal
            centre = i * m / n
            lo = max(1, int(np.floor(centre - band)))
            hi = min(m, int(np.ceil(centre + band)))
        for j in range(lo, hi + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = abs(a[i - 1] - b[j - 1]) + best
        prev, cur = cur, prev
    return prev[m]


def dtw_distance(a, b, band: int | None = None) -> float:
    """Classic DTW with absolute-difference local cost.

    ``band`` limits ``|i - j*n/m|`` (Sakoe-Chiba); ``None`` means unconstrained.
    """
    a = np.ascontiguousarray(a, dtype=np.float64).ravel()
    b = np.ascontiguousarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise SizingError("dtw_distance needs two nonempty series")
    return float(_dtw_dp(a, b, -1 if band is None else int(band)))


def distance_matrix(series: np.ndarray, band: int | None = None, threads: int = 1) -> np.ndarray:
    """Pairwise DTW between the columns of ``series`` (steps x N)."""
    n = series.shape[1]
    cols = [np.ascontiguousarray(series[:, i], dtype=np.float64) for i in range(n)]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    out = np.zeros((n, n))

    def work(pair):
        i, j = pair
        return dtw_distance(cols[i], cols[j], band)

    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            dists = list(pool.map(work, pairs))
    else:
        dists = [work(p) for p in pairs]
    for (i, j), d in zip(pairs, dists):
        out[i, j] = out[j, i] = d
    return out


@dataclass(frozen=True)
class PriorGraph:
    w: np.ndarray
    kappa: float
    sigma: float
    n: int
    kappa_quantile: float = float("nan")

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.shape != (self.n, self.n):
            raise FormatError(f"prior matrix shape {w.shape} does not match n={self.n}")
        if not np.array_equal(w, w.T):
            raise FormatError("prior matrix is not symmetric")
        object.__setattr__(self, "w", w)

    @classmethod
    def identity(cls, n: int) -> PriorGraph:
        return cls(np.eye(n), 0.0, 0.0, n)


def prior_weights(dist: np.ndarray, kappa: float, sigma: float) -> np.ndarray:
    """exp(-L^2 / sigma^2) where L <= kappa, else 0; diagonal is 1."""
    if sigma > 0:
        w = np.exp(-(dist ** 2) / sigma ** 2)
    else:
        w = np.where(dist == 0, 1.0, 0.0)
    w = np.where(dist <= kappa, w, 0.0)
    np.fill_diagonal(w, 1.0)
    return w


def kappa_from_quantile(offdiag: np.ndarray, q: float) -> float:
    """Threshold at the ``q`` quantile of off-diagonal distances; ``q = 0`` keeps only exact matches."""
    if not 0.0 <= q <= 1.0:
        raise ConfigError(f"kappa quantile must lie in [0, 1], got {q}")
    if q == 0.0:
        return 0.0
    return float(np.quantile(offdiag, q))


def prior_from_distances(dist: np.ndarray, kappa_quantile: float = 0.7) -> PriorGraph:
    n = dist.shape[0]
    if n < 2:
        raise SizingError("a prior graph needs at least 2 sensors")
    offdiag = dist[~np.eye(n, dtype=bool)]
    sigma = float(np.std(offdiag))
    kappa = kappa_from_quantile(offdiag, kappa_quantile)
    return PriorGraph(prior_weights(dist, kappa, sigma), kappa, sigma, n, kappa_quantile)


def downsample(values: np.ndarray, missing: np.ndarray, factor: int) -> np.ndarray:
    """Block means over ``factor`` rows, ignoring missing entries."""
    if factor <= 1:
        return np.where(missing, np.nan, values)
    steps = (values.shape[0] // factor) * factor
    v = np.where(missing[:steps], np.nan, values[:steps]).reshape(-1, factor, values.shape[1])
    with np.errstate(invalid="ignore"):
        cnt = np.sum(~np.isnan(v), axis=1)
        tot = np.nansum(v, axis=1)
    return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)


def build_prior(
    series: SensorSeries,
    kappa_quantile: float = 0.7,
    train_range=None,
    full_resolution: bool = False,
    max_days: float | None = 14.0,
    band: int | None = None,
    threads: int = 1,
) -> PriorGraph:
    """DTW prior over the training rows of ``series``.

    By default the slice is limited to its first ``max_days`` days and reduced
    to hourly means before DTW. Gaps left by missing data are filled with the
    sensor's own mean over the slice.
    """
    if series.n_sensors < 2:
        raise SizingError("a prior graph needs at least 2 sensors")
    rows = range(series.n_steps) if train_range is None else train_range
    sub = series.slice(rows.start, rows.stop) if isinstance(rows, range) else series.slice(*rows)
    interval = max(sub.interval, 1)
    values, missing = sub.values, sub.missing_mask
    if max_days is not None:
        keep = int(max_days * 86400 // interval)
        values, missing = values[:keep], missing[:keep]
    factor = 1 if full_resolution else max(1, 3600 // interval)
    reduced = downsample(values, missing, factor)
    col_mean = np.nanmean(np.where(np.isnan(reduced), np.nan, reduced), axis=0)
    if np.any(np.isnan(col_mean)):
        raise SizingError("a sensor has no observed values in the prior range")
    reduced = np.where(np.isnan(reduced), col_mean, reduced)
    log.info("DTW over %d sensors x %d points", reduced.shape[1], reduced.shape[0])
    dist = distance_matrix(reduced, band=band, threads=threads)
    return prior_from_distances(dist, kappa_quantile)


def save_prior(prior: PriorGraph, path) -> Path:
    """Write the matrix CSV (9 significant digits) and a JSON sidecar; returns the sidecar path."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for row in prior.w:
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")
    side = path.with_suffix(".json")
    side.write_text(
        json.dumps(
            {"n": prior.n, "kappa": prior.kappa, "sigma": prior.sigma, "kappa_quantile": prior.kappa_quantile},
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return side


def load_prior(path) -> PriorGraph:
    path = Path(path)
    try:
        w = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    n = int(meta.get("n", w.shape[0]))
    if w.shape != (n, n):
        raise FormatError(f"{path}: expected a {n}x{n} matrix, got {w.shape}")
    if not np.allclose(w, w.T, atol=0, rtol=0):
        raise FormatError(f"{path}: prior matrix is not symmetric")
    return PriorGraph(
        w, float(meta.get("kappa", float("nan"))), float(meta.get("sigma", float("nan"))), n,
        float(meta.get("kappa_quantile", float("nan"))),
    )
