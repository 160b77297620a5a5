"""Training loop: masked MAE, Adam, warmup/cosine schedule and prior annealing."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .dataset import (
    NormStats,
    SensorSeries,
    WindowSet,
    chrono_split,
    horizon_metrics,
    train_step_range,
    window_set,
    zscore_fit_transform,
)
from .errors import ConfigError, DivergenceError
from .model import VARIANTS, ModelSpec, TitanModel, phase_for
from .numerics import Tensor
from .routing import FREE, WARMUP, SelectionTally, route_loss, route_targets

log = logging.getLogger(__name__)

GRID = (16, 32, 48, 64, 80)
HISTORY_COLUMNS = ["epoch", "split", "horizon_step", "mae", "rmse", "mape", "lr", "phase"]


@dataclass
class TrainConfig:
    hidden_size: int = 16
    memory_size: int = 16
    layers: int = 1
    heads: int = 2
    rank: int = 4
    lr_max: float = 3e-3
    lr_min: float | None = None  # default lr_max / 100
    t_warm: int | None = None  # default: one epoch of steps
    t_freq: int | None = None  # default: five epochs of steps
    betas: tuple[float, float] = (0.9, 0.98)
    eps_adam: float = 1e-9
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    lambda_route: float = 0.01
    ablation: str = "none"
    temperature: float = 1.0
    grad_clip: float = 5.0
    patience: int = 10
    kappa_quantile: float = 0.7
    t_in: int = 12
    t_out: int = 12
    time_of_day: bool = True
    route_loss_always: bool = True
    mixture_loss: str = "expected"
    separate_lowrank_grad: bool = True
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.split_ratios = tuple(self.split_ratios)

    def validate(self) -> None:
        if self.mixture_loss not in ("expected", "combined", "both"):
            raise ConfigError(f"mixture_loss must be expected, combined or both, got {self.mixture_loss!r}")
        if self.ablation not in VARIANTS:
            raise ConfigError(f"ablation must be one of {VARIANTS}, got {self.ablation!r}")
        if not 1 <= self.layers <= 5:
            raise ConfigError(f"layers must be in 1..5, got {self.layers}")
        for key in ("hidden_size", "memory_size", "heads", "rank", "batch_size", "t_in", "t_out"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr_min is not None and not 0 <= self.lr_min < self.lr_max:
            raise ConfigError(f"need 0 <= lr_min < lr_max, got {self.lr_min} and {self.lr_max}")
        if self.t_warm is not None and self.t_warm < 0:
            raise ConfigError("t_warm must be >= 0")
        if self.t_freq is not None and self.t_freq < 1:
            raise ConfigError("t_freq must be >= 1")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {self.betas}")

    def resolved(self, steps_per_epoch: int) -> TrainConfig:
        """Copy with schedule defaults filled in."""
        return dataclasses.replace(
            self,
            lr_min=self.lr_max / 100 if self.lr_min is None else self.lr_min,
            t_warm=steps_per_epoch if self.t_warm is None else self.t_warm,
            t_freq=5 * steps_per_epoch if self.t_freq is None else self.t_freq,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> TrainConfig:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)


# -- schedule and optimizer ---------------------------------------------------------

def lr_schedule(t_cur: int, cfg) -> float:
    """Linear warmup from lr_min to lr_max, then periodic cosine decay.

    After warmup the cosine phase uses ``(t_cur - t_warm) mod t_freq`` so the
    two branches meet at ``t_warm``.
    """
    if t_cur < 0:
        raise ConfigError("step must be non-negative")
    lo, hi = cfg.lr_min, cfg.lr_max
    if cfg.t_warm and t_cur < cfg.t_warm:
        return lo + (hi - lo) * t_cur / cfg.t_warm
    t_post = (t_cur - (cfg.t_warm or 0)) % cfg.t_freq
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * t_post / cfg.t_freq))


class Adam:
    """Bias-corrected Adam over named parameters."""

    def __init__(self, named_params, betas=(0.9, 0.98), eps: float = 1e-9):
        self.named = list(named_params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named]
        self.v = [np.zeros_like(p.data) for _, p in self.named]

    def step(self, lr: float) -> None:
        grads = []
        for name, p in self.named:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter {name}")
            grads.append(g)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (_, p), g, m, v in zip(self.named, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def masked_mae(pred: Tensor, target, mask=None) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    mask = np.ones(target.shape) if mask is None else np.broadcast_to(np.asarray(mask, dtype=np.float64), target.shape)
    count = float(mask.sum())
    if count == 0:
        raise ConfigError("loss mask selects no entries")
    return nx.tsum(nx.tabs(pred - target) * mask) * (1.0 / count)


def expected_mae(probs: Tensor, forecasts, target, mask) -> Tensor:
    """Routing-weighted average of each expert's per-sample masked MAE."""
    target = np.asarray(target, dtype=np.float64)
    mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), target.shape)
    b = target.shape[0]
    counts = np.maximum(mask.reshape(b, -1).sum(axis=1), 1.0)
    per = []
    for f in forecasts:
        err = nx.tabs(f - target) * mask
        per.append(nx.tsum(nx.reshape(err, (b, -1)), axis=1) / counts)
    per_sample = nx.stack(per, axis=1)  # (B, E)
    return nx.tsum(per_sample * probs) * (1.0 / b)


def loss(pred: Tensor, target, mask=None, decision=None, expert_forecasts=None, lambda_route: float = 0.0) -> Tensor:
    """Masked MAE plus ``lambda_route`` times the routing cross-entropy."""
    total = masked_mae(pred, target, mask)
    if decision is not None and lambda_route > 0 and expert_forecasts is not None:
        labels = route_targets(expert_forecasts, np.asarray(target), np.ones_like(target) if mask is None else mask)
        total = total + route_loss(decision.logits, labels) * lambda_route
    return total


# -- data preparation -----------------------------------------------------------------

@dataclass
class PreparedData:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    stats: NormStats
    sensor_ids: list[str]
    raw: SensorSeries
    normalized: SensorSeries
    train_range: range

    @property
    def n_features(self) -> int:
        return self.train.x.shape[-1]


def prepare_data(series: SensorSeries, cfg: TrainConfig, stats: NormStats | None = None) -> PreparedData:
    """Normalize on training rows only, window, and split chronologically with purging.

    Passing ``stats`` reuses stored normalization instead of refitting.
    """
    rows = train_step_range(series.n_steps, cfg.t_in, cfg.t_out, cfg.split_ratios)
    if stats is None:
        normed, stats = zscore_fit_transform(series, rows)
    else:
        values = np.where(series.missing_mask, 0.0, stats.transform(series.values))
        normed = dataclasses.replace(series, values=values)
    ws = window_set(normed, cfg.t_in, cfg.t_out, add_time_of_day=cfg.time_of_day, normalized=True)
    train, val, test = chrono_split(ws, cfg.split_ratios, purge=True)
    return PreparedData(train, val, test, stats, list(series.sensor_ids), series, normed, rows)


# -- evaluation -------------------------------------------------------------------------

@dataclass
class Evaluation:
    pred: np.ndarray  # de-normalized, (W, T_out, N, 1)
    target: np.ndarray
    mask: np.ndarray
    rows: list
    tally: SelectionTally | None

    @property
    def avg(self):
        return self.rows[-1][1]


def predict_windows(model: TitanModel, ws: WindowSet, batch_size: int = 64):
    preds, tally = [], None
    if model.spec.ablation != "ensemble":
        tally = SelectionTally(model.n_experts)
    for start in range(0, len(ws), batch_size):
        xb = ws.x[start:start + batch_size]
        tb = ws.x_timestamps[start:start + batch_size]
        pred, decision = model.predict(xb, tb)
        preds.append(pred)
        if tally is not None and decision is not None:
            tally.update(decision)
    return np.concatenate(preds, axis=0), tally


def evaluate(model: TitanModel, ws: WindowSet, stats: NormStats, batch_size: int = 64) -> Evaluation:
    pred, tally = predict_windows(model, ws, batch_size)
    pred = stats.inverse(pred)
    target = stats.inverse(ws.y) if ws.normalized else ws.y
    return Evaluation(pred, target, ws.y_mask, horizon_metrics(pred, target, ws.y_mask), tally)


# -- training ------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: TitanModel
    config: TrainConfig  # resolved
    history: list[dict] = field(default_factory=list)
    routing_log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = float("nan")
    steps: int = 0
    seconds: float = 0.0
    transition_step: int | None = None


def _snapshot(model: TitanModel) -> list[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def _restore(model: TitanModel, snap: list[np.ndarray]) -> None:
    for p, d in zip(model.parameters(), snap):
        p.data[...] = d


def build_model(cfg: TrainConfig, n_nodes: int, n_features: int) -> TitanModel:
    spec = ModelSpec(
        n_nodes=n_nodes,
        n_features=n_features,
        t_in=cfg.t_in,
        t_out=cfg.t_out,
        hidden_size=cfg.hidden_size,
        memory_size=cfg.memory_size,
        layers=cfg.layers,
        heads=cfg.heads,
        rank=cfg.rank,
        temperature=cfg.temperature,
        ablation=cfg.ablation,
    )
    # init stream is seed + 0, shuffling uses seed + 1
    return TitanModel(spec, np.random.default_rng(cfg.seed))


def _history_rows(epoch: int, split: str, rows, lr: float, phase: str) -> list[dict]:
    return [
        {"epoch": epoch, "split": split, "horizon_step": step, "mae": m.mae, "rmse": m.rmse,
         "mape": m.mape, "lr": lr, "phase": phase}
        for step, m in rows
    ]


def train(
    cfg: TrainConfig,
    data: PreparedData,
    prior=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train with the prior fed to the gate for the first ``t_warm`` steps.

    Keeps the parameters with the best validation MAE; stops after
    ``patience`` epochs without improvement.
    """
    cfg.validate()
    n_train = len(data.train)
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    rcfg = cfg.resolved(steps_per_epoch)
    model = build_model(rcfg, len(data.sensor_ids), data.n_features)
    model.set_path_separation(rcfg.separate_lowrank_grad)
    if model.uses_prior and prior is None:
        raise ConfigError(f"ablation {rcfg.ablation!r} needs a prior graph")
    prior_w = None
    if model.uses_prior:
        prior_w = np.asarray(getattr(prior, "w", prior), dtype=np.float64)
        if prior_w.shape != (model.spec.n_nodes,) * 2:
            raise ConfigError(f"prior shape {prior_w.shape} does not match {model.spec.n_nodes} sensors")
    shuffle_rng = np.random.default_rng(rcfg.seed + 1)
    named = list(model.named_parameters())
    params = [p for _, p in named]
    opt = Adam(named, rcfg.betas, rcfg.eps_adam)

    result = TrainResult(model=model, config=rcfg)
    best = _snapshot(model)
    best_mae = math.inf
    stale = 0
    step = 0
    t0 = time.perf_counter()
    lr = lr_schedule(0, rcfg)
    phase = phase_for(0, rcfg.t_warm, model)

    for epoch in range(1, rcfg.epochs + 1):
        order = shuffle_rng.permutation(n_train)
        tally = SelectionTally(model.n_experts) if model.spec.ablation != "ensemble" else None
        mae_sum, n_batches = 0.0, 0
        for start in range(0, n_train, rcfg.batch_size):
            idx = np.sort(order[start:start + rcfg.batch_size])
            xb, tb = data.train.x[idx], data.train.x_timestamps[idx]
            yb, mb = data.train.y[idx], data.train.y_mask[idx]
            phase = phase_for(step, rcfg.t_warm, model)
            if phase == FREE and result.transition_step is None and model.uses_prior:
                result.transition_step = step
                log.info("prior annealed out of the gate at step %d (epoch %d)", step, epoch)
            out = model(xb, tb, prior=prior_w if phase == WARMUP else None, mode="soft")
            mae_term = masked_mae(out.forecast, yb, mb)
            if rcfg.mixture_loss == "expected" and out.decision is not None:
                total = expected_mae(out.probs, [o.forecast for o in out.experts], yb, mb)
            elif rcfg.mixture_loss == "both" and out.decision is not None:
                total = mae_term + expected_mae(out.probs, [o.forecast for o in out.experts], yb, mb)
            else:
                total = mae_term
            if out.decision is not None and rcfg.lambda_route > 0 and (rcfg.route_loss_always or phase == FREE):
                labels = route_targets([o.forecast for o in out.experts], yb, mb)
                total = total + route_loss(out.decision.logits, labels) * rcfg.lambda_route
            value = total.item()
            if not math.isfinite(value):
                _restore(model, best)
                raise DivergenceError(f"loss became {value} at step {step} (epoch {epoch})", last_good=best)
            model.zero_grad()
            total.backward()
            clip_grad_norm(params, rcfg.grad_clip)
            lr = lr_schedule(step, rcfg)
            try:
                opt.step(lr)
            except DivergenceError as exc:
                _restore(model, best)
                exc.last_good = best
                raise
            if tally is not None and out.decision is not None:
                tally.update(out.decision)
            mae_sum += mae_term.item()
            n_batches += 1
            step += 1

        train_mae = mae_sum / max(n_batches, 1)
        val = evaluate(model, data.val, data.stats)
        result.history.append(
            {"epoch": epoch, "split": "train", "horizon_step": "avg", "mae": train_mae, "rmse": "",
             "mape": "", "lr": lr, "phase": phase}
        )
        result.history.extend(_history_rows(epoch, "val", val.rows, lr, phase))
        entry = {"epoch": epoch, "phase": phase}
        if tally is not None:
            entry["selections"] = tally.samples.tolist()
            entry["node_selections"] = tally.nodes.tolist()
            entry["mean_probs"] = tally.mean_probs()
        else:
            w = nx.softmax(model.mix_logits).data
            entry["selections"] = [0] * model.n_experts
            entry["mean_probs"] = w.tolist()
        result.routing_log.append(entry)
        log.info(json.dumps(entry))
        log.info("epoch %d train_mae=%.4f val_mae=%.4f lr=%.2e", epoch, train_mae, val.avg.mae, lr)
        if on_epoch is not None:
            on_epoch(entry)
        if val.avg.mae < best_mae:
            best_mae = val.avg.mae
            best = _snapshot(model)
            result.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if rcfg.patience > 0 and stale >= rcfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                break

    _restore(model, best)
    result.best_val_mae = best_mae
    result.steps = step
    result.seconds = time.perf_counter() - t0
    return result


def write_history_csv(history: list[dict], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([_fmt(row[c]) for c in HISTORY_COLUMNS])


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_routing_log(entries: list[dict], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")
