"""Memory-query gate with optional prior mixing, and forecast combination.

Batched shapes: pooled/expert hidden states are (B, N, d_h); the query ``O`` is
(B, N, m); expert keys ``O_hat`` are (B, E, N, m); probabilities are (B, E).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import Tensor

WARMUP = "warmup"
FREE = "free"
COSINE_FLOOR = 1e-12


def memory_query(x_pooled: Tensor, memory: Tensor, proj=None) -> Tensor:
    """softmax(proj(x) M^T / sqrt(m)) M, attending over the rows of M."""
    q = proj(x_pooled) if proj is not None else nx.as_tensor(x_pooled)
    m = memory.shape[-1]
    if q.shape[-1] != m:
        raise ConfigError(f"query width {q.shape[-1]} != memory width {m}; a projection is required")
    scores = nx.matmul(q, nx.transpose(memory)) * (1.0 / math.sqrt(m))
    return nx.matmul(nx.softmax(scores, axis=-1), memory)


def expert_keys(hiddens, proj=None) -> Tensor:
    """Per expert: softmax(P P^T / sqrt(m)) P with P the projected hidden state.

    ``hiddens`` is a sequence of (B, N, d_h) tensors; the result is stacked on
    axis 1.
    """
    keys = []
    for h in hiddens:
        p = proj(h) if proj is not None else nx.as_tensor(h)
        m = p.shape[-1]
        att = nx.softmax(nx.matmul(p, nx.swapaxes(p, -1, -2)) * (1.0 / math.sqrt(m)), axis=-1)
        keys.append(nx.matmul(att, p))
    return nx.stack(keys, axis=1)


@dataclass
class GateDecision:
    probs: Tensor  # (B, E)
    logits: Tensor  # (B, E) scores / temperature
    selected: np.ndarray  # (B,)
    phase: str
    o: Tensor
    o_hat: Tensor
    node_selected: np.ndarray = field(default=None)  # (B, N)

    @property
    def n_experts(self) -> int:
        return self.probs.shape[-1]


def _prior_matrix(prior) -> np.ndarray | None:
    if prior is None:
        return None
    return np.asarray(getattr(prior, "w", prior), dtype=np.float64)


def gate(o: Tensor, o_hat: Tensor, prior=None, temperature: float = 1.0) -> GateDecision:
    """Cosine similarity between the (prior-mixed) query and each expert key.

    With a prior (warmup phase) the query is ``W_DTW @ O``, mixing node rows.
    Zero-norm vectors score 0.
    """
    if not temperature > 0:
        raise ConfigError(f"gate temperature must be positive, got {temperature}")
    w = _prior_matrix(prior)
    q = nx.matmul(w, o) if w is not None else o
    b, n, m = q.shape
    q4 = nx.reshape(q, (b, 1, n, m))
    dots = nx.tsum(q4 * o_hat, axis=(2, 3))  # (B, E)
    qn = nx.sqrt(nx.tsum(q4 * q4, axis=(2, 3)))  # (B, 1)
    kn = nx.sqrt(nx.tsum(o_hat * o_hat, axis=(2, 3)))  # (B, E)
    score = dots / nx.clamp_min(qn * kn, COSINE_FLOOR)
    logits = score * (1.0 / temperature)
    probs = nx.softmax(logits, axis=-1)

    # per-node readout for selection tallies
    qd, kd = q4.data, o_hat.data
    node_dot = (qd * kd).sum(-1)
    node_norm = np.sqrt((qd * qd).sum(-1)) * np.sqrt((kd * kd).sum(-1))
    node_cos = np.where(node_norm >= COSINE_FLOOR, node_dot / np.maximum(node_norm, COSINE_FLOOR), 0.0)
    return GateDecision(
        probs=probs,
        logits=logits,
        selected=np.argmax(probs.data, axis=-1),
        phase=WARMUP if w is not None else FREE,
        o=o,
        o_hat=o_hat,
        node_selected=np.argmax(node_cos, axis=1),
    )


def combine(forecasts, probs, mode: str = "soft", selected=None) -> Tensor:
    """Soft: probability-weighted sum. Hard: each sample takes its selected expert."""
    stacked = nx.stack(forecasts, axis=1)  # (B, E, T, N, 1)
    if mode == "soft":
        b, e = stacked.shape[:2]
        weights = nx.reshape(nx.as_tensor(probs), (b, e) + (1,) * (stacked.ndim - 2))
        return nx.tsum(stacked * weights, axis=1)
    if mode == "hard":
        if selected is None:
            selected = np.argmax(nx.as_tensor(probs).data, axis=-1)
        sel = np.asarray(selected)
        return Tensor(stacked.data[np.arange(len(sel)), sel])
    raise ConfigError(f"unknown combine mode {mode!r}")


class SelectionTally:
    """Hard-selection counts per expert, per routed sample and per node."""

    def __init__(self, n_experts: int):
        self.samples = np.zeros(n_experts, dtype=np.int64)
        self.nodes = np.zeros(n_experts, dtype=np.int64)
        self.prob_sum = np.zeros(n_experts)
        self.routed = 0

    def update(self, decision: GateDecision) -> None:
        e = len(self.samples)
        self.samples += np.bincount(decision.selected, minlength=e)
        if decision.node_selected is not None:
            self.nodes += np.bincount(decision.node_selected.ravel(), minlength=e)
        self.prob_sum += decision.probs.data.sum(axis=0)
        self.routed += len(decision.selected)

    def mean_probs(self) -> list[float]:
        if self.routed == 0:
            return [float("nan")] * len(self.samples)
        return (self.prob_sum / self.routed).tolist()


def route_targets(expert_forecasts, target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Index of the expert with the lowest masked MAE per sample (lowest index on ties)."""
    mask = np.broadcast_to(mask, target.shape).astype(np.float64)
    denom = np.maximum(mask.reshape(len(mask), -1).sum(axis=1), 1.0)
    errs = []
    for f in expert_forecasts:
        fd = f.data if isinstance(f, Tensor) else np.asarray(f)
        errs.append((np.abs(fd - target) * mask).reshape(len(mask), -1).sum(axis=1) / denom)
    return np.argmin(np.stack(errs, axis=1), axis=1)


def route_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) and one-hot labels."""
    logp = nx.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -nx.tsum(logp * onehot) * (1.0 / len(labels))
