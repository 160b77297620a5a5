"""The four forecasting experts.

All experts take a batch ``x`` of shape (B, T_in, N, F) and return an
``ExpertOutput`` with a forecast of shape (B, T_out, N, 1) and a routing hidden
state of shape (B, N, d_h).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import MSA, Linear, Module, Tensor, parameter, xavier_uniform


@dataclass
class ExpertOutput:
    forecast: Tensor
    hidden: Tensor


class AttentionBlock(Module):
    """Residual self-attention followed by a residual two-layer ReLU MLP."""

    def __init__(self, rng, dim: int, heads: int):
        self.msa = MSA(rng, dim, heads)
        self.ff1 = Linear(rng, dim, dim)
        self.ff2 = Linear(rng, dim, dim)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        attended, hidden = self.msa(x)
        z = x + attended
        z = z + self.ff2(nx.relu(self.ff1(z)))
        return z, hidden


class ForecastHead(Module):
    """Flattens (B, N, T, C) over time and maps each node to T_out values."""

    def __init__(self, rng, t_in: int, dim: int, t_out: int):
        self.proj = Linear(rng, t_in * dim, t_out)

    def __call__(self, z: Tensor) -> Tensor:
        b, n, t, c = z.shape
        out = self.proj(nx.reshape(z, (b, n, t * c)))  # (B, N, T_out)
        return nx.reshape(nx.transpose(out, (0, 2, 1)), (b, out.shape[2], n, 1))


def _check_layers(layers: int) -> None:
    if not 1 <= layers <= 5:
        raise ConfigError(f"layers must be in 1..5, got {layers}")


class TemporalExpert(Module):
    """Attention over time per node, with a learned day-of-week embedding."""

    def __init__(self, rng, n_features: int, hidden: int, heads: int, t_in: int, t_out: int, layers: int = 1):
        _check_layers(layers)
        self.embed = Linear(rng, n_features, hidden)
        self.week = parameter(xavier_uniform(rng, 7, hidden))
        self.blocks = [AttentionBlock(rng, hidden, heads) for _ in range(layers)]
        self.head = ForecastHead(rng, t_in, hidden, t_out)

    def __call__(self, x: Tensor, week_idx=None) -> ExpertOutput:
        if week_idx is None:
            raise ConfigError("temporal expert needs per-step timestamps (week index)")
        week_idx = np.asarray(week_idx)
        b, t, n, _ = x.shape
        if week_idx.shape != (b, t):
            raise ConfigError(f"week index shape {week_idx.shape} != {(b, t)}")
        periodic = nx.take_rows(self.week, week_idx)  # (B, T, C)
        emb = self.embed(x) + nx.reshape(periodic, (b, t, 1, periodic.shape[-1]))
        z = nx.transpose(emb, (0, 2, 1, 3))  # (B, N, T, C)
        for block in self.blocks:
            z, h = block(z)
        return ExpertOutput(self.head(z), nx.mean(h, axis=2))


class SpatioTemporalExpert(Module):
    """Attention across nodes at each step, then across steps at each node."""

    def __init__(self, rng, n_features: int, hidden: int, heads: int, t_in: int, t_out: int, layers: int = 1):
        _check_layers(layers)
        self.embed = Linear(rng, n_features, hidden)
        self.spatial = [AttentionBlock(rng, hidden, heads) for _ in range(layers)]
        self.temporal = [AttentionBlock(rng, hidden, heads) for _ in range(layers)]
        self.head = ForecastHead(rng, t_in, hidden, t_out)

    def __call__(self, x: Tensor, week_idx=None) -> ExpertOutput:
        z = self.embed(x)  # (B, T, N, C): attention runs over N
        for sp, tp in zip(self.spatial, self.temporal):
            z, _ = sp(z)
            z, h = tp(nx.transpose(z, (0, 2, 1, 3)))  # (B, N, T, C)
            z = nx.transpose(z, (0, 2, 1, 3))
        z = nx.transpose(z, (0, 2, 1, 3))
        return ExpertOutput(self.head(z), nx.mean(h, axis=2))


class MemoryExpert(Module):
    """Graph mixing with an adjacency derived from the memory bank, then attention over time."""

    def __init__(self, rng, n_features: int, hidden: int, memory_size: int, heads: int, t_in: int, t_out: int, layers: int = 1):
        _check_layers(layers)
        self.w_e = parameter(xavier_uniform(rng, memory_size, hidden))
        self.w_gcn = parameter(xavier_uniform(rng, n_features, hidden))
        self.blocks = [AttentionBlock(rng, hidden, heads) for _ in range(layers)]
        self.head = ForecastHead(rng, t_in, hidden, t_out)

    def adjacency(self, memory: Tensor) -> Tensor:
        e = nx.matmul(memory, self.w_e)
        return nx.softmax(nx.relu(nx.matmul(e, nx.transpose(e))), axis=-1)

    def __call__(self, x: Tensor, memory: Tensor, week_idx=None) -> ExpertOutput:
        n = x.shape[2]
        if memory.shape[0] != n:
            raise ConfigError(f"memory bank has {memory.shape[0]} rows but input has {n} nodes")
        a = self.adjacency(memory)
        emb = nx.matmul(nx.matmul(a, x), self.w_gcn)  # (B, T, N, C)
        z = nx.transpose(emb, (0, 2, 1, 3))
        for block in self.blocks:
            z, h = block(z)
        return ExpertOutput(self.head(z), nx.mean(h, axis=2))


class LowRankAdapter(Module):
    """Rank-r bridge ``enc @ w_a @ w_b`` from token width to the routing hidden width."""

    def __init__(self, rng, d_model: int, d_hidden: int, rank: int):
        if not 0 < rank < min(d_model, d_hidden):
            raise ConfigError(f"adapter rank {rank} must be in 1..{min(d_model, d_hidden) - 1}")
        self.rank = rank
        self.w_a = parameter(xavier_uniform(rng, d_model, rank))
        self.w_b = parameter(xavier_uniform(rng, rank, d_hidden))

    def __call__(self, enc: Tensor) -> Tensor:
        return nx.matmul(nx.matmul(enc, self.w_a), self.w_b)


class VariableExpert(Module):
    """One token per sensor built from its whole input history; attention across sensors.

    With ``separate_paths`` the adapter sees a detached copy of the encoding,
    so losses reaching the hidden state train only the adapter.
    """

    def __init__(self, rng, n_features: int, hidden: int, heads: int, t_in: int, t_out: int, rank: int, layers: int = 1):
        _check_layers(layers)
        self.n_features = n_features
        width = n_features * hidden
        self.embed = Linear(rng, t_in, hidden)
        self.blocks = [AttentionBlock(rng, width, heads) for _ in range(layers)]
        self.head = Linear(rng, width, t_out)
        self.adapter = LowRankAdapter(rng, width, hidden, rank)
        self.separate_paths = True

    def encode(self, x: Tensor) -> Tensor:
        b, t, n, f = x.shape
        tokens = self.embed(nx.transpose(x, (0, 2, 3, 1)))  # (B, N, F, C)
        z = nx.reshape(tokens, (b, n, f * tokens.shape[-1]))
        for block in self.blocks:
            z, _ = block(z)
        return z

    def __call__(self, x: Tensor, week_idx=None) -> ExpertOutput:
        b, _, n, _ = x.shape
        enc = self.encode(x)
        out = self.head(enc)  # (B, N, T_out)
        forecast = nx.reshape(nx.transpose(out, (0, 2, 1)), (b, out.shape[2], n, 1))
        bridge_in = enc.detach() if self.separate_paths else enc
        return ExpertOutput(forecast, self.adapter(bridge_in))
