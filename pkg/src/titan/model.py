"""The full mixture: experts, shared memory bank, gate and ablation variants."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .dataset import week_index
from .errors import ConfigError
from .experts import (
    ExpertOutput,
    MemoryExpert,
    SpatioTemporalExpert,
    TemporalExpert,
    VariableExpert,
)
from .numerics import Linear, Module, Tensor, parameter, xavier_uniform
from .routing import FREE, WARMUP, GateDecision, combine, expert_keys, gate, memory_query

VARIANTS = ("none", "no_semantics", "ensemble", "no_prior", "replaced_prior")
# variants whose gate never sees the prior
PRIORLESS = ("ensemble", "no_prior", "replaced_prior")


@dataclass
class ModelSpec:
    n_nodes: int
    n_features: int
    t_in: int = 12
    t_out: int = 12
    hidden_size: int = 32
    memory_size: int = 16
    layers: int = 1
    heads: int = 2
    rank: int = 4
    temperature: float = 1.0
    ablation: str = "none"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    forecast: Tensor
    experts: list[ExpertOutput]
    probs: Tensor
    decision: GateDecision | None


class TitanModel(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        if spec.ablation not in VARIANTS:
            raise ConfigError(f"unknown ablation {spec.ablation!r}; expected one of {VARIANTS}")
        if spec.n_nodes < 1 or spec.n_features < 1:
            raise ConfigError("model needs at least one node and one feature")
        self.spec = spec
        c, f, h = spec.hidden_size, spec.n_features, spec.heads
        self.memory = parameter(xavier_uniform(rng, spec.n_nodes, spec.memory_size))
        names = ["temporal", "spatio_temporal", "memory"]
        experts: list[Module] = [
            TemporalExpert(rng, f, c, h, spec.t_in, spec.t_out, spec.layers),
            SpatioTemporalExpert(rng, f, c, h, spec.t_in, spec.t_out, spec.layers),
            MemoryExpert(rng, f, c, spec.memory_size, h, spec.t_in, spec.t_out, spec.layers),
        ]
        if spec.ablation != "no_semantics":
            names.append("variable")
            experts.append(VariableExpert(rng, f, c, h, spec.t_in, spec.t_out, spec.rank, spec.layers))
        if spec.ablation == "replaced_prior":
            names.append("temporal_2")
            experts.append(TemporalExpert(rng, f, c, h, spec.t_in, spec.t_out, spec.layers))
        self.expert_names = names
        self.experts = experts
        if spec.ablation == "ensemble":
            self.mix_logits = parameter(np.zeros(len(experts)))
        else:
            self.gate_proj = Linear(rng, c, spec.memory_size)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def uses_prior(self) -> bool:
        return self.spec.ablation not in PRIORLESS

    def set_path_separation(self, on: bool) -> None:
        for e in self.experts:
            if isinstance(e, VariableExpert):
                e.separate_paths = on

    def run_experts(self, x: Tensor, week_idx: np.ndarray) -> list[ExpertOutput]:
        outs = []
        for e in self.experts:
            if isinstance(e, MemoryExpert):
                outs.append(e(x, self.memory))
            else:
                outs.append(e(x, week_idx))
        return outs

    def route(self, outs: list[ExpertOutput], prior=None) -> GateDecision:
        hiddens = [o.hidden for o in outs]
        pooled = nx.mean(nx.stack(hiddens, axis=0), axis=0)
        o = memory_query(pooled, self.memory, self.gate_proj)
        o_hat = expert_keys(hiddens, self.gate_proj)
        return gate(o, o_hat, prior, self.spec.temperature)

    def __call__(self, x, timestamps, prior=None, mode: str = "soft") -> ModelOutput:
        """Forecast for a batch ``x`` (B, T_in, N, F) with input timestamps (B, T_in)."""
        x = nx.as_tensor(x)
        if x.ndim != 4 or x.shape[2] != self.spec.n_nodes or x.shape[3] != self.spec.n_features:
            raise ConfigError(
                f"input shape {x.shape} does not match (B, T, {self.spec.n_nodes}, {self.spec.n_features})"
            )
        outs = self.run_experts(x, week_index(timestamps))
        forecasts = [o.forecast for o in outs]
        if self.spec.ablation == "ensemble":
            b = x.shape[0]
            weights = nx.softmax(self.mix_logits, axis=-1)
            probs = nx.mul(nx.reshape(weights, (1, -1)), np.ones((b, 1)))
            return ModelOutput(combine(forecasts, probs, "soft"), outs, probs, None)
        if not self.uses_prior:
            prior = None
        decision = self.route(outs, prior)
        pred = combine(forecasts, decision.probs, mode, decision.selected)
        return ModelOutput(pred, outs, decision.probs, decision)

    def predict(self, x, timestamps) -> tuple[np.ndarray, GateDecision | None]:
        """Inference: hard selection in the free phase (soft weights for ``ensemble``)."""
        with nx.no_grad():
            out = self(x, timestamps, prior=None, mode="hard")
        return out.forecast.data, out.decision


def phase_for(step: int, t_warm: int, model: TitanModel) -> str:
    return WARMUP if model.uses_prior and step < t_warm else FREE
