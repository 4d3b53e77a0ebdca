"""Flow-conditioned adapters (per-domain FiLM-style modulation) and routing."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import LayerNorm, Linear, Module, Tensor
from .errors import RoutingError, SchemaError


class Projection(Module):
    """Linear -> LayerNorm -> GELU."""

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float64, init: str = "fan_in"):
        self.linear = Linear(width, width, rng, dtype, init=init)
        self.norm = LayerNorm(width, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ad.gelu(self.norm(self.linear(x)))


def condition_hidden(flow_dim: int) -> int:
    return max(4 * flow_dim, 16)


class FlowAdapter(Module):
    """One domain's adapter at one network level.

    The condition MLP maps the flow vector to ``2 * width`` values split into
    a raw scale and a bias; the scale is ``1 + raw``. The condition MLP's
    output layer and the output projection's linear map start at zero, so a
    fresh adapter is the identity.
    """

    def __init__(self, width: int, flow_dim: int, rng: np.random.Generator, dtype=np.float64):
        if flow_dim < 1:
            raise SchemaError("flow_dim must be >= 1")
        self.width = width
        self.flow_dim = flow_dim
        hidden = condition_hidden(flow_dim)
        self.cond_fc1 = Linear(flow_dim, hidden, rng, dtype)
        self.cond_fc2 = Linear(hidden, 2 * width, rng, dtype, init="zero")
        self.proj_in = Projection(width, rng, dtype)
        self.proj_out = Projection(width, rng, dtype, init="zero")

    def modulation(self, flow: Tensor) -> tuple[Tensor, Tensor]:
        """Per-channel ``(scale, bias)`` rows of shape ``[1, width]``."""
        if flow.shape != (self.flow_dim,):
            raise SchemaError(f"flow vector has shape {flow.shape}, adapter expects ({self.flow_dim},)")
        raw = self.cond_fc2(ad.gelu(self.cond_fc1(ad.reshape(flow, (1, self.flow_dim)))))
        d = self.width
        return 1.0 + raw[:, :d], raw[:, d:]

    def forward(self, x: Tensor, flow: Tensor) -> Tensor:
        return fca_forward(x, flow, self)


def fca_forward(x: Tensor, flow: Tensor, params: FlowAdapter) -> Tensor:
    scale, bias = params.modulation(flow)
    y = params.proj_out((params.proj_in(x) + bias) * scale)
    return x + y


class AdapterBank(Module):
    """Parallel adapters for every registered domain at one FCA site."""

    def __init__(self, width: int, flow_dims: dict[int, int], rng: np.random.Generator, dtype=np.float64):
        # string keys so parameter names read "bank.adapters.2.proj_in..."
        self.adapters = {str(d): FlowAdapter(width, flow_dims[d], rng, dtype) for d in sorted(flow_dims)}

    def __len__(self) -> int:
        return len(self.adapters)

    def route(self, domain_id: int) -> FlowAdapter:
        try:
            return self.adapters[str(int(domain_id))]
        except KeyError:
            raise RoutingError(f"no adapter for domain {domain_id}; known: {sorted(self.adapters)}") from None

    def forward(self, x: Tensor, flow: Tensor, domain_id: int) -> Tensor:
        return fca_forward(x, flow, self.route(domain_id))


def routed_fca(x_batch: Sequence[Tensor], flow_batch: Sequence[Tensor], domain_ids: Sequence[int],
               bank: AdapterBank) -> list[Tensor]:
    """Apply each sample's own domain adapter.

    Only the active adapter is evaluated per sample, which equals computing
    every adapter and selecting with a one-hot mask, without needing flow
    vectors padded to a common length. Other adapters get no gradient.
    """
    if not len(x_batch) == len(flow_batch) == len(domain_ids):
        raise ValueError("batch lists differ in length")
    adapters = [bank.route(d) for d in domain_ids]
    return [fca_forward(x, c, a) for x, c, a in zip(x_batch, flow_batch, adapters)]
