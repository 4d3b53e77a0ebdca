"""Attention-based downsampling: FPS centres refined by slot-style aggregation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import FeedForward, relative_positions, vector_attention
from .autodiff import GRUCell, Linear, MLP, Module, Tensor, gather
from .geometry import as_points, farthest_point_sampling, knn, knn_features


@dataclass
class SlotState:
    features: Tensor      # [K, D]
    positions: np.ndarray  # [K, 3], fixed FPS coordinates
    index: np.ndarray      # [K] rows of the input level the slots started from


class SemanticAggregation(Module):
    """Downsample ``(x, p)`` to ``count`` slots.

    Slots start at FPS-selected points and take their features. Each
    iteration attends from every slot to its ``k`` nearest input points,
    feeds the attention output through a GRU update of the slot state and
    finishes with a residual feed-forward layer. Slot positions never move.

    ``neighbor_space="features"`` picks the neighbours by feature distance
    instead of coordinate distance.
    """

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float64, ffn_ratio: int = 4,
                 k: int = 16, iterations: int = 1, neighbor_space: str = "coords"):
        if iterations < 1:
            raise ValueError("iterations must be >= 1")
        if neighbor_space not in ("coords", "features"):
            raise ValueError(f"unknown neighbor_space {neighbor_space!r}")
        self.query = Linear(width, width, rng, dtype)
        self.key = Linear(width, width, rng, dtype)
        self.value = Linear(width, width, rng, dtype, init="small")
        self.pos = MLP(3, width, width, rng, dtype, out_init="small")
        self.gamma = MLP(width, width, width, rng, dtype, out_init="small")
        self.gru = GRUCell(width, rng, dtype)
        self.ffn = FeedForward(width, ffn_ratio * width, rng, dtype)
        self._k = k
        self._iterations = iterations
        self._neighbor_space = neighbor_space

    def forward(self, x: Tensor, p: np.ndarray, count: int, seed_index: int = 0,
                return_weights: bool = False):
        return aggregate(x, p, count, self, iterations=self._iterations, k=self._k,
                         seed_index=seed_index, neighbor_space=self._neighbor_space,
                         return_weights=return_weights)


def aggregate(x: Tensor, p, count: int, params: SemanticAggregation, iterations: int = 1,
              k: int = 16, seed_index: int = 0, neighbor_space: str = "coords",
              return_weights: bool = False):
    pts = as_points(p)
    n = pts.shape[0]
    if x.shape[0] != n:
        raise ValueError(f"features have {x.shape[0]} rows but there are {n} points")
    if not 1 <= count <= n:
        raise ValueError(f"slot count must be in [1, {n}], got {count}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    k = min(k, n)

    centres = farthest_point_sampling(pts, count, seed_index)
    slot_pos = pts[centres]
    slots = gather(x, centres)
    keys = params.key(x)
    values = params.value(x)
    nbr = knn(slot_pos, pts, k) if neighbor_space == "coords" else None
    weights = []
    for _ in range(iterations):
        if neighbor_space == "features":
            nbr = knn_features(slots.data, x.data, k)
        rel = relative_positions(slot_pos, pts, nbr).astype(x.dtype)
        delta = params.pos(Tensor(rel, dtype=x.dtype))
        y, w = vector_attention(params.query(slots), keys, values, delta, nbr, params.gamma)
        weights.append(w)
        slots = params.gru(slots, y)
        slots = slots + params.ffn(slots)
    state = SlotState(slots, slot_pos, centres)
    return (state, weights) if return_weights else state
