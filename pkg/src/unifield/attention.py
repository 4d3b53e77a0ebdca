"""Vector self-attention over kNN neighbourhoods and the residual transformer block."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, LayerNorm, Linear, Module, Tensor


def relative_positions(p_query: np.ndarray, p_ref: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    """``p_query[i] - p_ref[nbr[i, j]]`` as an ``[Nq, k, 3]`` array."""
    return p_query[:, None, :] - p_ref[nbr]


def vector_attention(q: Tensor, keys: Tensor, values: Tensor, delta: Tensor, nbr: np.ndarray,
                     gamma: Module) -> tuple[Tensor, Tensor]:
    """Channel-wise attention of each query row over its neighbour rows.

    Args:
        q: query features ``[Nq, D]``.
        keys, values: reference features ``[Nr, D]``.
        delta: positional encodings ``[Nq, k, D]``.
        nbr: neighbour indices into the reference rows, ``[Nq, k]``.
        gamma: maps ``q_i - k_j + delta_ij`` to per-channel logits.

    Returns:
        ``(y, weights)`` with ``y`` of shape ``[Nq, D]`` and softmax weights
        ``[Nq, k, D]`` normalized over the neighbour axis.
    """
    nbr = np.asarray(nbr)
    if nbr.ndim != 2 or nbr.shape[0] != q.shape[0]:
        raise ValueError(f"neighbour index shape {nbr.shape} does not match {q.shape[0]} queries")
    if nbr.size and (nbr.min() < 0 or nbr.max() >= keys.shape[0]):
        raise IndexError(f"neighbour index out of range for {keys.shape[0]} reference points")
    k_nbr = ad.gather(keys, nbr)
    v_nbr = ad.gather(values, nbr)
    q_rows = ad.reshape(q, (q.shape[0], 1, q.shape[1]))
    logits = gamma(q_rows - k_nbr + delta)
    weights = ad.softmax(logits, axis=1)
    y = ad.sum(weights * (v_nbr + delta), axis=1)
    return y, weights


class VectorSelfAttention(Module):
    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float64):
        self.width = width
        self.query = Linear(width, width, rng, dtype)
        self.key = Linear(width, width, rng, dtype)
        self.value = Linear(width, width, rng, dtype, init="small")
        self.pos = MLP(3, width, width, rng, dtype, out_init="small")
        self.gamma = MLP(width, width, width, rng, dtype, out_init="small")

    def forward(self, x: Tensor, p: np.ndarray, nbr: np.ndarray, return_weights: bool = False):
        rel = relative_positions(p, p, nbr).astype(x.dtype)
        delta = self.pos(Tensor(rel, dtype=x.dtype))
        y, w = vector_attention(self.query(x), self.key(x), self.value(x), delta, nbr, self.gamma)
        return (y, w) if return_weights else y


class FeedForward(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        self.fc1 = Linear(width, hidden, rng, dtype)
        self.fc2 = Linear(hidden, width, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class PointTransformerBlock(Module):
    """``x + attn(x)`` followed by ``x + ffn(x)``.

    ``norm=True`` adds pre-normalization on both residual branches; the
    default is the bare residual form.
    """

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float64,
                 ffn_ratio: int = 4, norm: bool = False):
        self.attn = VectorSelfAttention(width, rng, dtype)
        self.ffn = FeedForward(width, ffn_ratio * width, rng, dtype)
        if norm:
            self.norm_attn = LayerNorm(width, dtype)
            self.norm_ffn = LayerNorm(width, dtype)
        self._norm = norm

    def forward(self, x: Tensor, p: np.ndarray, nbr: np.ndarray) -> Tensor:
        h = self.norm_attn(x) if self._norm else x
        x = x + self.attn(h, p, nbr)
        h = self.norm_ffn(x) if self._norm else x
        return x + self.ffn(h)
