"""Parameter containers and the small layer zoo the model is built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor


class Module:
    """Base class: parameters are discovered from attributes in definition order.

    Attributes holding a grad-requiring :class:`Tensor`, a :class:`Module`, or a
    list/dict of modules are walked; anything else is ignored.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != parameter shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, dtype=dtype)


def uniform_init(rng: np.random.Generator, shape, bound: float, dtype) -> Tensor:
    return _param(rng.uniform(-bound, bound, size=shape), dtype)


class Linear(Module):
    """``y = x @ weight + bias`` with fan-in scaled uniform init.

    ``init`` may be ``"fan_in"`` (default), ``"small"`` (uniform +-1e-2) or
    ``"zero"``.
    """

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 dtype=np.float64, init: str = "fan_in", bias: bool = True):
        self.fan_in, self.fan_out = fan_in, fan_out
        if init == "fan_in":
            bound = 1.0 / np.sqrt(fan_in)
            self.weight = uniform_init(rng, (fan_in, fan_out), bound, dtype)
            self.bias = uniform_init(rng, (fan_out,), bound, dtype) if bias else None
        elif init == "small":
            self.weight = uniform_init(rng, (fan_in, fan_out), 1e-2, dtype)
            self.bias = uniform_init(rng, (fan_out,), 1e-2, dtype) if bias else None
        elif init == "zero":
            self.weight = _param(np.zeros((fan_in, fan_out)), dtype)
            self.bias = _param(np.zeros(fan_out), dtype) if bias else None
        else:
            raise ValueError(f"unknown init {init!r}")

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, width: int, dtype=np.float64, eps: float = 1e-5):
        self.gain = _param(np.ones(width), dtype)
        self.bias = _param(np.zeros(width), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gain, self.bias, axis=-1, eps=self.eps)


class MLP(Module):
    """Two linear layers with GELU between them."""

    def __init__(self, fan_in: int, hidden: int, fan_out: int, rng: np.random.Generator,
                 dtype=np.float64, out_init: str = "fan_in"):
        self.fc1 = Linear(fan_in, hidden, rng, dtype)
        self.fc2 = Linear(hidden, fan_out, rng, dtype, init=out_init)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class GRUCell(Module):
    """Gated recurrent unit over row-wise states.

    Gates ``r`` (reset) and ``z`` (update) use the logistic sigmoid, the
    candidate uses tanh, and the new state is ``(1 - z) * h + z * h_cand``;
    a closed update gate (z -> 0) keeps the old state.
    """

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float64):
        bound = 1.0 / np.sqrt(width)
        self.width = width
        # column blocks: [reset | update | candidate]
        self.w_input = uniform_init(rng, (width, 3 * width), bound, dtype)
        self.w_state = uniform_init(rng, (width, 3 * width), bound, dtype)
        self.b_input = uniform_init(rng, (3 * width,), bound, dtype)
        self.b_state = uniform_init(rng, (3 * width,), bound, dtype)
        self._calls = 0

    @property
    def calls(self) -> int:
        return self._calls

    def forward(self, state: Tensor, inp: Tensor) -> Tensor:
        return gru_cell(state, inp, self.w_input, self.w_state, self.b_input, self.b_state, owner=self)


def gru_cell(state: Tensor, inp: Tensor, w_input: Tensor, w_state: Tensor,
             b_input: Tensor, b_state: Tensor, owner: GRUCell | None = None) -> Tensor:
    if state.shape != inp.shape or state.ndim != 2:
        raise ShapeError(f"gru_cell: state {state.shape} and input {inp.shape} must match as [K, D]")
    d = state.shape[1]
    for name, t, shape in (("w_input", w_input, (d, 3 * d)), ("w_state", w_state, (d, 3 * d)),
                           ("b_input", b_input, (3 * d,)), ("b_state", b_state, (3 * d,))):
        if t.shape != shape:
            raise ShapeError(f"gru_cell: {name} has shape {t.shape}, expected {shape}")
    if owner is not None:
        owner._calls += 1
    gi = ops.matmul(inp, w_input) + b_input
    gh = ops.matmul(state, w_state) + b_state
    r = ops.sigmoid(gi[:, :d] + gh[:, :d])
    z = ops.sigmoid(gi[:, d:2 * d] + gh[:, d:2 * d])
    cand = ops.tanh(gi[:, 2 * d:] + r * gh[:, 2 * d:])
    return (1.0 - z) * state + z * cand
