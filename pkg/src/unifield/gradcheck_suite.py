"""Finite-difference suites over every differentiable op and the assembled model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .adapters import FlowAdapter, fca_forward
from .aggregation import SemanticAggregation
from .attention import PointTransformerBlock
from .autodiff import GRUCell, Tensor, check_gradients
from .datasets import synthetic_registry
from .geometry import knn, knn_interpolate
from .model import ModelConfig, UniField

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} max_rel_err={self.error:.3e} tol={self.tol:.0e} ({self.seconds:.2f}s)"


def _t(rng, *shape, scale=1.0, requires_grad=True) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale, requires_grad=requires_grad)


def _perturb(module, rng, scale: float = 0.3) -> None:
    # move zero-initialized layers off zero so every path carries gradient
    for _, p in module.named_parameters():
        p.data = p.data + rng.normal(scale=scale, size=p.shape)


def _op_cases(rng) -> dict[str, Callable[[], float]]:
    cases: dict[str, Callable[[], float]] = {}

    def unary(name, op, x):
        w = rng.normal(size=op(x).shape)
        cases[name] = lambda: check_gradients(lambda: ad.sum(op(x) * Tensor(w)), [x])

    def binary(name, op, a, b):
        w = rng.normal(size=op(a, b).shape)
        cases[name] = lambda: check_gradients(lambda: ad.sum(op(a, b) * Tensor(w)), [a, b])

    binary("add (broadcast)", ad.add, _t(rng, 3, 4), _t(rng, 4))
    binary("sub (broadcast)", ad.sub, _t(rng, 3, 1), _t(rng, 3, 4))
    binary("mul (broadcast)", ad.mul, _t(rng, 2, 3, 4), _t(rng, 3, 1))
    binary("div", ad.div, _t(rng, 3, 4), Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True))
    binary("matmul", ad.matmul, _t(rng, 3, 4), _t(rng, 4, 2))
    binary("matmul (batched rows)", ad.matmul, _t(rng, 2, 3, 4), _t(rng, 4, 2))
    unary("neg", ad.neg, _t(rng, 5))
    unary("abs", ad.abs, Tensor(rng.uniform(0.1, 1.0, 6) * rng.choice([-1, 1], 6), requires_grad=True))
    unary("square", ad.square, _t(rng, 5))
    unary("sqrt", ad.sqrt, Tensor(rng.uniform(0.5, 2.0, 5), requires_grad=True))
    unary("exp", ad.exp, _t(rng, 5))
    unary("log", ad.log, Tensor(rng.uniform(0.5, 2.0, 5), requires_grad=True))
    unary("sigmoid", ad.sigmoid, _t(rng, 3, 4, scale=2.0))
    unary("tanh", ad.tanh, _t(rng, 3, 4))
    unary("gelu", ad.gelu, _t(rng, 3, 4, scale=2.0))
    unary("softmax axis=1", lambda x: ad.softmax(x, axis=1), _t(rng, 3, 4, 2))
    unary("sum axis=0", lambda x: ad.sum(x, axis=0), _t(rng, 3, 4))
    unary("mean axis=(0,2)", lambda x: ad.mean(x, axis=(0, 2)), _t(rng, 2, 3, 4))
    unary("max axis=1", lambda x: ad.max(x, axis=1), _t(rng, 3, 5))
    unary("getitem slice", lambda x: x[:, 1:3], _t(rng, 3, 4))
    idx = np.array([[0, 2], [2, 2], [1, 0]])
    unary("gather (repeated rows)", lambda x: ad.gather(x, idx), _t(rng, 3, 2))

    a, b = _t(rng, 2, 3), _t(rng, 4, 3)
    w = rng.normal(size=(6, 3))
    cases["concat axis=0"] = lambda: check_gradients(lambda: ad.sum(ad.concat([a, b], 0) * Tensor(w)), [a, b])

    x, g, bias = _t(rng, 4, 5), _t(rng, 5), _t(rng, 5)
    wl = rng.normal(size=(4, 5))
    cases["layernorm"] = lambda: check_gradients(
        lambda: ad.sum(ad.layernorm(x, g, bias) * Tensor(wl)), [x, g, bias])

    gru = GRUCell(3, rng)
    h, inp = _t(rng, 2, 3), _t(rng, 2, 3)
    wg = rng.normal(size=(2, 3))
    cases["gru_cell"] = lambda: check_gradients(
        lambda: ad.sum(gru(h, inp) * Tensor(wg)), [h, inp] + gru.parameters())

    coarse = rng.normal(size=(6, 3))
    fine = rng.normal(size=(10, 3))
    feats = _t(rng, 6, 4)
    wi = rng.normal(size=(10, 4))
    cases["knn_interpolate"] = lambda: check_gradients(
        lambda: ad.sum(knn_interpolate(feats, coarse, fine, 3) * Tensor(wi)), [feats])

    pts = rng.normal(size=(6, 3))
    nbr = knn(pts, pts, 3)
    block = PointTransformerBlock(4, rng)
    _perturb(block, rng, 0.1)
    xb = _t(rng, 6, 4)
    wb = rng.normal(size=(6, 4))
    cases["point_transformer_block"] = lambda: check_gradients(
        lambda: ad.sum(block(xb, pts, nbr) * Tensor(wb)), [xb] + block.parameters())

    pts8 = rng.normal(size=(8, 3))
    agg = SemanticAggregation(3, rng, k=4)
    _perturb(agg, rng, 0.1)
    xa = _t(rng, 8, 3)
    wa = rng.normal(size=(3, 3))
    cases["semantic_aggregation"] = lambda: check_gradients(
        lambda: ad.sum(agg(xa, pts8, 3).features * Tensor(wa)), [xa] + agg.parameters())

    adapter = FlowAdapter(4, 2, rng)
    _perturb(adapter, rng)
    xf, cf = _t(rng, 5, 4), _t(rng, 2)
    wf = rng.normal(size=(5, 4))
    cases["flow_adapter"] = lambda: check_gradients(
        lambda: ad.sum(fca_forward(xf, cf, adapter) * Tensor(wf)), [xf, cf] + adapter.parameters())
    return cases


def tiny_model_case(seed: int = 0, n_points: int = 32) -> Callable[[], float]:
    """End-to-end check of a stages=2, D0=4 model on ``n_points`` points, all parameters."""
    rng = np.random.default_rng(seed)
    model = UniField(ModelConfig(stages=2, base_channels=4, k=8, seed=seed), synthetic_registry())
    _perturb(model, rng, 0.2)
    pts = rng.normal(size=(n_points, 3))
    target = Tensor(rng.normal(size=n_points))
    flow = np.array([0.3, -0.7])

    def loss():
        err = model.forward(pts, 2, flow) - target
        return ad.mean(err * err) * 0.5

    return lambda: check_gradients(loss, model.parameters())


def run_suites(seed: int = 0, include_model: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    plan = [(name, fn, OP_TOL) for name, fn in _op_cases(rng).items()]
    if include_model:
        plan.append(("unifield end-to-end (tiny)", tiny_model_case(seed), MODEL_TOL))
    results = []
    for name, fn, tol in plan:
        t0 = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, err, tol, time.perf_counter() - t0))
    return results
