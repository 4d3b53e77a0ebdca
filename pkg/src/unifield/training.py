"""Loss, metrics, Adam, and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .datasets import MixedBatcher, Registry, Sample, training_target
from .errors import ConfigError, NumericalError
from .model import UniField, load_checkpoint, predict_chunked, save_checkpoint

log = logging.getLogger(__name__)


# -- loss and metrics --------------------------------------------------------

def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at zero difference is 0."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype), dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: prediction {pred.shape} and target {target.shape} differ")
    return ad.mean(ad.abs(pred - target))


@dataclass
class MetricsReport:
    mse: float
    mae: float
    rel_l2: float       # percent
    rel_l1: float       # percent
    count: int = 1
    rel_defined: bool = True
    per_domain: dict[int, MetricsReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("mse", "mae", "rel_l2", "rel_l1", "count", "rel_defined")}
        if self.per_domain:
            d["per_domain"] = {str(k): v.to_dict() for k, v in sorted(self.per_domain.items())}
        return d


def metrics(pred, target) -> MetricsReport:
    """MSE, MAE and relative L2/L1 errors (in percent) of one prediction.

    A zero-norm target leaves the relative errors as NaN with
    ``rel_defined=False`` rather than raising.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError(f"metrics: prediction {pred.shape} and target {target.shape} differ")
    if pred.size == 0:
        raise ValueError("metrics: empty input")
    err = pred - target
    l2_t = np.linalg.norm(target)
    l1_t = np.abs(target).sum()
    defined = bool(l2_t > 0)
    return MetricsReport(
        mse=float(np.mean(err * err)),
        mae=float(np.mean(np.abs(err))),
        rel_l2=float(100.0 * np.linalg.norm(err) / l2_t) if defined else math.nan,
        rel_l1=float(100.0 * np.abs(err).sum() / l1_t) if defined else math.nan,
        rel_defined=defined,
    )


def _mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    rel = [r for r in reports if r.rel_defined]
    return MetricsReport(
        mse=float(np.mean([r.mse for r in reports])),
        mae=float(np.mean([r.mae for r in reports])),
        rel_l2=float(np.mean([r.rel_l2 for r in rel])) if rel else math.nan,
        rel_l1=float(np.mean([r.rel_l1 for r in rel])) if rel else math.nan,
        count=len(reports),
        rel_defined=bool(rel),
    )


def aggregate_metrics(per_sample: Sequence[tuple[int, MetricsReport]]) -> MetricsReport:
    """Unweighted mean over samples, plus the same mean within each domain."""
    if not per_sample:
        raise ValueError("no samples to aggregate")
    total = _mean_report([r for _, r in per_sample])
    for dom in sorted({d for d, _ in per_sample}):
        total.per_domain[dom] = _mean_report([r for d, r in per_sample if d == dom])
    return total


def evaluate(model: UniField, samples: Sequence[Sample], points: int | None = None,
             chunk: int | None = None, seed: int = 0) -> MetricsReport:
    """Dataset metrics in model units (affine-standardized domains stay standardized).

    ``points`` subsamples each sample by a seeded choice first; ``chunk``
    switches to grouped inference.
    """
    results = []
    for i, s in enumerate(samples):
        if points is not None and s.n_points > points:
            rng = np.random.default_rng([seed, i])
            s = s.subset(np.sort(rng.choice(s.n_points, points, replace=False)))
        pred = predict_chunked(model, s.points, s.domain, s.flow, chunk or s.n_points, seed=seed)
        results.append((s.domain, metrics(pred, training_target(s, model.registry))))
    return aggregate_metrics(results)


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: OptimState,
              lr: float | None = None) -> None:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        m = b1 * m + (1 - b1) * g if m is not None else (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g if v is not None else (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


def cosine_lr(step: int, total: int, base: float, final_ratio: float = 0.1) -> float:
    """Cosine decay from ``base`` at step 0 to ``base * final_ratio`` at ``total``."""
    if total <= 0:
        return base
    t = min(max(step / total, 0.0), 1.0)
    return base * (final_ratio + (1 - final_ratio) * 0.5 * (1 + math.cos(math.pi * t)))


def clip_grad_norm(grads: dict[str, np.ndarray | None], max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale
    return total


# -- training loop -----------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-3
    lr_final_ratio: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    points_per_sample: int = 32768
    eval_every: int = 0
    checkpoint_every: int = 0
    eval_points: int | None = None
    eval_chunk: int | None = None
    log_every: int = 1
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: UniField
    final_loss: float
    last_checkpoint: Path | None
    best_checkpoint: Path | None
    eval_report: MetricsReport | None
    losses: list[float]
    grad_norms: list[float] = field(default_factory=list)


def _optim_arrays(state: OptimState) -> dict[str, np.ndarray]:
    out = {f"m/{k}": v for k, v in state.m.items()}
    out.update({f"v/{k}": v for k, v in state.v.items()})
    return out


def _restore_optim(state: OptimState, arrays: dict[str, np.ndarray]) -> None:
    for key, value in arrays.items():
        kind, _, name = key.partition("/")
        if kind == "m":
            state.m[name] = value
        elif kind == "v":
            state.v[name] = value


def train_step(model: UniField, samples: Sequence[Sample], state: OptimState, cfg: TrainConfig,
               lr: float, batch_id: str = "") -> tuple[float, dict[int, float], float]:
    """Forward/backward on one batch and an Adam update.

    Returns ``(loss, per-domain loss, pre-clip gradient norm)``.
    """
    params = dict(model.named_parameters())
    model.zero_grad()
    per_sample = []
    for s in samples:
        pred = model.forward_sample(s)
        per_sample.append(l1_loss(pred, training_target(s, model.registry)))
    loss = per_sample[0]
    for t in per_sample[1:]:
        loss = loss + t
    loss = loss / float(len(per_sample))
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at batch {batch_id} "
                             f"(samples: {[s.name for s in samples]})")
    backward(loss)
    grads = {n: p.grad for n, p in params.items()}
    norm = clip_grad_norm(grads, cfg.clip_norm)
    if not math.isfinite(norm):
        raise NumericalError(f"non-finite gradient norm at batch {batch_id}")
    adam_step(params, grads, state, lr)
    dom_loss: dict[int, list[float]] = {}
    for s, t in zip(samples, per_sample):
        dom_loss.setdefault(s.domain, []).append(t.item())
    return value, {d: float(np.mean(v)) for d, v in sorted(dom_loss.items())}, norm


def train(model: UniField, batcher: MixedBatcher, cfg: TrainConfig, out_dir=None,
          eval_samples: Sequence[Sample] | None = None, resume=None) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps.

    Writes ``train_log.jsonl`` (one JSON record per logged step or
    evaluation), ``last.npz`` and, when evaluating, ``best.npz`` (lowest mean
    MAE) into ``out_dir``; ``cfg.checkpoint_every`` also refreshes ``last.npz``
    periodically. ``resume`` is a checkpoint path; training continues
    from its step counter with the optimizer state restored.
    """
    state = OptimState(cfg.lr, tuple(cfg.betas), cfg.eps, cfg.weight_decay)
    best = math.inf
    if resume is not None:
        loaded, extra, arrays = load_checkpoint(resume)
        model.load_state_dict(loaded.state_dict())
        model.registry = loaded.registry
        state.step = int(extra["step"])
        best = float(extra.get("best_mae", math.inf))
        _restore_optim(state, arrays)
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        if resume is not None and log_path.exists():
            # steps after the checkpoint are about to be replayed
            kept = [line for line in log_path.read_text(encoding="utf-8").splitlines()
                    if line.strip() and json.loads(line)["step"] <= state.step]
            log_path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")
        logf = open(log_path, "a" if resume is not None else "w", encoding="utf-8")

    def checkpoint(name: str) -> Path | None:
        if out is None:
            return None
        path = out / name
        save_checkpoint(path, model, {"step": state.step, "best_mae": best}, _optim_arrays(state))
        return path

    losses = []
    norms = []
    report = None
    best_path = out / "best.npz" if out is not None and (out / "best.npz").exists() else None
    value = math.nan
    try:
        while state.step < cfg.steps:
            step = state.step
            batch = batcher.batch(step)
            lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_final_ratio)
            value, dom, norm = train_step(model, batch.samples, state, cfg, lr, batch.batch_id)
            losses.append(value)
            norms.append(norm)
            if logf is not None and (step % cfg.log_every == 0 or state.step == cfg.steps):
                logf.write(json.dumps({"type": "step", "step": state.step, "loss": value,
                                       "domain_loss": {str(d): v for d, v in dom.items()}, "lr": lr,
                                       "grad_norm": norm, "batch": batch.batch_id}) + "\n")
            evaluate_now = eval_samples and cfg.eval_every and (
                state.step % cfg.eval_every == 0 or state.step == cfg.steps)
            if evaluate_now:
                report = evaluate(model, eval_samples, cfg.eval_points, cfg.eval_chunk, cfg.seed)
                log.info("step %d loss %.5f eval mae %.5f", state.step, value, report.mae)
                if logf is not None:
                    logf.write(json.dumps({"type": "eval", "step": state.step,
                                           "metrics": report.to_dict()}) + "\n")
                if report.mae < best:
                    best = report.mae
                    best_path = checkpoint("best.npz")
            if logf is not None:
                logf.flush()
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0 and state.step < cfg.steps:
                checkpoint("last.npz")
        last = checkpoint("last.npz")
    finally:
        if logf is not None:
            logf.close()
    return TrainResult(model, value, last, best_path, report, losses, norms)
