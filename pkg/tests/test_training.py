import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unifield.autodiff import Tensor
from unifield.datasets import MixedBatcher, gen_cylinder, gen_sphere, synthetic_registry
from unifield.errors import ConfigError, NumericalError
from unifield.model import ModelConfig, UniField, load_checkpoint
from unifield.training import (
    OptimState, TrainConfig, adam_step, aggregate_metrics, clip_grad_norm, cosine_lr, evaluate, l1_loss,
    metrics, train, train_step,
)


def loop_metrics(pred, target):
    """Plain-loop 64-bit reference for MSE, MAE, RelL2%, RelL1%."""
    n = len(pred)
    se = ae = t2 = t1 = 0.0
    for p, t in zip(pred, target):
        p, t = float(p), float(t)
        se += (p - t) ** 2
        ae += abs(p - t)
        t2 += t * t
        t1 += abs(t)
    return se / n, ae / n, 100 * math.sqrt(se) / math.sqrt(t2), 100 * ae / t1


def small_model(seed=0):
    return UniField(ModelConfig(stages=2, base_channels=4, k=8, seed=seed), synthetic_registry())


# -- loss and metrics --------------------------------------------------------

def test_l1_loss_example():
    assert l1_loss(Tensor(np.array([1.0, 2.0])), [1.0, 4.0]).item() == 1.0


def test_l1_subgradient_zero_at_match():
    pred = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    l1_loss(pred, [1.0, 3.0]).backward()
    np.testing.assert_array_equal(pred.grad, [0.0, -0.5])


def test_metrics_hand_example():
    r = metrics([1.0, 1.0], [1.0, 2.0])
    assert (r.mse, r.mae) == (0.5, 0.5)
    assert r.rel_l2 == pytest.approx(100 / math.sqrt(5), abs=1e-12)
    assert r.rel_l1 == pytest.approx(100 / 3, abs=1e-12)


def test_metrics_zero_target():
    r = metrics([1.0, 0.0], [0.0, 0.0])
    assert not r.rel_defined and math.isnan(r.rel_l2) and r.mae == 0.5


def test_metrics_match_loop_oracle_on_random_instances():
    rng = np.random.default_rng(21)
    for _ in range(200):
        n = int(rng.integers(1, 50))
        pred, target = rng.normal(size=n) * 3, rng.normal(size=n) * 3
        got = metrics(pred, target)
        for a, b in zip((got.mse, got.mae, got.rel_l2, got.rel_l1), loop_metrics(pred, target)):
            assert abs(a - b) <= 1e-10 * max(1.0, abs(b))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30))
def test_metrics_of_perfect_prediction(values):
    r = metrics(values, values)
    assert r.mse == 0 and r.mae == 0
    assert r.rel_l2 == 0 or not r.rel_defined


def test_dataset_aggregation_is_unweighted_mean():
    reps = [(1, metrics([0.0, 0.0], [1.0, 1.0])), (2, metrics([0.0] * 10, [2.0] * 10)),
            (2, metrics([1.0], [1.0]))]
    total = aggregate_metrics(reps)
    assert total.mae == pytest.approx((1 + 2 + 0) / 3)
    assert total.per_domain[1].mae == 1.0 and total.per_domain[2].mae == 1.0
    assert total.count == 3


# -- optimizer ---------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0, 3.0]))
    adam_step({"p": p}, {"p": np.array([0.5, -4.0, 1e-3])}, OptimState(lr=0.01))
    np.testing.assert_allclose(p.data, [0.99, -1.99, 2.99], atol=1e-7)


def test_adam_missing_gradient_is_zero_update():
    p = Tensor(np.array([1.0]))
    adam_step({"p": p}, {"p": None}, OptimState(lr=0.1))
    assert p.data.tolist() == [1.0]


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1.0) == 1.0
    assert cosine_lr(100, 100, 1.0) == pytest.approx(0.1)
    assert cosine_lr(50, 100, 1.0) == pytest.approx(0.55)
    lrs = [cosine_lr(s, 100, 1.0) for s in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_clip_grad_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0]), "c": None}
    assert clip_grad_norm(grads, 1.0) == 5.0
    total = math.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values() if g is not None))
    assert total == pytest.approx(1.0)
    small = {"a": np.array([0.1])}
    clip_grad_norm(small, 1.0)
    assert small["a"].tolist() == [0.1]


def test_train_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"stepz": 3})


# -- training loop -----------------------------------------------------------

def _hash(params):
    h = hashlib.sha256()
    for name, p in params:
        h.update(name.encode() + np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def test_joint_run_logs_and_checkpoints(tmp_path):
    samples = [gen_cylinder(24, seed=i) for i in range(2)] + [gen_sphere(24, seed=i) for i in range(2)]
    cfg = TrainConfig(steps=4, batch_size=4, points_per_sample=24, eval_every=2)
    result = train(small_model(), MixedBatcher(samples, 4, 24), cfg, tmp_path, eval_samples=samples)
    records = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    steps = [r for r in records if r["type"] == "step"]
    evals = [r for r in records if r["type"] == "eval"]
    assert [r["step"] for r in steps] == [1, 2, 3, 4]
    assert all(set(r["domain_loss"]) == {"1", "2"} for r in steps)
    assert [r["step"] for r in evals] == [2, 4]
    assert set(evals[-1]["metrics"]["per_domain"]) == {"1", "2"}
    assert (tmp_path / "last.npz").exists() and (tmp_path / "best.npz").exists()
    assert set(result.eval_report.per_domain) == {1, 2}


def test_single_domain_run_leaves_other_adapters_unchanged():
    model = small_model()
    before = _hash(model.domain_adapter_parameters(2))
    before_cyl = _hash(model.domain_adapter_parameters(1))
    samples = [gen_cylinder(24, seed=i) for i in range(3)]
    train(model, MixedBatcher(samples, 2, 24), TrainConfig(steps=3, batch_size=2, points_per_sample=24))
    assert _hash(model.domain_adapter_parameters(2)) == before
    assert _hash(model.domain_adapter_parameters(1)) != before_cyl


class _Crash(Exception):
    pass


class _CrashingBatcher(MixedBatcher):
    def __init__(self, *args, crash_at, **kwargs):
        super().__init__(*args, **kwargs)
        self.crash_at = crash_at

    def batch(self, step):
        if step == self.crash_at:
            raise _Crash
        return super().batch(step)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    samples = [gen_cylinder(24, seed=i) for i in range(3)] + [gen_sphere(24, seed=0)]
    cfg = TrainConfig(steps=6, batch_size=2, points_per_sample=16, checkpoint_every=2)
    straight = train(small_model(), MixedBatcher(samples, 2, 16, seed=3), cfg, tmp_path / "a")

    with pytest.raises(_Crash):
        train(small_model(), _CrashingBatcher(samples, 2, 16, seed=3, crash_at=5), cfg, tmp_path / "b")
    _, extra, _ = load_checkpoint(tmp_path / "b" / "last.npz")
    assert extra["step"] == 4
    resumed = train(small_model(seed=99), MixedBatcher(samples, 2, 16, seed=3), cfg, tmp_path / "b",
                    resume=tmp_path / "b" / "last.npz")
    assert resumed.losses == straight.losses[4:]
    assert _hash(resumed.model.named_parameters()) == _hash(straight.model.named_parameters())
    steps = [json.loads(line)["step"] for line in (tmp_path / "b" / "train_log.jsonl").read_text().splitlines()]
    assert steps == [1, 2, 3, 4, 5, 6]


def test_non_finite_loss_names_the_batch():
    model = small_model()
    s = gen_cylinder(16, seed=0)
    s.target[3] = np.inf  # bypasses Sample validation on purpose
    with pytest.raises(NumericalError, match="epoch0/batch0.*cylinder_s0"):
        train_step(model, [s], OptimState(), TrainConfig(), 1e-3, "epoch0/batch0")


def test_evaluate_is_repeatable(tmp_path):
    model = small_model()
    samples = [gen_sphere(40, seed=i) for i in range(3)]
    a = evaluate(model, samples, points=30, seed=1)
    b = evaluate(model, samples, points=30, seed=1)
    assert a.to_dict() == b.to_dict()
    assert evaluate(model, samples, chunk=20).count == 3


def test_loss_decreases_on_small_problem():
    s = gen_cylinder(32, seed=0)
    result = train(small_model(), MixedBatcher([s], 1, 32), TrainConfig(steps=60, lr=3e-3, batch_size=1,
                                                                        points_per_sample=32))
    assert np.mean(result.losses[-5:]) < result.losses[0]
