"""Joint-vs-single training comparison on the synthetic cylinder/sphere domains."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .datasets import CYLINDER, SPHERE, MixedBatcher, fit_flow_stats, gen_cylinder, gen_sphere, synthetic_registry
from .model import ModelConfig, UniField
from .training import MetricsReport, TrainConfig, evaluate, train


@dataclass
class ComparisonConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    n_cylinder_train: int = 200
    n_sphere_train: int = 5
    n_sphere_test: int = 20
    n_points: int = 256
    noise_std: float = 0.0
    data_seed: int = 1234
    steps: int = 600
    batch_size: int = 4
    lr: float = 1e-3
    # replicate the scarce domain in the joint union so both domains fill
    # batches equally often; False gives the plain union
    balance_domains: bool = True
    model: dict = field(default_factory=lambda: {"scale_preset": "tiny", "dtype": "float32"})


@dataclass
class RunRecord:
    condition: str          # "joint" or "single"
    seed: int
    report: MetricsReport   # sphere test split
    seconds: float


def make_data(cfg: ComparisonConfig):
    base = cfg.data_seed * 1000
    cyl = [gen_cylinder(cfg.n_points, cfg.noise_std, base + i) for i in range(cfg.n_cylinder_train)]
    sph = [gen_sphere(cfg.n_points, cfg.noise_std, base + 500 + i) for i in range(cfg.n_sphere_train)]
    test = [gen_sphere(cfg.n_points, 0.0, base + 900 + i) for i in range(cfg.n_sphere_test)]
    return cyl, sph, test


def condition_train_set(condition: str, cyl: list, sph: list, balance: bool = True) -> list:
    """Training samples for one condition.

    ``single`` is the sphere split alone. ``joint`` is the union with the
    cylinder split; with ``balance`` the sphere samples are repeated
    round(n_cyl / n_sph) times so each domain fills about half of every epoch.
    """
    if condition == "single":
        return list(sph)
    if condition != "joint":
        raise ValueError(f"unknown condition {condition!r}")
    repeat = max(1, round(len(cyl) / len(sph))) if balance and sph else 1
    return list(sph) * repeat + list(cyl)


def run_condition(condition: str, seed: int, cfg: ComparisonConfig, data=None) -> RunRecord:
    cyl, sph, test = data or make_data(cfg)
    train_set = condition_train_set(condition, cyl, sph, cfg.balance_domains)
    # the registry always holds both domains; only the data differ.
    # Flow statistics come from the distinct samples, not the replicas.
    registry = fit_flow_stats(synthetic_registry(), condition_train_set(condition, cyl, sph, False))
    model = UniField(ModelConfig(seed=seed, **cfg.model), registry)
    batcher = MixedBatcher(train_set, cfg.batch_size, cfg.n_points, seed)
    t0 = time.perf_counter()
    train(model, batcher, TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, seed=seed))
    report = evaluate(model, test)
    return RunRecord(condition, seed, report, time.perf_counter() - t0)


def joint_vs_single(cfg: ComparisonConfig | None = None, progress=None) -> dict:
    """Train joint and sphere-only models for every seed; summarize sphere-test metrics.

    Returns a dict with per-run records and a two-row table (condition x
    metrics) of seed-wise means.
    """
    cfg = cfg or ComparisonConfig()
    data = make_data(cfg)
    records = []
    for seed in cfg.seeds:
        for condition in ("single", "joint"):
            rec = run_condition(condition, seed, cfg, data)
            records.append(rec)
            if progress:
                progress(rec)
    table = {}
    for condition in ("single", "joint"):
        reps = [r.report for r in records if r.condition == condition]
        table[condition] = {k: float(np.mean([getattr(r, k) for r in reps]))
                            for k in ("mse", "mae", "rel_l2", "rel_l1")}
    return {
        "config": asdict(cfg),
        "domain": SPHERE.name,
        "auxiliary_domain": CYLINDER.name,
        "runs": [{"condition": r.condition, "seed": r.seed, "seconds": r.seconds, **r.report.to_dict()}
                 for r in records],
        "table": table,
    }


def format_table(result: dict) -> str:
    rows = [f"{'condition':<10} {'MSE':>10} {'MAE':>10} {'RelL2%':>9} {'RelL1%':>9}"]
    for cond, m in result["table"].items():
        rows.append(f"{cond:<10} {m['mse']:>10.4e} {m['mae']:>10.4e} {m['rel_l2']:>9.2f} {m['rel_l1']:>9.2f}")
    return "\n".join(rows)
