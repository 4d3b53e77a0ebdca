"""``unifield`` command line: gen-synthetic, train, eval, predict, gradcheck, joint-vs-single."""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from .datasets import (
    GENERATORS, DataFormatError, destandardize_pressure, fit_flow_stats, generate_dataset, load_manifest,
    load_sample, resolve_data_path, MixedBatcher,
)
from .errors import ConfigError, NumericalError, RegistryError, SchemaError, UniFieldError
from .model import ModelConfig, UniField, load_checkpoint, predict_chunked
from .training import TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERICAL = 5

log = logging.getLogger("unifield")


# -- run configuration -------------------------------------------------------

def default_run_config() -> dict:
    model = {f.name: f.default for f in fields(ModelConfig)}
    model["scale_preset"] = "tiny"
    model["seed"] = None
    train_cfg = TrainConfig().to_dict()
    train_cfg["betas"] = list(train_cfg["betas"])
    train_cfg["seed"] = None
    return {
        "seed": 0,
        "out": "runs/default",
        "resume": None,
        "model": model,
        "data": {"manifests": [], "train_domains": None, "train_split": "train", "eval_split": "test"},
        "train": train_cfg,
    }


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(f"override {assignment!r} is not key=value")
    node = cfg
    parts = key.strip().split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)


def resolve_run_config(path=None, overrides=(), seed=None, out=None) -> dict:
    cfg = default_run_config()
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, copy.deepcopy(loaded))
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    for section in ("model", "train"):
        if cfg[section].get("seed") is None:
            cfg[section]["seed"] = cfg["seed"]
    return cfg


def _model_config(section: dict) -> ModelConfig:
    section = dict(section)
    preset = section.get("scale_preset")
    if preset:
        # preset fixes stages and base width
        section.pop("stages", None)
        section.pop("base_channels", None)
    return ModelConfig.from_dict(section)


# -- commands ----------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    if args.domain not in GENERATORS:
        print(f"error: unknown domain {args.domain!r}; choose from {sorted(GENERATORS)}", file=sys.stderr)
        return EXIT_USAGE
    manifest = generate_dataset(args.domain, args.count, args.n_points, args.noise, args.seed, args.out,
                                test_fraction=args.test_fraction, binary=args.binary)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_run_config(args.config, args.set or (), args.seed, args.out)
    out = Path(cfg["out"])
    data = cfg["data"]
    if not data["manifests"]:
        raise ConfigError("data.manifests is empty")
    manifests = [load_manifest(resolve_data_path(p)) for p in data["manifests"]]
    registry = manifests[0].registry
    for m in manifests[1:]:
        registry = registry.merge(m.registry)
    domains = data["train_domains"]
    train_samples = [s for m in manifests for s in m.load(data["train_split"], domains)]
    eval_samples = [s for m in manifests for s in m.load(data["eval_split"], domains)]
    if not train_samples:
        raise DataFormatError("no training samples selected")
    tcfg = TrainConfig.from_dict(cfg["train"])
    resume = args.resume or cfg["resume"]
    model = UniField(_model_config(cfg["model"]), fit_flow_stats(registry, train_samples))
    batcher = MixedBatcher(train_samples, tcfg.batch_size, tcfg.points_per_sample, tcfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    resolved = dict(cfg, resume=str(resume) if resume else None)
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2) + "\n", encoding="utf-8")
    log.info("model has %d parameters", model.num_parameters())
    result = train(model, batcher, tcfg, out, eval_samples or None, resume=resume)
    report = result.eval_report or (evaluate(model, eval_samples, tcfg.eval_points, tcfg.eval_chunk, tcfg.seed)
                                    if eval_samples else None)
    summary = {"final_loss": result.final_loss, "steps": tcfg.steps,
               "metrics": report.to_dict() if report else None}
    (out / "report.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(resolve_data_path(args.manifest))
    samples = manifest.load(args.split)
    if not samples:
        raise DataFormatError(f"manifest has no {args.split!r} samples")
    report = evaluate(model, samples, args.points, args.chunk, args.seed)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    sample = load_sample(resolve_data_path(args.sample), model.registry)
    chunk = args.chunk or sample.n_points
    pred = predict_chunked(model, sample.points, sample.domain, sample.flow, chunk, seed=args.seed)
    spec = model.registry.get(sample.domain)
    if spec.pressure_mode == "affine":
        pred = destandardize_pressure(pred, spec.pressure_mean, spec.pressure_std)
    cols = [sample.points, pred[:, None]]
    header = "x y z p_pred"
    if not args.no_truth:
        cols += [sample.target[:, None], (pred - sample.target)[:, None]]
        header += " p_true error"
    np.savetxt(args.out, np.hstack(cols), fmt="%.10g", header=header, comments="")
    print(args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import run_suites

    results = run_suites(seed=args.seed, include_model=not args.ops_only)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_joint_vs_single(args) -> int:
    from .experiments import ComparisonConfig, format_table, joint_vs_single

    cfg = ComparisonConfig(seeds=tuple(args.seeds), steps=args.steps, n_points=args.n_points,
                           n_sphere_train=args.sphere_train, n_cylinder_train=args.cylinder_train,
                           balance_domains=not args.no_balance)
    result = joint_vs_single(cfg, progress=lambda r: print(
        f"{r.condition:<6} seed={r.seed} sphere-test MAE={r.report.mae:.4e} ({r.seconds:.0f}s)", flush=True))
    print(format_table(result))
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unifield", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic analytic-flow dataset")
    p.add_argument("--domain", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--n-points", type=int, default=1024)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--binary", action="store_true", help="packed .ufb samples instead of text")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--resume", metavar="CHECKPOINT")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--chunk", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-point predictions for one sample file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunk", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-truth", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true", help="skip the end-to-end model check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("joint-vs-single", help="synthetic joint vs single-domain comparison")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--n-points", type=int, default=256)
    p.add_argument("--sphere-train", type=int, default=5)
    p.add_argument("--cylinder-train", type=int, default=200)
    p.add_argument("--no-balance", action="store_true",
                   help="train the joint model on the plain union without replicating the scarce domain")
    p.add_argument("--out")
    p.set_defaults(func=cmd_joint_vs_single)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, RegistryError, SchemaError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except UniFieldError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
