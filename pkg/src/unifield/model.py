"""UNet-style assembly of attention blocks, adapters and semantic aggregation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapters import AdapterBank
from .aggregation import SemanticAggregation
from .attention import PointTransformerBlock
from .autodiff import Linear, Module, Tensor, no_grad
from .datasets import Registry, Sample
from .errors import ConfigError, DataFormatError
from .geometry import as_points, canonical_seed, knn, knn_interpolate

PRESETS: dict[str, tuple[int, int]] = {
    "tiny": (2, 8),
    "small": (3, 16),
    "base": (4, 32),
    "large": (5, 64),
}

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    stages: int = 4
    base_channels: int = 32
    k: int = 16
    downsample_ratio: float = 0.25
    ffn_ratio: int = 4
    scale_preset: str | None = None
    seed: int = 0
    slot_iterations: int = 1
    slot_k: int | None = None
    interp_k: int = 3
    block_norm: bool = False
    neighbor_space: str = "coords"
    fps_seed: str | int = "canonical"
    dtype: str = "float64"

    def __post_init__(self):
        if self.scale_preset is not None:
            if self.scale_preset not in PRESETS:
                raise ConfigError(f"unknown scale preset {self.scale_preset!r}; choose from {sorted(PRESETS)}")
            self.stages, self.base_channels = PRESETS[self.scale_preset]
        self.validate()

    @classmethod
    def from_preset(cls, name: str, **overrides) -> ModelConfig:
        return cls(scale_preset=name, **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if self.base_channels < 1 or self.ffn_ratio < 1 or self.k < 1 or self.interp_k < 1:
            raise ConfigError("widths and neighbour counts must be positive")
        if not 0 < self.downsample_ratio <= 1:
            raise ConfigError("downsample_ratio must be in (0, 1]")
        if self.slot_iterations < 1:
            raise ConfigError("slot_iterations must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.neighbor_space not in ("coords", "features"):
            raise ConfigError("neighbor_space must be 'coords' or 'features'")
        if isinstance(self.fps_seed, str) and self.fps_seed != "canonical":
            raise ConfigError("fps_seed must be 'canonical' or an integer index")

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** level for level in range(self.stages)]

    def level_sizes(self, n_points: int) -> list[int]:
        sizes = [n_points]
        for _ in range(self.stages - 1):
            sizes.append(math.ceil(sizes[-1] * self.downsample_ratio))
        return sizes

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class UniField(Module):
    """Shared point-transformer UNet with per-domain flow adapters at every level.

    Encoder level ``l``: attention block, adapter bank, then (except at the
    deepest level) a width lift and semantic aggregation down to
    ``ceil(n_l * downsample_ratio)`` points. Decoder level ``l``: kNN
    interpolation from level ``l+1``, concatenation with the level-``l`` skip
    features, linear merge, attention block, adapter bank. A linear head
    emits one value per input point.
    """

    def __init__(self, config: ModelConfig, registry: Registry):
        if len(registry) == 0:
            raise ConfigError("registry is empty")
        self.config = config
        self.registry = registry
        rng = np.random.default_rng(config.seed)
        dt = config.np_dtype
        widths = config.widths()
        flow_dims = registry.flow_dims()
        slot_k = config.slot_k or config.k
        self.embed = Linear(3, widths[0], rng, dt)
        self.enc_blocks = []
        self.enc_adapters = []
        self.lifts = []
        self.aggregators = []
        for level, width in enumerate(widths):
            self.enc_blocks.append(PointTransformerBlock(width, rng, dt, config.ffn_ratio, config.block_norm))
            self.enc_adapters.append(AdapterBank(width, flow_dims, rng, dt))
            if level < config.stages - 1:
                nxt = widths[level + 1]
                self.lifts.append(Linear(width, nxt, rng, dt))
                self.aggregators.append(SemanticAggregation(
                    nxt, rng, dt, config.ffn_ratio, k=slot_k,
                    iterations=config.slot_iterations, neighbor_space=config.neighbor_space))
        # decoder lists are indexed by level, 0 .. stages-2
        self.merges = []
        self.dec_blocks = []
        self.dec_adapters = []
        for level in range(config.stages - 1):
            width = widths[level]
            self.merges.append(Linear(width + widths[level + 1], width, rng, dt))
            self.dec_blocks.append(PointTransformerBlock(width, rng, dt, config.ffn_ratio, config.block_norm))
            self.dec_adapters.append(AdapterBank(width, flow_dims, rng, dt))
        self.head = Linear(widths[0], 1, rng, dt)

    @classmethod
    def build(cls, config: ModelConfig, registry: Registry) -> UniField:
        return cls(config, registry)

    def adapter_banks(self) -> list[AdapterBank]:
        return self.enc_adapters + self.dec_adapters

    def backbone_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if "adapters." not in n]

    def domain_adapter_parameters(self, domain_id: int) -> list[tuple[str, Tensor]]:
        tag = f"adapters.{int(domain_id)}."
        return [(n, p) for n, p in self.named_parameters() if tag in n]

    def _seed_index(self, pts: np.ndarray) -> int:
        if self.config.fps_seed == "canonical":
            return canonical_seed(pts)
        return int(self.config.fps_seed)

    def forward(self, points, domain_id: int, flow) -> Tensor:
        cfg = self.config
        pts = as_points(points).astype(np.float64)
        n = pts.shape[0]
        if n < cfg.k:
            raise ValueError(f"sample has {n} points but the model needs at least k={cfg.k}")
        spec = self.registry.get(domain_id)
        dt = cfg.np_dtype
        c = Tensor(spec.standardize_flow(flow).astype(dt), dtype=dt)

        x = self.embed(Tensor(pts.astype(dt), dtype=dt))
        p = pts
        skips = []
        for level in range(cfg.stages):
            nbr = knn(p, p, min(cfg.k, p.shape[0]))
            x = self.enc_blocks[level](x, p, nbr)
            x = self.enc_adapters[level](x, c, domain_id)
            skips.append((x, p, nbr))
            if level < cfg.stages - 1:
                count = math.ceil(p.shape[0] * cfg.downsample_ratio)
                state = self.aggregators[level](self.lifts[level](x), p, count, self._seed_index(p))
                x, p = state.features, state.positions
        for level in reversed(range(cfg.stages - 1)):
            x_skip, p_fine, nbr = skips[level]
            up = knn_interpolate(x, p, p_fine, k=min(cfg.interp_k, p.shape[0]))
            x = self.merges[level](ad.concat([x_skip, up], axis=1))
            x = self.dec_blocks[level](x, p_fine, nbr)
            x = self.dec_adapters[level](x, c, domain_id)
            p = p_fine
        return ad.reshape(self.head(x), (n,))

    def forward_sample(self, sample: Sample) -> Tensor:
        return self.forward(sample.points, sample.domain, sample.flow)

    def forward_batch(self, samples: list[Sample]) -> list[Tensor]:
        return [self.forward_sample(s) for s in samples]


def predict_chunked(model: UniField, points, domain_id: int, flow, chunk: int, seed: int = 0,
                    return_groups: bool = False):
    """Predict in ``ceil(N / chunk)`` random groups and scatter back to input order.

    Groups come from a seeded permutation split into near-equal parts, so
    32,768 points with ``chunk=8192`` give four groups of 8,192.
    """
    pts = as_points(points)
    n = pts.shape[0]
    if chunk < model.config.k:
        raise ValueError(f"chunk={chunk} is smaller than k={model.config.k}")
    with no_grad():
        if chunk >= n:
            groups = [np.arange(n)]
            pred = model.forward(pts, domain_id, flow).data.astype(np.float64)
        else:
            perm = np.random.default_rng(seed).permutation(n)
            groups = np.array_split(perm, math.ceil(n / chunk))
            pred = np.empty(n, dtype=np.float64)
            for g in groups:
                pred[g] = model.forward(pts[g], domain_id, flow).data
    return (pred, groups) if return_groups else pred


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: UniField, extra: dict | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write config, registry, named parameters and optional extra arrays to an ``.npz``."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "registry": model.registry.to_list(),
        "extra": extra or {},
    }
    payload = {"__meta__": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for name, value in model.state_dict().items():
        payload[f"param/{name}"] = value
    for name, value in (arrays or {}).items():
        payload[f"extra/{name}"] = np.asarray(value)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[UniField, dict, dict[str, np.ndarray]]:
    """Return ``(model, extra_meta, extra_arrays)``."""
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(data["__meta__"].tobytes().decode("utf-8"))
            params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
            arrays = {k[len("extra/"):]: data[k] for k in data.files if k.startswith("extra/")}
    except (OSError, KeyError, ValueError) as e:
        raise DataFormatError(f"{path}: unreadable checkpoint ({e})") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    model = UniField(ModelConfig.from_dict(meta["config"]), Registry.from_list(meta["registry"]))
    model.load_state_dict(params)
    return model, meta["extra"], arrays
