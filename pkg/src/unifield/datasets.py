"""Domain registry, sample files, manifests, batching and synthetic flow domains.

File formats
------------
Text sample (``.txt``)::

    # unifield-sample v1
    # domain: 2
    # flow: 3.0e+01 1.5e-01
    x y z p
    <N rows of 4 numbers, repr precision>

Binary sample (``.ufb``), little endian: 8-byte magic ``b"UFSMP1\\0\\0"``,
int32 domain, int32 flow_dim, uint64 N, flow_dim float64 values, then N*4
float64 values row-major (x, y, z, p).

Manifest (``.json``): ``{"format": "unifield-manifest/1", "name": ...,
"domains": [DomainSpec...], "samples": [{"path", "domain", "flow", "split"}]}``.
Sample paths are relative to the manifest's directory.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataFormatError, RegistryError, SchemaError

MANIFEST_FORMAT = "unifield-manifest/1"
SAMPLE_HEADER = "# unifield-sample v1"
BINARY_MAGIC = b"UFSMP1\x00\x00"
DATA_ROOT_ENV = "UNIFIELD_DATA_ROOT"

# DrivAerNet++ evaluation convention
DRIVAERNET_PRESSURE_MEAN = -94.5
DRIVAERNET_PRESSURE_STD = 117.25


# -- registry ----------------------------------------------------------------

@dataclass
class DomainSpec:
    id: int
    name: str
    flow_dim: int
    condition_names: list[str]
    condition_units: list[str]
    flow_mean: list[float] | None = None
    flow_std: list[float] | None = None
    pressure_mode: str = "coefficient"  # or "affine"
    pressure_mean: float = 0.0
    pressure_std: float = 1.0

    def __post_init__(self):
        if self.id < 1:
            raise RegistryError(f"domain id must be >= 1, got {self.id}")
        if self.flow_dim < 1:
            raise SchemaError(f"domain {self.name!r}: flow_dim must be >= 1")
        if len(self.condition_names) != self.flow_dim or len(self.condition_units) != self.flow_dim:
            raise SchemaError(f"domain {self.name!r}: need {self.flow_dim} condition names and units")
        if self.flow_mean is None:
            self.flow_mean = [0.0] * self.flow_dim
        if self.flow_std is None:
            self.flow_std = [1.0] * self.flow_dim
        if len(self.flow_mean) != self.flow_dim or len(self.flow_std) != self.flow_dim:
            raise SchemaError(f"domain {self.name!r}: flow standardization constants have wrong length")
        if self.pressure_mode not in ("coefficient", "affine"):
            raise SchemaError(f"unknown pressure_mode {self.pressure_mode!r}")
        if self.pressure_std <= 0:
            raise SchemaError("pressure_std must be positive")

    def check_flow(self, flow) -> np.ndarray:
        flow = np.asarray(flow, dtype=np.float64).reshape(-1)
        if flow.shape != (self.flow_dim,):
            raise SchemaError(
                f"domain {self.name!r} expects {self.flow_dim} flow values "
                f"({', '.join(self.condition_names)}), got {flow.size}")
        if not np.all(np.isfinite(flow)):
            raise SchemaError("flow vector contains non-finite values")
        return flow

    def standardize_flow(self, flow) -> np.ndarray:
        flow = self.check_flow(flow)
        return (flow - np.asarray(self.flow_mean)) / np.asarray(self.flow_std)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DomainSpec:
        try:
            return cls(**d)
        except TypeError as e:
            raise DataFormatError(f"bad domain spec {d!r}: {e}") from None


class Registry:
    """Domains keyed by integer id, kept in ascending id order."""

    def __init__(self, specs: Iterable[DomainSpec]):
        self._specs: dict[int, DomainSpec] = {}
        names = set()
        for spec in sorted(specs, key=lambda s: s.id):
            if spec.id in self._specs:
                raise RegistryError(f"duplicate domain id {spec.id}")
            if spec.name in names:
                raise RegistryError(f"duplicate domain name {spec.name!r}")
            self._specs[spec.id] = spec
            names.add(spec.name)
        if not self._specs:
            raise RegistryError("registry is empty")

    def __iter__(self) -> Iterator[DomainSpec]:
        return iter(self._specs.values())

    def __len__(self) -> int:
        return len(self._specs)

    def __contains__(self, domain_id) -> bool:
        return int(domain_id) in self._specs

    def ids(self) -> list[int]:
        return list(self._specs)

    def get(self, domain_id) -> DomainSpec:
        try:
            return self._specs[int(domain_id)]
        except KeyError:
            raise RegistryError(f"domain {domain_id} is not registered (known: {self.ids()})") from None

    def by_name(self, name: str) -> DomainSpec:
        for spec in self:
            if spec.name == name:
                return spec
        raise RegistryError(f"unknown domain name {name!r}")

    def flow_dims(self) -> dict[int, int]:
        return {s.id: s.flow_dim for s in self}

    def replace(self, spec: DomainSpec) -> Registry:
        return Registry([spec if s.id == spec.id else s for s in self])

    def merge(self, other: Registry) -> Registry:
        specs = {s.id: s for s in self}
        for s in other:
            if s.id in specs and (specs[s.id].name != s.name or specs[s.id].flow_dim != s.flow_dim):
                raise RegistryError(f"conflicting definitions for domain id {s.id}")
            specs.setdefault(s.id, s)
        return Registry(specs.values())

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self]

    @classmethod
    def from_list(cls, items: Sequence[dict]) -> Registry:
        return cls(DomainSpec.from_dict(d) for d in items)

    def __eq__(self, other) -> bool:
        return isinstance(other, Registry) and self.to_list() == other.to_list()


CYLINDER = DomainSpec(1, "cylinder", 1, ["U"], ["m/s"])
SPHERE = DomainSpec(2, "sphere", 2, ["U", "alpha"], ["m/s", "rad"])


def synthetic_registry() -> Registry:
    return Registry([replace(CYLINDER), replace(SPHERE)])


# -- samples -----------------------------------------------------------------

@dataclass
class Sample:
    points: np.ndarray   # [N, 3]
    domain: int
    flow: np.ndarray     # [flow_dim]
    target: np.ndarray   # [N] pressure coefficients
    name: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.flow = np.asarray(self.flow, dtype=np.float64).reshape(-1)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataFormatError(f"points must be [N, 3], got {self.points.shape}")
        if self.target.shape[0] != self.points.shape[0]:
            raise DataFormatError(f"target length {self.target.shape[0]} != N={self.points.shape[0]}")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.target))):
            raise DataFormatError(f"sample {self.name!r} has non-finite values")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def subset(self, index: np.ndarray) -> Sample:
        return Sample(self.points[index], self.domain, self.flow, self.target[index], self.name)


def standardize_pressure(p_raw, mean: float, std: float):
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    return (np.asarray(p_raw, dtype=np.float64) - mean) / std


def destandardize_pressure(p_std, mean: float, std: float):
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    return np.asarray(p_std, dtype=np.float64) * std + mean


def training_target(sample: Sample, registry: Registry) -> np.ndarray:
    """Target in model units: affine domains are standardized, coefficients pass through."""
    spec = registry.get(sample.domain)
    if spec.pressure_mode == "affine":
        return standardize_pressure(sample.target, spec.pressure_mean, spec.pressure_std)
    return sample.target


def save_sample(sample: Sample, path) -> None:
    path = Path(path)
    if path.suffix == ".ufb":
        n = sample.n_points
        header = BINARY_MAGIC + struct.pack("<iiQ", sample.domain, sample.flow.size, n)
        body = np.column_stack([sample.points, sample.target]).astype("<f8")
        path.write_bytes(header + sample.flow.astype("<f8").tobytes() + body.tobytes())
        return
    lines = [SAMPLE_HEADER, f"# domain: {sample.domain}",
             "# flow: " + " ".join(repr(float(v)) for v in sample.flow), "x y z p"]
    for (x, y, z), p in zip(sample.points.tolist(), sample.target.tolist()):
        lines.append(f"{x!r} {y!r} {z!r} {p!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_binary(path: Path) -> Sample:
    raw = path.read_bytes()
    hsize = len(BINARY_MAGIC) + struct.calcsize("<iiQ")
    if len(raw) < hsize or raw[:len(BINARY_MAGIC)] != BINARY_MAGIC:
        raise DataFormatError(f"{path}: not a unifield binary sample (offset 0)")
    domain, fdim, n = struct.unpack("<iiQ", raw[len(BINARY_MAGIC):hsize])
    expected = hsize + 8 * (fdim + 4 * n)
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(raw)} (offset {hsize})")
    flow = np.frombuffer(raw, dtype="<f8", count=fdim, offset=hsize)
    body = np.frombuffer(raw, dtype="<f8", count=4 * n, offset=hsize + 8 * fdim).reshape(n, 4)
    return Sample(body[:, :3].copy(), domain, flow.copy(), body[:, 3].copy(), path.stem)


def _load_text(path: Path) -> Sample:
    domain = None
    flow = None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                key = key.strip()
                try:
                    if key == "domain":
                        domain = int(value)
                    elif key == "flow":
                        flow = [float(v) for v in value.split()]
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: bad {key} header {value.strip()!r}") from None
                continue
            parts = line.split()
            if parts == ["x", "y", "z", "p"]:
                continue
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 columns (x y z p), got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
    if domain is None or flow is None:
        raise DataFormatError(f"{path}: missing '# domain:' or '# flow:' header")
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    body = np.asarray(rows, dtype=np.float64)
    return Sample(body[:, :3], domain, flow, body[:, 3], path.stem)


def load_sample(path, registry: Registry | None = None) -> Sample:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"{path}: no such file")
    sample = _load_binary(path) if path.suffix == ".ufb" else _load_text(path)
    if registry is not None:
        registry.get(sample.domain).check_flow(sample.flow)
    return sample


# -- manifests ---------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: Path
    domain: int
    flow: list[float]
    split: str


@dataclass
class Manifest:
    name: str
    registry: Registry
    entries: list[ManifestEntry] = field(default_factory=list)

    def select(self, split: str | None = None, domains: Sequence[int] | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries
                if (split is None or e.split == split) and (domains is None or e.domain in domains)]

    def load(self, split: str | None = None, domains: Sequence[int] | None = None) -> list[Sample]:
        out = []
        for e in self.select(split, domains):
            s = load_sample(e.path, self.registry)
            if s.domain != e.domain or not np.array_equal(s.flow, np.asarray(e.flow)):
                raise DataFormatError(f"{e.path}: header disagrees with manifest entry")
            out.append(s)
        return out


def resolve_data_path(path) -> Path:
    """Relative paths are taken against ``$UNIFIELD_DATA_ROOT`` when it is set."""
    path = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not path.is_absolute() and root and not path.exists():
        return Path(root) / path
    return path


def write_manifest(path, name: str, registry: Registry, entries: Sequence[ManifestEntry]) -> None:
    path = Path(path)
    base = path.parent.resolve()
    doc = {
        "format": MANIFEST_FORMAT,
        "name": name,
        "domains": registry.to_list(),
        "samples": [
            {"path": os.path.relpath(Path(e.path).resolve(), base), "domain": e.domain,
             "flow": [float(v) for v in e.flow], "split": e.split}
            for e in entries
        ],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest(path) -> Manifest:
    path = resolve_data_path(path)
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataFormatError(f"{path}: manifest not found") from None
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
    if doc.get("format") != MANIFEST_FORMAT:
        raise DataFormatError(f"{path}: unsupported manifest format {doc.get('format')!r}")
    registry = Registry.from_list(doc["domains"])
    base = Path(path).parent
    entries = []
    for i, item in enumerate(doc.get("samples", [])):
        entry = ManifestEntry(base / item["path"], int(item["domain"]), list(item["flow"]),
                              item.get("split", "train"))
        if not entry.path.exists():
            raise DataFormatError(f"{path}: sample {i} refers to missing file {entry.path}")
        registry.get(entry.domain).check_flow(entry.flow)
        entries.append(entry)
    return Manifest(doc.get("name", Path(path).stem), registry, entries)


def fit_flow_stats(registry: Registry, samples: Sequence[Sample]) -> Registry:
    """Per-domain flow mean/std over ``samples`` (std 0 -> 1); others unchanged."""
    out = registry
    for spec in registry:
        flows = np.array([s.flow for s in samples if s.domain == spec.id])
        if flows.size == 0:
            continue
        std = flows.std(axis=0)
        std[std == 0] = 1.0
        out = out.replace(replace(spec, flow_mean=flows.mean(axis=0).tolist(), flow_std=std.tolist()))
    return out


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    step: int
    epoch: int
    index: int
    samples: list[Sample]

    @property
    def batch_id(self) -> str:
        return f"epoch{self.epoch}/batch{self.index}"


class MixedBatcher:
    """Seeded, domain-agnostic batches over the union of training samples.

    Batch ``i`` is a pure function of ``(seed, i)``: each epoch is a fresh
    permutation of all samples and every sample is subsampled to
    ``points_per_sample`` points without replacement. That makes resuming at
    any step reproduce the original batch stream.
    """

    def __init__(self, samples: Sequence[Sample], batch_size: int = 4,
                 points_per_sample: int = 32768, seed: int = 0):
        if not samples:
            raise ValueError("no training samples")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.samples = list(samples)
        self.batch_size = batch_size
        self.points_per_sample = points_per_sample
        self.seed = seed
        self.batches_per_epoch = math.ceil(len(self.samples) / batch_size)
        self._plan: tuple[int, np.ndarray] | None = None

    def _epoch_order(self, epoch: int) -> np.ndarray:
        if self._plan is None or self._plan[0] != epoch:
            rng = np.random.default_rng([self.seed, epoch])
            self._plan = (epoch, rng.permutation(len(self.samples)))
        return self._plan[1]

    def batch(self, step: int) -> Batch:
        epoch, index = divmod(step, self.batches_per_epoch)
        order = self._epoch_order(epoch)
        chosen = order[index * self.batch_size:(index + 1) * self.batch_size]
        rng = np.random.default_rng([self.seed, epoch, index, 1])
        out = []
        for i in chosen:
            s = self.samples[int(i)]
            if s.n_points > self.points_per_sample:
                s = s.subset(np.sort(rng.choice(s.n_points, self.points_per_sample, replace=False)))
            out.append(s)
        return Batch(step, epoch, index, out)

    def epoch(self, epoch: int) -> list[Batch]:
        start = epoch * self.batches_per_epoch
        return [self.batch(start + i) for i in range(self.batches_per_epoch)]

    def __iter__(self) -> Iterator[Batch]:
        step = 0
        while True:
            yield self.batch(step)
            step += 1


def mixed_batcher(manifests: Sequence[Manifest], batch_size: int = 4, points_per_sample: int = 32768,
                  seed: int = 0, domains: Sequence[int] | None = None) -> MixedBatcher:
    samples = [s for m in manifests for s in m.load("train", domains)]
    if not samples:
        raise ValueError("manifests contain no training samples")
    return MixedBatcher(samples, batch_size, points_per_sample, seed)


# -- synthetic analytic-flow domains -----------------------------------------

U_REF = 30.0


def cylinder_cp(theta):
    """Potential flow past a circular cylinder, stagnation at theta = 0."""
    return 1.0 - 4.0 * np.sin(theta) ** 2


def sphere_cp(theta):
    """Potential flow past a sphere, theta measured from the stagnation axis."""
    return 1.0 - 2.25 * np.sin(theta) ** 2


def sphere_cp_at(points: np.ndarray, alpha: float) -> np.ndarray:
    """Sphere Cp at unit-sphere ``points`` with the stagnation axis rotated by ``alpha`` about z."""
    axis = np.array([math.cos(alpha), math.sin(alpha), 0.0])
    pts = np.asarray(points, dtype=np.float64)
    cos_t = pts @ axis / np.linalg.norm(pts, axis=1)
    return 1.0 - 2.25 * (1.0 - cos_t * cos_t)


def gen_cylinder(n_points: int, noise_std: float = 0.0, seed: int = 0, speed: float | None = None,
                 flow_warp: float = 0.0, span: float = 2.0) -> Sample:
    """Unit-radius cylinder of finite ``span`` along z, uniform in angle and height.

    The flow vector is ``[U]``. With ``flow_warp = 0`` the pressure field does
    not depend on it; otherwise Cp is scaled by ``1 + flow_warp * (U - U_REF) / U_REF``.
    """
    if n_points < 8:
        raise ValueError("n_points must be >= 8")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * math.pi, n_points)
    z = rng.uniform(-span / 2, span / 2, n_points)
    u = float(rng.uniform(10.0, 50.0)) if speed is None else float(speed)
    noise = rng.normal(0.0, 1.0, n_points)
    pts = np.column_stack([np.cos(theta), np.sin(theta), z])
    cp = cylinder_cp(theta) * (1.0 + flow_warp * (u - U_REF) / U_REF)
    return Sample(pts, CYLINDER.id, [u], cp + noise_std * noise, f"cylinder_s{seed}")


def gen_sphere(n_points: int, noise_std: float = 0.0, seed: int = 0, speed: float | None = None,
               alpha: float | None = None, alpha_range: tuple[float, float] = (-math.pi / 4, math.pi / 4)) -> Sample:
    """Unit sphere with uniformly distributed surface points; flow vector ``[U, alpha]``."""
    if n_points < 8:
        raise ValueError("n_points must be >= 8")
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(n_points, 3))
    pts = g / np.linalg.norm(g, axis=1, keepdims=True)
    u = float(rng.uniform(10.0, 50.0)) if speed is None else float(speed)
    a = float(rng.uniform(*alpha_range)) if alpha is None else float(alpha)
    noise = rng.normal(0.0, 1.0, n_points)
    cp = sphere_cp_at(pts, a)
    return Sample(pts, SPHERE.id, [u, a], cp + noise_std * noise, f"sphere_s{seed}")


GENERATORS = {"cylinder": gen_cylinder, "sphere": gen_sphere}


def generate_dataset(domain: str, count: int, n_points: int, noise_std: float, seed: int,
                     out_dir, test_fraction: float = 0.2, binary: bool = False) -> Path:
    """Write ``count`` samples plus ``manifest.json``; returns the manifest path.

    Sample ``i`` uses seed ``seed * 100003 + i``; the last
    ``round(count * test_fraction)`` samples are tagged ``test``.
    """
    if domain not in GENERATORS:
        raise RegistryError(f"unknown synthetic domain {domain!r}; choose from {sorted(GENERATORS)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    registry = synthetic_registry()
    spec = registry.by_name(domain)
    n_test = int(round(count * test_fraction))
    entries = []
    for i in range(count):
        s = GENERATORS[domain](n_points, noise_std, seed * 100003 + i)
        path = out_dir / f"{domain}_{i:05d}{'.ufb' if binary else '.txt'}"
        save_sample(s, path)
        entries.append(ManifestEntry(path, spec.id, s.flow.tolist(), "test" if i >= count - n_test else "train"))
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, f"synthetic-{domain}", Registry([spec]), entries)
    return manifest
