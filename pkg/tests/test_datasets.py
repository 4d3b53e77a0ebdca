import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unifield.datasets import (
    CYLINDER, DRIVAERNET_PRESSURE_MEAN, DRIVAERNET_PRESSURE_STD, DomainSpec, MixedBatcher, Registry,
    Sample, cylinder_cp, destandardize_pressure, fit_flow_stats, gen_cylinder, gen_sphere,
    generate_dataset, load_manifest, load_sample, save_sample, sphere_cp, sphere_cp_at,
    standardize_pressure, synthetic_registry, training_target,
)
from unifield.errors import DataFormatError, RegistryError, SchemaError


# -- standardization ---------------------------------------------------------

def test_reference_standardization_values():
    m, s = DRIVAERNET_PRESSURE_MEAN, DRIVAERNET_PRESSURE_STD
    assert (m, s) == (-94.5, 117.25)
    assert standardize_pressure(-94.5, m, s) == 0.0
    assert standardize_pressure(22.75, m, s) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e4, 1e4))
def test_standardization_round_trip(p):
    m, s = DRIVAERNET_PRESSURE_MEAN, DRIVAERNET_PRESSURE_STD
    back = destandardize_pressure(standardize_pressure(p, m, s), m, s)
    assert abs(back - p) <= 1e-12 * max(1.0, abs(p))


def test_standardization_rejects_bad_std():
    with pytest.raises(ValueError):
        standardize_pressure(1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        destandardize_pressure(1.0, 0.0, -1.0)


def test_affine_domain_target(registry):
    spec = DomainSpec(3, "car", 1, ["U"], ["m/s"], pressure_mode="affine",
                      pressure_mean=-94.5, pressure_std=117.25)
    reg = registry.merge(Registry([spec]))
    s = Sample(np.zeros((2, 3)), 3, [40.0], [-94.5, 22.75])
    np.testing.assert_array_equal(training_target(s, reg), [0.0, 1.0])
    c = gen_cylinder(16)
    assert training_target(c, reg) is c.target


# -- analytic generators -----------------------------------------------------

def test_cylinder_cp_values():
    assert cylinder_cp(0.0) == 1.0
    assert cylinder_cp(math.pi / 2) == pytest.approx(-3.0, abs=1e-15)
    theta = np.arange(64) * 2 * math.pi / 64
    assert cylinder_cp(theta).mean() == pytest.approx(-1.0, abs=1e-12)


def test_sphere_cp_values():
    assert sphere_cp(0.0) == 1.0
    assert sphere_cp(math.pi / 2) == pytest.approx(-1.25, abs=1e-15)


def test_sphere_rotation():
    a = 0.3
    pts = np.array([[math.cos(a), math.sin(a), 0.0], [-math.sin(a), math.cos(a), 0.0], [0, 0, 1.0]])
    np.testing.assert_allclose(sphere_cp_at(pts, a), [1.0, -1.25, -1.25], atol=1e-12)


def test_generated_samples_follow_the_formulas():
    c = gen_cylinder(100, seed=3)
    theta = np.arctan2(c.points[:, 1], c.points[:, 0])
    np.testing.assert_allclose(c.target, 1 - 4 * np.sin(theta) ** 2, atol=1e-12)
    assert c.flow.shape == (1,) and 10 <= c.flow[0] <= 50
    s = gen_sphere(100, seed=3)
    np.testing.assert_allclose(np.linalg.norm(s.points, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(s.target, sphere_cp_at(s.points, s.flow[1]), atol=1e-12)
    assert abs(s.flow[1]) <= math.pi / 4


def test_generators_are_seeded():
    a, b = gen_sphere(50, 0.1, seed=8), gen_sphere(50, 0.1, seed=8)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.target, b.target)
    assert not np.array_equal(a.target, gen_sphere(50, 0.1, seed=9).target)


def test_noise_is_additive():
    clean, noisy = gen_cylinder(500, 0.0, seed=1), gen_cylinder(500, 0.2, seed=1)
    assert np.array_equal(clean.points, noisy.points)
    assert np.std(noisy.target - clean.target) == pytest.approx(0.2, rel=0.15)


# -- registry ----------------------------------------------------------------

def test_registry_lookup_and_errors(registry):
    assert registry.ids() == [1, 2]
    assert registry.flow_dims() == {1: 1, 2: 2}
    assert registry.by_name("sphere").id == 2
    with pytest.raises(RegistryError, match="5"):
        registry.get(5)
    with pytest.raises(RegistryError):
        Registry([CYLINDER, CYLINDER])
    with pytest.raises(RegistryError):
        DomainSpec(0, "x", 1, ["a"], ["b"])
    with pytest.raises(SchemaError):
        DomainSpec(4, "x", 2, ["a"], ["b"])


def test_registry_serialization(registry):
    assert Registry.from_list(json.loads(json.dumps(registry.to_list()))) == registry


def test_flow_check(registry):
    with pytest.raises(SchemaError, match="U, alpha"):
        registry.get(2).check_flow([30.0])


def test_fit_flow_stats(registry):
    samples = [gen_cylinder(8, seed=i) for i in range(5)]
    fitted = fit_flow_stats(registry, samples)
    flows = np.array([s.flow[0] for s in samples])
    assert fitted.get(1).flow_mean == pytest.approx([flows.mean()])
    assert fitted.get(1).flow_std == pytest.approx([flows.std()])
    assert fitted.get(2) == registry.get(2)


# -- sample files ------------------------------------------------------------

@pytest.mark.parametrize("suffix", [".txt", ".ufb"])
def test_sample_round_trip(tmp_path, suffix, registry):
    s = gen_sphere(37, 0.05, seed=2)
    path = tmp_path / f"s{suffix}"
    save_sample(s, path)
    back = load_sample(path, registry)
    assert back.domain == s.domain
    assert np.array_equal(back.points, s.points)
    assert np.array_equal(back.target, s.target)
    assert np.array_equal(back.flow, s.flow)


@pytest.mark.parametrize("suffix", [".txt", ".ufb"])
def test_single_point_sample(tmp_path, suffix):
    s = Sample([[0.5, 1.0, -2.0]], 1, [12.0], [0.25])
    save_sample(s, tmp_path / f"one{suffix}")
    back = load_sample(tmp_path / f"one{suffix}")
    assert back.points.shape == (1, 3) and back.target.tolist() == [0.25]


def test_unregistered_domain_in_file(tmp_path, registry):
    save_sample(Sample(np.zeros((2, 3)), 9, [1.0], [0.0, 0.0]), tmp_path / "x.txt")
    with pytest.raises(RegistryError):
        load_sample(tmp_path / "x.txt", registry)


def test_text_format_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# unifield-sample v1\n# domain: 1\n# flow: 30.0\nx y z p\n0 0 0 1\n0 0 oops 1\n")
    with pytest.raises(DataFormatError, match=":6:"):
        load_sample(path)
    path.write_text("# domain: 1\n0 0 0 1\n")
    with pytest.raises(DataFormatError, match="header"):
        load_sample(path)
    path.write_text("# domain: 1\n# flow: 1\n0 0 1\n")
    with pytest.raises(DataFormatError, match="4 columns"):
        load_sample(path)


def test_binary_format_errors(tmp_path):
    path = tmp_path / "bad.ufb"
    path.write_bytes(b"garbage!" * 4)
    with pytest.raises(DataFormatError, match="offset 0"):
        load_sample(path)
    save_sample(gen_cylinder(8), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataFormatError, match="expected"):
        load_sample(path)


def test_non_finite_values_rejected():
    with pytest.raises(DataFormatError):
        Sample([[0, 0, np.nan]], 1, [1.0], [0.0])


# -- manifests and generation ------------------------------------------------

def test_generate_dataset_and_manifest(tmp_path):
    manifest = generate_dataset("cylinder", 10, 32, 0.0, 4, tmp_path / "d")
    m = load_manifest(manifest)
    assert len(m.entries) == 10
    assert [e.split for e in m.entries].count("test") == 2
    assert len(list((tmp_path / "d").glob("cylinder_*.txt"))) == 10
    train = m.load("train")
    assert len(train) == 8 and all(s.n_points == 32 for s in train)


def test_generation_is_byte_reproducible(tmp_path):
    for sub in ("a", "b"):
        generate_dataset("sphere", 3, 16, 0.1, 7, tmp_path / sub, binary=True)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_unknown_domain_generation(tmp_path):
    with pytest.raises(RegistryError):
        generate_dataset("airfoil", 2, 16, 0.0, 0, tmp_path)


def test_manifest_errors(tmp_path):
    with pytest.raises(DataFormatError):
        load_manifest(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "something-else"}')
    with pytest.raises(DataFormatError, match="format"):
        load_manifest(bad)
    manifest = generate_dataset("cylinder", 2, 16, 0.0, 0, tmp_path / "d")
    (tmp_path / "d" / "cylinder_00000.txt").unlink()
    with pytest.raises(DataFormatError, match="missing"):
        load_manifest(manifest)


def test_data_root_env(tmp_path, monkeypatch):
    generate_dataset("cylinder", 2, 16, 0.0, 0, tmp_path / "d")
    monkeypatch.setenv("UNIFIELD_DATA_ROOT", str(tmp_path))
    monkeypatch.chdir(tmp_path / "d")
    assert len(load_manifest("d/manifest.json").entries) == 2


# -- batching ----------------------------------------------------------------

def _pool():
    return [gen_cylinder(40, seed=i) for i in range(5)] + [gen_sphere(40, seed=i) for i in range(4)]


def test_epoch_covers_every_sample_once():
    pool = _pool()
    b = MixedBatcher(pool, batch_size=4, points_per_sample=40, seed=1)
    for e in range(3):
        names = [s.name for batch in b.epoch(e) for s in batch.samples]
        assert sorted(names) == sorted(s.name for s in pool)


def test_batches_mix_domains():
    b = MixedBatcher(_pool(), batch_size=9, points_per_sample=40, seed=0)
    assert {s.domain for s in b.batch(0).samples} == {1, 2}


def test_batch_stream_is_deterministic():
    a = MixedBatcher(_pool(), 3, 16, seed=5)
    b = MixedBatcher(_pool(), 3, 16, seed=5)
    for step in (0, 1, 7, 12):
        ba, bb = a.batch(step), b.batch(step)
        assert ba.batch_id == bb.batch_id
        for x, y in zip(ba.samples, bb.samples):
            assert x.name == y.name and np.array_equal(x.points, y.points)
    c = MixedBatcher(_pool(), 3, 16, seed=6)
    assert [s.name for s in c.epoch(0)[0].samples] != [s.name for s in a.epoch(0)[0].samples] or \
        not np.array_equal(c.batch(0).samples[0].points, a.batch(0).samples[0].points)


def test_subsampling_keeps_point_target_pairs():
    s = gen_cylinder(100, seed=2)
    batch = MixedBatcher([s], 1, 30, seed=0).batch(0)
    sub = batch.samples[0]
    assert sub.n_points == 30
    theta = np.arctan2(sub.points[:, 1], sub.points[:, 0])
    np.testing.assert_allclose(sub.target, cylinder_cp(theta), atol=1e-12)
