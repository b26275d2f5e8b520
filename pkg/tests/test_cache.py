import json

import numpy as np
import pytest
import torch

from multidistill.cache import (
    MANIFEST_NAME,
    CacheReader,
    TeacherAdapter,
    cache_features,
    decode_shard,
    encode_shard,
    load_features,
    load_manifest,
    make_synthetic_teacher,
    real_teacher_stub,
)
from multidistill.backbone import BackboneConfig
from multidistill.data import make_corpus
from multidistill.errors import (
    CacheMissingError,
    ChecksumError,
    ConfigError,
    ShapeError,
    TeacherMismatchError,
)
from multidistill.losses import LossWeights, compute_norm_stats, normalize_tensor
from multidistill.trainer import TrainConfig, train
from multidistill.translators import TeacherSpec, translate


@pytest.mark.parametrize("kind", ["patch-linear", "random-conv", "lowpass"])
def test_teacher_is_deterministic_and_seeded(kind, tiny_dataset):
    spec = TeacherSpec("t", 4, 6)
    a = make_synthetic_teacher(kind, spec, seed=3)
    first = a(tiny_dataset.images)
    assert np.array_equal(first, a(tiny_dataset.images))
    assert np.array_equal(first, make_synthetic_teacher(kind, spec, seed=3)(tiny_dataset.images))
    other = make_synthetic_teacher(kind, spec, seed=4)(tiny_dataset.images)
    assert np.abs(first - other).max() > 0
    assert first.shape == (24, 16, 6) and first.dtype == np.float32


@pytest.mark.parametrize("kind", ["patch-linear", "random-conv", "lowpass"])
def test_teacher_output_independent_of_batching(kind, tiny_dataset):
    a = make_synthetic_teacher(kind, TeacherSpec("t", 4, 6), seed=0)
    whole = a(tiny_dataset.images)
    parts = np.concatenate([a(tiny_dataset.images[i:i + 5]) for i in range(0, 24, 5)])
    assert np.array_equal(whole, parts)


def test_adapter_shape_error_names_teacher(tiny_dataset):
    bad = TeacherAdapter(TeacherSpec("wonky", 4, 6), lambda x: np.zeros((len(x), 16, 5)))
    with pytest.raises(ShapeError, match="wonky"):
        bad(tiny_dataset.images)


def test_real_teacher_stub_documents_extraction_point():
    stub = real_teacher_stub("sam", TeacherSpec("sam", 64, 256, "dense-grid-64"))
    assert "encoder" in stub.provenance
    with pytest.raises(NotImplementedError, match="SAM"):
        stub(np.zeros((1, 3, 64, 64), dtype=np.float32))
    with pytest.raises(ConfigError):
        real_teacher_stub("resnet", TeacherSpec("r", 16, 8))


def test_partition_arithmetic(tmp_path):
    ds = make_corpus(100, 8, seed=1)
    adapters = [make_synthetic_teacher("patch-linear", TeacherSpec("a", 4, 3), 0),
                make_synthetic_teacher("lowpass", TeacherSpec("b", 2, 3), 0)]
    m = cache_features(ds, adapters, tmp_path, shard_size=32)
    for name in ("a", "b"):
        ranges = [(s.start, s.stop) for s in m.teacher(name).shards]
        assert ranges == [(0, 32), (32, 64), (64, 96), (96, 100)]
        assert [s.file for s in m.teacher(name).shards] == [f"{name}/{i}.bin" for i in range(4)]


def test_rerun_gives_identical_checksums(tmp_path, tiny_dataset, tiny_teachers):
    a = cache_features(tiny_dataset, tiny_teachers, tmp_path / "a", shard_size=10)
    b = cache_features(tiny_dataset, tiny_teachers, tmp_path / "b", shard_size=10)
    assert a.to_json() == b.to_json()
    assert (tmp_path / "a" / MANIFEST_NAME).read_bytes() == (tmp_path / "b" / MANIFEST_NAME).read_bytes()


def test_parallel_manifest_is_byte_identical(tmp_path, tiny_dataset, tiny_teachers):
    cache_features(tiny_dataset, tiny_teachers, tmp_path / "serial", shard_size=5)
    cache_features(tiny_dataset, tiny_teachers, tmp_path / "par", shard_size=5, workers=4)
    assert (tmp_path / "serial" / MANIFEST_NAME).read_bytes() == (tmp_path / "par" / MANIFEST_NAME).read_bytes()


def test_corrupt_shard_is_named(tiny_cache):
    entry = tiny_cache.teacher("alpha").shards[1]
    path = tiny_cache.root / entry.file
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError, match="alpha/1.bin"):
        load_features(tiny_cache, "alpha")
    # shard 0 is intact and still readable on its own
    assert load_features(tiny_cache, "alpha", [0, 1]).features.shape[0] == 2


def test_missing_shard_and_manifest(tmp_path, tiny_cache):
    with pytest.raises(CacheMissingError):
        load_manifest(tmp_path / "nowhere")
    (tiny_cache.root / tiny_cache.teacher("beta").shards[0].file).unlink()
    with pytest.raises(CacheMissingError):
        load_features(tiny_cache, "beta")


def test_f32_round_trip_is_bitwise(tiny_cache, tiny_dataset, tiny_teachers):
    m = load_manifest(tiny_cache.root)
    for adapter in tiny_teachers:
        got = load_features(m, adapter.spec.name).features
        assert np.array_equal(got, adapter(tiny_dataset.images))


def test_f16_round_trip_within_quantum(tmp_path, tiny_dataset, tiny_teachers):
    m = cache_features(tiny_dataset, tiny_teachers, tmp_path, shard_size=7, dtype="f16")
    for adapter in tiny_teachers:
        exact = adapter(tiny_dataset.images).astype(np.float64)
        got = load_features(m, adapter.spec.name).features.astype(np.float64)
        # spacing of half-precision values at each magnitude; rounding error is at most half of it
        quantum = np.spacing(np.abs(exact).astype(np.float16)).astype(np.float64)
        assert np.all(np.abs(got - exact) <= quantum)


def test_indices_spanning_shards(tiny_cache, tiny_teachers, tiny_dataset):
    block = load_features(tiny_cache, "alpha", [8, 9, 10, 11, 12])
    assert block.features.shape == (5, 16, 6)
    assert block.features.flags["C_CONTIGUOUS"]
    np.testing.assert_array_equal(block.features, tiny_teachers[0](tiny_dataset.images)[8:13])
    np.testing.assert_array_equal(block.indices, [8, 9, 10, 11, 12])


def test_load_errors(tiny_cache):
    with pytest.raises(TeacherMismatchError):
        load_features(tiny_cache, "gamma")
    with pytest.raises(IndexError):
        load_features(tiny_cache, "alpha", [3, 24])
    with pytest.raises(ConfigError):
        load_features(tiny_cache, "alpha", [4, 2])


def test_manifest_stats_match_recomputed(tiny_cache):
    for name in ("alpha", "beta"):
        stats = compute_norm_stats([load_features(tiny_cache, name)])
        ref = tiny_cache.stats(name)
        np.testing.assert_allclose(ref.mean, stats.mean, rtol=1e-6, atol=1e-12)
        np.testing.assert_allclose(ref.std, stats.std, rtol=1e-6)
        assert ref.sample_count == 24


def test_manifest_layout(tiny_cache):
    d = json.loads((tiny_cache.root / MANIFEST_NAME).read_text())
    assert d["endianness"] == "little" and d["dtype"] == "f32"
    assert len(d["dataset_fingerprint"]) == 64
    assert [t["spec"]["name"] for t in d["teachers"]] == ["alpha", "beta"]


def test_shard_codec():
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    buf = encode_shard(arr, "f32")
    assert buf[:4] == b"MDFC"
    assert np.array_equal(decode_shard(buf), arr)
    with pytest.raises(ChecksumError):
        decode_shard(b"XXXX" + buf[4:])
    with pytest.raises(ChecksumError):
        decode_shard(buf[:-4])


def test_failed_extraction_removes_partial_shards(tmp_path, tiny_dataset):
    calls = {"n": 0}

    def flaky(images):
        calls["n"] += 1
        if calls["n"] > 1:
            raise RuntimeError("disk full")
        return np.zeros((len(images), 4, 2), dtype=np.float32)

    adapters = [TeacherAdapter(TeacherSpec("f", 2, 2), flaky)]
    with pytest.raises(RuntimeError):
        cache_features(tiny_dataset, adapters, tmp_path, shard_size=10)
    assert not (tmp_path / "f").exists()
    assert not (tmp_path / MANIFEST_NAME).exists()


def test_reader_is_thread_safe_for_concurrent_loads(tiny_cache):
    from concurrent.futures import ThreadPoolExecutor

    reader = CacheReader(tiny_cache)
    with ThreadPoolExecutor(4) as pool:
        blocks = list(pool.map(lambda i: reader.load("alpha", [i]).features, range(24)))
    np.testing.assert_array_equal(np.concatenate(blocks), load_features(tiny_cache, "alpha").features)


def test_patch_linear_target_is_linearly_recoverable(tmp_path):
    ds = make_corpus(64, 8, seed=5)
    m = cache_features(ds, [make_synthetic_teacher("patch-linear", TeacherSpec("lin", 4, 6), 3)], tmp_path)
    config = BackboneConfig(image_size=8, patch_size=2, embed_dim=16, depth=1, heads=2, num_register_tokens=1)
    tc = TrainConfig(batch_size=64, base_lr=1e-2, weight_decay=0.0, epochs=300, warmup_epochs=0,
                     loss=LossWeights(variant="mse"))
    result = train(tc, config, "linear", m, ds)
    target = normalize_tensor(torch.from_numpy(load_features(m, "lin").features), m.stats("lin"))
    with torch.no_grad():
        pred = translate(result.translators["lin"], result.backbone(torch.from_numpy(ds.images)))
    mse = float(((pred - target) ** 2).mean())
    assert mse < 1e-3, mse
