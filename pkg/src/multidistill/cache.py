"""Offline teacher-feature cache.

Layout of a cache directory::

    manifest.json            written last, via atomic rename
    <teacher>/<shard>.bin    one shard per index range

Shard file layout (all little-endian):

    offset 0   4 bytes   magic b"MDFC"
    offset 4   uint16    format version (1)
    offset 6   uint8     dtype code (0 = float32, 1 = float16)
    offset 7   uint8     rank r
    offset 8   r*uint64  dims
    then                 row-major payload, dims = (images, positions, channels)

The manifest records a sha256 per shard; readers verify it before use.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageDataset
from .errors import (
    CacheMissingError,
    ChecksumError,
    ConfigError,
    ShapeError,
    TeacherMismatchError,
)
from .losses import NormStats, RunningMoments
from .translators import TeacherSpec, check_unique_names

MAGIC = b"MDFC"
SHARD_VERSION = 1
MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "multidistill-feature-cache"
MANIFEST_VERSION = 1
DTYPES = {"f32": (0, np.dtype("<f4")), "f16": (1, np.dtype("<f2"))}
DTYPE_BY_CODE = {code: (name, dt) for name, (code, dt) in DTYPES.items()}


@dataclass
class TeacherFeatureBlock:
    teacher: str
    indices: np.ndarray
    features: np.ndarray  # B x P_t x d_t
    normalized: bool = False

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(self.indices) > 1 and np.any(np.diff(self.indices) <= 0):
            raise ConfigError("block indices must be strictly ascending")
        if len(self.indices) != self.features.shape[0]:
            raise ShapeError("block indices and features disagree on batch size")

    def replace(self, **changes) -> "TeacherFeatureBlock":
        return replace(self, **changes)


@dataclass
class TeacherAdapter:
    """A frozen, deterministic teacher: ``extract(images) -> B x P_t x d_t`` float32."""

    spec: TeacherSpec
    extract: Callable[[np.ndarray], np.ndarray]
    provenance: str = ""

    def __call__(self, images: np.ndarray) -> np.ndarray:
        out = np.asarray(self.extract(images))
        expected = (images.shape[0], self.spec.num_positions, self.spec.channels)
        if out.shape != expected:
            raise ShapeError(
                f"teacher {self.spec.name!r} produced features of shape {out.shape}, expected {expected}"
            )
        return out.astype(np.float32, copy=False)

    def block(self, dataset: ImageDataset) -> TeacherFeatureBlock:
        return TeacherFeatureBlock(self.spec.name, np.arange(len(dataset)), self(dataset.images))


# Extraction points for real vision foundation models. Wiring weights is left
# to the integrator; these adapters only document what to extract.
REAL_TEACHER_PROVENANCE = {
    "vit": "last-layer spatial tokens of ViT-H/14, 1280 x 16 x 16",
    "clip": "last-layer spatial tokens of the CLIP-L image encoder, 1024 x 16 x 16",
    "dinov2": "last-layer spatial tokens of DINOv2-L, 1024 x 16 x 16",
    "sam": "SAM image-encoder output, 256 x 64 x 64",
    "depth_anything": "latent before the final convolution of Depth-Anything, 256 x 64 x 64",
}


def real_teacher_stub(kind: str, spec: TeacherSpec) -> TeacherAdapter:
    if kind not in REAL_TEACHER_PROVENANCE:
        raise ConfigError(f"unknown real teacher {kind!r}; known: {sorted(REAL_TEACHER_PROVENANCE)}")

    def extract(images):
        raise NotImplementedError(
            f"teacher {spec.name!r} ({kind}) needs model weights; extract "
            f"{REAL_TEACHER_PROVENANCE[kind]}"
        )

    return TeacherAdapter(spec, extract, REAL_TEACHER_PROVENANCE[kind])


SYNTHETIC_KINDS = ("random-conv", "patch-linear", "lowpass")


def _patch_side(image_size: int, spec: TeacherSpec) -> int:
    if image_size % spec.grid_side:
        raise ShapeError(
            f"image size {image_size} is not divisible by teacher grid {spec.grid_side}"
        )
    return image_size // spec.grid_side


def make_synthetic_teacher(kind: str, spec: TeacherSpec, seed: int) -> TeacherAdapter:
    """Frozen random feature extractors standing in for real teachers.

    * ``patch-linear``: a fixed random affine map of each patch's raw pixels.
    * ``random-conv``: two random 3x3 conv + tanh layers, average-pooled to the
      teacher grid, then a random 1x1 projection.
    * ``lowpass``: Gaussian-blurred pixels, downsampled to twice the teacher
      grid, each 2x2 cell group stacked and projected to ``d_t``.

    All arithmetic runs in float64 and is cast to float32 at the end, so the
    output does not depend on how images are batched.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"synthetic teacher kind must be one of {SYNTHETIC_KINDS}, got {kind!r}")
    g = torch.Generator().manual_seed(int(seed))
    d_t = spec.channels
    side = spec.grid_side

    def randn(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    if kind == "patch-linear":

        def extract(images):
            x = torch.from_numpy(np.asarray(images, dtype=np.float64))
            p = _patch_side(x.shape[-1], spec)
            fan_in = 3 * p * p
            # weights depend on the patch size, so draw them per call from a fresh generator
            local = torch.Generator().manual_seed(int(seed))
            w = torch.randn(fan_in, d_t, generator=local, dtype=torch.float64) / fan_in**0.5
            b = torch.randn(d_t, generator=local, dtype=torch.float64) * 0.1
            patches = F.unfold(x, kernel_size=p, stride=p).transpose(1, 2)
            return (patches @ w + b).numpy()

    elif kind == "random-conv":
        hidden = 16
        w1 = randn(hidden, 3, 3, 3) / 27**0.5 * 2.0
        b1 = randn(hidden) * 0.1
        w2 = randn(hidden, hidden, 3, 3) / (9 * hidden) ** 0.5 * 2.0
        b2 = randn(hidden) * 0.1
        w3 = randn(d_t, hidden) / hidden**0.5
        b3 = randn(d_t) * 0.1

        def extract(images):
            x = torch.from_numpy(np.asarray(images, dtype=np.float64))
            x = torch.tanh(F.conv2d(x - 0.5, w1, b1, padding=1))
            x = torch.tanh(F.conv2d(x, w2, b2, padding=1))
            x = F.adaptive_avg_pool2d(x, side)
            return (x.flatten(2).transpose(1, 2) @ w3.T + b3).numpy()

    else:
        w = randn(12, d_t) / 12**0.5
        b = randn(d_t) * 0.1
        t = torch.arange(5, dtype=torch.float64) - 2
        k1 = torch.exp(-(t**2) / 2.0)
        k1 = k1 / k1.sum()
        kernel = (k1[:, None] * k1[None, :]).expand(3, 1, 5, 5).contiguous()

        def extract(images):
            x = torch.from_numpy(np.asarray(images, dtype=np.float64))
            x = F.conv2d(F.pad(x, (2, 2, 2, 2), mode="replicate"), kernel, groups=3)
            x = F.adaptive_avg_pool2d(x, 2 * side)
            x = F.pixel_unshuffle(x, 2)  # B x 12 x side x side
            return (x.flatten(2).transpose(1, 2) @ w + b).numpy()

    return TeacherAdapter(spec, extract, f"synthetic {kind} teacher, seed {seed}")


@dataclass
class ShardEntry:
    file: str
    start: int
    stop: int
    bytes: int
    sha256: str

    def to_dict(self) -> dict:
        return {"file": self.file, "start": self.start, "stop": self.stop,
                "bytes": self.bytes, "sha256": self.sha256}


@dataclass
class TeacherEntry:
    spec: TeacherSpec
    stats: NormStats
    shards: list[ShardEntry]
    provenance: str = ""


@dataclass
class FeatureManifest:
    root: Path
    dataset_fingerprint: str
    dataset_size: int
    dtype: str
    shard_size: int
    teachers: dict[str, TeacherEntry] = field(default_factory=dict)

    def teacher(self, name: str) -> TeacherEntry:
        if name not in self.teachers:
            raise TeacherMismatchError(
                f"teacher {name!r} not in cache; available: {sorted(self.teachers)}"
            )
        return self.teachers[name]

    def stats(self, name: str) -> NormStats:
        return self.teacher(name).stats

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "dataset_fingerprint": self.dataset_fingerprint,
            "dataset_size": self.dataset_size,
            "dtype": self.dtype,
            "endianness": "little",
            "shard_size": self.shard_size,
            "teachers": [
                {
                    "spec": t.spec.to_dict(),
                    "provenance": t.provenance,
                    "stats": t.stats.to_dict(),
                    "shards": [s.to_dict() for s in t.shards],
                }
                for t in self.teachers.values()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_manifest(cache_dir) -> FeatureManifest:
    root = Path(cache_dir)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise CacheMissingError(f"no feature cache manifest at {path}; run the cache command first")
    d = json.loads(path.read_text())
    if d.get("format") != MANIFEST_FORMAT or d.get("version") != MANIFEST_VERSION:
        raise ConfigError(f"{path} is not a version-{MANIFEST_VERSION} feature cache manifest")
    teachers = {}
    for t in d["teachers"]:
        spec = TeacherSpec(**t["spec"])
        teachers[spec.name] = TeacherEntry(
            spec=spec,
            stats=NormStats.from_dict(t["stats"]),
            shards=[ShardEntry(**s) for s in t["shards"]],
            provenance=t.get("provenance", ""),
        )
    return FeatureManifest(
        root=root,
        dataset_fingerprint=d["dataset_fingerprint"],
        dataset_size=d["dataset_size"],
        dtype=d["dtype"],
        shard_size=d["shard_size"],
        teachers=teachers,
    )


def encode_shard(array: np.ndarray, dtype: str) -> bytes:
    code, dt = DTYPES[dtype]
    header = MAGIC + struct.pack("<HBB", SHARD_VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dt).tobytes()


def decode_shard(buf: bytes, name: str = "<shard>") -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ChecksumError(f"shard {name} has bad magic bytes")
    version, code, rank = struct.unpack_from("<HBB", buf, 4)
    if version != SHARD_VERSION or code not in DTYPE_BY_CODE:
        raise ChecksumError(f"shard {name} has unsupported version {version} or dtype code {code}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    dt = DTYPE_BY_CODE[code][1]
    offset = 8 + 8 * rank
    arr = np.frombuffer(buf, dtype=dt, offset=offset)
    if arr.size != int(np.prod(dims)):
        raise ChecksumError(f"shard {name} payload size does not match its header")
    return arr.reshape(dims)


def shard_ranges(n: int, shard_size: int) -> list[tuple[int, int]]:
    if shard_size < 1:
        raise ConfigError(f"shard_size must be >= 1, got {shard_size}")
    return [(s, min(s + shard_size, n)) for s in range(0, n, shard_size)]


def _extract_shard(adapter: TeacherAdapter, dataset: ImageDataset, start: int, stop: int,
                   root: Path, index: int, dtype: str):
    feats = adapter(dataset.images[start:stop])
    if not np.all(np.isfinite(feats)):
        raise ShapeError(f"teacher {adapter.spec.name!r} produced non-finite features")
    stored = feats.astype(DTYPES[dtype][1])
    payload = encode_shard(stored, dtype)
    rel = f"{adapter.spec.name}/{index}.bin"
    (root / rel).write_bytes(payload)
    moments = RunningMoments(adapter.spec.channels).update(stored, images=stop - start)
    entry = ShardEntry(rel, start, stop, len(payload), hashlib.sha256(payload).hexdigest())
    return entry, moments


def cache_features(
    dataset: ImageDataset,
    adapters: Sequence[TeacherAdapter],
    out_dir,
    shard_size: int = 256,
    dtype: str = "f32",
    workers: int = 1,
) -> FeatureManifest:
    """Extract every teacher's features for ``dataset`` and write them as shards.

    Statistics are accumulated per shard over the stored values and folded in
    shard order, so the manifest is byte-identical for any ``workers`` count.
    """
    if dtype not in DTYPES:
        raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    if not adapters:
        raise ConfigError("cache_features needs at least one teacher adapter")
    check_unique_names([a.spec for a in adapters])
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    ranges = shard_ranges(len(dataset), shard_size)
    manifest = FeatureManifest(root, dataset.fingerprint(), len(dataset), dtype, shard_size)
    created = []
    try:
        for adapter in adapters:
            tdir = root / adapter.spec.name
            if tdir.exists():
                shutil.rmtree(tdir)
            tdir.mkdir()
            created.append(tdir)
            jobs = [(adapter, dataset, s, e, root, i, dtype) for i, (s, e) in enumerate(ranges)]
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(lambda j: _extract_shard(*j), jobs))
            else:
                results = [_extract_shard(*j) for j in jobs]
            acc = RunningMoments(adapter.spec.channels)
            for _, moments in results:
                acc.merge(moments)
            manifest.teachers[adapter.spec.name] = TeacherEntry(
                spec=adapter.spec,
                stats=acc.finalize(adapter.spec.name),
                shards=[entry for entry, _ in results],
                provenance=adapter.provenance,
            )
        tmp = root / (MANIFEST_NAME + ".tmp")
        tmp.write_text(manifest.to_json())
        os.replace(tmp, root / MANIFEST_NAME)
    except BaseException:
        for tdir in created:
            shutil.rmtree(tdir, ignore_errors=True)
        (root / (MANIFEST_NAME + ".tmp")).unlink(missing_ok=True)
        raise
    return manifest


class CacheReader:
    """Verifies each shard once and keeps decoded shards in memory."""

    def __init__(self, manifest: FeatureManifest):
        self.manifest = manifest
        self._shards: dict[str, np.ndarray] = {}

    def shard(self, entry: ShardEntry) -> np.ndarray:
        if entry.file not in self._shards:
            path = self.manifest.root / entry.file
            if not path.exists():
                raise CacheMissingError(f"shard {entry.file} is missing from {self.manifest.root}")
            buf = path.read_bytes()
            if len(buf) != entry.bytes or hashlib.sha256(buf).hexdigest() != entry.sha256:
                raise ChecksumError(f"checksum mismatch in shard {entry.file}")
            self._shards[entry.file] = decode_shard(buf, entry.file)
        return self._shards[entry.file]

    def load(self, teacher: str, indices: Optional[Sequence[int]] = None) -> TeacherFeatureBlock:
        t = self.manifest.teacher(teacher)
        n = self.manifest.dataset_size
        idx = np.arange(n) if indices is None else np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"indices out of range [0, {n}) for teacher {teacher!r}")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ConfigError("requested indices must be strictly ascending")
        out = np.empty((idx.size, t.spec.num_positions, t.spec.channels), dtype=np.float32)
        for entry in t.shards:
            sel = (idx >= entry.start) & (idx < entry.stop)
            if sel.any():
                out[sel] = self.shard(entry)[idx[sel] - entry.start]
        return TeacherFeatureBlock(teacher, idx, out)


def load_features(manifest: FeatureManifest, teacher: str, indices=None) -> TeacherFeatureBlock:
    """Raw (unnormalized) features for the requested ascending dataset positions."""
    return CacheReader(manifest).load(teacher, indices)
