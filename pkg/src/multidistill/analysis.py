"""Representation-quality measurements on spatial tokens.

Token-norm histograms and their entropy, PCA explained-variance curves,
cosine similarity to the mean token, norm maps, and Pearson correlation
between a metric and downstream performance.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .data import ImageDataset
from .errors import ConfigError, EmptyInputError, ShapeError

DEFAULT_BIN_COUNT = 100


@dataclass
class NormSampleSet:
    norms: np.ndarray
    source: str = ""
    sample_fraction: float = 1.0

    def __post_init__(self):
        self.norms = np.asarray(self.norms, dtype=np.float64).ravel()
        if self.norms.size and (not np.all(np.isfinite(self.norms)) or self.norms.min() < 0):
            raise ValueError("norms must be finite and non-negative")


@dataclass
class EntropyReport:
    entropy: float
    bin_count: int
    bin_edges: list[float]
    probabilities: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PcaReport:
    evr: np.ndarray
    cumulative: np.ndarray
    auc: float

    def to_dict(self) -> dict:
        return {"evr": self.evr.tolist(), "cumulative": self.cumulative.tolist(), "auc": self.auc}


@dataclass
class CosineSummary:
    degenerate: bool
    similarities: Optional[np.ndarray] = None
    mean: Optional[float] = None
    median: Optional[float] = None
    hist_counts: list[int] = field(default_factory=list)
    hist_edges: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"degenerate": self.degenerate, "mean": self.mean, "median": self.median,
                "hist_counts": self.hist_counts, "hist_edges": self.hist_edges}


@dataclass
class Correlation:
    r: float
    defined: bool


@torch.no_grad()
def encode_dataset(encoder: torch.nn.Module, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Spatial tokens ``N x P x d`` for ``images`` as float64."""
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    out = []
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(np.asarray(images[start:start + batch_size])).to(dtype)
        out.append(encoder(x).double().numpy())
    return np.concatenate(out, axis=0)


def sample_positions(n: int, sample_fraction: float, seed: int) -> np.ndarray:
    if not 0 < sample_fraction <= 1:
        raise ConfigError(f"sample_fraction must lie in (0, 1], got {sample_fraction}")
    k = int(round(sample_fraction * n))
    if k < 1:
        raise EmptyInputError(f"sample fraction {sample_fraction} of {n} images selects nothing")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=k, replace=False))


def token_norms(encoder, dataset: ImageDataset, sample_fraction: float = 1.0, seed: int = 0,
                source: str = "") -> NormSampleSet:
    """L2 norm of every spatial token of a seeded subsample of ``dataset``."""
    pos = sample_positions(len(dataset), sample_fraction, seed)
    tokens = encode_dataset(encoder, dataset.images[pos])
    return NormSampleSet(np.linalg.norm(tokens, axis=-1).ravel(), source, sample_fraction)


def histogram_entropy(norms, bin_count: int = DEFAULT_BIN_COUNT) -> EntropyReport:
    """Shannon entropy (nats) of an equal-width histogram over ``[min, max]``.

    Empty bins contribute nothing. If every sample is identical they all land
    in one bin and the entropy is 0.
    """
    values = norms.norms if isinstance(norms, NormSampleSet) else np.asarray(norms, dtype=np.float64).ravel()
    if bin_count < 2:
        raise ConfigError(f"bin_count must be >= 2, got {bin_count}")
    if values.size == 0:
        raise EmptyInputError("histogram_entropy needs at least one sample")
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        edges = np.linspace(lo - 0.5, hi + 0.5, bin_count + 1)
        counts = np.zeros(bin_count, dtype=np.int64)
        counts[bin_count // 2] = values.size
    else:
        counts, edges = np.histogram(values, bins=bin_count, range=(lo, hi))
    p = counts / values.size
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    return EntropyReport(h if h > 0 else 0.0, bin_count, edges.tolist(), p.tolist())


def pca_evr(tokens) -> PcaReport:
    """Explained-variance ratios of the pooled token cloud, largest first.

    Uses the singular values of the centred data. ``auc`` is the mean of the
    cumulative curve, so a single dominant component gives 1.
    """
    x = np.asarray(tokens, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    n, d = x.shape
    if n < d + 1:
        raise EmptyInputError(f"pca_evr needs at least d+1 = {d + 1} vectors, got {n}")
    xc = x - x.mean(axis=0)
    s = np.linalg.svd(xc, compute_uv=False)
    var = s**2 / (n - 1)
    var = np.concatenate([var, np.zeros(d - var.size)])
    total = var.sum()
    if total <= 0:
        evr = np.zeros(d)
        evr[0] = 1.0
    else:
        evr = var / total
    cumulative = np.cumsum(evr)
    return PcaReport(evr, cumulative, float(cumulative.mean()))


def cosine_to_mean(tokens, bins: int = 20) -> CosineSummary:
    """Cosine similarity of every token to the mean token."""
    x = np.asarray(tokens, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    mean = x.mean(axis=0)
    mn = np.linalg.norm(mean)
    scale = max(np.abs(x).max(), 1.0)
    if mn <= 1e-12 * scale:
        return CosineSummary(degenerate=True)
    xn = np.linalg.norm(x, axis=1)
    sims = np.where(xn > 0, x @ mean / (np.where(xn > 0, xn, 1.0) * mn), 0.0)
    counts, edges = np.histogram(sims, bins=bins, range=(-1.0, 1.0))
    return CosineSummary(
        degenerate=False,
        similarities=sims,
        mean=float(sims.mean()),
        median=float(np.median(sims)),
        hist_counts=counts.tolist(),
        hist_edges=edges.tolist(),
    )


def norm_map(encoder, image, clip: bool = False) -> np.ndarray:
    """Per-patch token norms of one image as a ``grid x grid`` array.

    With ``clip=True`` the values are limited to ``[0, 2 * median]``.
    """
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[None]
    if img.shape[0] != 1:
        raise ShapeError("norm_map takes a single image")
    tokens = encode_dataset(encoder, img)[0]
    side = math.isqrt(tokens.shape[0])
    norms = np.linalg.norm(tokens, axis=-1).reshape(side, side)
    return clip_norm_map(norms) if clip else norms


def clip_norm_map(norms: np.ndarray) -> np.ndarray:
    return np.clip(norms, 0.0, 2.0 * np.median(norms))


def correlate(xs, ys) -> Correlation:
    """Sample Pearson correlation; ``defined`` is False for constant inputs."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("correlate needs two equal-length 1-D sequences")
    if x.size < 3:
        raise EmptyInputError("correlate needs at least 3 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0 or sy == 0:
        return Correlation(float("nan"), False)
    r = float(xc @ yc) / (sx * sy)
    return Correlation(max(-1.0, min(1.0, r)), True)
