"""Frozen-encoder probes on a synthetic object-localization task.

The heads follow the MuJoCo policy networks used to evaluate pre-trained
representations: a three-conv "compression layer" plus a linear stack for
spatial token grids, or a linear stack for pooled vectors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .analysis import encode_dataset
from .data import render_scenes
from .errors import ConfigError, TrainingDivergedError
from .trainer import make_optimizer, optimizer_step

logger = logging.getLogger(__name__)

HIDDEN = 256
PROBE_LR = 1e-3
PROBE_WEIGHT_DECAY = 0.0
# (kernel, stride, padding) of the compression layer
COMPRESSION = ((4, 2, 1), (3, 2, 0), (3, 1, 0))


def compression_sides(side: int) -> list[int]:
    sides = [side]
    for k, s, p in COMPRESSION:
        sides.append((sides[-1] + 2 * p - k) // s + 1)
    return sides


def min_spatial_side() -> int:
    side = 1
    while compression_sides(side)[-1] < 1:
        side += 1
    return side


class SpatialProbeHead(nn.Module):
    def __init__(self, channels: int, side: int, out_dim: int):
        super().__init__()
        sides = compression_sides(side)
        if sides[-1] < 1:
            chain = " -> ".join(str(s) for s in sides)
            raise ConfigError(
                f"spatial probe head needs a token grid side >= {min_spatial_side()}; "
                f"a {side}x{side} grid gives {chain} through conv(k4,s2,p1), conv(k3,s2), conv(k3,s1)"
            )
        self.channels = channels
        self.side = side
        (k1, s1, p1), (k2, s2, p2), (k3, s3, p3) = COMPRESSION
        self.compression = nn.Sequential(
            nn.Conv2d(channels, HIDDEN, k1, stride=s1, padding=p1),
            nn.ReLU(),
            nn.Conv2d(HIDDEN, HIDDEN, k2, stride=s2, padding=p2),
            nn.ReLU(),
            nn.Conv2d(HIDDEN, HIDDEN, k3, stride=s3, padding=p3),
        )
        flat = HIDDEN * sides[-1] ** 2
        self.mlp = nn.Sequential(nn.Linear(flat, HIDDEN), nn.Linear(HIDDEN, HIDDEN), nn.Linear(HIDDEN, out_dim))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        b = tokens.shape[0]
        x = tokens.transpose(1, 2).reshape(b, self.channels, self.side, self.side)
        return self.mlp(self.compression(x).flatten(1))


class VectorProbeHead(nn.Module):
    """Consumes mean-pooled tokens."""

    def __init__(self, channels: int, out_dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(channels, HIDDEN), nn.Linear(HIDDEN, HIDDEN), nn.Linear(HIDDEN, out_dim))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() == 3:
            tokens = tokens.mean(dim=1)
        return self.mlp(tokens)


def make_probe_head(kind: str, input_geometry, out_dim: int, seed: int) -> nn.Module:
    """``input_geometry`` is ``(channels, grid_side)`` for spatial heads, ``channels`` for vector heads."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if kind == "spatial":
            channels, side = input_geometry
            return SpatialProbeHead(channels, side, out_dim)
        if kind == "vector":
            channels = input_geometry[0] if isinstance(input_geometry, (tuple, list)) else input_geometry
            return VectorProbeHead(channels, out_dim)
    raise ConfigError(f"probe head kind must be 'spatial' or 'vector', got {kind!r}")


@dataclass
class SyntheticTask:
    images: np.ndarray
    labels: np.ndarray  # N x 2, square centre (x, y) in [0, 1]
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int


def gen_synthetic_task(n: int, image_size: int, seed: int, test_fraction: float = 0.25) -> SyntheticTask:
    """Scenes with one bright square; the label is its centre in normalized coordinates."""
    if n < 2:
        raise ConfigError(f"task needs n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    images, labels = render_scenes(n, image_size, rng)
    n_test = min(n - 1, max(1, int(round(test_fraction * n))))
    perm = rng.permutation(n)
    return SyntheticTask(images, labels.astype(np.float32), np.sort(perm[n_test:]), np.sort(perm[:n_test]), seed)


@dataclass
class ProbeReport:
    kind: str
    steps: int
    lr: float
    weight_decay: float
    seed: int
    final_train_error: float
    final_test_error: float
    eval_steps: list[int] = field(default_factory=list)
    train_errors: list[float] = field(default_factory=list)
    test_errors: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _param_snapshot(module: nn.Module) -> list[torch.Tensor]:
    return [p.detach().clone() for p in module.parameters()]


def train_probe(
    encoder: nn.Module,
    head_kind: str,
    task: SyntheticTask,
    steps: int,
    seed: int = 0,
    batch_size: int = 64,
    lr: float = PROBE_LR,
    eval_every: Optional[int] = None,
    tokens: Optional[np.ndarray] = None,
) -> ProbeReport:
    """Fit a probe head on frozen encoder tokens by squared-error regression.

    Errors are mean squared errors over all label coordinates. ``tokens`` may
    carry pre-computed encodings of ``task.images`` to skip re-encoding.
    """
    if len(np.intersect1d(task.train_idx, task.test_idx)):
        raise ConfigError("probe train and test splits overlap")
    before = _param_snapshot(encoder)
    if tokens is None:
        tokens = encode_dataset(encoder, task.images)
    feats = torch.from_numpy(np.asarray(tokens, dtype=np.float32))
    labels = torch.from_numpy(np.asarray(task.labels, dtype=np.float32))
    d = feats.shape[-1]
    side = math.isqrt(feats.shape[1])
    geometry = (d, side) if head_kind == "spatial" else d
    head = make_probe_head(head_kind, geometry, labels.shape[1], seed)
    opt = make_optimizer({"head": head}, lr, PROBE_WEIGHT_DECAY)
    train_idx = torch.from_numpy(task.train_idx)
    test_idx = torch.from_numpy(task.test_idx)
    rng = np.random.default_rng([seed, 0x9E])
    eval_every = eval_every or max(1, steps // 20)

    @torch.no_grad()
    def error(idx):
        head.eval()
        out = float(((head(feats[idx]) - labels[idx]) ** 2).mean())
        head.train()
        return out

    report = ProbeReport(head_kind, steps, lr, PROBE_WEIGHT_DECAY, seed, math.nan, math.nan)
    order = np.empty(0, dtype=np.int64)
    for step in range(steps):
        if order.size < batch_size:
            order = np.concatenate([order, rng.permutation(task.train_idx)])
        batch, order = order[:batch_size], order[batch_size:]
        b = torch.from_numpy(batch)
        loss = ((head(feats[b]) - labels[b]) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite probe loss at step {step}", step, batch.tolist())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        optimizer_step(opt, lr)
        if (step + 1) % eval_every == 0 or step + 1 == steps:
            report.eval_steps.append(step + 1)
            report.train_errors.append(error(train_idx))
            report.test_errors.append(error(test_idx))
    report.final_train_error = error(train_idx)
    report.final_test_error = error(test_idx)
    after = _param_snapshot(encoder)
    if any(not torch.equal(a, b) for a, b in zip(before, after)):
        raise RuntimeError("encoder parameters changed during probing")
    return report
