"""Teacher-feature normalization and the multi-teacher distillation objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np
import torch

from .errors import ConfigError, EmptyInputError, ShapeError, TeacherMismatchError

STD_FLOOR = 1e-6
SMOOTH_L1_DELTA = 1.0
LOSS_VARIANTS = ("cos_l1", "mse")


@dataclass
class NormStats:
    teacher: str
    mean: np.ndarray
    std: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeError("NormStats mean and std must be equal-length vectors")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def to_dict(self) -> dict:
        return {
            "teacher": self.teacher,
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "sample_count": int(self.sample_count),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["teacher"], np.array(d["mean"]), np.array(d["std"]), d["sample_count"])


class RunningMoments:
    """Per-channel count/mean/M2 accumulator (Chan et al. parallel update).

    ``merge`` is deterministic, so shard-wise partials folded in a fixed order
    always give the same result.
    """

    def __init__(self, channels: int):
        self.count = 0
        self.mean = np.zeros(channels, dtype=np.float64)
        self.m2 = np.zeros(channels, dtype=np.float64)
        self.images = 0

    def update(self, x: np.ndarray, images: int = 0) -> "RunningMoments":
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.mean.shape[0])
        if x.shape[0] == 0:
            return self
        other = RunningMoments(self.mean.shape[0])
        other.count = x.shape[0]
        other.mean = x.mean(axis=0)
        other.m2 = ((x - other.mean) ** 2).sum(axis=0)
        other.images = images
        return self.merge(other)

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if other.count == 0:
            self.images += other.images
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / n)
        self.m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        self.count = n
        self.images += other.images
        return self

    def finalize(self, teacher: str) -> NormStats:
        if self.count < 2:
            raise EmptyInputError(
                f"need at least 2 feature vectors for teacher {teacher!r}, got {self.count}"
            )
        std = np.sqrt(self.m2 / self.count)
        return NormStats(teacher, self.mean.copy(), np.maximum(std, STD_FLOOR), self.images)


def compute_norm_stats(feature_stream: Iterable) -> NormStats:
    """Single-pass per-channel mean and population std over a stream of blocks.

    Every block must come from the same teacher. Statistics pool all images
    and all spatial positions; the std is floored at ``STD_FLOOR``.
    """
    teacher = None
    acc: Optional[RunningMoments] = None
    for block in feature_stream:
        if teacher is None:
            teacher = block.teacher
            acc = RunningMoments(block.features.shape[-1])
        elif block.teacher != teacher:
            raise TeacherMismatchError(
                f"feature stream mixes teachers {teacher!r} and {block.teacher!r}"
            )
        if block.features.shape[-1] != acc.mean.shape[0]:
            raise ShapeError("feature blocks disagree on channel count")
        acc.update(block.features, images=block.features.shape[0])
    if acc is None:
        raise EmptyInputError("empty feature stream")
    return acc.finalize(teacher)


def normalize(block, stats: NormStats):
    """Per-channel standardization ``(h - mean) / std``; returns a new block."""
    if stats.teacher != block.teacher:
        raise TeacherMismatchError(
            f"stats are for teacher {stats.teacher!r}, block is from {block.teacher!r}"
        )
    feats = block.features
    if feats.shape[-1] != stats.channels:
        raise ShapeError(
            f"block has {feats.shape[-1]} channels, stats have {stats.channels}"
        )
    if isinstance(feats, torch.Tensor):
        mean = torch.as_tensor(stats.mean, dtype=feats.dtype)
        std = torch.as_tensor(stats.std, dtype=feats.dtype)
        out = (feats - mean) / std
    else:
        out = ((np.asarray(feats, dtype=np.float64) - stats.mean) / stats.std).astype(feats.dtype)
    return block.replace(features=out, normalized=True)


def normalize_tensor(features: torch.Tensor, stats: NormStats) -> torch.Tensor:
    mean = torch.as_tensor(stats.mean, dtype=features.dtype)
    std = torch.as_tensor(stats.std, dtype=features.dtype)
    return (features - mean) / std


def _check_same_shape(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")


def cosine_terms(pred: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Per-position ``1 - cos`` over the channel axis and the count of degenerate positions.

    A position where either vector has zero norm scores 1 (similarity 0).
    """
    _check_same_shape(pred, target)
    dot = (pred * target).sum(-1)
    pn = pred.norm(dim=-1)
    tn = target.norm(dim=-1)
    ok = (pn > 0) & (tn > 0)
    denom = torch.where(ok, pn * tn, torch.ones_like(pn))
    sim = torch.where(ok, dot / denom, torch.zeros_like(dot))
    return 1.0 - sim, int((~ok).sum().item())


def cosine_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return cosine_terms(pred, target)[0].mean()


def smooth_l1_loss(pred: torch.Tensor, target: torch.Tensor, delta: float = SMOOTH_L1_DELTA) -> torch.Tensor:
    """Huber-form smooth-L1: ``0.5 e^2`` inside ``|e| < delta``, ``delta (|e| - 0.5 delta)`` outside."""
    _check_same_shape(pred, target)
    e = (pred - target).abs()
    quad = 0.5 * e**2
    lin = delta * (e - 0.5 * delta)
    return torch.where(e < delta, quad, lin).mean()


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same_shape(pred, target)
    return ((pred - target) ** 2).mean()


@dataclass
class LossWeights:
    alpha: Optional[dict[str, float]] = None  # None -> uniform 1/M
    beta: float = 0.9
    variant: str = "cos_l1"

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.variant not in LOSS_VARIANTS:
            raise ConfigError(f"loss variant must be one of {LOSS_VARIANTS}, got {self.variant!r}")

    def weights_for(self, teachers: Iterable[str]) -> dict[str, float]:
        teachers = list(teachers)
        if self.alpha is None:
            return {t: 1.0 / len(teachers) for t in teachers}
        missing = set(teachers) - set(self.alpha)
        if missing:
            raise ConfigError(f"no alpha weight for teachers {sorted(missing)}")
        return {t: float(self.alpha[t]) for t in teachers}

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "variant": self.variant}


@dataclass
class TeacherLoss:
    total: torch.Tensor
    cos: Optional[torch.Tensor] = None
    smooth_l1: Optional[torch.Tensor] = None
    mse: Optional[torch.Tensor] = None
    degenerate: int = 0

    def as_floats(self) -> dict[str, float]:
        out = {"total": float(self.total.detach())}
        for k in ("cos", "smooth_l1", "mse"):
            v = getattr(self, k)
            if v is not None:
                out[k] = float(v.detach())
        return out


@dataclass
class DistillLoss:
    total: torch.Tensor
    per_teacher: dict[str, TeacherLoss] = field(default_factory=dict)

    @property
    def degenerate(self) -> int:
        return sum(t.degenerate for t in self.per_teacher.values())

    def breakdown(self) -> dict[str, dict[str, float]]:
        return {name: tl.as_floats() for name, tl in sorted(self.per_teacher.items())}


def teacher_loss(pred: torch.Tensor, target: torch.Tensor, weights: LossWeights, extra=None) -> TeacherLoss:
    """Unweighted loss for one teacher.

    ``extra`` is an optional ``(cls_pred, cls_target)`` pair; it joins the
    spatial average as one additional position.
    """
    if weights.variant == "mse":
        m = mse_loss(pred, target)
        if extra is not None:
            p = pred.shape[1]
            m = (p * m + mse_loss(*extra)) / (p + 1)
        return TeacherLoss(total=m, mse=m)
    cos_pos, degenerate = cosine_terms(pred, target)
    c = cos_pos.mean()
    s = smooth_l1_loss(pred, target)
    if extra is not None:
        p = pred.shape[1]
        cls_cos, cls_deg = cosine_terms(*extra)
        degenerate += cls_deg
        c = (p * c + cls_cos.mean()) / (p + 1)
        s = (p * s + smooth_l1_loss(*extra)) / (p + 1)
    total = weights.beta * c + (1.0 - weights.beta) * s
    return TeacherLoss(total=total, cos=c, smooth_l1=s, degenerate=degenerate)


def distill_loss(
    preds: Mapping[str, torch.Tensor],
    targets: Mapping[str, torch.Tensor],
    weights: LossWeights,
    cls_pairs: Optional[Mapping[str, tuple[torch.Tensor, torch.Tensor]]] = None,
) -> DistillLoss:
    """Weighted multi-teacher objective.

    ``cos_l1``: ``sum_i alpha_i (beta * L_cos,i + (1 - beta) * L_sL1,i)``;
    ``mse``: ``sum_i alpha_i * MSE_i``. Teachers are summed in sorted-name
    order so the scalar does not depend on mapping order.
    """
    if set(preds) != set(targets):
        raise TeacherMismatchError(
            f"teacher sets differ: only in preds {sorted(set(preds) - set(targets))}, "
            f"only in targets {sorted(set(targets) - set(preds))}"
        )
    if not preds:
        raise TeacherMismatchError("distill_loss needs at least one teacher")
    names = sorted(preds)
    alpha = weights.weights_for(names)
    per_teacher = {}
    total = None
    for name in names:
        extra = cls_pairs.get(name) if cls_pairs else None
        tl = teacher_loss(preds[name], targets[name], weights, extra)
        per_teacher[name] = tl
        term = alpha[name] * tl.total
        total = term if total is None else total + term
    return DistillLoss(total=total, per_teacher=per_teacher)
