"""Distillation training loop, learning-rate schedule and ablation orchestration."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig, StudentViT, count_parameters, init_backbone
from .cache import CacheReader, FeatureManifest
from .checkpoint import Checkpoint, save_checkpoint
from .data import ImageDataset
from .errors import ConfigError, FingerprintMismatchError, TrainingDivergedError
from .losses import LossWeights, distill_loss, normalize_tensor
from .translators import ClsTranslator, build_translator, translate

logger = logging.getLogger(__name__)

TOKEN_MODES = ("spatial_only", "cls_plus_spatial")


@dataclass
class TrainConfig:
    batch_size: int = 128
    base_lr: float = 5e-4
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 50
    warmup_epochs: int = 5
    warmup_start_factor: float = 1e-2
    schedule: str = "constant"
    grad_clip: str = "none"
    augmentation: str = "none"
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    token_mode: str = "spatial_only"
    teachers: Optional[list[str]] = None  # None: every teacher in the cache
    max_steps: Optional[int] = None  # stop early after this many optimizer steps

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        self.betas = tuple(float(b) for b in self.betas)
        try:
            for name in ("base_lr", "weight_decay", "warmup_start_factor"):
                setattr(self, name, float(getattr(self, name)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"non-numeric optimizer setting: {exc}") from exc
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(
                f"warmup_epochs must lie in [0, epochs] ({self.warmup_epochs} vs {self.epochs})"
            )
        if self.optimizer != "adamw":
            raise ConfigError(f"only the adamw optimizer is supported, got {self.optimizer!r}")
        if self.schedule != "constant":
            raise ConfigError(f"only the constant schedule is supported, got {self.schedule!r}")
        if self.grad_clip != "none" or self.augmentation != "none":
            raise ConfigError("gradient clipping and image augmentation are not supported")
        if self.token_mode not in TOKEN_MODES:
            raise ConfigError(f"token_mode must be one of {TOKEN_MODES}, got {self.token_mode!r}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Linear warmup from ``warmup_start_factor * base_lr`` at step 0, then constant."""
    warmup_steps = config.warmup_epochs * steps_per_epoch
    if step >= warmup_steps:
        return config.base_lr
    frac = step / warmup_steps
    return config.base_lr * (config.warmup_start_factor + (1.0 - config.warmup_start_factor) * frac)


def _no_decay(name: str, param: nn.Parameter) -> bool:
    return param.ndim <= 1 or "pos_embed" in name or "registers" in name


def make_optimizer(
    named_modules: dict[str, nn.Module],
    lr: float,
    weight_decay: float,
    betas: Sequence[float] = (0.9, 0.999),
) -> torch.optim.AdamW:
    """AdamW with weight decay disabled on norms, biases, positional and register embeddings."""
    decay, no_decay = [], []
    for prefix, module in named_modules.items():
        for name, p in module.named_parameters():
            if p.requires_grad:
                (no_decay if _no_decay(name, p) else decay).append(p)
    groups = [{"params": decay, "weight_decay": weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW([g for g in groups if g["params"]], lr=lr, betas=tuple(betas))


def optimizer_step(optimizer: torch.optim.Optimizer, lr: float) -> None:
    """Set the learning rate and step; parameters without a gradient count as zero-gradient."""
    for group in optimizer.param_groups:
        group["lr"] = lr
        for p in group["params"]:
            if p.grad is None:
                p.grad = torch.zeros_like(p)
    optimizer.step()


class MetricLog:
    """Append-only per-step records, mirrored to a JSON-lines file when a path is given."""

    def __init__(self, path: Optional[Path] = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def teacher_series(self, teacher: str, key: str = "total") -> list[float]:
        return [r["teachers"][teacher][key] for r in self.records]

    def tail(self, n: int = 20) -> list[dict]:
        return self.records[-n:]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: MetricLog
    backbone: StudentViT
    translators: dict[str, nn.Module]
    cls_translators: dict[str, nn.Module]


class Distiller(nn.Module):
    """Backbone plus per-teacher translators, as one module for the optimizer."""

    def __init__(self, backbone: StudentViT, translators: dict, cls_translators: dict):
        super().__init__()
        self.backbone = backbone
        self.translators = nn.ModuleDict(translators)
        self.cls_translators = nn.ModuleDict(cls_translators)

    def forward(self, images: torch.Tensor):
        cls, z = self.backbone.forward_all(images)
        preds = {name: translate(t, z) for name, t in self.translators.items()}
        cls_preds = {name: t(cls) for name, t in self.cls_translators.items()}
        return preds, cls_preds


def build_distiller(
    backbone_config: BackboneConfig,
    specs: dict,
    translator_kind: str,
    seed: int,
    token_mode: str = "spatial_only",
    resize_fallback: bool = False,
) -> Distiller:
    backbone = init_backbone(backbone_config, seed)
    n_backbone = count_parameters(backbone)
    translators, cls_translators = {}, {}
    for i, name in enumerate(sorted(specs)):
        translators[name] = build_translator(
            backbone_config.embed_dim, backbone_config.grid_side, specs[name], translator_kind,
            resize_fallback=resize_fallback, backbone_params=n_backbone, seed=seed * 1009 + 17 * (i + 1),
        )
    if token_mode == "cls_plus_spatial":
        if backbone_config.num_register_tokens < 1:
            raise ConfigError("token_mode 'cls_plus_spatial' needs at least one register (the CLS token)")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed * 1009 + 7)
            for name in sorted(specs):
                cls_translators[name] = ClsTranslator(backbone_config.embed_dim, specs[name])
    return Distiller(backbone, translators, cls_translators)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(
    train_config: TrainConfig,
    backbone_config: BackboneConfig,
    translator_kind: str,
    manifest: FeatureManifest,
    dataset: ImageDataset,
    run_dir=None,
    *,
    dtype: torch.dtype = torch.float32,
    resize_fallback: bool = False,
    log_every: int = 0,
) -> TrainResult:
    """Distill the cached teachers into a freshly initialized (or warm-started) student.

    When ``run_dir`` is given, the metric log (``metrics.jsonl``), per-epoch
    checkpoints and ``final.ckpt`` are written there.
    """
    if dataset.fingerprint() != manifest.dataset_fingerprint:
        raise FingerprintMismatchError(
            "dataset fingerprint does not match the feature cache; rebuild the cache for this dataset"
        )
    teachers = sorted(train_config.teachers or manifest.teachers)
    specs = {name: manifest.teacher(name).spec for name in teachers}
    stats = {name: manifest.stats(name) for name in teachers}

    model = build_distiller(backbone_config, specs, translator_kind, train_config.seed,
                            train_config.token_mode, resize_fallback).to(dtype)

    reader = CacheReader(manifest)
    targets = {
        name: normalize_tensor(torch.from_numpy(reader.load(name).features).to(dtype), stats[name])
        for name in teachers
    }
    images = torch.from_numpy(dataset.images).to(dtype)
    use_cls = train_config.token_mode == "cls_plus_spatial"

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "metrics.jsonl").unlink(missing_ok=True)
    log = MetricLog(run_dir / "metrics.jsonl" if run_dir else None)

    optimizer = make_optimizer({"model": model}, train_config.base_lr, train_config.weight_decay,
                               train_config.betas)
    n = len(dataset)
    bs = train_config.batch_size
    steps_per_epoch = math.ceil(n / bs)
    total_steps = train_config.epochs * steps_per_epoch
    if train_config.max_steps is not None:
        total_steps = min(total_steps, train_config.max_steps)

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            backbone_config=backbone_config,
            backbone_state={k: v.detach().clone() for k, v in model.backbone.state_dict().items()},
            teacher_specs=specs,
            translator_kind=translator_kind,
            translator_states={k: {n_: v.detach().clone() for n_, v in t.state_dict().items()}
                               for k, t in model.translators.items()},
            cls_translator_states={k: {n_: v.detach().clone() for n_, v in t.state_dict().items()}
                                   for k, t in model.cls_translators.items()},
            norm_stats=stats,
            train_config=train_config.to_dict(),
            step=step,
            metric_tail=log.tail(),
            resize_fallback=resize_fallback,
        )

    model.train()
    step = 0
    epoch = 0
    while step < total_steps:
        order = epoch_order(n, train_config.seed, epoch)
        for start in range(0, n, bs):
            if step >= total_steps:
                break
            idx = order[start:start + bs]
            lr = lr_at(step, steps_per_epoch, train_config)
            t_idx = torch.from_numpy(idx)
            preds, cls_preds = model(images[t_idx])
            batch_targets = {name: targets[name][t_idx] for name in teachers}
            cls_pairs = None
            if use_cls:
                cls_pairs = {name: (cls_preds[name], batch_targets[name].mean(dim=1)) for name in teachers}
            result = distill_loss(preds, batch_targets, train_config.loss, cls_pairs)
            loss = result.total
            if not torch.isfinite(loss):
                bad = sorted(int(i) for i in idx)
                if run_dir is not None:
                    (run_dir / "divergence.json").write_text(
                        json.dumps({"step": step, "lr": lr, "indices": bad,
                                    "breakdown": result.breakdown()}, indent=2)
                    )
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}; batch dataset positions {bad}", step, bad
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer_step(optimizer, lr)
            record = {"step": step, "epoch": epoch, "lr": lr, "loss": float(loss.detach()),
                      "teachers": result.breakdown(), "degenerate": result.degenerate}
            log.append(record)
            if log_every and step % log_every == 0:
                logger.info("step %d lr %.3g loss %.5f", step, lr, record["loss"])
            step += 1
        epoch += 1
        if run_dir is not None and step < total_steps:
            save_checkpoint(snapshot(step), run_dir / f"epoch_{epoch:04d}.ckpt")

    model.eval()
    ckpt = snapshot(step)
    if run_dir is not None:
        save_checkpoint(ckpt, run_dir / "final.ckpt")
    return TrainResult(ckpt, log, model.backbone, dict(model.translators), dict(model.cls_translators))


# ---------------------------------------------------------------- ablations


@dataclass
class AblationCell:
    name: str
    delta: dict = field(default_factory=dict)


@dataclass
class AblationRow:
    name: str
    status: str
    initial_loss: Optional[float] = None
    final_loss: Optional[float] = None
    final_loss_smoothed: Optional[float] = None
    teachers: dict = field(default_factory=dict)
    probe_metric: Optional[float] = None
    error: Optional[str] = None


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}

    def row(self, name: str) -> AblationRow:
        return next(r for r in self.rows if r.name == name)

    def to_table(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.5f}"

        lines = ["| cell | status | initial loss | final loss | smoothed final | teachers | probe |",
                 "|---|---|---|---|---|---|---|"]
        for r in self.rows:
            per = ", ".join(f"{k}={v['total']:.4f}" for k, v in sorted(r.teachers.items())) or "-"
            lines.append(f"| {r.name} | {r.status} | {fmt(r.initial_loss)} | {fmt(r.final_loss)} | "
                         f"{fmt(r.final_loss_smoothed)} | {per} | {fmt(r.probe_metric)} |")
        return "\n".join(lines) + "\n"


def apply_delta(base: dict, delta: dict) -> dict:
    """Deep-merge ``delta`` into a copy of ``base``; dotted keys address nested fields."""
    out = copy.deepcopy(base)
    for key, value in delta.items():
        parts = key.split(".")
        target = out
        for p in parts[:-1]:
            target = target.setdefault(p, {})
        leaf = parts[-1]
        if isinstance(value, dict) and isinstance(target.get(leaf), dict):
            target[leaf] = apply_delta(target[leaf], value)
        else:
            target[leaf] = copy.deepcopy(value)
    return out


def run_ablation(
    grid: Iterable[AblationCell],
    base: dict,
    manifest: FeatureManifest,
    dataset: ImageDataset,
    run_dir=None,
    probe: Optional[Callable[[StudentViT], float]] = None,
    smooth_window: int = 10,
) -> AblationReport:
    """Train one model per grid cell; failures are recorded and the grid continues.

    ``base`` holds ``backbone`` and ``train`` config dicts and a
    ``translator_kind``; each cell's delta is merged into it.
    """
    rows = []
    for cell in grid:
        cfg = apply_delta(base, cell.delta)
        try:
            bcfg = BackboneConfig.from_dict(cfg.get("backbone", {}))
            tcfg = TrainConfig.from_dict(cfg.get("train", {}))
            cell_dir = Path(run_dir) / cell.name if run_dir is not None else None
            result = train(tcfg, bcfg, cfg.get("translator_kind", "cnn"), manifest, dataset, cell_dir,
                           resize_fallback=cfg.get("resize_fallback", False))
            losses = result.log.losses()
            row = AblationRow(
                name=cell.name,
                status="ok",
                initial_loss=losses[0] if losses else None,
                final_loss=losses[-1] if losses else None,
                final_loss_smoothed=float(np.mean(losses[-smooth_window:])) if losses else None,
                teachers=result.log.records[-1]["teachers"] if losses else {},
            )
            if probe is not None:
                row.probe_metric = float(probe(result.backbone))
        except Exception as exc:  # a failed cell must not stop the grid
            logger.exception("ablation cell %s failed", cell.name)
            row = AblationRow(name=cell.name, status="failed",
                              error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    report = AblationReport(rows)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        (Path(run_dir) / "ablation_report.json").write_text(json.dumps(report.to_dict(), indent=2))
        (Path(run_dir) / "ablation_report.md").write_text(report.to_table())
    return report
