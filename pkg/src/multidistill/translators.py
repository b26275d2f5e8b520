"""Per-teacher feature translators mapping student tokens onto teacher geometry."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

FAMILIES = ("dense-grid-16", "dense-grid-64", "custom")
KINDS = ("cnn", "linear")


@dataclass(frozen=True)
class TeacherSpec:
    name: str
    grid_side: int
    channels: int
    family: str = "custom"

    def __post_init__(self):
        if not self.name:
            raise ConfigError("teacher name must be non-empty")
        if self.grid_side < 1 or self.channels < 1:
            raise ConfigError(
                f"teacher {self.name!r}: grid_side and channels must be >= 1 "
                f"(got {self.grid_side}, {self.channels})"
            )
        if self.family not in FAMILIES:
            raise ConfigError(f"teacher {self.name!r}: unknown family {self.family!r}")

    @property
    def num_positions(self) -> int:
        return self.grid_side**2

    def to_dict(self) -> dict:
        return asdict(self)


def check_unique_names(specs) -> None:
    names = [s.name for s in specs]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"teacher names must be unique within a run; duplicated: {dupes}")


@dataclass(frozen=True)
class UpsampleLayer:
    """One spatial layer of a CNN translator plan."""

    op: str  # "convT" or "conv"
    kernel: int
    stride: int = 1
    padding: int = 0
    output_padding: int = 0

    def out_side(self, side: int) -> int:
        if self.op == "convT":
            return (side - 1) * self.stride - 2 * self.padding + self.kernel + self.output_padding
        return (side + 2 * self.padding - self.kernel) // self.stride + 1


@dataclass(frozen=True)
class TranslatorConfig:
    kind: str
    layers: tuple[UpsampleLayer, ...] = ()
    resize_to: Optional[int] = None  # bilinear resize appended after the conv stack

    def out_side(self, side: int) -> int:
        for layer in self.layers:
            side = layer.out_side(side)
        return self.resize_to if self.resize_to is not None else side


def plan_translator(
    student_grid: int, spec: TeacherSpec, kind: str = "cnn", resize_fallback: bool = False
) -> TranslatorConfig:
    """Pick the layer recipe for a (student grid, teacher grid) pair.

    CNN plans:

    * teacher grid == student grid: three size-preserving layers (the first
      a stride-1 transposed conv with padding 1).
    * teacher grid == student grid + 2 (e.g. 14 -> 16): transposed conv k3 s1
      without padding, then two padded 3x3 convs.
    * ``dense-grid-64`` family: two stride-2 transposed convs, one padded conv,
      then a bilinear resize to the exact teacher grid (14 -> 27 -> 56 -> 64).

    Any other pair needs ``resize_fallback=True``, which uses the
    size-preserving stack followed by a bilinear resize.
    """
    if kind not in KINDS:
        raise ConfigError(f"translator kind must be one of {KINDS}, got {kind!r}")
    if student_grid < 1:
        raise ConfigError(f"student grid must be >= 1, got {student_grid}")
    if kind == "linear":
        return TranslatorConfig(kind="linear")
    t = spec.grid_side
    same = (
        UpsampleLayer("convT", 3, 1, padding=1),
        UpsampleLayer("conv", 3, 1, padding=1),
        UpsampleLayer("conv", 3, 1, padding=1),
    )
    if spec.family == "dense-grid-64":
        layers = (
            UpsampleLayer("convT", 3, 2, padding=1),
            UpsampleLayer("convT", 3, 2, output_padding=1),
            UpsampleLayer("conv", 3, 1, padding=1),
        )
        cfg = TranslatorConfig("cnn", layers)
        reached = cfg.out_side(student_grid)
        return TranslatorConfig("cnn", layers, resize_to=t if reached != t else None)
    if t == student_grid:
        return TranslatorConfig("cnn", same)
    if t == student_grid + 2:
        return TranslatorConfig(
            "cnn",
            (
                UpsampleLayer("convT", 3, 1),
                UpsampleLayer("conv", 3, 1, padding=1),
                UpsampleLayer("conv", 3, 1, padding=1),
            ),
        )
    if resize_fallback:
        return TranslatorConfig("cnn", same, resize_to=t)
    raise ConfigError(
        f"no CNN translator plan maps a {student_grid}x{student_grid} student grid to the "
        f"{t}x{t} grid of teacher {spec.name!r} (family {spec.family}); "
        "pass resize_fallback=True to append a bilinear resize"
    )


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a ``B x C x H x W`` map."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class CNNTranslator(nn.Module):
    def __init__(self, d_s: int, student_grid: int, spec: TeacherSpec, config: TranslatorConfig):
        super().__init__()
        self.d_s = d_s
        self.student_grid = student_grid
        self.spec = spec
        self.config = config
        layers: list[nn.Module] = []
        for i, layer in enumerate(config.layers):
            if layer.op == "convT":
                layers.append(
                    nn.ConvTranspose2d(
                        d_s, d_s, layer.kernel, stride=layer.stride,
                        padding=layer.padding, output_padding=layer.output_padding,
                    )
                )
            else:
                layers.append(nn.Conv2d(d_s, d_s, layer.kernel, stride=layer.stride, padding=layer.padding))
            # first layer: LayerNorm; later layers: ReLU + LayerNorm
            if i > 0:
                layers.append(nn.ReLU())
            layers.append(ChannelLayerNorm(d_s))
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(d_s, spec.channels)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        b = z.shape[0]
        g = self.student_grid
        x = z.transpose(1, 2).reshape(b, self.d_s, g, g)
        x = self.body(x)
        if self.config.resize_to is not None:
            t = self.config.resize_to
            x = F.interpolate(x, size=(t, t), mode="bilinear", align_corners=False)
        x = x.flatten(2).transpose(1, 2)
        return self.head(x)


class LinearTranslator(nn.Module):
    """A single fully connected map from all student tokens to all teacher features."""

    def __init__(self, d_s: int, student_grid: int, spec: TeacherSpec):
        super().__init__()
        self.d_s = d_s
        self.student_grid = student_grid
        self.spec = spec
        self.config = TranslatorConfig("linear")
        self.fc = nn.Linear(d_s * student_grid**2, spec.channels * spec.num_positions)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        out = self.fc(z.reshape(z.shape[0], -1))
        return out.view(z.shape[0], self.spec.num_positions, self.spec.channels)


def build_translator(
    d_s: int,
    student_grid: int,
    spec: TeacherSpec,
    kind: str = "cnn",
    *,
    resize_fallback: bool = False,
    backbone_params: Optional[int] = None,
    seed: Optional[int] = None,
) -> nn.Module:
    """Construct the translator for one teacher.

    When ``backbone_params`` is given, CNN translators must be strictly smaller
    than the backbone. Linear translators only log a warning, since a dense map
    between flattened grids outgrows any desk-scale backbone.
    """
    config = plan_translator(student_grid, spec, kind, resize_fallback)
    if kind == "cnn" and config.out_side(student_grid) != spec.grid_side:
        raise ConfigError(
            f"translator plan reaches {config.out_side(student_grid)} instead of {spec.grid_side}"
        )

    def make():
        if kind == "linear":
            return LinearTranslator(d_s, student_grid, spec)
        return CNNTranslator(d_s, student_grid, spec, config)

    if seed is None:
        module = make()
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            module = make()
    if backbone_params is not None:
        n = sum(p.numel() for p in module.parameters())
        if n >= backbone_params:
            msg = (
                f"translator for {spec.name!r} has {n} parameters, not fewer than the "
                f"backbone's {backbone_params}"
            )
            if kind == "cnn":
                raise ConfigError(msg)
            logger.warning(msg)
    return module


def translate(translator: nn.Module, z: torch.Tensor) -> torch.Tensor:
    """Predicted teacher features ``B x P_t x d_t`` in normalized-teacher space."""
    g = translator.student_grid
    if z.dim() != 3 or z.shape[1] != g * g or z.shape[2] != translator.d_s:
        raise ShapeError(
            f"translator for {translator.spec.name!r} expects B x {g * g} x {translator.d_s} "
            f"tokens, got {tuple(z.shape)}"
        )
    return translator(z)


class ClsTranslator(nn.Module):
    """Vector translator for the CLS-distillation ablation: Linear(d_s, d_t)."""

    def __init__(self, d_s: int, spec: TeacherSpec):
        super().__init__()
        self.spec = spec
        self.fc = nn.Linear(d_s, spec.channels)

    def forward(self, cls: torch.Tensor) -> torch.Tensor:
        return self.fc(cls)
