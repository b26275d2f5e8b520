"""Student encoder: a small ViT that emits spatial tokens only.

Register tokens (the first one doubling as the CLS token) are learned input
tokens that take part in attention but are stripped from every output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError

INIT_MODES = ("scratch", "warm_start")
SUPPORTED_REGISTER_COUNTS = (0, 1, 4, 8)


@dataclass
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    num_register_tokens: int = 1
    mlp_ratio: float = 4.0
    init_mode: str = "scratch"
    warm_start_checkpoint: Optional[str] = None
    pixel_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    pixel_std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        self.pixel_mean = tuple(float(v) for v in self.pixel_mean)
        self.pixel_std = tuple(float(v) for v in self.pixel_std)
        self.validate()

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "embed_dim", "depth", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size mod patch_size must be 0 ({self.image_size} mod {self.patch_size} "
                f"= {self.image_size % self.patch_size})"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim mod heads must be 0 ({self.embed_dim} mod {self.heads} "
                f"= {self.embed_dim % self.heads})"
            )
        if self.num_register_tokens < 0:
            raise ConfigError(f"num_register_tokens must be >= 0, got {self.num_register_tokens}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.init_mode == "warm_start" and not self.warm_start_checkpoint:
            raise ConfigError("init_mode 'warm_start' requires warm_start_checkpoint")
        if len(self.pixel_mean) != 3 or len(self.pixel_std) != 3:
            raise ConfigError("pixel_mean and pixel_std need one value per RGB channel")
        if min(self.pixel_std) <= 0:
            raise ConfigError("pixel_std entries must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pixel_mean"] = list(self.pixel_mean)
        d["pixel_std"] = list(self.pixel_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block with a GELU MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class StudentViT(nn.Module):
    """The student encoder. ``forward`` returns ``batch x P x embed_dim`` spatial tokens."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.embed_dim
        self.register_buffer("pixel_mean", torch.tensor(config.pixel_mean).view(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(config.pixel_std).view(1, 3, 1, 1))
        self.patch_embed = nn.Conv2d(3, d, kernel_size=config.patch_size, stride=config.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches, d))
        if config.num_register_tokens > 0:
            self.registers = nn.Parameter(torch.zeros(1, config.num_register_tokens, d))
        else:
            self.registers = None
        self.blocks = nn.ModuleList(
            [Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self.norm = nn.LayerNorm(d)

    @property
    def grid_side(self) -> int:
        return self.config.grid_side

    @property
    def num_registers(self) -> int:
        return self.config.num_register_tokens

    def _reset_parameters(self) -> None:
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if self.registers is not None:
            nn.init.trunc_normal_(self.registers, std=0.02)
        w = self.patch_embed.weight
        nn.init.trunc_normal_(w.view(w.shape[0], -1), std=0.02)
        nn.init.zeros_(self.patch_embed.bias)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward_all(self, images: torch.Tensor) -> tuple[Optional[torch.Tensor], torch.Tensor]:
        """Return ``(cls, spatial)``; ``cls`` is the first register's output or None."""
        c = self.config
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[-2:] != (c.image_size, c.image_size):
            raise ShapeError(
                f"expected images of shape B x 3 x {c.image_size} x {c.image_size}, "
                f"got {tuple(images.shape)}"
            )
        x = (images.to(self.pixel_mean.dtype) - self.pixel_mean) / self.pixel_std
        x = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        r = self.num_registers
        if r:
            x = torch.cat([self.registers.expand(x.shape[0], -1, -1), x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        cls = x[:, 0] if r else None
        return cls, x[:, r:]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward_all(images)[1]


def init_backbone(config: BackboneConfig, seed: int) -> StudentViT:
    """Build a student encoder with parameters determined entirely by ``seed``.

    For ``init_mode='warm_start'`` the backbone weights are then overwritten
    from ``config.warm_start_checkpoint``.
    """
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = StudentViT(config)
        model._reset_parameters()
    if config.init_mode == "warm_start":
        from .checkpoint import load_checkpoint

        ckpt = load_checkpoint(config.warm_start_checkpoint)
        missing = set(model.state_dict()) ^ set(ckpt.backbone_state)
        if missing:
            raise ConfigError(
                "warm-start checkpoint backbone does not match this config; "
                f"differing keys: {sorted(missing)}"
            )
        for k, v in ckpt.backbone_state.items():
            if model.state_dict()[k].shape != v.shape:
                raise ConfigError(f"warm-start checkpoint shape mismatch for {k}")
        model.load_state_dict(ckpt.backbone_state)
    return model


def encode(state: StudentViT, batch: torch.Tensor) -> torch.Tensor:
    """Spatial tokens ``B x P x d_s`` for an image batch; registers never surface."""
    return state(batch)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

