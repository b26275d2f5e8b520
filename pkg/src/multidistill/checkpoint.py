"""Checkpoint file format.

    offset 0    4 bytes    magic b"MDCK"
    offset 4    uint32     format version
    offset 8    32 bytes   sha256 of everything after offset 48
    offset 40   uint64     length of the JSON header in bytes
    offset 48   header     UTF-8 JSON: configs, norm stats, step, metric tail,
                           and a tensor index (name, dtype, shape, offset, nbytes)
    then        payload    raw little-endian tensor bytes in index order

Tensors are written in sorted-name order and the header is dumped with sorted
keys, so identical training runs produce identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backbone import BackboneConfig, StudentViT
from .errors import CheckpointVersionError, ChecksumError
from .losses import NormStats
from .translators import ClsTranslator, TeacherSpec, build_translator

MAGIC = b"MDCK"
VERSION = 1
_PREFIX = struct.Struct("<4sI32sQ")


@dataclass
class Checkpoint:
    backbone_config: BackboneConfig
    backbone_state: dict[str, torch.Tensor]
    teacher_specs: dict[str, TeacherSpec] = field(default_factory=dict)
    translator_kind: str = "cnn"
    translator_states: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    cls_translator_states: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    norm_stats: dict[str, NormStats] = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    step: int = 0
    metric_tail: list = field(default_factory=list)
    resize_fallback: bool = False

    def build_backbone(self) -> StudentViT:
        model = StudentViT(BackboneConfig.from_dict({**self.backbone_config.to_dict(),
                                                     "init_mode": "scratch",
                                                     "warm_start_checkpoint": None}))
        model.load_state_dict(self.backbone_state)
        model.to(next(iter(self.backbone_state.values())).dtype)
        return model

    def build_translators(self) -> dict[str, torch.nn.Module]:
        out = {}
        c = self.backbone_config
        for name, state in self.translator_states.items():
            m = build_translator(c.embed_dim, c.grid_side, self.teacher_specs[name],
                                 self.translator_kind, resize_fallback=self.resize_fallback)
            m.load_state_dict(state)
            out[name] = m
        return out

    def build_cls_translators(self) -> dict[str, torch.nn.Module]:
        out = {}
        for name, state in self.cls_translator_states.items():
            m = ClsTranslator(self.backbone_config.embed_dim, self.teacher_specs[name])
            m.load_state_dict(state)
            out[name] = m
        return out


def _flatten_tensors(ckpt: Checkpoint) -> dict[str, torch.Tensor]:
    flat = {f"backbone/{k}": v for k, v in ckpt.backbone_state.items()}
    for name, state in ckpt.translator_states.items():
        flat.update({f"translators/{name}/{k}": v for k, v in state.items()})
    for name, state in ckpt.cls_translator_states.items():
        flat.update({f"cls_translators/{name}/{k}": v for k, v in state.items()})
    return flat


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    flat = _flatten_tensors(ckpt)
    index = []
    chunks = []
    offset = 0
    for name in sorted(flat):
        arr = flat[name].detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "version": VERSION,
        "backbone_config": ckpt.backbone_config.to_dict(),
        "teacher_specs": {k: v.to_dict() for k, v in sorted(ckpt.teacher_specs.items())},
        "translator_kind": ckpt.translator_kind,
        "resize_fallback": ckpt.resize_fallback,
        "norm_stats": {k: v.to_dict() for k, v in sorted(ckpt.norm_stats.items())},
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "metric_tail": ckpt.metric_tail,
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = header_bytes + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, digest, len(header_bytes)))
        f.write(body)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise ChecksumError(f"checkpoint {path} is truncated")
    magic, version, digest, header_len = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise ChecksumError(f"{path} is not a checkpoint file")
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format version {version}; this build reads version {VERSION}"
        )
    body = buf[_PREFIX.size:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"checksum mismatch in checkpoint {path}")
    header = json.loads(body[:header_len].decode("utf-8"))
    payload = body[header_len:]
    backbone: dict = {}
    translators: dict = {}
    cls_translators: dict = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"])),
                            offset=entry["offset"]).reshape(entry["shape"])
        t = torch.from_numpy(arr.copy())
        group, rest = entry["name"].split("/", 1)
        if group == "backbone":
            backbone[rest] = t
        else:
            teacher, key = rest.split("/", 1)
            target = translators if group == "translators" else cls_translators
            target.setdefault(teacher, {})[key] = t
    return Checkpoint(
        backbone_config=BackboneConfig.from_dict(header["backbone_config"]),
        backbone_state=backbone,
        teacher_specs={k: TeacherSpec(**v) for k, v in header["teacher_specs"].items()},
        translator_kind=header["translator_kind"],
        translator_states=translators,
        cls_translator_states=cls_translators,
        norm_stats={k: NormStats.from_dict(v) for k, v in header["norm_stats"].items()},
        train_config=header["train_config"],
        step=header["step"],
        metric_tail=header["metric_tail"],
        resize_fallback=header.get("resize_fallback", False),
    )


def checkpoint_digest(path) -> Optional[str]:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
