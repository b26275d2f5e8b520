"""Command-line interface: ``multidistill {cache,train,ablate,analyze,probe}``.

Every command reads one YAML run config (see ``configs/desk.yaml``) and writes
only below the config's ``output`` directory. Scalar fields can be overridden
with ``--set section.key=value``.

Exit codes: 0 on success, 2 on a handled failure. A handled failure prints
exactly one line to stderr, ``error: <ERROR_CLASS>: <message>``, where the
class is one of CONFIG_INVALID, SHAPE_MISMATCH, TEACHER_MISMATCH, EMPTY_INPUT,
CACHE_MISSING, CHECKSUM_MISMATCH, FINGERPRINT_MISMATCH, CHECKPOINT_VERSION,
TRAINING_DIVERGED or ADAPTER_UNAVAILABLE.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from . import analysis
from .backbone import BackboneConfig, init_backbone
from .cache import (
    TeacherAdapter,
    cache_features,
    load_manifest,
    make_synthetic_teacher,
    real_teacher_stub,
)
from .checkpoint import load_checkpoint
from .data import make_corpus
from .errors import ConfigError, DistillError
from .probe import gen_synthetic_task, train_probe
from .trainer import AblationCell, TrainConfig, apply_delta, run_ablation, train
from .translators import TeacherSpec, check_unique_names

logger = logging.getLogger("multidistill")

CONFIG_VERSION = 1


@dataclass
class TeacherDecl:
    name: str
    grid_side: int
    channels: int
    family: str = "custom"
    kind: Optional[str] = None  # synthetic kind
    seed: int = 0
    scale: float = 1.0
    real: Optional[str] = None  # real-teacher adapter reference

    @property
    def spec(self) -> TeacherSpec:
        return TeacherSpec(self.name, self.grid_side, self.channels, self.family)

    def adapter(self) -> TeacherAdapter:
        if self.real:
            return real_teacher_stub(self.real, self.spec)
        if not self.kind:
            raise ConfigError(f"teacher {self.name!r} needs a synthetic 'kind' or a 'real' reference")
        adapter = make_synthetic_teacher(self.kind, self.spec, self.seed)
        if self.scale != 1.0:
            inner, scale = adapter.extract, self.scale
            adapter = TeacherAdapter(adapter.spec, lambda im: scale * inner(im),
                                     f"{adapter.provenance}, scaled by {scale}")
        return adapter


@dataclass
class RunConfig:
    output: str
    backbone: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    translator_kind: str = "cnn"
    resize_fallback: bool = False
    teachers: list = field(default_factory=list)
    data: dict = field(default_factory=lambda: {"n": 512, "seed": 0})
    cache: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    config_version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"config_version {self.config_version} is not supported (expected {CONFIG_VERSION})")
        self.backbone_config()
        self.train_config()
        decls = self.teacher_decls()
        if not decls:
            raise ConfigError("config declares no teachers")
        check_unique_names([d.spec for d in decls])
        known = {d.name for d in decls}
        unknown = set(self.train.get("teachers") or []) - known
        if unknown:
            raise ConfigError(f"train.teachers references undeclared teachers {sorted(unknown)}")

    @property
    def run_dir(self) -> Path:
        return Path(self.output)

    @property
    def cache_dir(self) -> Path:
        return Path(self.cache.get("dir") or self.run_dir / "cache")

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig.from_dict(self.backbone)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)

    def teacher_decls(self) -> list[TeacherDecl]:
        try:
            return [TeacherDecl(**t) for t in self.teachers]
        except TypeError as exc:
            raise ConfigError(f"bad teacher declaration: {exc}") from exc

    def dataset(self):
        image_size = self.backbone_config().image_size
        return make_corpus(int(self.data.get("n", 512)), image_size, int(self.data.get("seed", 0)))


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    parsed = yaml.safe_load(value)
    if isinstance(parsed, str):
        try:
            parsed = float(parsed)  # YAML 1.1 reads "1e-4" as a string
        except ValueError:
            pass
    return key.strip(), parsed


def load_run_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping")
    raw = apply_delta(raw, dict(parse_override(o) for o in overrides))
    try:
        return RunConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad run config: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_cache(cfg: RunConfig) -> Path:
    c = cfg.cache
    manifest = cache_features(
        cfg.dataset(),
        [d.adapter() for d in cfg.teacher_decls()],
        cfg.cache_dir,
        shard_size=int(c.get("shard_size", 128)),
        dtype=c.get("dtype", "f32"),
        workers=int(c.get("workers", 1)),
    )
    logger.info("cached %d teachers for %d images in %s", len(manifest.teachers),
                manifest.dataset_size, cfg.cache_dir)
    return cfg.cache_dir / "manifest.json"


def cmd_train(cfg: RunConfig) -> Path:
    manifest = load_manifest(cfg.cache_dir)
    out = cfg.run_dir / "train"
    result = train(cfg.train_config(), cfg.backbone_config(), cfg.translator_kind, manifest,
                   cfg.dataset(), out, resize_fallback=cfg.resize_fallback, log_every=50)
    losses = result.log.losses()
    if losses:
        logger.info("trained %d steps: loss %.5f -> %.5f", len(losses), losses[0], losses[-1])
    return out / "final.ckpt"


def load_grid(path) -> list[AblationCell]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"grid file {path} does not exist")
    raw = yaml.safe_load(path.read_text()) or {}
    cells = raw.get("cells") if isinstance(raw, dict) else raw
    if not isinstance(cells, list) or not cells:
        raise ConfigError(f"{path} must hold a non-empty 'cells' list")
    out = []
    for c in cells:
        if not isinstance(c, dict) or "name" not in c:
            raise ConfigError(f"every grid cell needs a name: {c!r}")
        out.append(AblationCell(str(c["name"]), c.get("delta") or {}))
    names = [c.name for c in out]
    if len(set(names)) != len(names):
        raise ConfigError("grid cell names must be unique")
    return out


def cmd_ablate(cfg: RunConfig, grid_path) -> Path:
    grid = load_grid(grid_path)
    manifest = load_manifest(cfg.cache_dir)
    base = {"backbone": cfg.backbone, "train": cfg.train, "translator_kind": cfg.translator_kind,
            "resize_fallback": cfg.resize_fallback}
    out = cfg.run_dir / "ablation"
    report = run_ablation(grid, base, manifest, cfg.dataset(), out)
    print(report.to_table(), end="")
    return out / "ablation_report.json"


def _backbone_from(checkpoint) -> torch.nn.Module:
    return load_checkpoint(checkpoint).build_backbone().eval()


def cmd_analyze(cfg: RunConfig, checkpoint, plots: bool = False) -> Path:
    a = cfg.analysis
    encoder = _backbone_from(checkpoint)
    dataset = cfg.dataset()
    fraction = float(a.get("sample_fraction", 1.0))
    seed = int(a.get("seed", 0))
    bins = int(a.get("bin_count", analysis.DEFAULT_BIN_COUNT))
    out = cfg.run_dir / "analysis"
    norms = analysis.token_norms(encoder, dataset, fraction, seed, source=str(checkpoint))
    entropy = analysis.histogram_entropy(norms, bins)
    pos = analysis.sample_positions(len(dataset), fraction, seed)
    tokens = analysis.encode_dataset(encoder, dataset.images[pos])
    pca = analysis.pca_evr(tokens)
    cos = analysis.cosine_to_mean(tokens)
    n_maps = min(int(a.get("norm_map_images", 4)), len(dataset))
    maps = [analysis.norm_map(encoder, dataset.images[i]) for i in range(n_maps)]
    _write_json(out / "entropy.json", {**entropy.to_dict(), "source": norms.source,
                                       "sample_fraction": fraction, "num_norms": int(norms.norms.size)})
    _write_json(out / "pca.json", pca.to_dict())
    _write_json(out / "cosine.json", cos.to_dict())
    _write_json(out / "norm_maps.json", {
        "maps": [m.tolist() for m in maps],
        "clipped": [analysis.clip_norm_map(m).tolist() for m in maps],
    })
    if plots:
        _plot_analysis(out, norms, entropy, pca, maps)
    logger.info("entropy %.4f nats (%d bins), PCA AUC %.4f", entropy.entropy, bins, pca.auc)
    return out


def _plot_analysis(out: Path, norms, entropy, pca, maps) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].hist(norms.norms, bins=entropy.bin_count)
    axes[0].set_title(f"token norms, H={entropy.entropy:.3f}")
    axes[1].plot(np.arange(1, pca.cumulative.size + 1), pca.cumulative)
    axes[1].set_title(f"cumulative EVR, AUC={pca.auc:.3f}")
    fig.tight_layout()
    fig.savefig(out / "distributions.png", dpi=100)
    plt.close(fig)
    fig, axes = plt.subplots(1, len(maps), figsize=(2.5 * len(maps), 2.5), squeeze=False)
    for ax, m in zip(axes[0], maps):
        ax.imshow(analysis.clip_norm_map(m), cmap="viridis")
        ax.axis("off")
    fig.savefig(out / "norm_maps.png", dpi=100)
    plt.close(fig)


def cmd_probe(cfg: RunConfig, checkpoint) -> Path:
    p = cfg.probe
    ckpt = load_checkpoint(checkpoint)
    distilled = ckpt.build_backbone().eval()
    bcfg = BackboneConfig.from_dict({**ckpt.backbone_config.to_dict(), "init_mode": "scratch",
                                     "warm_start_checkpoint": None})
    task = gen_synthetic_task(int(p.get("n", 512)), bcfg.image_size, int(p.get("task_seed", 0)))
    steps = int(p.get("steps", 300))
    kinds = p.get("kinds", ["spatial", "vector"])
    rows = []
    for seed in p.get("seeds", [0, 1, 2]):
        baseline = init_backbone(bcfg, int(seed) + 10_000).eval()
        for kind in kinds:
            for label, enc in (("distilled", distilled), ("random_init", baseline)):
                rep = train_probe(enc, kind, task, steps, seed=int(seed))
                rows.append({"encoder": label, **rep.to_dict()})
                logger.info("probe %s/%s seed %s: test MSE %.5f", label, kind, seed, rep.final_test_error)
    out = cfg.run_dir / "probe" / "probe_report.json"
    _write_json(out, {"checkpoint": str(checkpoint), "rows": rows})
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multidistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="YAML run config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. train.base_lr=1e-3")
        return sp

    add("cache", "pre-compute teacher features and normalization stats")
    add("train", "distill the cached teachers into the student")
    sp = add("ablate", "run an ablation grid")
    sp.add_argument("--grid", required=True, help="YAML file with a 'cells' list of {name, delta}")
    sp = add("analyze", "token-norm entropy, PCA EVR, cosine-to-mean and norm maps")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--plots", action="store_true", help="also write PNG figures")
    sp = add("probe", "frozen-encoder probes against a random-init baseline")
    sp.add_argument("--checkpoint", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.overrides)
        if args.command == "cache":
            out = cmd_cache(cfg)
        elif args.command == "train":
            out = cmd_train(cfg)
        elif args.command == "ablate":
            out = cmd_ablate(cfg, args.grid)
        elif args.command == "analyze":
            if not Path(args.checkpoint).exists():
                raise ConfigError(f"checkpoint {args.checkpoint} does not exist")
            out = cmd_analyze(cfg, args.checkpoint, args.plots)
        else:
            if not Path(args.checkpoint).exists():
                raise ConfigError(f"checkpoint {args.checkpoint} does not exist")
            out = cmd_probe(cfg, args.checkpoint)
    except DistillError as exc:
        print(f"error: {exc.error_class}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    except NotImplementedError as exc:  # real-teacher stubs without weights
        print(f"error: ADAPTER_UNAVAILABLE: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
