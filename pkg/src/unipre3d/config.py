"""Run configuration: a typed tree with TOML serialization and validation.

Every training hyperparameter lives here so a run is auditable from its
config file alone. parse(serialize(cfg)) == cfg holds exactly (tested);
unknown keys and out-of-range values raise ConfigError naming the offending
path (for example "optimizer.lr").
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .backbone import PLACEMENTS
from .errors import ConfigError

FUSION_STRATEGIES = ("none", "feature", "point")


@dataclass
class BackboneSection:
    encoder_widths: tuple[int, ...] = (64, 128, 256)
    decoder_widths: tuple[int, ...] = (256, 128, 64)

    def __post_init__(self) -> None:
        self.encoder_widths = tuple(self.encoder_widths)
        self.decoder_widths = tuple(self.decoder_widths)


@dataclass
class FusionSection:
    strategy: str = "feature"        # none | feature | point
    placement: str = "decoder_last"  # see backbone.PLACEMENTS
    voxel_size: float = 0.04         # point fusion voxel edge, meters
    c_adapt: int = 32                # adapted 2D feature width


@dataclass
class ExtractorSection:
    kind: str = "raw_rgb"            # raw_rgb | random_conv
    channels: int = 5
    seed: int = 0


@dataclass
class OptimizerSection:
    kind: str = "adam"               # adam | adamw
    lr: float = 1e-4
    lr_decay: float = 0.9
    lr_step_epochs: int = 10
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 50


@dataclass
class LossSection:
    w_fg: float = 4.0
    w_bg: float = 1.0
    background: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.background = tuple(self.background)


@dataclass
class ViewsSection:
    v_ref: int = 1
    v_rend: int = 4
    bins: int = 8
    interval: int = 5
    restriction: bool = True


@dataclass
class DataSection:
    root: str = "data"
    n_samples: int = 8
    n_points: int = 1024
    n_cameras: int = 36
    image_size: int = 64
    n_gaussians: int = 600


@dataclass
class RunConfig:
    mode: str = "object"             # object | scene
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 100      # steps
    backbone: BackboneSection = field(default_factory=BackboneSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    loss: LossSection = field(default_factory=LossSection)
    views: ViewsSection = field(default_factory=ViewsSection)
    data: DataSection = field(default_factory=DataSection)


def default_config(mode: str = "object") -> RunConfig:
    """Published training defaults for each scale regime."""
    if mode == "object":
        return RunConfig()
    if mode != "scene":
        raise ConfigError(f"mode must be object|scene, got {mode!r}")
    return RunConfig(
        mode="scene",
        out_dir="runs/scene",
        fusion=FusionSection(strategy="point", placement="encoder_first"),
        optimizer=OptimizerSection(kind="adamw", lr=1e-4, weight_decay=0.01,
                                   batch_size=8, epochs=100),
        views=ViewsSection(v_ref=8, v_rend=8, bins=8, interval=5, restriction=True),
        data=DataSection(root="data_scene", n_samples=8, n_points=20000,
                         n_cameras=64, image_size=64, n_gaussians=1600),
    )


# ---------------------------------------------------------------------------
# dict <-> dataclass


_SECTIONS = {
    "backbone": BackboneSection, "fusion": FusionSection, "extractor": ExtractorSection,
    "optimizer": OptimizerSection, "loss": LossSection, "views": ViewsSection,
    "data": DataSection,
}


def _listify(value):
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, dict):
        return {k: _listify(v) for k, v in value.items()}
    return value


def to_dict(cfg: RunConfig) -> dict:
    """Plain dict with JSON/TOML-friendly types (tuples become lists)."""
    return _listify(dataclasses.asdict(cfg))


def from_dict(d: dict) -> RunConfig:
    cfg = RunConfig()
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    for key, value in d.items():
        if key not in top_fields:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a table, got {type(value).__name__}")
            names = {f.name for f in dataclasses.fields(_SECTIONS[key])}
            for k in value:
                if k not in names:
                    raise ConfigError(f"unknown config key {key}.{k!r}")
            # constructor (not setattr) so __post_init__ normalization runs
            setattr(cfg, key, _SECTIONS[key](**value))
        else:
            setattr(cfg, key, value)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    def need(cond: bool, path: str, msg: str) -> None:
        if not cond:
            raise ConfigError(f"{path}: {msg}")

    need(cfg.mode in ("object", "scene"), "mode", f"must be object|scene, got {cfg.mode!r}")
    need(isinstance(cfg.seed, int), "seed", "must be an integer")
    need(cfg.checkpoint_every >= 1, "checkpoint_every", "must be >= 1")
    b = cfg.backbone
    need(len(b.encoder_widths) >= 2 and len(b.decoder_widths) >= 2,
         "backbone", "need >= 2 encoder and decoder stages")
    need(all(isinstance(w, int) and w >= 1 for w in b.encoder_widths + b.decoder_widths),
         "backbone", "stage widths must be positive integers")
    f = cfg.fusion
    need(f.strategy in FUSION_STRATEGIES, "fusion.strategy",
         f"must be one of {FUSION_STRATEGIES}, got {f.strategy!r}")
    need(f.placement in PLACEMENTS, "fusion.placement",
         f"must be one of {PLACEMENTS}, got {f.placement!r}")
    need(f.voxel_size > 0, "fusion.voxel_size", "must be > 0")
    need(f.c_adapt >= 1, "fusion.c_adapt", "must be >= 1")
    if f.strategy == "feature":
        need(f.placement != "encoder_first", "fusion.placement",
             "feature fusion mixes at decoder layers; encoder_first is the "
             "point-fusion placement")
        need(f.placement != "none", "fusion.placement",
             "feature fusion with placement none is contradictory; set "
             "fusion.strategy = none instead")
    if f.strategy == "point":
        need(f.placement == "encoder_first", "fusion.placement",
             "point fusion merges after encoder stage 1; placement must be encoder_first")
        need(cfg.mode == "scene", "fusion.strategy",
             "point fusion needs depth maps, which only scene datasets carry")
    if f.strategy == "none":
        need(f.placement == "none", "fusion.placement",
             "strategy none requires placement none")
    e = cfg.extractor
    need(e.kind in ("raw_rgb", "random_conv"), "extractor.kind",
         f"must be raw_rgb|random_conv, got {e.kind!r}")
    need(e.channels >= 1, "extractor.channels", "must be >= 1")
    o = cfg.optimizer
    need(o.kind in ("adam", "adamw"), "optimizer.kind",
         f"must be adam|adamw, got {o.kind!r}")
    need(o.lr > 0, "optimizer.lr", "must be > 0")
    need(0 < o.lr_decay <= 1, "optimizer.lr_decay", "must be in (0, 1]")
    need(o.lr_step_epochs >= 1, "optimizer.lr_step_epochs", "must be >= 1")
    need(o.weight_decay >= 0, "optimizer.weight_decay", "must be >= 0")
    need(o.batch_size >= 1, "optimizer.batch_size", "must be >= 1")
    need(o.epochs >= 1, "optimizer.epochs", "must be >= 1")
    lo = cfg.loss
    need(lo.w_fg >= 0 and lo.w_bg >= 0, "loss", "weights must be >= 0")
    need(len(lo.background) == 3 and all(0 <= c <= 1 for c in lo.background),
         "loss.background", "must be 3 values in [0, 1]")
    v = cfg.views
    need(v.v_ref >= 1 and v.v_rend >= 1, "views", "v_ref and v_rend must be >= 1")
    need(v.bins >= 1, "views.bins", "must be >= 1")
    need(v.interval >= 1, "views.interval", "must be >= 1")
    d = cfg.data
    need(d.n_samples >= 1, "data.n_samples", "must be >= 1")
    need(d.n_points >= 1, "data.n_points", "must be >= 1")
    need(d.n_cameras >= 2, "data.n_cameras", "must be >= 2")
    need(d.image_size >= 8, "data.image_size", "must be >= 8")
    need(d.n_gaussians >= 1, "data.n_gaussians", "must be >= 1")
    if cfg.mode == "scene":
        need(d.n_cameras % v.bins == 0, "data.n_cameras",
             f"scene stream length must divide into {v.bins} bins")


# ---------------------------------------------------------------------------
# TOML emit/parse. The emitter covers exactly the shapes RunConfig uses
# (scalars, homogeneous lists, one level of tables); tomli handles parsing.


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {type(v).__name__} to TOML")


def serialize(cfg: RunConfig) -> str:
    d = to_dict(cfg)
    lines = [f"{k} = {_toml_value(v)}" for k, v in d.items() if not isinstance(v, dict)]
    for section, table in d.items():
        if isinstance(table, dict):
            lines.append(f"\n[{section}]")
            lines.extend(f"{k} = {_toml_value(v)}" for k, v in table.items())
    return "\n".join(lines) + "\n"


def parse(text: str) -> RunConfig:
    try:
        d = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"TOML parse error: {e}") from e
    return from_dict(d)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse(text)


def save_config(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(serialize(cfg))
