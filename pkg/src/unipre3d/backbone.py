"""PointNet-style encoder/decoder over per-point features.

Encoder stage i: per-point linear -> feature_norm -> relu, then concatenation
with the broadcast mean-pooled global context; the concat feeds the next
stage. Decoder stages are per-point linear -> feature_norm -> relu chains.

Fusion hooks:
  * encoder_first (scene point fusion): after stage 1 an injector callback may
    replace the point set itself (positions and features) with a merged set;
    later stages then run on the merged points.
  * decoder_last / decoder_mid / decoder_all (object feature fusion): at the
    selected decoder layers a fusion callback mixes per-point 2D features in,
    preserving the layer width.

The callbacks keep this module free of any dependency on the fusion module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (ParameterStore, Tape, Var, add_linear_params, apply_linear,
                       broadcast_rows, concat_channels, feature_norm, leaf,
                       mean_pool_rows, relu)
from .errors import ConfigError, InputError, dim_error

PLACEMENTS = ("none", "decoder_last", "decoder_mid", "decoder_all", "encoder_first")


@dataclass(frozen=True)
class BackboneConfig:
    encoder_widths: tuple[int, ...] = (64, 128, 256)
    decoder_widths: tuple[int, ...] = (256, 128, 64)
    placement: str = "decoder_last"

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))
        if len(self.encoder_widths) < 2 or len(self.decoder_widths) < 2:
            raise ConfigError(
                f"need >= 2 encoder and decoder stages, got {self.encoder_widths} "
                f"/ {self.decoder_widths}")
        if any(w < 1 for w in self.encoder_widths + self.decoder_widths):
            raise ConfigError("stage widths must be positive")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")

    @property
    def c_3d(self) -> int:
        return self.decoder_widths[-1]

    def fused_decoder_layers(self) -> tuple[int, ...]:
        n = len(self.decoder_widths)
        if self.placement == "decoder_last":
            return (n - 1,)
        if self.placement == "decoder_mid":
            return (n - 2, n - 1)
        if self.placement == "decoder_all":
            return tuple(range(n))
        return ()


# injector: stage-1 features (N, w0) -> (merged positions (M, 3), merged features Var)
Injector = Callable[[Var], tuple[np.ndarray, Var]]
# fuser: (decoder layer index, layer features (N, w)) -> fused features (N, w)
Fuser = Callable[[int, Var], Var]


class PointBackbone:
    """Registers and applies the encoder/decoder parameter stack.

    merged_width: feature width produced by the encoder_first injector (the
    common width after scene point fusion); only consulted for that placement.
    """

    def __init__(self, store: ParameterStore, cfg: BackboneConfig,
                 rng: np.random.Generator, name: str = "backbone",
                 merged_width: int | None = None):
        self.cfg = cfg
        self.name = name
        self.merged_width = merged_width
        if cfg.placement == "encoder_first" and merged_width is None:
            raise ConfigError("encoder_first placement needs merged_width")

        c_in = 3
        for i, width in enumerate(cfg.encoder_widths):
            add_linear_params(store, f"{name}.enc{i}", c_in, width, rng)
            base = merged_width if (i == 0 and cfg.placement == "encoder_first") else width
            c_in = 2 * base  # per-point features concat global context
        for j, width in enumerate(cfg.decoder_widths):
            add_linear_params(store, f"{name}.dec{j}", c_in, width, rng)
            c_in = width

    def encode(self, tape: Tape | None, store: ParameterStore, positions: np.ndarray,
               injector: Injector | None = None) -> tuple[Var, np.ndarray, Var]:
        """Returns (final latent, base positions, stage-1 features).

        base positions equal the input unless an encoder_first injector
        replaced the set; stage-1 features are pre-injection (for the caller's
        width-matching path).
        """
        pos = np.asarray(positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise dim_error("backbone positions", pos.shape, ("N", 3))
        if pos.shape[0] == 0:
            raise InputError("backbone: empty point cloud")
        if self.cfg.placement == "encoder_first" and injector is None:
            raise ConfigError("encoder_first placement requires an injector")

        x = leaf(pos)
        base = pos
        stage1: Var | None = None
        for i in range(len(self.cfg.encoder_widths)):
            h = relu(tape, feature_norm(tape, apply_linear(tape, store, f"{self.name}.enc{i}", x)))
            if i == 0:
                stage1 = h
                if injector is not None and self.cfg.placement == "encoder_first":
                    base, h = injector(h)
                    if h.data.shape[1] != self.merged_width:
                        raise dim_error("injected merged features", h.data.shape,
                                        ("M", self.merged_width))
            pooled = mean_pool_rows(tape, h)
            x = concat_channels(tape, h, broadcast_rows(tape, pooled, h.data.shape[0]))
        return x, base, stage1

    def decode(self, tape: Tape | None, store: ParameterStore, latent: Var,
               fuser: Fuser | None = None) -> Var:
        fused_at = self.cfg.fused_decoder_layers()
        if fused_at and fuser is None:
            raise ConfigError(
                f"placement {self.cfg.placement!r} needs 2D features at decoder "
                f"layers {fused_at} but no fuser was supplied")
        x = latent
        for j in range(len(self.cfg.decoder_widths)):
            x = relu(tape, feature_norm(tape, apply_linear(tape, store, f"{self.name}.dec{j}", x)))
            if j in fused_at:
                x = fuser(j, x)
        return x
