"""Frozen 2D feature extractor stub and the learnable per-pixel adaptation
block mapping extractor features to the width the 3D side consumes.

The extractor stands in for a large pre-trained image model. Two kinds:
  * raw_rgb: identity pass-through of RGB plus two normalized pixel-coordinate
    channels, C_2D = 5.
  * random_conv: a fixed two-layer 3x3 conv stack with weights drawn once from
    a seed; deterministic, never trained.

Adapted features are handled as rows: a (V*H*W, C) matrix whose row for view
view/pixel (v, u) is view * H * W + v * W + u (see feature_row_index). That
keeps the adaptation a plain per-pixel MLP on the tape and lets downstream
gathers use row indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterStore, Tape, Var, add_linear_params, apply_linear, leaf, relu
from .errors import ConfigError, InputError, dim_error

RAW_RGB_CHANNELS = 5


@dataclass(frozen=True)
class FrozenExtractorConfig:
    kind: str = "raw_rgb"        # raw_rgb | random_conv
    channels: int = RAW_RGB_CHANNELS
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("raw_rgb", "random_conv"):
            raise ConfigError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "raw_rgb" and self.channels != RAW_RGB_CHANNELS:
            raise ConfigError(
                f"raw_rgb extractor always has {RAW_RGB_CHANNELS} channels, got {self.channels}")
        if self.channels < 1:
            raise ConfigError(f"extractor channels must be >= 1, got {self.channels}")


def _conv3x3(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 same-padding 3x3 convolution; x (C_in, H, W) -> (C_out, H, W)."""
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(1, 2))
    return np.einsum("ihwab,oiab->ohw", win, kernel, optimize=True) + bias[:, None, None]


class FrozenExtractor:
    """Immutable feature extractor; same config -> identical weights forever."""

    def __init__(self, cfg: FrozenExtractorConfig):
        self.cfg = cfg
        self._weights: list[tuple[np.ndarray, np.ndarray]] = []
        if cfg.kind == "random_conv":
            rng = np.random.default_rng(cfg.seed)
            hidden = 8
            for c_in, c_out in ((3, hidden), (hidden, cfg.channels)):
                k = rng.normal(0.0, np.sqrt(2.0 / (9 * c_in)), (c_out, c_in, 3, 3))
                b = np.zeros(c_out)
                k.setflags(write=False)
                b.setflags(write=False)
                self._weights.append((k, b))

    @property
    def channels(self) -> int:
        return self.cfg.channels

    def weight_bytes(self) -> bytes:
        """Concatenated parameter bytes; immutability is tested against this."""
        return b"".join(k.tobytes() + b.tobytes() for k, b in self._weights)

    def extract(self, images: np.ndarray) -> np.ndarray:
        """(V, 3, H, W) in [0, 1] -> (V, C_2D, H, W) features. No gradients."""
        imgs = np.asarray(images, dtype=np.float64)
        if imgs.ndim != 4 or imgs.shape[1] != 3:
            raise dim_error("extractor input", imgs.shape, ("V", 3, "H", "W"))
        if imgs.min() < 0.0 or imgs.max() > 1.0:
            raise InputError(
                f"extractor input must lie in [0,1], got [{imgs.min()}, {imgs.max()}]")
        v, _, h, w = imgs.shape
        if self.cfg.kind == "raw_rgb":
            cu = (np.arange(w) + 0.5) / w
            cv = (np.arange(h) + 0.5) / h
            coords = np.empty((2, h, w))
            coords[0] = cu[None, :]
            coords[1] = cv[:, None]
            return np.concatenate([imgs, np.broadcast_to(coords, (v, 2, h, w))], axis=1)
        out = np.empty((v, self.cfg.channels, h, w))
        for i in range(v):
            x = imgs[i]
            x = np.maximum(_conv3x3(x, *self._weights[0]), 0.0)
            out[i] = _conv3x3(x, *self._weights[1])
        return out


def feature_row_index(view: np.ndarray, v: np.ndarray, u: np.ndarray,
                      height: int, width: int) -> np.ndarray:
    """Row index into stacked per-pixel feature rows for (view, v, u)."""
    return (np.asarray(view) * height + np.asarray(v)) * width + np.asarray(u)


def features_to_rows(feats: np.ndarray) -> np.ndarray:
    """(V, C, H, W) -> (V*H*W, C) in feature_row_index order."""
    v, c, h, w = feats.shape
    return feats.transpose(0, 2, 3, 1).reshape(v * h * w, c)


def rows_to_features(rows: np.ndarray, v: int, h: int, w: int) -> np.ndarray:
    return rows.reshape(v, h, w, -1).transpose(0, 3, 1, 2)


class AdaptationBlock:
    """Per-pixel 2-layer MLP C_2D -> C_adapt; final layer zero-initialized so
    adapted features are exactly zero at init."""

    def __init__(self, store: ParameterStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, c_hidden: int = 32):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        add_linear_params(store, f"{name}.fc1", c_in, c_hidden, rng)
        add_linear_params(store, f"{name}.fc2", c_hidden, c_out, rng, zero_init=True)

    def __call__(self, tape: Tape | None, store: ParameterStore, rows: Var) -> Var:
        if rows.data.ndim != 2 or rows.data.shape[1] != self.c_in:
            raise dim_error("adaptation input rows", rows.data.shape, ("P", self.c_in))
        h = relu(tape, apply_linear(tape, store, f"{self.name}.fc1", rows))
        return apply_linear(tape, store, f"{self.name}.fc2", h)

    def adapt_images(self, tape: Tape | None, store: ParameterStore,
                     feats: np.ndarray) -> Var:
        """(V, C_2D, H, W) extractor output -> adapted rows (V*H*W, C_adapt)."""
        return self(tape, store, leaf(features_to_rows(feats)))
