"""Five-stage VGG-style backbone with attention fusion.

A fused stage computes::

    out = maxpool2(convs(x) + project_1x1(x * attention))

where ``x`` is the previous stage's pooled output, ``attention`` is the
100x100 AU map resized to ``x``'s resolution and broadcast over channels, and
the 1x1 projection (no bias) matches the channel count of the conv stack.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import ops
from .attention import resize_map
from .init import he_normal, zeros
from .tensor import TRAIN_DTYPE, Tensor

FULL_WIDTHS = (64, 128, 256, 512, 512)
STAGE_CONVS = (2, 2, 3, 3, 3)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    profile: str = "full"
    input_size: int = 224
    in_channels: int = 3
    widths: tuple = FULL_WIDTHS
    convs: tuple = STAGE_CONVS
    fusion_stages: frozenset = field(default_factory=lambda: frozenset({3, 4}))

    @classmethod
    def full(cls, **kw) -> "BackboneConfig":
        return cls(**kw)

    @classmethod
    def toy(cls, input_size: int = 64, widths=(8, 16, 32, 32, 32), **kw) -> "BackboneConfig":
        return cls(profile="toy", input_size=input_size, widths=tuple(widths), **kw)

    def without_fusion(self) -> "BackboneConfig":
        return replace(self, fusion_stages=frozenset())

    def validate(self) -> "BackboneConfig":
        if self.profile not in ("full", "toy"):
            raise ConfigError(f"unknown profile {self.profile!r}")
        if len(self.widths) != 5 or len(self.convs) != 5:
            raise ConfigError("backbone needs exactly 5 stages")
        if any(w <= 0 for w in self.widths) or any(c <= 0 for c in self.convs):
            raise ConfigError("channel widths and conv counts must be positive")
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError(f"input size {self.input_size} not divisible by 2^5")
        if not set(self.fusion_stages) <= {1, 2, 3, 4, 5}:
            raise ConfigError(f"fusion stages {sorted(self.fusion_stages)} not in 1..5")
        return self

    @property
    def output_shape(self) -> tuple:
        s = self.input_size // 32
        return (self.widths[-1], s, s)


class Backbone:
    """Parameter container plus forward pass for :class:`BackboneConfig`."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0, dtype=TRAIN_DTYPE):
        self.cfg = cfg.validate()
        self.params: dict[str, Tensor] = {}
        c_in = cfg.in_channels
        for k in range(1, 6):
            width = cfg.widths[k - 1]
            prev = c_in
            for j in range(1, cfg.convs[k - 1] + 1):
                name = f"stage{k}.conv{j}"
                self.params[f"{name}.weight"] = he_normal(
                    f"{name}.weight", (width, prev, 3, 3), prev * 9, seed, dtype)
                self.params[f"{name}.bias"] = zeros(f"{name}.bias", (width,), dtype)
                prev = width
            if k in cfg.fusion_stages:
                name = f"stage{k}.fusion.weight"
                self.params[name] = he_normal(name, (width, c_in, 1, 1), c_in, seed, dtype)
            c_in = width

    def stage_convs(self, k: int, x: Tensor) -> Tensor:
        for j in range(1, self.cfg.convs[k - 1] + 1):
            w = self.params[f"stage{k}.conv{j}.weight"]
            b = self.params[f"stage{k}.conv{j}.bias"]
            x = ops.relu(ops.conv2d(x, w, b, stride=1, padding=1))
        return x

    def forward(self, images: Tensor, attention: Optional[np.ndarray] = None) -> Tensor:
        """``images`` (B,3,S,S); ``attention`` (B,100,100) when fusion is enabled."""
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
            raise ConfigError(f"expected input (B,{cfg.in_channels},{cfg.input_size},"
                              f"{cfg.input_size}), got {images.shape}")
        if cfg.fusion_stages and attention is None:
            raise ConfigError("attention map required when fusion stages are enabled")
        x = images
        for k in range(1, 6):
            if k in cfg.fusion_stages:
                x = fuse_attention(x, self.stage_params(k),
                                   self.params[f"stage{k}.fusion.weight"], attention)
            else:
                x = ops.maxpool2(self.stage_convs(k, x))
        return x

    def stage_params(self, k: int) -> list:
        return [(self.params[f"stage{k}.conv{j}.weight"], self.params[f"stage{k}.conv{j}.bias"])
                for j in range(1, self.cfg.convs[k - 1] + 1)]


def fuse_attention(prev_pooled: Tensor, conv_params, projection: Tensor,
                   attention) -> Tensor:
    """One fused stage: ``maxpool2(convs(x) + proj(x * attention))``.

    ``conv_params`` lists (weight, bias) pairs of the stage's 3x3 conv stack;
    ``attention`` is a single 100x100 map or a batch (B,100,100).
    """
    x = prev_pooled
    hgt, wid = x.shape[-2], x.shape[-1]
    att = resize_map(attention, hgt, wid).astype(x.dtype)
    if att.shape[-2:] != (hgt, wid):
        raise ConfigError("attention resolution mismatch after resize")
    h = x
    for w, b in conv_params:
        h = ops.relu(ops.conv2d(h, w, b, stride=1, padding=1))
    gated = ops.mul(x, att[:, None] if att.ndim == 3 else att)
    return ops.maxpool2(ops.add(h, ops.conv2d(gated, projection)))
