"""The five ablation variants and their shared forward/loss interface.

=========  ===============  ==============  =============
variant    dynamic routing  rich conv       attention map
=========  ===============  ==============  =============
VGG16                       yes
Capsnet    yes
AVGGnet                     yes             yes
RCCnet     yes              yes
E2Capsnet  yes              yes             yes
=========  ===============  ==============  =============

Non-capsule variants put a single linear layer on the flattened backbone
output and train with softmax cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .backbone import Backbone, BackboneConfig, ConfigError
from .capsules import CapsuleConfig, CapsuleHead, capsule_norms, classify
from .init import he_normal, zeros
from .losses import LossConfig, margin_loss, reconstruction_loss, total_loss
from .tensor import TRAIN_DTYPE, Tensor

VARIANTS = ("VGG16", "Capsnet", "AVGGnet", "RCCnet", "E2Capsnet")
CAPSULE_VARIANTS = frozenset({"Capsnet", "RCCnet", "E2Capsnet"})
ATTENTION_VARIANTS = frozenset({"AVGGnet", "E2Capsnet"})


@dataclass(frozen=True)
class ShallowFrontConfig:
    """Conv front-end of the plain capsule-network baseline."""

    input_size: int = 224
    in_channels: int = 3
    width: int = 256
    kernel: int = 9


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    backbone: BackboneConfig
    capsules: CapsuleConfig
    front: ShallowFrontConfig = ShallowFrontConfig()
    front_primary_kernel: int = 8
    front_primary_stride: int = 2


@dataclass
class Output:
    caps: Tensor = None      # (B, C, 16) for capsule variants
    logits: Tensor = None    # (B, C) otherwise

    def predictions(self) -> np.ndarray:
        if self.caps is not None:
            return classify(self.caps)
        return np.argmax(self.logits.data, axis=-1)


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=TRAIN_DTYPE):
        if cfg.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {cfg.variant!r}; choose from {VARIANTS}")
        self.cfg = cfg
        self.variant = cfg.variant
        self.uses_capsules = cfg.variant in CAPSULE_VARIANTS
        self.uses_attention = cfg.variant in ATTENTION_VARIANTS
        fused = bool(cfg.backbone.fusion_stages)
        if fused and not self.uses_attention:
            raise ConfigError(f"{cfg.variant} has no attention map but fusion stages "
                              f"{sorted(cfg.backbone.fusion_stages)} were configured")
        if self.uses_attention and not fused:
            raise ConfigError(f"{cfg.variant} needs at least one fusion stage")

        self.params: dict[str, Tensor] = {}
        self.backbone = None
        n_classes = cfg.capsules.n_classes
        if cfg.variant == "Capsnet":
            f = cfg.front
            name = "front.conv1"
            self.params[f"{name}.weight"] = he_normal(
                f"{name}.weight", (f.width, f.in_channels, f.kernel, f.kernel),
                f.in_channels * f.kernel ** 2, seed, dtype)
            self.params[f"{name}.bias"] = zeros(f"{name}.bias", (f.width,), dtype)
            side = ops.conv_output_size(f.input_size, f.kernel, 1, 0)
            feat_shape = (f.width, side, side)
            caps_cfg = replace(cfg.capsules, primary_kernel=cfg.front_primary_kernel,
                               primary_stride=cfg.front_primary_stride)
            self.input_size = f.input_size
        else:
            self.backbone = Backbone(cfg.backbone, seed, dtype)
            self.params.update(self.backbone.params)
            feat_shape = cfg.backbone.output_shape
            caps_cfg = cfg.capsules
            self.input_size = cfg.backbone.input_size

        self.head = None
        self.recon_size = cfg.capsules.recon_size
        if self.uses_capsules:
            self.head = CapsuleHead(caps_cfg, feat_shape, self.recon_size ** 2, seed, dtype)
            self.params.update(self.head.params)
        else:
            n_in = int(np.prod(feat_shape))
            self.params["head.weight"] = he_normal("head.weight", (n_classes, n_in), n_in,
                                                   seed, dtype)
            self.params["head.bias"] = zeros("head.bias", (n_classes,), dtype)
        self.n_classes = n_classes
        self.dtype = np.dtype(dtype)

    def features(self, images: Tensor, attention=None) -> Tensor:
        if self.backbone is None:
            p = self.params
            return ops.relu(ops.conv2d(images, p["front.conv1.weight"], p["front.conv1.bias"]))
        return self.backbone.forward(images, attention if self.uses_attention else None)

    def forward(self, images, attention=None) -> Output:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        feats = self.features(images, attention)
        if self.uses_capsules:
            v, _ = self.head.encode(feats)
            return Output(caps=v)
        flat = ops.reshape(feats, (feats.shape[0], -1))
        return Output(logits=ops.linear(flat, self.params["head.weight"], self.params["head.bias"]))

    def losses(self, out: Output, labels, recon_target, cfg: LossConfig, mask=None):
        """(total, margin-or-CE, recon) tensors; recon is None for non-capsule variants."""
        if not self.uses_capsules:
            ce = ops.cross_entropy(out.logits, labels)
            return ce, ce, None
        mask = labels if mask is None else mask
        margin = margin_loss(capsule_norms(out.caps), labels, cfg)
        recon = reconstruction_loss(self.head.decode(out.caps, mask), recon_target)
        return total_loss(margin, recon, cfg), margin, recon

    def parameter_groups(self) -> dict:
        groups = {}
        for name in self.params:
            if ".fusion." in name:
                key = "fusion"
            elif name.startswith("stage"):
                key = "backbone"
            else:
                key = name.split(".", 1)[0]
            groups.setdefault(key, []).append(name)
        return groups


def build_variant(variant: str, backbone: BackboneConfig, capsules: CapsuleConfig,
                  front: ShallowFrontConfig = None, seed: int = 0, dtype=TRAIN_DTYPE,
                  **kw) -> Model:
    """Wire one ablation variant; fusion stages are dropped for attention-free variants
    only when the caller passes ``auto_fusion=True``."""
    auto = kw.pop("auto_fusion", False)
    if auto and variant not in ATTENTION_VARIANTS:
        backbone = backbone.without_fusion()
    if front is None:
        front = ShallowFrontConfig(input_size=backbone.input_size,
                                   in_channels=backbone.in_channels)
    cfg = ModelConfig(variant, backbone, capsules, front, **kw)
    return Model(cfg, seed, dtype)
