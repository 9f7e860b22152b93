"""Attention-guided capsule network for facial expression recognition.

Everything runs on a small reverse-mode autodiff core over numpy; the hot
loops have numba kernels (set ``E2CAPS_NUMBA=0`` to force pure numpy).
"""
from ._kernels import BACKEND
from .attention import (AttentionMap, AuRule, LandmarkSet, DEFAULT_RULES, compute_au_centers,
                        normalize_landmarks, render_attention_map, resize_map)
from .backbone import Backbone, BackboneConfig, ConfigError
from .capsules import CapsuleConfig, CapsuleHead, classify, dynamic_routing, predict_votes, primary_caps
from .data import DatasetManifest, SyntheticFaceParams, generate_synthetic_dataset, read_manifest
from .gradcheck import grad_check
from .losses import LossConfig, margin_loss, reconstruction_loss, total_loss
from .model import VARIANTS, Model, build_variant
from .ops import squash
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, no_grad
from .train import Checkpoint, TrainConfig, evaluate, export_embeddings, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "AttentionMap", "AuRule", "LandmarkSet", "DEFAULT_RULES", "compute_au_centers",
    "normalize_landmarks", "render_attention_map", "resize_map", "Backbone", "BackboneConfig",
    "ConfigError", "CapsuleConfig", "CapsuleHead", "classify", "dynamic_routing",
    "predict_votes", "primary_caps", "DatasetManifest", "SyntheticFaceParams",
    "generate_synthetic_dataset", "read_manifest", "grad_check", "LossConfig", "margin_loss",
    "reconstruction_loss", "total_loss", "VARIANTS", "Model", "build_variant", "squash", "Adam",
    "AdamState", "adam_step", "Tensor", "no_grad", "Checkpoint", "TrainConfig", "evaluate",
    "export_embeddings", "train",
]
