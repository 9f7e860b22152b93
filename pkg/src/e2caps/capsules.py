"""Capsule head: PrimaryCaps, routing-by-agreement to FaceCaps, decoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .init import he_normal, normal, zeros
from .ops import ShapeError, squash
from .tensor import TRAIN_DTYPE, Tensor

VOTE_INIT_STD = 0.05


@dataclass(frozen=True)
class CapsuleConfig:
    n_classes: int = 7
    caps_channels: int = 32
    primary_dim: int = 8
    face_dim: int = 16
    primary_kernel: int = 2
    primary_stride: int = 1
    routing_iters: int = 3
    decoder_hidden: tuple = (512, 1024)
    recon_size: int = 28

    def validate(self) -> "CapsuleConfig":
        if self.routing_iters < 1:
            raise ValueError("routing needs at least one iteration")
        if min(self.n_classes, self.caps_channels, self.primary_dim, self.face_dim,
               self.primary_kernel, self.primary_stride, self.recon_size) < 1:
            raise ValueError("capsule sizes must be positive")
        if len(self.decoder_hidden) != 2:
            raise ValueError("decoder has exactly two hidden layers")
        return self


@dataclass
class RoutingState:
    logits: np.ndarray      # (B, N, C) logits used for the last coupling
    couplings: list         # per-iteration couplings, each (B, N, C)


def primary_caps(features: Tensor, weight: Tensor, bias: Optional[Tensor],
                 caps_channels: int, dim: int, stride: int = 1) -> Tensor:
    """Conv features -> squashed capsules (B, caps_channels*H'*W', dim).

    Conv output channels are grouped as ``caps_channels`` blocks of ``dim``
    consecutive channels; capsules are ordered channel-major then row-major.
    """
    batched = features.ndim == 4
    x = features if batched else ops.reshape(features, (1,) + features.shape)
    if weight.shape[0] != caps_channels * dim:
        raise ShapeError(f"primary conv has {weight.shape[0]} outputs, need "
                         f"{caps_channels}*{dim}")
    out = ops.conv2d(x, weight, bias, stride=stride)
    b, _, h, w = out.shape
    u = ops.reshape(out, (b, caps_channels, dim, h, w))
    u = ops.transpose(u, (0, 1, 3, 4, 2))
    u = squash(ops.reshape(u, (b, caps_channels * h * w, dim)))
    return u if batched else ops.reshape(u, u.shape[1:])


def predict_votes(u: Tensor, W: Tensor) -> Tensor:
    """Votes ``W[i, j] @ u[i]`` for u (B,N,8) and W (N,C,16,8) -> (B,N,C,16)."""
    batched = u.ndim == 3
    if not batched:
        u = ops.reshape(u, (1,) + u.shape)
    b, n, d_in = u.shape
    n_w, c, d_out, d_w = W.shape
    if n_w != n or d_w != d_in:
        raise ShapeError(f"vote transforms {W.shape} do not match capsules {u.shape}")
    # batched over capsules: (N, C*16, 8) @ (N, 8, B) -> (N, C*16, B)
    w2 = ops.reshape(W, (n, c * d_out, d_in))
    votes = ops.matmul(w2, ops.transpose(u, (1, 2, 0)))
    votes = ops.transpose(votes, (2, 0, 1))
    votes = ops.reshape(votes, (b, n, c, d_out))
    return votes if batched else ops.reshape(votes, votes.shape[1:])


def dynamic_routing(votes: Tensor, iterations: int = 3):
    """Routing-by-agreement over votes (B,N,C,D); returns (v (B,C,D), RoutingState).

    Couplings are a softmax over classes of per-capsule logits that start at
    zero and grow by the vote/output agreement; the logit update after the
    final iteration is skipped.  Gradients flow through every iteration.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    batched = votes.ndim == 4
    if not batched:
        votes = ops.reshape(votes, (1,) + votes.shape)
    b, n, c, d = votes.shape
    logits = Tensor(np.zeros((b, n, c), dtype=votes.dtype))
    history = []
    v = None
    for it in range(iterations):
        coup = ops.softmax(logits, axis=2)
        history.append(coup.data)
        s = ops.sum(ops.mul(ops.reshape(coup, (b, n, c, 1)), votes), axis=1)
        v = squash(s, axis=-1)
        if it < iterations - 1:
            agree = ops.sum(ops.mul(votes, ops.reshape(v, (b, 1, c, d))), axis=-1)
            logits = ops.add(logits, agree)
    state = RoutingState(logits=logits.data, couplings=history)
    if not batched:
        v = ops.reshape(v, (c, d))
        state = RoutingState(logits=state.logits[0], couplings=[h[0] for h in history])
    return v, state


def capsule_norms(v: Tensor) -> Tensor:
    return ops.norm(v, axis=-1)


def classify(face_caps) -> np.ndarray:
    """Argmax of capsule norms (first index wins ties); works batched or not."""
    data = face_caps.data if isinstance(face_caps, Tensor) else np.asarray(face_caps)
    return np.argmax(np.sqrt((data * data).sum(axis=-1)), axis=-1)


def mask_capsules(v: Tensor, mask) -> Tensor:
    """Zero every capsule except the ``mask`` class; flatten to (B, C*D)."""
    batched = v.ndim == 3
    if not batched:
        v = ops.reshape(v, (1,) + v.shape)
    b, c, d = v.shape
    mask = np.atleast_1d(np.asarray(mask))
    if np.any(mask >= c) or np.any(mask < 0):
        raise ValueError(f"mask class out of range for {c} capsules")
    onehot = np.zeros((b, c, 1), dtype=v.dtype)
    onehot[np.arange(b), mask, 0] = 1
    flat = ops.reshape(ops.mul(v, onehot), (b, c * d))
    return flat if batched else ops.reshape(flat, (c * d,))


class CapsuleHead:
    """PrimaryCaps conv + FaceCaps vote transforms + 3-layer decoder."""

    def __init__(self, cfg: CapsuleConfig, in_shape, recon_pixels: int,
                 seed: int = 0, dtype=TRAIN_DTYPE):
        self.cfg = cfg.validate()
        c_in, h, w = in_shape
        k, st = cfg.primary_kernel, cfg.primary_stride
        ho = ops.conv_output_size(h, k, st, 0)
        wo = ops.conv_output_size(w, k, st, 0)
        self.n_primary = cfg.caps_channels * ho * wo
        self.recon_pixels = recon_pixels
        out_ch = cfg.caps_channels * cfg.primary_dim
        p = self.params = {}
        p["primarycaps.weight"] = he_normal("primarycaps.weight", (out_ch, c_in, k, k),
                                            c_in * k * k, seed, dtype)
        p["primarycaps.bias"] = zeros("primarycaps.bias", (out_ch,), dtype)
        p["facecaps.W"] = normal("facecaps.W",
                                 (self.n_primary, cfg.n_classes, cfg.face_dim, cfg.primary_dim),
                                 VOTE_INIT_STD, seed, dtype)
        sizes = (cfg.n_classes * cfg.face_dim,) + tuple(cfg.decoder_hidden) + (recon_pixels,)
        for i in range(3):
            name = f"decoder.fc{i + 1}"
            p[f"{name}.weight"] = he_normal(f"{name}.weight", (sizes[i + 1], sizes[i]),
                                            sizes[i], seed, dtype)
            p[f"{name}.bias"] = zeros(f"{name}.bias", (sizes[i + 1],), dtype)

    def encode(self, features: Tensor):
        cfg = self.cfg
        u = primary_caps(features, self.params["primarycaps.weight"],
                         self.params["primarycaps.bias"], cfg.caps_channels,
                         cfg.primary_dim, cfg.primary_stride)
        votes = predict_votes(u, self.params["facecaps.W"])
        return dynamic_routing(votes, cfg.routing_iters)

    def decode(self, face_caps: Tensor, mask) -> Tensor:
        p = self.params
        x = mask_capsules(face_caps, mask)
        x = ops.relu(ops.linear(x, p["decoder.fc1.weight"], p["decoder.fc1.bias"]))
        x = ops.relu(ops.linear(x, p["decoder.fc2.weight"], p["decoder.fc2.bias"]))
        return ops.sigmoid(ops.linear(x, p["decoder.fc3.weight"], p["decoder.fc3.bias"]))
