"""Margin loss, reconstruction loss and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5
    recon_weight: float = 0.0005

    def validate(self) -> "LossConfig":
        if not 0 <= self.m_minus < self.m_plus <= 1:
            raise ValueError("need 0 <= m_minus < m_plus <= 1")
        if self.lam < 0 or self.recon_weight < 0:
            raise ValueError("lambda and reconstruction weight must be non-negative")
        return self


def _onehot(labels, c, dtype):
    labels = np.atleast_1d(np.asarray(labels))
    t = np.zeros((len(labels), c), dtype=dtype)
    t[np.arange(len(labels)), labels] = 1
    return t


def margin_loss(norms, labels, cfg: LossConfig = LossConfig()) -> Tensor:
    """Per-sample sum over classes, averaged over the batch.

    ``norms`` is (C,) or (B,C); ``labels`` a class index or (B,) indices.
    """
    norms = norms if isinstance(norms, Tensor) else Tensor(np.asarray(norms, dtype=np.float64))
    batched = norms.ndim == 2
    x = norms if batched else ops.reshape(norms, (1,) + norms.shape)
    t = _onehot(labels, x.shape[1], x.dtype)
    present = ops.square(ops.relu(ops.sub(cfg.m_plus, x)))
    absent = ops.square(ops.relu(ops.sub(x, cfg.m_minus)))
    per = ops.add(ops.mul(present, t), ops.mul(absent, cfg.lam * (1 - t)))
    return ops.mean(ops.sum(per, axis=1))


def reconstruction_loss(x_r, x) -> Tensor:
    """Sum of squared pixel errors per sample, averaged over the batch."""
    x_r = x_r if isinstance(x_r, Tensor) else Tensor(np.asarray(x_r, dtype=np.float64))
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=x_r.dtype)
    if x_r.shape != x.shape:
        raise ValueError(f"reconstruction length mismatch: {x_r.shape} vs {x.shape}")
    sq = ops.square(ops.sub(x_r, x))
    if sq.ndim <= 1:
        return ops.sum(sq)
    return ops.mean(ops.sum(ops.reshape(sq, (sq.shape[0], -1)), axis=1))


def total_loss(margin, recon, cfg: LossConfig = LossConfig()):
    """``margin + recon_weight * recon``; accepts tensors or floats."""
    if isinstance(margin, Tensor) or isinstance(recon, Tensor):
        return ops.add(margin, ops.mul(recon, cfg.recon_weight))
    return margin + cfg.recon_weight * recon
