"""Seeded parameter initialisation.

Each parameter draws from its own PCG64 stream keyed by ``(seed, name)``, so
a parameter's initial value does not depend on which other parameters the
model happens to build.  This keeps ablation variants comparable and makes a
fusion-free build identical to one that never knew about fusion blocks.
"""
from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor


def param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([int(seed), zlib.crc32(name.encode())]))


def he_normal(name: str, shape, fan_in: int, seed: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    data = param_rng(seed, name).standard_normal(shape) * std
    return Tensor(data.astype(dtype), requires_grad=True, name=name)


def normal(name: str, shape, std: float, seed: int, dtype) -> Tensor:
    data = param_rng(seed, name).standard_normal(shape) * std
    return Tensor(data.astype(dtype), requires_grad=True, name=name)


def zeros(name: str, shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)
