"""Gradient-check suite over every differentiable op and a toy end-to-end model."""
from __future__ import annotations

import numpy as np

from . import ops
from .attention import MAP_SIZE, render_attention_map
from .backbone import BackboneConfig, fuse_attention
from .capsules import CapsuleConfig, dynamic_routing, predict_votes, primary_caps
from .gradcheck import grad_check
from .losses import LossConfig, margin_loss, reconstruction_loss
from .model import build_variant
from .tensor import CHECK_DTYPE, Tensor

TOLERANCE = 1e-4
EPS = 1e-6


def _t(rng, *shape, scale=1.0, away_from_zero=0.0):
    x = rng.standard_normal(shape) * scale
    if away_from_zero:
        x = np.where(np.abs(x) < away_from_zero, np.sign(x + 1e-300) * away_from_zero + x, x)
    return Tensor(x.astype(CHECK_DTYPE))


def toy_attention(rng, batch: int) -> np.ndarray:
    maps = []
    for _ in range(batch):
        centers = rng.integers(10, MAP_SIZE - 10, size=(6, 2))
        maps.append(render_attention_map(centers).grid)
    return np.stack(maps)


def toy_e2_model(seed: int = 0, n_classes: int = 4, variant: str = "E2Capsnet"):
    """Smallest E2-style model: 32x32 input, widths <= 16, 3 routing iterations."""
    bb = BackboneConfig.toy(input_size=32, widths=(4, 8, 8, 16, 16))
    caps = CapsuleConfig(n_classes=n_classes, caps_channels=4, primary_kernel=1,
                         routing_iters=3, decoder_hidden=(16, 32), recon_size=8)
    return build_variant(variant, bb, caps, seed=seed, dtype=CHECK_DTYPE, auto_fusion=True)


def cases(seed: int = 0):
    """Yield (name, fn, inputs, wrt, max_coords)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    att = toy_attention(rng, 2)

    yield "add (broadcast)", ops.add, [_t(rng, 2, 3), _t(rng, 3)], None, None
    yield "sub (broadcast)", ops.sub, [_t(rng, 2, 3), _t(rng, 2, 1)], None, None
    yield "mul (broadcast)", ops.mul, [_t(rng, 2, 3, 4), _t(rng, 3, 1)], None, None
    yield "div", ops.div, [_t(rng, 3, 4), Tensor(rng.uniform(0.5, 2.0, (3, 4)))], None, None
    yield "square", ops.square, [_t(rng, 5)], None, None
    yield "sqrt", ops.sqrt, [Tensor(rng.uniform(0.5, 2.0, (5,)))], None, None
    yield "exp", ops.exp, [_t(rng, 5)], None, None
    yield "log", ops.log, [Tensor(rng.uniform(0.5, 2.0, (5,)))], None, None
    yield "sum(axis)", lambda x: ops.sum(x, axis=1), [_t(rng, 3, 4, 2)], None, None
    yield "reshape+transpose", lambda x: ops.transpose(ops.reshape(x, (4, 6)), (1, 0)), \
        [_t(rng, 2, 3, 4)], None, None
    yield "matmul (batched)", ops.matmul, [_t(rng, 3, 4, 5), _t(rng, 5, 2)], None, None
    yield "relu", ops.relu, [_t(rng, 4, 5, away_from_zero=0.1)], None, None
    yield "sigmoid", ops.sigmoid, [_t(rng, 4, 5)], None, None
    yield "softmax", lambda x: ops.softmax(x, axis=1), [_t(rng, 3, 5)], None, None
    yield "log_softmax", lambda x: ops.log_softmax(x, axis=-1), [_t(rng, 3, 5)], None, None
    yield "cross_entropy", lambda x: ops.cross_entropy(x, [0, 2, 1]), [_t(rng, 3, 4)], None, None
    yield "norm", ops.norm, [_t(rng, 3, 16)], None, None
    yield "squash", ops.squash, [_t(rng, 3, 8)], None, None
    yield "squash (small)", ops.squash, [_t(rng, 3, 8, scale=1e-2)], None, None
    yield "linear", ops.linear, [_t(rng, 2, 6), _t(rng, 4, 6, scale=0.3), _t(rng, 4)], None, None
    yield "conv2d pad1", lambda x, w, b: ops.conv2d(x, w, b, padding=1), \
        [_t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3, scale=0.3), _t(rng, 4)], None, None
    yield "conv2d stride2", lambda x, w: ops.conv2d(x, w, stride=2), \
        [_t(rng, 1, 2, 7, 7), _t(rng, 3, 2, 3, 3, scale=0.3)], None, None
    yield "maxpool2", ops.maxpool2, [_t(rng, 2, 3, 4, 6)], None, None

    w_fuse = [(_t(rng, 4, 2, 3, 3, scale=0.4), _t(rng, 4, scale=0.1)),
              (_t(rng, 4, 4, 3, 3, scale=0.3), _t(rng, 4, scale=0.1))]
    proj = _t(rng, 4, 2, 1, 1)
    x_fuse = _t(rng, 2, 2, 8, 8)
    flat = [x_fuse, proj] + [t for pair in w_fuse for t in pair]
    yield "fuse_attention", lambda *_: fuse_attention(x_fuse, w_fuse, proj, att), \
        flat, flat, None

    feats = _t(rng, 2, 6, 3, 3)
    pw, pb = _t(rng, 4 * 8, 6, 2, 2, scale=0.3), _t(rng, 32, scale=0.1)
    yield "primary_caps", lambda f, w, b: primary_caps(f, w, b, 4, 8), [feats, pw, pb], None, 40
    u = _t(rng, 2, 5, 8, scale=0.5)
    W = _t(rng, 5, 3, 16, 8, scale=0.2)
    yield "predict_votes", predict_votes, [u, W], None, 60
    votes = _t(rng, 2, 6, 3, 16, scale=0.3)
    yield "dynamic_routing (3 iters)", lambda v: dynamic_routing(v, 3)[0], [votes], None, None

    norms = Tensor(rng.uniform(0.0, 1.0, (4, 5)))
    norms.data[np.abs(norms.data - 0.9) < 1e-2] += 0.03
    norms.data[np.abs(norms.data - 0.1) < 1e-2] += 0.03
    yield "margin_loss", lambda n: margin_loss(n, [0, 1, 2, 4], LossConfig()), [norms], None, None
    target = rng.uniform(0, 1, (3, 10))
    yield "reconstruction_loss", lambda r: reconstruction_loss(r, target), \
        [_t(rng, 3, 10)], None, None

    model = toy_e2_model(seed)
    images = Tensor(rng.uniform(0, 1, (2, 3, 32, 32)))
    labels = np.array([1, 3])
    recon = rng.uniform(0, 1, (2, 64))

    def e2_loss():
        out = model.forward(images, att)
        total, _, _ = model.losses(out, labels, recon, LossConfig())
        return total

    wrt = list(model.params.values()) + [images]
    yield "E2Capsnet toy end-to-end", lambda *_: e2_loss(), [], wrt, 6


def gradcheck_suite(seed: int = 0, eps: float = EPS):
    """List of (name, max relative error)."""
    results = []
    for name, fn, inputs, wrt, max_coords in cases(seed):
        err = grad_check(fn, inputs, eps=eps, wrt=wrt, max_coords=max_coords, seed=seed)
        results.append((name, err))
    return results
