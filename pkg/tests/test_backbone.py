import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from e2caps import ops
from e2caps.backbone import Backbone, BackboneConfig, ConfigError, fuse_attention
from e2caps.gradcheck import grad_check
from e2caps.suite import toy_attention
from e2caps.tensor import Tensor


def test_full_profile_layout():
    cfg = BackboneConfig.full()
    bb = Backbone(cfg)
    convs = [n for n in bb.params if ".conv" in n and n.endswith(".weight")]
    assert len(convs) == 13
    assert cfg.output_shape == (512, 7, 7)
    assert bb.params["stage1.conv1.weight"].shape == (64, 3, 3, 3)
    assert bb.params["stage5.conv3.weight"].shape == (512, 512, 3, 3)
    assert bb.params["stage3.fusion.weight"].shape == (256, 128, 1, 1)
    assert bb.params["stage4.fusion.weight"].shape == (512, 256, 1, 1)
    assert not any("head" in n or "fc" in n for n in bb.params)


def test_full_stage3_fusion_shape():
    rng = np.random.Generator(np.random.PCG64(0))
    bb = Backbone(BackboneConfig.full())
    x = Tensor(rng.uniform(0, 1, (1, 128, 56, 56)).astype(np.float32))
    out = fuse_attention(x, bb.stage_params(3), bb.params["stage3.fusion.weight"],
                         toy_attention(rng, 1))
    assert out.shape == (1, 256, 28, 28)


def test_toy_32_final_is_1x1():
    assert BackboneConfig.toy(input_size=32).output_shape == (32, 1, 1)


def test_toy_64_example_shape():
    cfg = BackboneConfig.toy(input_size=64, widths=(8, 16, 32, 64, 64))
    out = Backbone(cfg).forward(Tensor(np.zeros((2, 3, 64, 64), np.float32)), np.zeros((2, 100, 100)))
    assert out.shape == (2, 64, 2, 2)


def test_zero_image_zero_output():
    cfg = BackboneConfig.toy(input_size=32)
    att = np.ones((1, 100, 100))
    out = Backbone(cfg, seed=4).forward(Tensor(np.zeros((1, 3, 32, 32), np.float32)), att)
    assert not out.data.any()


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([32, 64]),
       st.lists(st.integers(1, 6), min_size=5, max_size=5),
       st.sets(st.integers(1, 5)),
       st.integers(1, 2))
def test_shape_contract_random_configs(size, widths, fusion, batch):
    cfg = BackboneConfig.toy(input_size=size, widths=tuple(widths), fusion_stages=frozenset(fusion))
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (batch, 3, size, size)).astype(np.float32))
    out = Backbone(cfg).forward(x, np.ones((batch, 100, 100)) if fusion else None)
    assert out.shape == (batch,) + cfg.output_shape
    assert sum(".fusion." in n for n in Backbone(cfg).params) == len(fusion)


def test_fusion_free_build_is_bit_identical():
    """Parameters and outputs of a plain build match a fused build's plain part exactly,
    and a zero attention map removes the fusion branch exactly."""
    fused_cfg = BackboneConfig.toy(input_size=32, widths=(4, 8, 8, 8, 8))
    fused, plain = Backbone(fused_cfg, seed=2), Backbone(fused_cfg.without_fusion(), seed=2)
    for name, p in plain.params.items():
        assert np.array_equal(p.data, fused.params[name].data)
    assert set(fused.params) - set(plain.params) == {"stage3.fusion.weight", "stage4.fusion.weight"}
    x = Tensor(np.random.default_rng(1).uniform(0, 1, (2, 3, 32, 32)).astype(np.float32))
    y_plain = plain.forward(x)
    y_zero = fused.forward(x, np.zeros((2, 100, 100)))
    assert np.array_equal(y_plain.data, y_zero.data)
    y_att = fused.forward(x, np.ones((2, 100, 100)))
    assert not np.array_equal(y_plain.data, y_att.data)


def test_fusion_branch_with_identity_projection():
    # 1 channel, conv stack that outputs zeros: out = maxpool(x * 1)
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(0, 1, (1, 1, 4, 4)))
    zero_conv = [(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)))]
    out = fuse_attention(x, zero_conv, Tensor(np.ones((1, 1, 1, 1))), np.ones((100, 100)))
    np.testing.assert_array_equal(out.data, ops.maxpool2(x).data)


def test_missing_attention_rejected():
    bb = Backbone(BackboneConfig.toy(input_size=32))
    with pytest.raises(ConfigError):
        bb.forward(Tensor(np.zeros((1, 3, 32, 32), np.float32)))


def test_wrong_input_size_rejected():
    bb = Backbone(BackboneConfig.toy(input_size=32).without_fusion())
    with pytest.raises(ConfigError):
        bb.forward(Tensor(np.zeros((1, 3, 64, 64), np.float32)))


@pytest.mark.parametrize("kw", [dict(input_size=48), dict(widths=(8, 8, 8, 8)),
                                dict(widths=(8, 0, 8, 8, 8)), dict(fusion_stages=frozenset({6})),
                                dict(profile="huge")])
def test_invalid_configs(kw):
    base = dict(profile="toy", input_size=32, widths=(8, 8, 8, 8, 8))
    base.update(kw)
    with pytest.raises(ConfigError):
        Backbone(BackboneConfig(**base))


def test_tiny_fused_backbone_gradcheck():
    rng = np.random.Generator(np.random.PCG64(11))
    bb = Backbone(BackboneConfig.toy(input_size=32, widths=(4, 4, 8, 8, 8)), seed=1,
                  dtype=np.float64)
    # zero biases put dead channels exactly on the relu kink; nudge them off it
    for name, p in bb.params.items():
        if name.endswith(".bias"):
            p.data = rng.uniform(0.01, 0.1, p.shape)
    x = Tensor(rng.uniform(0, 1, (2, 3, 32, 32)))
    att = toy_attention(rng, 2)
    wrt = list(bb.params.values()) + [x]
    err = grad_check(lambda *_: bb.forward(x, att), [], eps=1e-6, wrt=wrt, max_coords=4)
    assert err < 1e-4
