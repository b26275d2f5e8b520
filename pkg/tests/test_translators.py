import numpy as np
import pytest
import torch

from multidistill.backbone import BackboneConfig, count_parameters, init_backbone
from multidistill.errors import ConfigError, ShapeError
from multidistill.translators import (
    CNNTranslator,
    TeacherSpec,
    UpsampleLayer,
    build_translator,
    plan_translator,
    translate,
)

from conftest import finite_difference_check, max_rel_error


def conv_out(side, k, s=1, p=0):
    return (side + 2 * p - k) // s + 1


def convT_out(side, k, s=1, p=0, op=0):
    return (side - 1) * s - 2 * p + k + op


def test_14_to_16_transposed_conv_arithmetic():
    spec = TeacherSpec("clip", 16, 24, "dense-grid-16")
    plan = plan_translator(14, spec)
    assert plan.layers[0] == UpsampleLayer("convT", 3, 1)
    assert convT_out(14, 3, 1) == 16
    t = build_translator(32, 14, spec)
    out = translate(t, torch.zeros(2, 196, 32))
    assert out.shape == (2, 256, 24)
    assert torch.isfinite(out).all()


def test_14_to_16_layer_stack_matches_recipe():
    t = build_translator(32, 14, TeacherSpec("clip", 16, 24, "dense-grid-16"))
    kinds = [type(m).__name__ for m in t.body] + [type(t.head).__name__]
    assert kinds == ["ConvTranspose2d", "ChannelLayerNorm", "Conv2d", "ReLU", "ChannelLayerNorm",
                     "Conv2d", "ReLU", "ChannelLayerNorm", "Linear"]
    convs = [m for m in t.body if isinstance(m, torch.nn.Conv2d)]
    assert all(c.kernel_size == (3, 3) and c.padding == (1, 1) for c in convs)
    assert t.head.in_features == 32 and t.head.out_features == 24


def test_same_grid_plan_is_size_preserving():
    spec = TeacherSpec("t", 8, 12)
    plan = plan_translator(8, spec)
    side = 8
    for layer in plan.layers:
        side = conv_out(side, layer.kernel, layer.stride, layer.padding) if layer.op == "conv" else \
            convT_out(side, layer.kernel, layer.stride, layer.padding, layer.output_padding)
        assert side == 8
    assert plan.resize_to is None
    out = translate(build_translator(16, 8, spec), torch.randn(3, 64, 16))
    assert out.shape == (3, 64, 12)


def test_dense_grid_64_plan_reaches_56_then_resizes():
    spec = TeacherSpec("sam", 64, 16, "dense-grid-64")
    plan = plan_translator(14, spec)
    side = convT_out(14, 3, 2, p=1)
    assert side == 27
    side = convT_out(side, 3, 2, op=1)
    assert side == 56
    assert plan.resize_to == 64 and plan.out_side(14) == 64
    out = translate(build_translator(8, 14, spec), torch.randn(1, 196, 8))
    assert out.shape == (1, 64 * 64, 16)


def test_uncovered_grid_pair_points_to_resize_fallback():
    spec = TeacherSpec("odd", 11, 4)
    with pytest.raises(ConfigError, match="resize_fallback"):
        build_translator(8, 8, spec)
    t = build_translator(8, 8, spec, resize_fallback=True)
    assert translate(t, torch.randn(2, 64, 8)).shape == (2, 121, 4)


def test_linear_parameter_count():
    t = build_translator(8, 4, TeacherSpec("t", 4, 16), kind="linear")
    assert count_parameters(t) == 128 * 256 + 256
    assert translate(t, torch.randn(2, 16, 8)).shape == (2, 16, 16)


def test_batch_permutation_equivariance():
    t = build_translator(16, 8, TeacherSpec("t", 8, 12), seed=0).double()
    z = torch.randn(4, 64, 16, dtype=torch.float64)
    perm = [2, 0, 3, 1]
    with torch.no_grad():
        assert torch.allclose(translate(t, z[perm]), translate(t, z)[perm], rtol=0, atol=1e-12)


def test_linear_and_cnn_share_contract():
    spec = TeacherSpec("t", 4, 6)
    z = torch.randn(2, 16, 8)
    outs = [translate(build_translator(8, 4, spec, kind), z) for kind in ("cnn", "linear")]
    assert outs[0].shape == outs[1].shape == (2, 16, 6)


def test_geometry_mismatch_is_shape_error():
    t = build_translator(16, 8, TeacherSpec("t", 8, 12))
    with pytest.raises(ShapeError):
        translate(t, torch.randn(1, 49, 16))
    with pytest.raises(ShapeError):
        translate(t, torch.randn(1, 64, 8))


def test_seeded_build_is_deterministic():
    spec = TeacherSpec("t", 8, 12)
    a = build_translator(16, 8, spec, seed=4).state_dict()
    b = build_translator(16, 8, spec, seed=4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_cnn_translator_smaller_than_desk_backbone():
    backbone = init_backbone(BackboneConfig(), 0)
    n = count_parameters(backbone)
    for d_t in (16, 64, 128):
        t = build_translator(64, 8, TeacherSpec("t", 8, d_t), backbone_params=n)
        assert count_parameters(t) < n


def test_oversized_cnn_translator_rejected():
    with pytest.raises(ConfigError, match="not fewer"):
        build_translator(64, 8, TeacherSpec("t", 8, 64), backbone_params=1000)


def test_translator_input_gradient_matches_finite_differences():
    torch.manual_seed(0)
    t = build_translator(4, 2, TeacherSpec("t", 2, 3), seed=1).double()
    z = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
    pairs = finite_difference_check(lambda: translate(t, z).sum(), [z], 100, np.random.default_rng(1))
    assert max_rel_error(pairs) < 1e-4


def test_teacher_spec_validation():
    with pytest.raises(ConfigError):
        TeacherSpec("t", 0, 3)
    with pytest.raises(ConfigError):
        TeacherSpec("t", 2, 3, family="bogus")
