import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxcrf import nn
from ctxcrf.featmap import (
    BlockSpec,
    FeatMapConfig,
    build_featmapnet,
    featmap_forward,
    receptive_boxes,
    scaled_size,
    sliding_pyramid_pool,
)
from ctxcrf.nn import Tensor


def tiny_config(**kw):
    base = dict(
        scales=(1.0,),
        shared_blocks=(BlockSpec(2, 1, 2, 3),),
        scale_block=BlockSpec(2, 1, 0, 1),
        pool_windows=(3,),
        downsample_factor=2,
    )
    base.update(kw)
    return FeatMapConfig(**base)


@pytest.fixture(scope="module")
def default_net():
    return build_featmapnet(FeatMapConfig(), rng_seed=3)


def test_default_channel_count(default_net):
    net, _ = default_net
    assert net.config.d_scale == 8
    assert net.config.out_channels == 3 * 3 * 8 == 72
    fmap = featmap_forward(net, np.random.default_rng(0).uniform(size=(3, 64, 64)))
    assert fmap.tensor.shape == (72, 5, 5)


def test_64_input_gives_5x5(default_net):
    net, _ = default_net
    assert net.output_size(64, 64) == (5, 5) == (math.ceil(76.8 / 16),) * 2


@settings(max_examples=40, deadline=None)
@given(st.integers(40, 120), st.integers(40, 120))
def test_output_size_follows_largest_scale(h, w):
    net, _ = build_featmapnet(FeatMapConfig(), rng_seed=0)
    assert net.output_size(h, w) == (
        math.ceil(scaled_size(h, 1.2) / 16),
        math.ceil(scaled_size(w, 1.2) / 16),
    )


def test_same_seed_same_parameters():
    _, a = build_featmapnet(FeatMapConfig(), rng_seed=11)
    _, b = build_featmapnet(FeatMapConfig(), rng_seed=11)
    _, c = build_featmapnet(FeatMapConfig(), rng_seed=12)
    assert a.names() == b.names()
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.names())
    assert not all(np.array_equal(a[n].data, c[n].data) for n in a.names())


def test_parameter_names(default_net):
    _, params = default_net
    names = params.names()
    shared = [n for n in names if n.startswith("trunk.")]
    per_scale = [n for n in names if not n.startswith("trunk.")]
    assert shared and per_scale
    assert not any("scale" in n for n in shared)
    for n in per_scale:
        idx = [i for i in range(3) if f"scale{i}." in n]
        assert len(idx) == 1, n
    # one weight + one bias per scale in the scale-specific block
    assert len(per_scale) == 3 * 2


def test_glorot_range():
    _, params = build_featmapnet(tiny_config(), rng_seed=0)
    w = params["trunk.block1.conv1.weight"].data  # [2, 3, 3, 3]
    r = math.sqrt(6.0 / (3 * 9 + 2 * 9))
    assert np.all(np.abs(w) <= r)
    assert np.abs(w).max() > 0.5 * r


@pytest.mark.parametrize(
    "kw, field",
    [
        (dict(scales=(0.4, 1.2)), "scales"),
        (dict(pool_windows=(4,)), "pool_windows"),
        (dict(downsample_factor=8), "downsample_factor"),
        (dict(input_scale=0.0), "input_scale"),
    ],
)
def test_invalid_config_names_field(kw, field):
    with pytest.raises(ValueError, match=field):
        build_featmapnet(tiny_config(**kw), rng_seed=0)


def test_too_small_image_reports_minimum(default_net):
    net, _ = default_net
    with pytest.raises(ValueError, match="minimum size is 40x40"):
        featmap_forward(net, np.zeros((3, 30, 64)))


def test_wrong_channel_count_rejected(default_net):
    net, _ = default_net
    with pytest.raises(ValueError, match=r"\[3,H,W\]"):
        featmap_forward(net, np.zeros((4, 64, 64)))


def test_forward_is_deterministic(default_net):
    net, _ = default_net
    x = np.random.default_rng(1).uniform(size=(3, 48, 56))
    assert np.array_equal(featmap_forward(net, x).tensor.data, featmap_forward(net, x).tensor.data)


def test_batched_forward_matches_single():
    net, _ = build_featmapnet(tiny_config(scales=(1.0, 0.5), downsample_factor=2), rng_seed=4)
    xs = np.random.default_rng(2).uniform(size=(2, 3, 8, 8))
    batched = net(xs).tensor.data
    for i in range(2):
        np.testing.assert_allclose(batched[i], net(xs[i]).tensor.data, atol=1e-12)


# -- sliding pyramid pooling ------------------------------------------------


def test_pyramid_spike():
    m = np.zeros((1, 9, 9))
    m[0, 4, 4] = 7.0
    out = sliding_pyramid_pool(m, [5]).data
    expected = np.zeros((9, 9))
    expected[2:7, 2:7] = 7.0
    assert out.shape == (2, 9, 9)
    assert np.array_equal(out[0], m[0])
    assert np.array_equal(out[1], expected)


def test_pyramid_channel_count():
    out = sliding_pyramid_pool(np.random.default_rng(0).standard_normal((1, 6, 6)), [9, 5])
    assert out.shape == (3, 6, 6)


def test_pyramid_order_is_ascending():
    m = np.random.default_rng(0).standard_normal((1, 7, 7))
    out = sliding_pyramid_pool(m, [9, 5]).data
    np.testing.assert_array_equal(out[1], nn.max_pool2d(m, 5, 1, 2).data[0])
    np.testing.assert_array_equal(out[2], nn.max_pool2d(m, 9, 1, 4).data[0])


def test_pyramid_even_window_rejected():
    with pytest.raises(ValueError, match="odd"):
        sliding_pyramid_pool(np.zeros((1, 5, 5)), [4])


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.integers(1, 3), st.integers(3, 8), st.integers(3, 8))
def test_pyramid_constant_map(c, d, h, w):
    out = sliding_pyramid_pool(np.full((d, h, w), c), [5, 9]).data
    assert out.shape == (3 * d, h, w)
    assert np.all(out == c)


def test_pyramid_preserves_spatial_size():
    m = np.random.default_rng(0).standard_normal((2, 5, 7))
    assert sliding_pyramid_pool(m, [5, 9]).shape[-2:] == (5, 7)


# -- gradients ----------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_tiny_config_gradcheck(seed):
    rng = np.random.default_rng(seed)
    net, params = build_featmapnet(tiny_config(), rng_seed=seed)
    for _, t in params.items():
        if t.name.endswith("bias"):
            t.data[...] = rng.uniform(0.05, 0.2, t.data.shape)
    image = Tensor(rng.uniform(size=(3, 8, 8)))
    tensors = [t for _, t in params.items()]
    err = nn.gradcheck(lambda: nn.total(featmap_forward(net, image).tensor), tensors)
    assert err < 1e-4


def test_shared_block_gradient_sums_all_scales():
    cfg = tiny_config(scales=(1.0, 0.75, 0.5), pool_windows=())
    net, params = build_featmapnet(cfg, rng_seed=5)
    for _, t in params.items():
        if t.name.endswith("bias"):
            t.data[...] = 0.1
    image = np.random.default_rng(5).uniform(size=(3, 12, 12))
    shared = params["trunk.block1.conv1.weight"]
    d = cfg.d_scale

    def shared_grad(channels):
        params.zero_grad()
        with nn.Tape() as tape:
            out = featmap_forward(net, image).tensor
            mask = np.zeros(out.shape)
            mask[channels] = 1.0
            loss = nn.total(nn.linear(nn.reshape(out, (1, -1)), Tensor(mask.reshape(1, -1)), Tensor(np.zeros(1))))
        tape.backward(loss)
        return shared.grad.copy()

    per_scale = [shared_grad(slice(i * d, (i + 1) * d)) for i in range(3)]
    total = shared_grad(slice(None))
    np.testing.assert_allclose(sum(per_scale), total, atol=1e-12)
    for g in per_scale:
        assert np.abs(g).max() > 0
    # dropping any one scale changes the shared gradient
    for i in range(3):
        assert not np.allclose(total - per_scale[i], total)


def test_plain_fcn_configuration():
    cfg = tiny_config(pool_windows=())
    net, _ = build_featmapnet(cfg, rng_seed=0)
    assert net(np.zeros((3, 8, 8))).tensor.shape == (cfg.d_scale, 4, 4)


# -- input transform and reflection averaging ---------------------------------


def test_input_transform_matches_manual():
    plain, params = build_featmapnet(tiny_config(), rng_seed=2)
    shifted, _ = build_featmapnet(tiny_config(input_shift=-0.5, input_scale=4.0), rng_seed=2)
    x = np.random.default_rng(0).uniform(size=(3, 8, 8))
    np.testing.assert_allclose(shifted(x).tensor.data, plain((x - 0.5) * 4.0).tensor.data, atol=1e-12)


def test_reflect_average_is_exactly_equivariant():
    net, _ = build_featmapnet(FeatMapConfig(reflect_average=True), rng_seed=0)
    x = np.random.default_rng(0).uniform(size=(3, 64, 64))
    a = net(x).tensor.data
    b = net(x[:, ::-1].copy()).tensor.data[:, ::-1]
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_reflect_average_gradcheck():
    rng = np.random.default_rng(9)
    net, params = build_featmapnet(tiny_config(reflect_average=True), rng_seed=9)
    for _, t in params.items():
        if t.name.endswith("bias"):
            t.data[...] = rng.uniform(0.05, 0.2, t.data.shape)
    image = Tensor(rng.uniform(size=(3, 8, 8)))
    tensors = [t for _, t in params.items()]
    assert nn.gradcheck(lambda: nn.total(net(image).tensor), tensors) < 1e-4


def test_receptive_boxes_tile_the_image():
    boxes = receptive_boxes(5, 5, 64, 64)
    cover = np.zeros((64, 64), dtype=int)
    for y0, x0, y1, x1 in boxes.reshape(-1, 4):
        cover[y0:y1, x0:x1] += 1
    assert np.all(cover == 1)
