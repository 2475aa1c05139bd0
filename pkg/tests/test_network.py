import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shark.autodiff import Tensor
from shark.exceptions import ConfigError, ShapeError, ValidationError
from shark.network import (
    ConvParams,
    ModelConfig,
    MultiChannelParams,
    RCBAMParams,
    channel_attention,
    expected_parameter_count,
    gating_forward,
    init_params,
    layer_shapes,
    multichannel_forward,
    params_from_arrays,
    rcbam_forward,
    shark_forward,
    spatial_attention,
)

from oracles import channel_attention_loops, conv_loops, rcbam_loops, sigmoid, silu, spatial_attention_loops


def conv(rng, cin, cout, k, zero=False, scale=0.3):
    if zero:
        return ConvParams(Tensor(np.zeros((cout, cin, k, k))), Tensor(np.zeros((1, cout, 1, 1))))
    return ConvParams(
        Tensor(rng.normal(0, scale, (cout, cin, k, k))), Tensor(rng.normal(0, scale, (1, cout, 1, 1)))
    )


def rcbam(rng, cin, cout, reduction=2, zero=False):
    hidden = max(1, cout // reduction)
    return RCBAMParams(
        conv(rng, cin, cout, 3, zero),
        conv(rng, cout, cout, 3, zero),
        conv(rng, cout, hidden, 1, zero),
        conv(rng, hidden, cout, 1, zero),
        conv(rng, 2, 1, 7, zero),
        conv(rng, cin, cout, 1, zero) if cin != cout else None,
    )


def np_pair(c):
    return c.weight.data, c.bias.data.reshape(-1)


def as_dict(p):
    return {n: (None if getattr(p, n) is None else np_pair(getattr(p, n)))
            for n in ("conv1", "conv2", "mlp1", "mlp2", "spatial", "shortcut")}


# -- blocks --------------------------------------------------------------------------


def test_channel_attention_examples(rng):
    p = rcbam(rng, 4, 4, zero=True)
    np.testing.assert_array_equal(channel_attention(Tensor(np.zeros((1, 4, 5, 5))), p).data, 0)
    f2 = rng.normal(size=(1, 4, 5, 5))
    np.testing.assert_allclose(channel_attention(Tensor(f2), p).data, f2 * 0.5, atol=0)
    # identical channels through a channel-symmetric MLP -> identical weights
    p = rcbam(rng, 4, 4)
    p.mlp1.weight.data[...] = rng.normal(size=(2, 1, 1, 1))
    p.mlp2.weight.data[...] = rng.normal(size=(1, 2, 1, 1))
    p.mlp2.bias.data[...] = 0.1
    same = np.repeat(rng.normal(size=(1, 1, 5, 5)), 4, axis=1)
    ratio = channel_attention(Tensor(same), p).data / same
    np.testing.assert_allclose(ratio, np.broadcast_to(ratio[:, :1], ratio.shape), rtol=1e-12)


def test_channel_attention_oracle(rng):
    for _ in range(5):
        p = rcbam(rng, 6, 6, reduction=3)
        f2 = rng.normal(size=(1, 6, 5, 4))
        ref = channel_attention_loops(
            f2[0], p.mlp1.weight.data[:, :, 0, 0], p.mlp1.bias.data.ravel(),
            p.mlp2.weight.data[:, :, 0, 0], p.mlp2.bias.data.ravel(),
        )
        np.testing.assert_allclose(channel_attention(Tensor(f2), p).data[0], ref, atol=1e-5)


def test_channel_attention_shape_error(rng):
    with pytest.raises(ShapeError):
        channel_attention(Tensor(np.zeros((1, 3, 4, 4))), rcbam(rng, 4, 4))


def test_spatial_attention_examples(rng):
    p = rcbam(rng, 3, 3, zero=True)
    fc = rng.normal(size=(1, 3, 6, 6))
    np.testing.assert_array_equal(spatial_attention(Tensor(fc), p).data, fc / 2)
    np.testing.assert_array_equal(spatial_attention(Tensor(np.zeros((1, 3, 6, 6))), rcbam(rng, 3, 3)).data, 0)


def test_spatial_attention_oracle(rng):
    for _ in range(5):
        p = rcbam(rng, 3, 3)
        fc = rng.normal(size=(1, 3, 9, 8))
        ref = spatial_attention_loops(fc[0], *np_pair(p.spatial))
        np.testing.assert_allclose(spatial_attention(Tensor(fc), p).data[0], ref, atol=1e-5)


def test_rcbam_zero_weight_identity(rng):
    p = rcbam(rng, 5, 5, zero=True)
    for dtype in (np.float32, np.float64):
        x = rng.normal(size=(2, 5, 8, 8)).astype(dtype)
        np.testing.assert_array_equal(rcbam_forward(Tensor(x), p).data, x)


def test_rcbam_zero_input(rng):
    p = rcbam(rng, 4, 4)
    for c in (p.conv1, p.conv2, p.mlp1, p.mlp2, p.spatial):
        c.bias.data[...] = 0
    np.testing.assert_array_equal(rcbam_forward(Tensor(np.zeros((1, 4, 6, 6))), p).data, 0)


@pytest.mark.parametrize("cin,cout", [(4, 4), (3, 6)])
def test_rcbam_oracle(rng, cin, cout):
    for _ in range(3):
        p = rcbam(rng, cin, cout)
        x = rng.normal(size=(1, cin, 6, 7))
        ref = rcbam_loops(x[0], as_dict(p))
        out = rcbam_forward(Tensor(x), p)
        assert out.shape == (1, cout, 6, 7)
        np.testing.assert_allclose(out.data[0], ref, atol=1e-4)


def test_rcbam_shape_error(rng):
    with pytest.raises(ShapeError):
        rcbam_forward(Tensor(np.zeros((1, 2, 4, 4))), rcbam(rng, 4, 4))


def test_multichannel_examples(rng):
    zero = MultiChannelParams(conv(rng, 4, 4, 3, True), conv(rng, 4, 4, 3, True), conv(rng, 4, 4, 1, True))
    zero.conv1.bias.data[...] = np.arange(4).reshape(1, 4, 1, 1)
    out = multichannel_forward(Tensor(rng.normal(size=(1, 4, 5, 5))), zero).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.arange(4.0).reshape(1, 4, 1, 1), out.shape))

    def centred_identity(k):
        w = np.zeros((4, 4, k, k))
        w[np.arange(4), np.arange(4), k // 2, k // 2] = 1.0
        return ConvParams(Tensor(w), Tensor(np.zeros((1, 4, 1, 1))))

    ident = MultiChannelParams(centred_identity(3), centred_identity(3), centred_identity(1))
    x = rng.uniform(0.1, 2.0, size=(1, 4, 5, 5))
    np.testing.assert_allclose(multichannel_forward(Tensor(x), ident).data, silu(silu(x)), atol=1e-12)

    p = MultiChannelParams(conv(rng, 16, 16, 3), conv(rng, 16, 16, 3), conv(rng, 16, 16, 1))
    assert multichannel_forward(Tensor(np.zeros((1, 16, 32, 32))), p).shape == (1, 16, 32, 32)
    with pytest.raises(ShapeError):
        multichannel_forward(Tensor(np.zeros((1, 8, 4, 4))), p)


def test_multichannel_oracle(rng):
    p = MultiChannelParams(conv(rng, 3, 3, 3), conv(rng, 3, 3, 3), conv(rng, 3, 3, 1))
    x = rng.normal(size=(1, 3, 6, 6))
    ref = conv_loops(silu(conv_loops(silu(conv_loops(x[0], *np_pair(p.conv3a))), *np_pair(p.conv3b))), *np_pair(p.conv1))
    np.testing.assert_allclose(multichannel_forward(Tensor(x), p).data[0], ref, atol=1e-5)


def test_gating_examples(rng):
    f = rng.normal(size=(2, 5, 4, 4))
    np.testing.assert_array_equal(gating_forward(Tensor(f), conv(rng, 5, 1, 1, zero=True)).data, f / 2)
    np.testing.assert_array_equal(gating_forward(Tensor(np.zeros((1, 5, 4, 4))), conv(rng, 5, 1, 1)).data, 0)
    g = conv(rng, 5, 1, 1)
    ref = f * sigmoid(np.einsum("oc,nchw->nohw", g.weight.data[:, :, 0, 0], f) + g.bias.data)
    np.testing.assert_allclose(gating_forward(Tensor(f), g).data, ref, atol=1e-6)


# -- full network ------------------------------------------------------------------


def test_forward_shape_and_range(rng):
    params = init_params(ModelConfig(base_channels=4, cbam_reduction=2), seed=0)
    x = rng.uniform(size=(1, 3, 64, 64)).astype(np.float32)
    out = shark_forward(Tensor(x), params).data
    assert out.shape == (1, 3, 64, 64) and out.dtype == np.float32
    assert np.all(out > 0) and np.all(out < 1)


@pytest.mark.slow
def test_forward_training_resolution():
    params = init_params(ModelConfig(base_channels=4, cbam_reduction=2), seed=0)
    x = np.random.default_rng(0).uniform(size=(2, 3, 256, 256)).astype(np.float32)
    assert shark_forward(Tensor(x), params).shape == (2, 3, 256, 256)


def test_forward_deterministic(rng):
    x = rng.uniform(size=(1, 3, 32, 32)).astype(np.float32)
    cfg = ModelConfig(base_channels=4, cbam_reduction=2)
    a = shark_forward(Tensor(x), init_params(cfg, seed=7)).data
    b = shark_forward(Tensor(x), init_params(cfg, seed=7)).data
    np.testing.assert_array_equal(a, b)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 1.0, None]))
def test_forward_output_open_interval(seed, fill):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(1, 3, 16, 16)) if fill is None else np.full((1, 3, 16, 16), fill)
    params = init_params(ModelConfig(base_channels=2, cbam_reduction=2), seed=seed)
    out = shark_forward(Tensor(x.astype(np.float32)), params).data
    assert np.all(out > 0) and np.all(out < 1)


def test_forward_input_errors():
    params = init_params(ModelConfig(base_channels=2, cbam_reduction=2))
    with pytest.raises(ShapeError):
        shark_forward(Tensor(np.zeros((1, 3, 24, 16), np.float32)), params)
    with pytest.raises(ShapeError):
        shark_forward(Tensor(np.zeros((1, 1, 16, 16), np.float32)), params)
    with pytest.raises(ValidationError):
        shark_forward(Tensor(np.full((1, 3, 16, 16), 1.5, np.float32)), params)
    bad = np.zeros((1, 3, 16, 16), np.float32)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        shark_forward(Tensor(bad), params)


# -- init and structure --------------------------------------------------------------


def test_init_determinism_and_bounds():
    cfg = ModelConfig(base_channels=4, cbam_reduction=2)
    a, b, c = init_params(cfg, 1), init_params(cfg, 1), init_params(cfg, 2)
    na, nb, nc = a.named_parameters(), b.named_parameters(), c.named_parameters()
    assert list(na) == list(nb)
    for k in na:
        np.testing.assert_array_equal(na[k].data, nb[k].data)
    assert any(not np.array_equal(na[k].data, nc[k].data) for k in na if k.endswith("weight"))
    for k, t in na.items():
        if k.endswith(".bias"):
            assert not t.data.any()
        else:
            bound = np.sqrt(6.0 / np.prod(t.shape[1:]))
            assert np.abs(t.data).max() <= bound


def _count(base, red):
    """Closed-form parameter count, written independently of the layer table."""

    def conv(i, o, k):
        return o * i * k * k + o

    def block(i, o):
        h = max(1, o // red)
        n = conv(i, o, 3) + conv(o, o, 3) + conv(o, h, 1) + conv(h, o, 1) + conv(2, 1, 7)
        return n + (conv(i, o, 1) if i != o else 0)

    w = [base * 2**level for level in range(4)]
    total = block(3, w[0]) + sum(block(w[i - 1], w[i]) for i in range(1, 4))
    total += sum(2 * conv(c, c, 3) + conv(c, c, 1) for c in w)
    total += block(w[3], w[3])
    total += sum(block(w[i] + (w[i + 1] if i < 3 else w[3]), w[i]) for i in range(4))
    total += sum(conv(c, 1, 1) for c in w) + conv(w[0], 3, 1)
    return total


@pytest.mark.parametrize("base,red", [(4, 8), (8, 8), (16, 8), (16, 4), (3, 2)])
def test_parameter_count_closed_form(base, red):
    cfg = ModelConfig(base_channels=base, cbam_reduction=red)
    assert expected_parameter_count(cfg) == _count(base, red)
    assert init_params(cfg).num_parameters() == _count(base, red)


def test_named_parameters_order_and_names():
    params = init_params(ModelConfig(base_channels=4))
    names = list(params.named_parameters())
    assert names[0] == "encoders.0.conv1.weight" and names[-1] == "head.bias"
    assert set(names) == set(layer_shapes(params.config))
    assert "encoders.0.shortcut.weight" in names and "bottleneck.shortcut.weight" not in names


def test_skip_law_checked_at_construction():
    cfg = ModelConfig(base_channels=4)
    arrays = {k: t.data for k, t in init_params(cfg).named_parameters().items()}
    params = params_from_arrays(cfg, arrays)
    rng = np.random.default_rng(0)
    params.decoders[1] = rcbam(rng, 8, 8)
    with pytest.raises(ShapeError):
        type(params)(cfg, params.encoders, params.multichannel, params.bottleneck,
                     params.decoders, params.gates, params.head)
    arrays["head.weight"] = np.zeros((3, 5, 1, 1), np.float32)
    with pytest.raises(ShapeError):
        params_from_arrays(cfg, arrays)
    del arrays["head.weight"]
    with pytest.raises(ShapeError):
        params_from_arrays(cfg, arrays)


@pytest.mark.parametrize("kwargs", [{"base_channels": 0}, {"cbam_reduction": 0}, {"input_channels": 1}])
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)
    with pytest.raises(ConfigError):
        init_params({"base_channels": 4})


def test_config_widths_and_hidden():
    cfg = ModelConfig()
    assert cfg.widths() == [16, 32, 64, 128]
    assert cfg.hidden(16) == 2 and cfg.hidden(4) == 1
