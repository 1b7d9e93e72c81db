import numpy as np
import pytest
from hypothesis import given, strategies as st

from cottad import tensor as T
from cottad.blocks import (
    DRFSPPF, NGAM, ODConv, SPDConv, SPPF,
    BlockConfigError, DrfsppfConfig, GateMode, NgamConfig, OdconvConfig, SppfConfig, SpdconvConfig,
    largest_odd_at_most, odconv_attention, odconv_forward, odconv_forward_literal, pyramid_pool,
)
from cottad.tensor import ConvParams, Tensor

from oracles import conv2d_loops


def _x(seed, *shape):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


# -- NGAM --------------------------------------------------------------------------


@pytest.mark.parametrize("mode", list(GateMode))
def test_ngam_preserves_shape(mode):
    blk = NGAM(NgamConfig(8, reduction=4, gate_mode=mode), np.random.default_rng(0))
    assert blk(_x(1, 2, 8, 5, 6)).shape == (2, 8, 5, 6)


def test_ngam_sigmoid_gates_bound_the_output():
    blk = NGAM(NgamConfig(4, reduction=2, gate_mode=GateMode.KEEP_SIGMOID_GATES), np.random.default_rng(0))
    x = np.abs(_x(2, 1, 4, 6, 6).data)
    y = blk(Tensor(x)).data
    # two sigmoid gates in (0, 1) can only shrink a non-negative input
    assert np.all(y >= 0) and np.all(y <= x)


def test_ngam_weight_count_closed_form():
    c, r, k = 16, 4, 7
    h = c // r
    blk = NGAM(NgamConfig(c, reduction=r, spatial_kernel=k))
    assert blk.num_params() == (h * c + h) + (c * h + c) + (h * c * k * k + h) + (c * h * k * k + c)


def test_ngam_starts_near_identity():
    # final biases of 1 give NeLU(1) = 1 gates before training
    blk = NGAM(NgamConfig(8, reduction=4), np.random.default_rng(0))
    x = _x(3, 1, 8, 6, 6).data
    y = blk(Tensor(x)).data
    assert np.corrcoef(x.ravel(), y.ravel())[0, 1] > 0.9


def test_ngam_config_errors():
    with pytest.raises(BlockConfigError):
        NgamConfig(6, reduction=4)
    with pytest.raises(BlockConfigError):
        NgamConfig(8, spatial_kernel=4)
    with pytest.raises(BlockConfigError):
        NgamConfig(8, activation="tanh")
    with pytest.raises(ValueError):
        NgamConfig(8, gate_mode="Softmax")


# -- DRFSPPF / SPPF ------------------------------------------------------------------------


@pytest.mark.parametrize("value, expected", [(11 / 3, 3), (7 / 2, 3), (3.0, 3), (5 / 3, 1), (9 / 3, 3), (6.0, 5), (1.0, 1)])
def test_largest_odd_at_most(value, expected):
    assert largest_odd_at_most(value) == expected


def test_drfsppf_kernel_derivation():
    cfg = DrfsppfConfig(8, 8, large_kernel=11, dilation=3)
    assert (cfg.directional_kernel, cfg.dilated_kernel, cfg.pooled_channels) == (5, 3, 32)
    with pytest.raises(BlockConfigError):
        DrfsppfConfig(8, 8, large_kernel=1, dilation=3)
    with pytest.raises(BlockConfigError):
        DrfsppfConfig(8, 8, large_kernel=10)


@given(st.integers(1, 3), st.integers(1, 14), st.integers(1, 14), st.integers(0, 2**31))
def test_pool_cascade_equals_direct_pools(c, h, w, seed):
    x = _x(seed, 1, c, h, w)
    y = pyramid_pool(x, 5).data
    np.testing.assert_array_equal(y[:, c:2 * c], T.maxpool2d(x, 5).data)
    np.testing.assert_array_equal(y[:, 2 * c:3 * c], T.maxpool2d(x, 9).data)
    np.testing.assert_array_equal(y[:, 3 * c:], T.maxpool2d(x, 13).data)


def test_drfsppf_and_sppf_shapes():
    x = _x(0, 2, 6, 7, 5)
    assert DRFSPPF(DrfsppfConfig(6, 4), np.random.default_rng(0))(x).shape == (2, 4, 7, 5)
    assert SPPF(SppfConfig(6, 4), np.random.default_rng(0))(x).shape == (2, 4, 7, 5)


def test_drfsppf_recalibration_is_hadamard_with_input():
    # zero input gives zero output (before the projection bias): the recalibrated map is f * x
    blk = DRFSPPF(DrfsppfConfig(4, 3), np.random.default_rng(0))
    y = blk(Tensor(np.zeros((1, 4, 5, 5)))).data
    np.testing.assert_allclose(y, np.broadcast_to(blk.params["proj.bias"].data[None, :, None, None], y.shape), atol=0)


# -- ODConv --------------------------------------------------------------------------------


@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 2**31))
def test_odconv_single_kernel_is_standard_conv(cin, cout, k, stride, seed):
    cfg = OdconvConfig(cin, cout, kernel_size=k, stride=stride, num_kernels=1, reduction=1)
    blk = ODConv(cfg, np.random.default_rng(seed))
    x = _x(seed + 1, 2, cin, 5, 6)
    got = blk(x).data
    geo = cfg.geometry
    want = conv2d_loops(x.data, blk.params["kernels"].data[0], None, geo.stride, geo.padding, 1, 1)
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)


@given(st.integers(1, 6), st.floats(0.1, 10), st.integers(0, 2**31))
def test_odconv_attention_is_a_distribution(k, temp, seed):
    cfg = OdconvConfig(4, 4, num_kernels=k, temperature=temp)
    blk = ODConv(cfg, np.random.default_rng(seed))
    alpha = odconv_attention(_x(seed, 3, 4, 5, 5) * 10.0, cfg, blk.params).data
    assert alpha.shape == (3, k)
    assert np.all(alpha >= 0)
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)


def test_odconv_fused_equals_literal_sum():
    cfg = OdconvConfig(4, 6, kernel_size=3, stride=2, groups=2, num_kernels=3, reduction=2)
    blk = ODConv(cfg, np.random.default_rng(5))
    x = _x(6, 2, 4, 7, 7)
    np.testing.assert_allclose(odconv_forward(x, cfg, blk.params).data, odconv_forward_literal(x, cfg, blk.params).data,
                               rtol=1e-12, atol=1e-12)


def test_odconv_config_errors():
    with pytest.raises(BlockConfigError):
        OdconvConfig(4, 4, num_kernels=0)
    with pytest.raises(BlockConfigError):
        OdconvConfig(4, 4, temperature=0)
    with pytest.raises(ValueError):
        OdconvConfig(3, 4, groups=2)


# -- SPDConv -------------------------------------------------------------------------------


@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 3), st.integers(0, 2**31))
def test_spdconv_is_conv_on_space_to_depth(cin, cout, s, seed):
    cfg = SpdconvConfig(cin, cout, scale=s, kernel_size=1)
    blk = SPDConv(cfg, np.random.default_rng(seed))
    x = _x(seed, 1, cin, 2 * s, 3 * s)
    got = blk(x).data
    f = T.space_to_depth(x, s).data
    want = conv2d_loops(f, blk.params["conv.weight"].data, blk.params["conv.bias"].data)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
    assert got.shape == (1, cout, 2, 3)


def test_spdconv_keeps_every_pixel():
    # unlike a stride-2 conv, every input pixel reaches the output
    cfg = SpdconvConfig(1, 1, scale=2)
    blk = SPDConv(cfg, np.random.default_rng(0))
    blk.params["conv.weight"] = Tensor(np.ones(cfg.geometry.weight_shape()), requires_grad=True)
    x = Tensor(np.zeros((1, 1, 4, 4)), requires_grad=True)
    T.sum_(blk(x)).backward()
    assert np.all(x.grad != 0)
    stride2 = ConvParams.square(1, 1, 1, stride=2)
    x2 = Tensor(np.zeros((1, 1, 4, 4)), requires_grad=True)
    T.sum_(T.conv2d(x2, Tensor(np.ones((1, 1, 1, 1))), None, stride2)).backward()
    assert np.count_nonzero(x2.grad) == 4


def test_spdconv_rejects_indivisible_input():
    blk = SPDConv(SpdconvConfig(1, 1, scale=2))
    with pytest.raises(ValueError):
        blk(_x(0, 1, 1, 5, 4))


def test_state_dict_roundtrip():
    a = ODConv(OdconvConfig(4, 4), np.random.default_rng(0))
    b = ODConv(OdconvConfig(4, 4), np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    x = _x(2, 1, 4, 5, 5)
    np.testing.assert_array_equal(a(x).data, b(x).data)
    with pytest.raises((KeyError, ValueError)):
        b.load_state_dict({"kernels": np.zeros(3)})
