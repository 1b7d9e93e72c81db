import numpy as np
import pytest
from hypothesis import given, strategies as st

from cottad import tensor as T
from cottad.tensor import ConvParams, Tensor

from oracles import conv2d_loops, maxpool_loops, space_to_depth_loops


@st.composite
def conv_cases(draw):
    g = draw(st.sampled_from([1, 2, 3]))
    cin, cout = g * draw(st.integers(1, 2)), g * draw(st.integers(1, 2))
    kh, kw = draw(st.integers(1, 3)), draw(st.integers(1, 3))
    stride, dil = draw(st.integers(1, 2)), draw(st.integers(1, 2))
    pad = tuple(draw(st.integers(0, 2)) for _ in range(4))
    h = draw(st.integers(dil * (kh - 1) + 1, 6))
    w = draw(st.integers(dil * (kw - 1) + 1, 6))
    seed = draw(st.integers(0, 2**31))
    return ConvParams(cin, cout, kh, kw, stride, pad, dil, g), (draw(st.integers(1, 2)), cin, h, w), seed


@given(conv_cases())
def test_conv2d_matches_direct_loops(case):
    p, shape, seed = case
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal(shape), rng.standard_normal(p.weight_shape()), rng.standard_normal(p.out_channels)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), p).data
    want = conv2d_loops(x, w, b, p.stride, p.padding, p.dilation, p.groups)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
    assert got.shape[2:] == p.out_size(*shape[2:])


def test_conv2d_per_sample_weights():
    rng = np.random.default_rng(1)
    p = ConvParams.square(2, 3, 3, stride=2)
    x, w = rng.standard_normal((3, 2, 5, 5)), rng.standard_normal((3, 3, 2, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), None, p).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, None, 2, p.padding), rtol=1e-12, atol=1e-12)


def test_conv_params_validation():
    with pytest.raises(ValueError):
        ConvParams(3, 4, 3, 3, groups=2)
    with pytest.raises(ValueError):
        ConvParams(2, 2, 3, 3, stride=0)
    with pytest.raises(ValueError):
        ConvParams.square(1, 1, 5, padding=0).out_size(3, 3)


def test_single_conv_macs_closed_form():
    p = ConvParams.square(3, 16, 3)
    with T.profile() as recs:
        T.conv2d(Tensor(np.zeros((1, 3, 64, 64))), Tensor(np.zeros(p.weight_shape())), None, p)
    assert [r.macs for r in recs] == [3 * 3 * 3 * 16 * 64 * 64] == [1_769_472]


@given(st.sampled_from([1, 3, 5]), st.integers(1, 2), st.integers(0, 2**31))
def test_maxpool_matches_loops(k, stride, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 6, 7))
    np.testing.assert_array_equal(T.maxpool2d(Tensor(x), k, stride).data, maxpool_loops(x, k, stride))


def test_maxpool_even_kernel_needs_explicit_padding():
    with pytest.raises(ValueError):
        T.maxpool2d(Tensor(np.zeros((1, 1, 4, 4))), 2)
    assert T.maxpool2d(Tensor(np.zeros((1, 1, 4, 4))), 2, stride=2, padding=0).shape == (1, 1, 2, 2)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_space_to_depth_channel_order(s, hb, wb, seed):
    x = np.random.default_rng(seed).standard_normal((2, 3, s * hb, s * wb))
    np.testing.assert_array_equal(T.space_to_depth(Tensor(x), s).data, space_to_depth_loops(x, s))


@given(st.integers(1, 4), st.integers(0, 2**31))
def test_depth_to_space_inverts_space_to_depth(s, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 2 * s, 3 * s))
    y = T.depth_to_space(T.space_to_depth(Tensor(x), s), s).data
    assert np.array_equal(y, x)


def test_space_to_depth_rejects_ragged_input():
    with pytest.raises(ValueError):
        T.space_to_depth(Tensor(np.zeros((1, 1, 5, 4))), 2)


def test_concat_narrow_roundtrip_and_upsample():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
    c = T.concat([Tensor(a), Tensor(b)], 1)
    assert np.array_equal(T.narrow(c, 1, 2, 3).data, b)
    up = T.upsample_nearest(Tensor(a), 2).data
    assert np.array_equal(up[:, :, ::2, ::2], a) and np.array_equal(up[:, :, 1::2, 1::2], a)


def test_backward_accumulates_on_reused_leaf():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = T.sum_(T.mul(x, x) + x)
    y.backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_broadcast_is_restricted():
    a = Tensor(np.ones((2, 3, 4, 4)))
    assert T.mul(a, Tensor(np.ones((2, 3, 1, 1)))).shape == (2, 3, 4, 4)
    assert T.mul(a, Tensor(np.ones((2, 1, 1, 1)))).shape == (2, 3, 4, 4)
    with pytest.raises(ValueError):
        T.add(a, Tensor(np.ones((2, 3, 4, 1))))


def test_precision_modes():
    with T.precision("bench32"):
        assert Tensor([1.0]).dtype == np.float32
    with T.precision("verify64"):
        assert Tensor([1.0]).dtype == np.float64
        with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
            T.mul(Tensor([np.inf]), 0.0)
    with pytest.raises(ValueError):
        with T.precision("half"):
            pass


def test_precision_env(monkeypatch):
    monkeypatch.setenv("COTTAD_PRECISION", "bench32")
    assert T.precision_mode() == "bench32"
    monkeypatch.setenv("COTTAD_PRECISION", "fp8")
    with pytest.raises(ValueError):
        T.default_dtype()


def test_softmax_rows_sum_to_one_and_log_softmax_consistent():
    z = np.random.default_rng(3).standard_normal((4, 5)) * 30
    s = T.softmax(Tensor(z), axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(z), axis=1).data), s, atol=1e-12)


def test_gradcheck_detects_wrong_derivative():
    wrong = lambda x: T.unary(x, np.sin, lambda a, _y: np.sin(a), "bad")
    errs = T.gradcheck(wrong, [Tensor(np.linspace(0.1, 1.0, 5))])
    assert errs[0] > 1e-2


def test_gradcheck_requires_verify64():
    with T.precision("bench32"):
        with pytest.raises(RuntimeError):
            T.gradcheck(T.sigmoid, [Tensor(np.zeros(2))])


def test_kink_tracking_reports_relu_distance():
    with T.track_kinks() as k:
        T.relu(Tensor(np.array([0.5, -2e-4, 3.0])))
    assert k["relu"] == pytest.approx(2e-4)
    assert not T.tracking_kinks()
