import numpy as np
import pytest

from lpanet import functional as F
from lpanet.errors import ConfigError, DimensionError
from lpanet.esm import (OFFSET_CHANNELS, ExplicitAlignment, deform_conv, enhance, esm_forward,
                        estimate_offsets, mean_offsets)
from lpanet.gradcheck import check_gradients
from lpanet.tensor import Tensor, default_dtype

import oracles


def test_enhance_gate_one_is_identity(rng):
    f = rng.standard_normal((3, 4, 4))
    np.testing.assert_allclose(enhance(f, np.ones((2, 4, 4))).data, f, rtol=1e-6)


def test_enhance_gate_zero_is_zero(rng):
    out = enhance(rng.standard_normal((3, 4, 4)), np.zeros((2, 4, 4))).data
    assert not out.any()


def test_enhance_single_pixel_halved(rng):
    f = rng.standard_normal((3, 4, 4))
    scores = np.ones((2, 4, 4))
    scores[:, 1, 2] = 0.5
    out = enhance(f, scores).data
    expected = f.copy()
    expected[:, 1, 2] *= 0.5
    np.testing.assert_allclose(out, expected, rtol=1e-6)


def test_enhance_max_versus_mean(rng):
    f = rng.standard_normal((2, 3, 3))
    s = rng.uniform(0, 1, (4, 3, 3))
    with default_dtype(np.float64):
        np.testing.assert_allclose(enhance(f, s, "max").data, f * s.max(axis=0), atol=1e-12)
        np.testing.assert_allclose(enhance(f, s, "mean").data, f * s.mean(axis=0), atol=1e-12)
    with pytest.raises(ConfigError):
        enhance(f, s, "median")


def test_enhance_never_grows(rng):
    f = rng.standard_normal((3, 5, 5))
    out = enhance(f, rng.uniform(0, 1, (2, 5, 5))).data
    assert (np.abs(out) <= np.abs(f) + 1e-7).all()


def test_zero_conv_gives_zero_offsets(rng):
    esm = ExplicitAlignment(4)
    out = estimate_offsets(rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 3, 3)),
                           esm.offset_weight, esm.offset_bias)
    assert out.shape == (OFFSET_CHANNELS, 3, 3) and not out.data.any()


def test_offset_estimator_is_not_symmetric(rng):
    a, b = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 3))
    w, c = rng.standard_normal((18, 4, 3, 3)), rng.standard_normal(18)
    assert not np.allclose(estimate_offsets(a, b, w, c).data, estimate_offsets(b, a, w, c).data)


def test_offset_gradient_reaches_both_modalities(rng):
    w, c = rng.standard_normal((18, 4, 3, 3)), rng.standard_normal(18)
    proj = rng.standard_normal((18, 3, 3))
    result = check_gradients(lambda a, b: (estimate_offsets(a, b, w, c) * Tensor(proj)).sum(),
                             [rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 3))])
    assert result.ok
    ta = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
    tb = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
    estimate_offsets(ta, tb, w, c).sum().backward()
    assert np.abs(ta.grad).sum() > 0 and np.abs(tb.grad).sum() > 0


def test_deform_zero_offsets_equal_conv(rng):
    for _ in range(20):
        x = rng.standard_normal((3, 5, 6))
        k = rng.standard_normal((2, 3, 3, 3))
        out = deform_conv(x, k, np.zeros((18, 5, 6))).data
        ref = F.conv2d(x, k, pad=1).data
        assert np.abs(out - ref).max() < 1e-5  # float32 accumulation


def test_deform_zero_offsets_equal_conv_float64(rng):
    x = rng.standard_normal((3, 5, 6))
    k = rng.standard_normal((2, 3, 3, 3))
    with default_dtype(np.float64):
        out = deform_conv(x, k, np.zeros((18, 5, 6))).data
        ref = F.conv2d(x, k, pad=1).data
    assert np.abs(out - ref).max() < 1e-6


def test_deform_unit_x_offset_is_left_shift(rng):
    x = rng.standard_normal((2, 6, 7))
    k = rng.standard_normal((2, 2, 3, 3))
    offsets = np.zeros((9, 2, 6, 7))
    offsets[:, 1] = 1.0
    with default_dtype(np.float64):
        out = deform_conv(x, k, offsets.reshape(18, 6, 7)).data
        shifted = np.zeros_like(x)
        shifted[:, :, :-1] = x[:, :, 1:]
        ref = F.conv2d(shifted, k, pad=1).data
    np.testing.assert_allclose(out[:, 1:-1, 1:-2], ref[:, 1:-1, 1:-2], atol=1e-12)


def test_deform_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 4, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    off = rng.uniform(-1.5, 1.5, (18, 4, 5))
    with default_dtype(np.float64):
        out = deform_conv(x, k, off).data
    np.testing.assert_allclose(out, oracles.deform_conv_loops(x, k, off), atol=1e-12)


def test_deform_offset_gradient(rng):
    x = rng.standard_normal((2, 4, 4))
    k = rng.standard_normal((2, 2, 3, 3))
    off = rng.uniform(0.1, 0.4, (18, 4, 4)) * rng.choice([-1, 1], (18, 4, 4))
    result = check_gradients(lambda o: (deform_conv(x, k, o) ** 2).sum(), [off])
    assert result.ok and result.max_rel_err < 1e-4


def test_deform_shape_checks():
    with pytest.raises(DimensionError):
        deform_conv(np.zeros((2, 4, 4)), np.zeros((2, 2, 3, 3)), np.zeros((18, 3, 4)))
    with pytest.raises(DimensionError):
        deform_conv(np.zeros((2, 4, 4)), np.zeros((2, 3, 3, 3)), np.zeros((18, 4, 4)))


def test_static_path_with_zero_offset_conv(rng):
    esm = ExplicitAlignment(3)
    rgb, ir = rng.standard_normal((3, 4, 4)), rng.standard_normal((3, 4, 4))
    s = rng.uniform(0, 1, (2, 4, 4))
    aligned, offsets = esm_forward(esm, rgb, ir, s, s)
    np.testing.assert_allclose(aligned.data, F.conv2d(rgb, esm.kernel, pad=1).data, atol=1e-6)
    assert not offsets.data.any()


def test_bypass_returns_input_unchanged(rng):
    esm = ExplicitAlignment(3)
    rgb = Tensor(rng.standard_normal((3, 4, 4)))
    aligned, offsets = esm_forward(esm, rgb, rgb, np.ones((2, 4, 4)), np.ones((2, 4, 4)),
                                   bypass=True)
    assert offsets is None
    np.testing.assert_array_equal(aligned.data, rgb.data)


def test_gate_is_category_permutation_invariant(rng):
    esm = ExplicitAlignment(2)
    esm.offset_weight.data = rng.standard_normal(esm.offset_weight.shape).astype(np.float32)
    rgb, ir = rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4))
    s_rgb, s_ir = rng.uniform(0, 1, (3, 4, 4)), rng.uniform(0, 1, (3, 4, 4))
    order = [2, 0, 1]
    a, oa = esm_forward(esm, rgb, ir, s_rgb, s_ir)
    b, ob = esm_forward(esm, rgb, ir, s_rgb[order], s_ir[order])
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(oa.data, ob.data)


def test_mean_offsets_averages_taps():
    off = np.zeros((9, 2, 2, 2))
    off[:, 0] = np.arange(9)[:, None, None]
    off[:, 1] = -1.0
    mean = mean_offsets(off.reshape(18, 2, 2))
    np.testing.assert_allclose(mean[0], 4.0)
    np.testing.assert_allclose(mean[1], -1.0)
