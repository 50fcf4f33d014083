import numpy as np
import pytest

from lpanet import functional as F
from lpanet import tensor as T
from lpanet.errors import ConfigError, DimensionError, UsageError, ValidationError
from lpanet.gradcheck import check_gradients
from lpanet.tensor import Tensor, default_dtype, no_grad

import gradcases
import oracles


# -- tape --------------------------------------------------------------------
def test_identity_gradient_is_one():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * 1.0).backward()
    assert x.grad == 1.0


def test_sum_of_squares_gradient_is_twice_input(rng):
    data = rng.standard_normal((3, 4))
    x = Tensor(data, requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * data, rtol=1e-6)


def test_backward_twice_doubles_gradients(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    y = (T.exp(x) * x).sum()
    y.backward()
    once = x.grad.copy()
    y.backward()
    np.testing.assert_array_equal(x.grad, 2 * once)


def test_backward_needs_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2).backward()


def test_backward_needs_grad():
    with pytest.raises(UsageError):
        Tensor(np.ones(())).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad and y._parents == ()


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * 3
    (y * y + y).sum().backward()
    np.testing.assert_allclose(x.grad, 3 * (2 * 3 * x.data + 1), rtol=1e-6)


def test_grad_shape_matches_data(rng):
    a = Tensor(rng.standard_normal((3, 1)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 4)), requires_grad=True)
    (a * b).sum().backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


def test_default_dtype_is_float32_and_context_switches():
    assert Tensor([1, 2]).dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


def test_index_repeated_rows_accumulate():
    x = Tensor(np.zeros(3), requires_grad=True)
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 0, 1])


def test_concat_rejects_mismatched_shapes():
    with pytest.raises(DimensionError):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=0)


def test_determinism_bit_identical(rng):
    data = rng.standard_normal((2, 5, 5))
    kernel = rng.standard_normal((3, 2, 3, 3))
    runs = []
    for _ in range(2):
        x = Tensor(data, requires_grad=True)
        out = F.conv2d(x, Tensor(kernel), pad=1)
        T.sigmoid(out).sum().backward()
        runs.append((out.data.copy(), x.grad.copy()))
    np.testing.assert_array_equal(runs[0][0], runs[1][0])
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


# -- matmul ------------------------------------------------------------------
def test_matmul_identity(rng):
    a = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(F.matmul(np.eye(3), a).data, a)


def test_matmul_hand_example():
    out = F.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[1.0], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_sum_gradient_is_ones_times_bt(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ta = Tensor(a, requires_grad=True)
    F.matmul(ta, Tensor(b)).sum().backward()
    np.testing.assert_allclose(ta.grad, np.ones((3, 2)) @ b.T, rtol=1e-5)
    result = check_gradients(lambda x, y: F.matmul(x, y).sum(), [a, b])
    assert result.ok


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        F.matmul(np.ones((2, 3)), np.ones((2, 3)))


# -- conv2d ------------------------------------------------------------------
def test_conv_unit_kernel_is_identity(rng):
    x = rng.standard_normal((1, 5, 5))
    out = F.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_allclose(out.data, x, rtol=1e-6)


def test_conv_ones_kernel_on_constant_interior():
    c = 0.7
    out = F.conv2d(np.full((1, 6, 6), c), np.ones((1, 1, 3, 3)), pad=1)
    np.testing.assert_allclose(out.data[0, 1:-1, 1:-1], 9 * c, rtol=1e-6)


@pytest.mark.parametrize("stride,pad,size", [(1, 0, 5), (1, 1, 5), (2, 1, 7), (2, 0, 5)])
def test_conv_matches_loop_oracle(rng, stride, pad, size):
    x = rng.standard_normal((2, size, size))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    with default_dtype(np.float64):
        out = F.conv2d(x, k, b, stride=stride, pad=pad).data
    np.testing.assert_allclose(out, oracles.conv2d_loops(x, k, b, stride, pad), atol=1e-12)


def test_conv_gradient_random_input(rng):
    x = rng.standard_normal((2, 5, 5))
    k = rng.standard_normal((2, 2, 3, 3))
    result = check_gradients(lambda a, b: (F.conv2d(a, b, pad=1) ** 2).sum(), [x, k])
    assert result.ok and result.max_rel_err < 1e-4


def test_conv_requires_integral_extent():
    with pytest.raises(ConfigError):
        F.conv2d(np.ones((1, 64, 64)), np.ones((1, 1, 3, 3)), stride=2, pad=1)


def test_conv_rejects_even_kernel():
    with pytest.raises(ConfigError):
        F.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 2, 2)))


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        F.conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)))


# -- bilinear sampling -------------------------------------------------------
def test_sample_integer_coordinates_exact(rng):
    grid = rng.standard_normal((1, 4, 5))
    ys, xs = np.array([0.0, 3, 2]), np.array([4.0, 0, 1])
    out = F.sample_points(grid, ys, xs).data[0]
    np.testing.assert_allclose(out, grid[0, [0, 3, 2], [4, 0, 1]].astype(np.float32))


def test_sample_center_of_two_by_two():
    out = F.bilinear_sample(np.array([[[1.0, 2], [3, 4]]]), 0.5, 0.5)
    np.testing.assert_allclose(out.data, [2.5])


def test_sample_clamps_outside(rng):
    grid = rng.standard_normal((1, 3, 3))
    out = F.sample_points(grid, np.array([-2.0, 5.0]), np.array([1.0, 9.0])).data[0]
    np.testing.assert_allclose(out, [grid[0, 0, 1], grid[0, 2, 2]], rtol=1e-6)


def test_sample_matches_point_oracle(rng):
    grid = rng.standard_normal((1, 5, 6))
    ys = rng.uniform(-1, 6, 20)
    xs = rng.uniform(-1, 7, 20)
    with default_dtype(np.float64):
        out = F.sample_points(grid, ys, xs).data[0]
    expected = [oracles.bilinear_point(grid[0], y, x) for y, x in zip(ys, xs)]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_sample_coordinate_gradient(rng):
    grid = rng.standard_normal((2, 4, 4))
    ys, xs = np.array([0.3, 1.6, 2.2]), np.array([2.7, 0.4, 1.1])
    result = check_gradients(lambda g, y, x: F.sample_points(g, y, x).sum(), [grid, ys, xs])
    assert result.ok and result.max_rel_err < 1e-4


# -- upsampling --------------------------------------------------------------
def test_upsample_constant_stays_constant():
    out = F.upsample_bilinear(np.full((2, 3, 4), 0.25), 11, 9)
    np.testing.assert_allclose(out.data, 0.25, rtol=1e-6)


def test_upsample_align_corners_row():
    out = F.upsample_bilinear(np.array([[[0.0, 1.0], [0.0, 1.0]]]), 2, 4)
    np.testing.assert_allclose(out.data[0], [[0, 1 / 3, 2 / 3, 1]] * 2, atol=1e-7)


def test_upsample_lattice_identity(rng):
    x = rng.standard_normal((1, 4, 4))
    up = F.upsample_bilinear(x, 13, 13).data  # (13-1)/(4-1) = 4: source lattice every 4 px
    np.testing.assert_allclose(up[:, ::4, ::4], x, atol=1e-6)


def test_upsample_matches_oracle(rng):
    x = rng.standard_normal((2, 3, 5))
    with default_dtype(np.float64):
        out = F.upsample_bilinear(x, 8, 11).data
    np.testing.assert_allclose(out, oracles.upsample_align_corners(x, 8, 11), atol=1e-12)


def test_upsample_rejects_shrinking():
    with pytest.raises(ConfigError):
        F.upsample_bilinear(np.ones((1, 4, 4)), 2, 8)


# -- softmax / losses --------------------------------------------------------
def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(F.softmax(np.zeros(3)).data, [1 / 3] * 3, rtol=1e-6)


def test_softmax_shift_invariant(rng):
    x = rng.standard_normal(5)
    with default_dtype(np.float64):
        np.testing.assert_allclose(F.softmax(x).data, F.softmax(x + 17.5).data, atol=1e-12)


def test_softmax_masked_slots_are_exact_zero(rng):
    mask = np.array([True, False, True, True])
    out = F.softmax(rng.standard_normal(4), mask=mask).data
    assert out[1] == 0.0
    assert abs(out.sum() - 1) < 1e-6


def test_softmax_jacobian(rng):
    result = check_gradients(lambda x: (F.softmax(x, axis=1) * Tensor(np.arange(4.0))).sum(),
                             [rng.standard_normal((3, 4))])
    assert result.ok


def test_bce_perfect_prediction_bounded():
    target = np.array([[0.0, 1.0], [1.0, 0.0]])
    loss = F.bce_loss(target, target).item()
    assert loss <= -np.log(1 - 1e-7) * 1.01


def test_bce_half_is_ln2(rng):
    target = (rng.random((4, 4)) > 0.5).astype(float)
    assert abs(F.bce_loss(np.full((4, 4), 0.5), target).item() - np.log(2)) < 1e-6


def test_bce_matches_oracle(rng):
    pred = rng.uniform(0, 1, (3, 5))
    pred[0, 0], pred[1, 1] = 0.0, 1.0
    target = (rng.random((3, 5)) > 0.5).astype(float)
    with default_dtype(np.float64):
        value = F.bce_loss(pred, target).item()
    assert abs(value - oracles.bce_mean(pred, target)) < 1e-9


def test_bce_clamped_entries_have_zero_gradient():
    pred = Tensor(np.array([0.0, 0.3, 1.0]), requires_grad=True)
    F.bce_loss(pred, np.array([1.0, 1.0, 0.0])).backward()
    assert pred.grad[0] == 0 and pred.grad[2] == 0 and pred.grad[1] != 0


def test_bce_gradient(rng):
    target = (rng.random((4, 4)) > 0.5).astype(float)
    result = check_gradients(lambda p: F.bce_loss(p, target), [rng.uniform(0.05, 0.95, (4, 4))])
    assert result.ok and result.max_rel_err < 1e-4


def test_kl_of_identical_is_zero(rng):
    p = rng.dirichlet(np.ones(6))
    with default_dtype(np.float64):
        assert abs(F.kl_div(p, p).item()) < 1e-12


def test_kl_hand_example():
    assert abs(F.kl_div(np.array([1.0, 0.0]), np.array([0.5, 0.5])).item() - np.log(2)) < 1e-6


def test_kl_nonnegative_sweep(rng):
    with default_dtype(np.float64):
        for _ in range(1000):
            p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
            value = F.kl_div(p, q).item()
            assert value >= 0
            assert abs(value - oracles.kl_sum(p, q)) < 1e-10


def test_kl_rejects_non_distribution():
    with pytest.raises(ValidationError):
        F.kl_div(np.array([0.5, 0.6]), np.array([0.5, 0.5]))


def test_cross_entropy_uniform_logits():
    labels = np.array([[0, 1], [2, 0]])
    assert abs(F.cross_entropy(np.zeros((3, 2, 2)), labels).item() - np.log(3)) < 1e-6


def test_cross_entropy_label_range():
    with pytest.raises(ValidationError):
        F.cross_entropy(np.zeros((2, 1, 1)), np.array([[2]]))


# -- every op against finite differences --------------------------------------
@pytest.mark.parametrize("name", sorted(gradcases.OPS))
def test_op_gradients(name):
    for seed in range(2):
        result = gradcases.run_case(name, seed)
        assert result.ok, (name, seed, result)
