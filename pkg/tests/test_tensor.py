import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from novis import tensor as nt
from novis.gradcheck import finite_difference_check
from novis.tensor import ContractViolation, Tensor

from gradcases import OPS, make_case

finite = st.floats(-10, 10, allow_nan=False, width=32)


# -- matmul ------------------------------------------------------------------------

def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(2, 2))
    np.testing.assert_array_equal(nt.matmul(Tensor(np.eye(2)), Tensor(a)).data, a.astype(np.float32))


def test_matmul_hand_example():
    out = nt.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 16))
def test_matmul_matches_triple_loop(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    with nt.shadow64():
        out = nt.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, naive_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_grad_is_broadcast_column_sums():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = rng.normal(size=(4, 5))
    nt.matmul(a, Tensor(b)).sum().backward()
    expected = np.broadcast_to(b.sum(axis=1), (3, 4))
    np.testing.assert_allclose(a.grad, expected, rtol=1e-5)


def test_matmul_shape_mismatch():
    with pytest.raises(ContractViolation):
        nt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- masked softmax ----------------------------------------------------------------------

@pytest.mark.parametrize("mask,expected", [([1, 1], [0.5, 0.5]), ([1, 0], [1.0, 0.0]), ([0, 0], [0.5, 0.5])])
def test_masked_softmax_examples(mask, expected):
    out = nt.masked_softmax(Tensor([0.0, 0.0]), np.array(mask))
    np.testing.assert_array_equal(out.data, expected)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite),
       st.integers(0, 2 ** 16))
def test_masked_softmax_rows(x, seed):
    mask = np.random.default_rng(seed).random(x.shape) < 0.5
    out = nt.masked_softmax(Tensor(x), mask).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    empty = ~mask.any(axis=-1, keepdims=True)
    masked_out = out[~mask & ~np.broadcast_to(empty, mask.shape)]
    assert np.all(masked_out == 0.0)


def test_masked_softmax_bad_mask_shape():
    with pytest.raises(ContractViolation):
        nt.masked_softmax(Tensor(np.zeros((2, 3))), np.ones((2, 2)))


# -- layer norm ----------------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = nt.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_two_values():
    with nt.shadow64():
        out = nt.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    # variance 1, so the epsilon correction is 1/sqrt(1 + 1e-5)
    np.testing.assert_allclose(out, [[-1, 1]] / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_layer_norm_zero_gain_gives_bias():
    bias = np.array([0.5, -1.0, 2.0])
    out = nt.layer_norm(Tensor(np.random.default_rng(0).normal(size=(4, 3))), Tensor(np.zeros(3)),
                        Tensor(bias))
    np.testing.assert_allclose(out.data, np.broadcast_to(bias, (4, 3)))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)),
                  elements=st.floats(-100, 100, allow_nan=False)))
def test_layer_norm_rows_standardized(x):
    with nt.shadow64():
        out = nt.layer_norm(Tensor(x), Tensor(np.ones(x.shape[1])), Tensor(np.zeros(x.shape[1]))).data
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
    var = x.var(axis=1)
    np.testing.assert_allclose(out.var(axis=1), var / (var + 1e-5), rtol=1e-9, atol=1e-12)


# -- conv2d --------------------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(3, 5, 6)).astype(np.float32)
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(nt.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_all_ones_plateau():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1
    out = nt.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3)))).data[0]
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("h,w", [(8, 8), (6, 10), (7, 5)])
def test_conv_stride_shape(h, w):
    out = nt.conv2d(Tensor(np.ones((2, h, w))), Tensor(np.ones((4, 2, 3, 3))), stride=2)
    assert out.shape == (4, -(-h // 2), -(-w // 2))


def test_conv_matches_direct_cross_correlation():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    with nt.shadow64():
        out = nt.conv2d(Tensor(x), Tensor(w), stride=2).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[o, i, j] = (xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_conv_even_kernel_rejected():
    with pytest.raises(ContractViolation):
        nt.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


# -- bilinear resize ----------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 12), st.integers(1, 12), finite)
def test_bilinear_constant_stays_constant(h, w, oh, ow, c):
    out = nt.bilinear_resize(Tensor(np.full((2, h, w), c)), oh, ow).data
    np.testing.assert_allclose(out, c, rtol=1e-5, atol=1e-5)


def test_bilinear_two_by_two_to_two_by_four():
    with nt.shadow64():
        out = nt.bilinear_resize(Tensor([[0.0, 1.0], [0.0, 1.0]]), 2, 4).data
    # align_corners=False: source x = (o + 0.5) / 2 - 0.5, clamped at 0
    np.testing.assert_allclose(out, [[0, 0.25, 0.75, 1]] * 2)
    assert np.all(np.diff(out, axis=1) >= 0)


def test_bilinear_up_then_down_constant_exact():
    x = Tensor(np.full((3, 3), 2.5))
    back = nt.bilinear_resize(nt.bilinear_resize(x, 12, 9), 3, 3).data
    np.testing.assert_array_equal(back, 2.5)


# -- backward ------------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 1.0)


def test_backward_square():
    v = np.random.default_rng(1).normal(size=5)
    x = Tensor(v, requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * v.astype(np.float32), rtol=1e-6)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractViolation):
        (x * 2).backward()


def test_backward_shared_node_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y + y * 3).sum().backward()
    np.testing.assert_allclose(x.grad, [16.0])


def test_backward_populates_every_leaf():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    c = Tensor(rng.normal(size=4), requires_grad=True)
    nt.softmax(nt.linear(a, b, c)).sum().backward()
    assert all(t.grad is not None and t.grad.shape == t.shape for t in (a, b, c))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with nt.no_grad():
        y = x * 3
    assert not y.requires_grad


# -- gradient suite --------------------------------------------------------------------------

@pytest.mark.parametrize("op", sorted(OPS))
def test_gradcheck_op(op):
    failures = []
    for seed in range(20):
        f, x = make_case(op, seed)
        rep = finite_difference_check(f, x, rel_tol=1e-4)
        if not rep.passed:
            failures.append((seed, rep.message))
    assert not failures


def test_gradcheck_sum_exact():
    rep = finite_difference_check(lambda t: t.sum(), np.random.default_rng(0).normal(size=(3, 3)))
    assert rep.passed and rep.max_rel_error < 1e-10


def test_gradcheck_masked_softmax_squares():
    rng = np.random.default_rng(5)
    mask = rng.random((3, 6)) < 0.5
    rep = finite_difference_check(lambda t: (nt.masked_softmax(t, mask) ** 2).sum(), rng.normal(size=(3, 6)))
    assert rep.passed


def _wrong_square(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(g * 3.0 * x.data)    # true derivative is 2x
    return nt.make_op(x.data * x.data, (x,), backward, "wrong_square")


def test_gradcheck_detects_wrong_gradient():
    rep = finite_difference_check(lambda t: _wrong_square(t).sum(), np.random.default_rng(0).normal(size=4))
    assert not rep.passed
    assert rep.max_rel_error > 0.1


def test_gradcheck_reports_non_finite():
    rep = finite_difference_check(lambda t: nt.log(t).sum(), np.array([-1.0, 1.0]))
    assert not rep.passed and "finite" in rep.message


def test_gradcheck_32bit_default_tolerance():
    rep = finite_difference_check(lambda t: (nt.tanh(t) * 2).sum(), np.linspace(-1, 1, 5), shadow=False)
    assert rep.passed


# -- determinism and numerics ----------------------------------------------------------------

def test_ops_bitwise_deterministic():
    rng = np.random.default_rng(9)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))

    def run():
        y = nt.conv2d(Tensor(x), Tensor(w), stride=2)
        y = nt.bilinear_resize(nt.gelu(y), 6, 6).reshape(2, 4, 36)
        return nt.masked_softmax(nt.matmul(y, nt.transpose(y, (0, 2, 1))), np.eye(4) > 0).data
    assert run().tobytes() == run().tobytes()


def test_default_dtype_is_float32_and_shadow_is_float64():
    assert Tensor([1.0]).dtype == np.float32
    with nt.shadow64():
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(max_dims=2, max_side=5),
                  elements=st.floats(-500, 500, width=32)))
def test_sigmoid_and_bce_stay_finite(x):
    assert np.all(np.isfinite(nt.sigmoid(Tensor(x)).data))
    assert np.all(np.isfinite(nt.bce_with_logits(Tensor(x), (x > 0).astype(np.float32)).data))


# -- tensor container ------------------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_container_round_trip(tmp_path, dtype):
    arr = np.random.default_rng(0).normal(size=(3, 1, 4)).astype(dtype)
    nt.save_tensor(tmp_path / "a.nvt", arr)
    back = nt.load_tensor(tmp_path / "a.nvt")
    assert back.dtype == dtype and back.tobytes() == arr.tobytes()
    raw = (tmp_path / "a.nvt").read_bytes()
    assert raw[:8] == b"NOVISTEN"


def test_tensor_container_rejects_bad_magic(tmp_path):
    (tmp_path / "x.nvt").write_bytes(b"NOTATENS" + b"\0" * 8)
    with pytest.raises(ValueError, match="magic"):
        nt.load_tensor(tmp_path / "x.nvt")


def test_tensor_container_rejects_truncated_payload(tmp_path):
    nt.save_tensor(tmp_path / "a.nvt", np.ones((4, 4), np.float32))
    raw = (tmp_path / "a.nvt").read_bytes()
    (tmp_path / "a.nvt").write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="payload"):
        nt.load_tensor(tmp_path / "a.nvt")
