import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from idegen.autodiff import ops
from idegen.autodiff.gradcheck import CASES, check_function, run_op_checks
from idegen.autodiff.optim import OptimizerState, adam_step
from idegen.autodiff.rng import Rng, derive_seed, splitmix64
from idegen.autodiff.tensor import REGISTRY, Tensor, corrupt_gradient, no_grad, precision
from idegen.errors import ContractError, DimensionError, NumericError

MASK = (1 << 64) - 1


# -- reference xoshiro256++ in plain Python ---------------------------------------

def _ref_stream(seed, n):
    s, words = seed, []
    for _ in range(4):
        s, out = splitmix64(s)
        words.append(out)
    s0, s1, s2, s3 = words
    rotl = lambda x, k: ((x << k) | (x >> (64 - k))) & MASK  # noqa: E731
    res = []
    for _ in range(n):
        res.append((rotl((s0 + s3) & MASK, 23) + s0) & MASK)
        t = (s1 << 17) & MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = rotl(s3, 45)
    return res


@pytest.mark.parametrize("seed", [0, 1, 12345, MASK])
def test_rng_matches_reference_xoshiro(seed):
    got = Rng(seed).next_u64(20)
    assert [int(x) for x in got] == _ref_stream(seed, 20)


def test_splitmix64_known_value():
    # first output for seed 0 from the published reference implementation
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


def test_rng_same_seed_same_stream_and_children_differ():
    a, b = Rng(7), Rng(7)
    assert np.array_equal(a.normal((50,)), b.normal((50,)))
    assert not np.array_equal(Rng(7).child("x").random((4,)), Rng(7).child("y").random((4,)))
    assert derive_seed(3, "a", 1) == derive_seed(3, "a", 1)
    assert derive_seed(3, "a", 1) != derive_seed(3, "a", 2)


def test_rng_normal_moments():
    z = Rng(11).normal((200_000,))
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01
    u = Rng(11).random((100_000,))
    assert u.min() >= 0.0 and u.max() < 1.0


# -- matmul ------------------------------------------------------------------------

def test_matmul_hand_case_and_identity():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([[5.0], [6.0]]))
    assert np.array_equal(ops.matmul(a, b).data, [[17.0], [39.0]])
    x = np.array([[0.3], [-1.2], [2.5]])
    assert np.array_equal(ops.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_is_broadcast_column_sums():
    with precision(np.float64):
        a = Tensor(Rng(0).normal((3, 4)), requires_grad=True)
        b = Tensor(Rng(1).normal((4, 5)))
        ops.sum(ops.matmul(a, b)).backward()
        assert np.allclose(a.grad, np.broadcast_to(b.data.sum(axis=1), (3, 4)))
    errs = check_function(ops.matmul, [Rng(0).normal((3, 4)), Rng(1).normal((4, 5))])
    assert max(errs) < 1e-4


# -- softmax -------------------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(ops.softmax(Tensor(np.zeros(3))).data, 1 / 3)
    out = ops.softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert np.all(np.isfinite(out)) and out[0] == 1.0 and out[1] == 0.0


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        ops.softmax(Tensor(np.array([0.0, np.nan])))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_rows_normalized(x):
    with precision(np.float64):
        out = ops.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


# -- grid sample -------------------------------------------------------------------

def test_grid_sample_zero_flow_is_identity():
    src = Rng(2).random((3, 9, 7)).astype(np.float32)
    out = ops.grid_sample_bilinear(Tensor(src), Tensor(np.zeros((2, 9, 7), np.float32))).data
    assert np.array_equal(out, src)


@pytest.mark.parametrize("dx,dy", [(1, 0), (0, 1), (-1, 0), (2, -1)])
def test_grid_sample_integer_shift_matches_index_oracle(dx, dy):
    h, w = 10, 12
    src = Rng(3).random((2, h, w))
    flow = np.zeros((2, h, w))
    flow[0] = dx * 2.0 / w
    flow[1] = dy * 2.0 / h
    with precision(np.float64):
        out = ops.grid_sample_bilinear(Tensor(src), Tensor(flow)).data
    ys = slice(max(0, -dy), h - max(0, dy))
    xs = slice(max(0, -dx), w - max(0, dx))
    oracle = src[:, ys.start + dy: ys.stop + dy, xs.start + dx: xs.stop + dx]
    assert np.allclose(out[:, ys, xs], oracle, atol=1e-12)


def test_grid_sample_border_clamps():
    src = Rng(4).random((1, 5, 5))
    flow = np.full((2, 5, 5), 10.0)
    with precision(np.float64):
        out = ops.grid_sample_bilinear(Tensor(src), Tensor(flow)).data
    assert np.allclose(out, src[0, -1, -1])


# -- conv2d ------------------------------------------------------------------------

def _naive_conv(x, w, b, stride, pad):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                for c in range(cin):
                    for u in range(k):
                        for v in range(k):
                            out[o, i, j] += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
        out[o] += b[o]
    return out


@pytest.mark.parametrize("stride,pad", [(1, 2), (2, 2), (1, 0)])
def test_conv2d_matches_naive_loops(stride, pad):
    x = Rng(5).normal((3, 11, 9))
    w = Rng(6).normal((4, 3, 5, 5))
    b = Rng(7).normal((4,))
    with precision(np.float64):
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
    assert np.allclose(out, _naive_conv(x, w, b, stride, pad), atol=1e-5)


def test_conv2d_trivial_kernels():
    x = Rng(8).random((3, 6, 6)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), np.float32)
    for c in range(3):
        w[c, c] = 1.0
    assert np.array_equal(ops.conv2d(Tensor(x), Tensor(w)).data, x)
    const = np.full((1, 7, 7), 0.25)
    avg = np.full((1, 1, 3, 3), 1 / 9)
    out = ops.conv2d(Tensor(const), Tensor(avg), pad=1).data
    assert np.allclose(out[0, 1:-1, 1:-1], 0.25)


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))


# -- backward ------------------------------------------------------------------------

def test_backward_simple_gradients_and_accumulation():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    ops.sum(x).backward()
    assert np.array_equal(x.grad, np.ones(3))
    x.grad = None
    ops.sum(ops.mul(x, x)).backward()
    assert np.allclose(x.grad, 2 * x.data)
    ops.sum(ops.mul(x, x)).backward()
    assert np.allclose(x.grad, 4 * x.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ops.mul(x, 2.0).backward()


def test_unreachable_leaf_has_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    ops.sum(x).backward()
    assert y.grad is None


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = ops.mul(x, 3.0)
    assert not y.requires_grad


# -- gradient suite ------------------------------------------------------------------

def test_every_registered_op_has_a_case():
    assert set(REGISTRY) <= set(CASES)


def test_op_suite_passes():
    report = run_op_checks()
    bad = {k: v for k, v in report.items() if not v[2]}
    assert not bad


def test_corrupted_gradient_is_detected():
    with corrupt_gradient("matmul"):
        report = run_op_checks(names=["matmul"])
    assert not report["matmul"][2]


# -- adam ------------------------------------------------------------------------------

def test_adam_single_step_hand_formula():
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([0.2])
    st_ = OptimizerState(lr=1e-3)
    adam_step([p], st_)
    m = 0.1 * 0.2 / (1 - 0.9)
    v = 0.001 * 0.04 / (1 - 0.999)
    expect = 0.5 - 1e-3 * m / (math.sqrt(v) + 1e-8)
    assert abs(p.data[0] - expect) < 1e-7
    assert p.grad is None


def test_adam_zero_gradient_keeps_params_and_sign_monotone():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    st_ = OptimizerState(lr=1e-2)
    p.grad = np.zeros(2)
    adam_step([p], st_)
    assert np.array_equal(p.data, [1.0, -1.0])
    q = Tensor(np.array([0.0]), requires_grad=True)
    st2 = OptimizerState(lr=1e-2)
    for _ in range(50):
        q.grad = np.array([3.0])
        adam_step([q], st2)
    assert q.data[0] < -0.4


def test_adam_missing_grad():
    with pytest.raises(ContractError):
        adam_step([Tensor(np.ones(1), requires_grad=True)], OptimizerState())


def test_float32_is_training_default():
    assert Tensor(np.zeros(2, np.float64).tolist()).dtype == np.float32
