import zlib

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from burnkit import tensor as T
from burnkit.binary import rprelu
from burnkit.errors import ContractError, DimensionError
from burnkit.losses import kl_div
from burnkit.tensor import Tensor, no_grad

from oracles import away_from, gradcheck, primitive_cases, uniform


def test_matmul_identity():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_by_column():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    a, b = uniform(rng, (5, 4)), uniform(rng, (4, 3))
    w = uniform(rng, (5, 3))
    assert gradcheck(lambda x, y: (T.matmul(x, y) * Tensor(w)).sum(), [a, b]) < 1e-4


def test_conv2d_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9


def test_conv2d_delta_kernel_is_identity():
    x = np.random.default_rng(1).standard_normal((2, 1, 5, 6)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k), padding=1).data, x)


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 2))
    out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (7 + 2 - 3) // 2 + 1, (6 + 2 - 2) // 2 + 1
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for f in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[n, f, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 2] * w[f])
    np.testing.assert_allclose(out, ref, rtol=1e-10)


def test_conv2d_rejects_empty_output():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradcheck(stride, padding):
    rng = np.random.default_rng(3)
    x, w = uniform(rng, (2, 3, 8, 8)), uniform(rng, (4, 3, 3, 3))
    shape = T.conv2d(Tensor(x), Tensor(w), stride, padding).shape
    probe = Tensor(rng.standard_normal(shape))
    assert gradcheck(lambda a, b: (T.conv2d(a, b, stride, padding) * probe).sum(), [x, w]) < 1e-4


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)


def test_softmax_large_logits_do_not_overflow():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-7)


def test_softmax_matches_high_precision():
    mpmath.mp.dps = 50
    denom = sum(mpmath.e ** k for k in (1, 2, 3))
    ref = [float(mpmath.e ** k / denom) for k in (1, 2, 3)]
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, ref, rtol=1e-6)


def test_softmax_nan_propagates():
    assert np.isnan(T.softmax(Tensor([np.nan, 0.0])).data).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=st.floats(-50, 50, width=32)))
def test_softmax_rows_are_distributions(x):
    out = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all((out >= 0) & (out <= 1))


def test_backward_of_sum_is_ones():
    x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_of_zero_times_x_is_zero():
    x = Tensor(np.arange(5.0), requires_grad=True)
    (x * 0.0).sum().backward()
    np.testing.assert_array_equal(x.grad, np.zeros(5))


def test_backward_accumulates_without_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * 2.0).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [4, 4, 4])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0, 0, 0])


def test_backward_populates_interior_nodes():
    x = Tensor(np.ones(3), requires_grad=True)
    mid = x * 3.0
    (mid * mid).sum().backward()
    np.testing.assert_array_equal(mid.grad, [6, 6, 6])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_needs_tape():
    with pytest.raises(ContractError):
        Tensor(1.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_composite_graph_gradcheck():
    rng = np.random.default_rng(4)
    x = uniform(rng, (2, 2, 5, 5))
    w = uniform(rng, (3, 2, 3, 3)) * 0.5
    gamma, zeta, slope = uniform(rng, 3) * 0.3, uniform(rng, 3) * 0.3, uniform(rng, 3, 0.1, 0.9)
    lw, lb = uniform(rng, (4, 3)), uniform(rng, 4)
    target = T.softmax(Tensor(rng.standard_normal((2, 4)))).data

    def build(x, w, gamma, zeta, slope, lw, lb):
        h = rprelu(T.conv2d(x, w, 1, 1), gamma, zeta, slope)
        p = T.softmax(T.linear(T.global_avg_pool(h), lw, lb))
        return kl_div(p, Tensor(target))

    arrays_ = [x, w, gamma, zeta, slope, lw, lb]
    assert gradcheck(build, arrays_) < 1e-4


# ---------------------------------------------------------------------------
# per-primitive gradient checks


PRIMITIVES = sorted(primitive_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradcheck(name):
    build, arrays_ = primitive_cases(np.random.default_rng(zlib.crc32(name.encode())))[name]
    assert gradcheck(build, arrays_) < 1e-4


def test_determinism_same_inputs_same_bits():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((4, 3, 8, 8)).astype(np.float32))
        w = Tensor(rng.standard_normal((5, 3, 3, 3)).astype(np.float32), requires_grad=True)
        y = T.softmax(T.global_avg_pool(T.conv2d(x, w, 2, 1)))
        y.sum().backward()
        return y.data.tobytes() + w.grad.tobytes()

    assert run() == run()


def test_f32_is_default_dtype():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))).dtype == np.float32
