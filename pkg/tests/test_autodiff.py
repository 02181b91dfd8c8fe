from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from continual_vla import autodiff as ad
from continual_vla import gradcheck as G
from continual_vla.autodiff import Tensor


def leaf(x):
    return Tensor(x, requires_grad=True)


def test_matmul_identity_and_known_product():
    eye = Tensor(np.eye(2))
    assert np.array_equal(ad.matmul(eye, eye).data, np.eye(2))
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    assert G.check(lambda: ad.sum(ad.matmul(a, b)), [a]) < 1e-4


def test_softmax_known_values():
    assert np.allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(ad.softmax(Tensor([math.log(1), math.log(3)])).data, [0.25, 0.75])


def test_softmax_jacobian_rows():
    rng = np.random.default_rng(1)
    x = leaf(rng.normal(size=5))
    for k in range(5):
        onehot = np.eye(5)[k]
        assert G.check(lambda: ad.sum(ad.mul(ad.softmax(x), Tensor(onehot))), [x]) < 1e-4


def test_kl_known_values():
    p = Tensor([0.3, 0.7])
    assert ad.kl_divergence(p, p).item() == pytest.approx(0.0, abs=1e-15)
    assert ad.kl_divergence(Tensor([1.0, 0.0]), Tensor([0.5, 0.5])).item() == pytest.approx(math.log(2), abs=1e-12)


def test_kl_matches_direct_summation():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        direct = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
        assert ad.kl_divergence(Tensor(p), Tensor(q)).item() == pytest.approx(direct, abs=1e-10)


def test_kl_floor_keeps_value_nonnegative_and_counts_hits():
    ad.reset_kl_floor_hits()
    val = ad.kl_divergence(Tensor([0.5, 0.5]), Tensor([1.0, 0.0])).item()
    assert val >= 0 and math.isfinite(val)
    assert ad.kl_floor_hits() == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8).flatmap(lambda k: st.tuples(*[hnp.arrays(np.float64, k, elements=st.floats(0.01, 1.0))] * 2)))
def test_kl_nonnegative(pq):
    p, q = pq[0] / pq[0].sum(), pq[1] / pq[1].sum()
    assert ad.kl_divergence(Tensor(p), Tensor(q)).item() >= -1e-12


def test_backward_sum_gives_ones():
    x = leaf(np.zeros((2, 3, 4)))
    ad.backward(ad.sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_inner_product():
    x = leaf([1.0, 2.0])
    ad.backward(ad.sum(ad.mul(x, x)))
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_composite_softmax_kl_mean():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(3, 5)))
    q = Tensor(rng.dirichlet(np.ones(5), size=3))
    assert G.check(lambda: ad.mean(ad.kl_divergence(ad.softmax(x, axis=1), q)), [x]) < 1e-4


def test_second_backward_raises():
    x = leaf([1.0, 2.0])
    loss = ad.sum(ad.square(x))
    ad.backward(loss)
    with pytest.raises(ad.TapeError):
        ad.backward(loss)


def test_backward_requires_scalar():
    with pytest.raises(ad.TapeError):
        ad.backward(ad.square(leaf([1.0, 2.0])))


def test_non_finite_data_rejected():
    with pytest.raises(ad.NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([1000.0]))


def test_log_of_zero_is_an_error():
    with pytest.raises((ad.NonFiniteError, ValueError)):
        ad.log(Tensor([0.0]))


def test_shape_mismatch_rejected():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_scalar_broadcast_gradient():
    x, s = leaf(np.arange(3.0)), leaf(2.0)
    ad.backward(ad.sum(ad.mul(x, s)))
    assert s.grad == pytest.approx(3.0)
    assert np.array_equal(x.grad, [2.0, 2.0, 2.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = ad.square(x)
    assert not y.requires_grad and y.is_leaf


def test_gradient_accumulates_over_shared_subgraph():
    x = leaf(3.0)
    y = ad.mul(x, x)
    ad.backward(ad.add(y, y))
    assert x.grad == pytest.approx(12.0)


def test_tape_lists_ops_in_order():
    x = leaf([1.0, 2.0])
    loss = ad.sum(ad.exp(x))
    ops = [r["op"] for r in ad.tape(loss)]
    assert ops == ["exp", "sum"]
    assert '"op": "exp"' in ad.dump_tape(loss)


def test_one_instance_of_every_primitive_passes_gradcheck():
    cases = list(G._primitive_cases(np.random.default_rng(11)))
    assert len(cases) >= 20
    for name, fn, inputs in cases:
        assert G.check(fn, inputs) < G.TOLERANCE, name
