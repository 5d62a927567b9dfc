import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import central_diff, rel_error
from mwuf import kernels
from mwuf.numerics import (MLP, Adam, DimensionError, LabelError, LookupError_, NonFiniteError,
                           StateError, Tensor, adam_step, binary_cross_entropy, concat, gather,
                           get_dtype, matmul, mean_reduce, mul, parameter, precision, relu,
                           reshape, sigmoid)


def _check(build, *arrays, tol=1e-6):
    """Compare autodiff and finite-difference gradients of ``build(*tensors)``."""
    with precision("float64"):
        params = [parameter(a.copy()) for a in arrays]
        build(*params).backward()
        for p in params:
            def f():
                with precision("float64"):
                    return build(*[Tensor(q.data) for q in params]).item()
            num = central_diff(f, p.data)
            assert rel_error(p.grad, num) < tol


def test_default_dtype_is_float32_and_precision_restores():
    assert get_dtype() is np.float32
    with precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_elementwise_and_matmul_gradients(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    c = rng.normal(size=(1, 2))
    _check(lambda x, y, z: (relu(matmul(x, y)) * z + z).sum(), a, b, c)
    _check(lambda x, z: sigmoid(x - z).mean() + (x * x * z).sum(), a, rng.normal(size=(1,)))


def test_concat_reshape_mean_gradients(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    w = rng.normal(size=(5, 5))
    _check(lambda x, y, ww: mean_reduce(reshape(concat([x, y]), (5, 2)) * matmul(ww, reshape(concat([x, y]), (5, 2))), axis=0).sum(),
           a, b, w)


def test_gather_gradient_accumulates_duplicate_rows():
    with precision("float64"):
        table = parameter(np.arange(12.0).reshape(4, 3), sparse=True)
        out = gather(table, np.array([1, 3, 1]))
        out.sum().backward()
    assert np.array_equal(table.grad[:, 0], [0.0, 2.0, 0.0, 1.0])
    assert sorted(table.touched_rows().tolist()) == [1, 3]


def test_gather_out_of_range():
    table = parameter(np.zeros((3, 2)))
    with pytest.raises(LookupError_):
        gather(table, np.array([0, 3]))
    with pytest.raises(LookupError_):
        gather(table, np.array([-1]))


def test_bce_matches_closed_form_and_gradient(rng):
    p = rng.uniform(0.05, 0.95, size=7)
    y = rng.integers(0, 2, size=7)
    with precision("float64"):
        loss = binary_cross_entropy(Tensor(p), y).item()
    expected = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert loss == pytest.approx(expected, rel=1e-12)
    _check(lambda q: binary_cross_entropy(sigmoid(q), y), rng.normal(size=7))


def test_bce_clamps_and_validates():
    with precision("float64"):
        prob = parameter(np.array([0.0, 1.0]))
        loss = binary_cross_entropy(prob, np.array([1, 0]))
        loss.backward()
    assert loss.item() == pytest.approx(-np.log(1e-7), rel=1e-9)
    assert np.array_equal(prob.grad, [0.0, 0.0])
    with pytest.raises(LabelError):
        binary_cross_entropy(Tensor([0.5]), np.array([2]))
    with pytest.raises(DimensionError):
        binary_cross_entropy(Tensor([0.5, 0.5]), np.array([1]))


def test_shape_errors():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        mul(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_non_finite_detected():
    x = parameter(np.array([1.0, np.inf]))
    with pytest.raises(NonFiniteError):
        (x * 2.0).sum().backward()


def test_backward_needs_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(DimensionError):
        (x * 2.0).backward()


def test_mlp_shapes_and_zero_last(rng):
    net = MLP([6, 3, 2], rng, zero_last=True)
    out = net(Tensor(rng.normal(size=(5, 6))))
    assert out.shape == (5, 2)
    assert np.all(out.data == 0.0)


def test_adam_first_step_moves_by_lr():
    # bias correction makes the first step lr * sign(g) up to eps
    p = parameter(np.array([1.0, -2.0, 3.0], dtype=np.float32))
    p.grad = np.array([0.5, -4.0, 0.0], dtype=np.float32)
    Adam([p], lr=1e-3, sparse=False).step()
    assert np.allclose(p.data, [0.999, -1.999, 3.0], atol=1e-6)


def test_sparse_adam_leaves_untouched_rows():
    table = parameter(np.ones((5, 2), dtype=np.float32), sparse=True)
    opt = Adam([table], lr=0.1)
    for rows in ([0, 2], [2]):
        opt.zero_grad()
        gather(table, np.array(rows)).sum().backward()
        opt.step()
    assert np.array_equal(table.data[[1, 3, 4]], np.ones((3, 2)))
    assert np.all(table.data[[0, 2]] < 1.0)
    assert np.array_equal(opt.m[0][[1, 3, 4]], np.zeros((3, 2)))


def test_sparse_and_dense_adam_agree_on_first_step(rng):
    data = rng.normal(size=(4, 3)).astype(np.float32)
    a, b = parameter(data.copy(), sparse=True), parameter(data.copy())
    for p in (a, b):
        gather(p, np.arange(4)).sum().backward()
    Adam([a]).step()
    Adam([b], sparse=False).step()
    assert np.allclose(a.data, b.data, rtol=1e-6, atol=1e-7)


def test_adam_state_mismatch():
    p = parameter(np.zeros(3))
    opt = Adam([p])
    with pytest.raises(StateError):
        adam_step([parameter(np.zeros(4))], opt)
    p.grad = np.zeros(4)
    with pytest.raises(StateError):
        opt.step()


@pytest.mark.parametrize("name", kernels.available_backends())
def test_backends_bit_identical(name, rng):
    ref, impl = kernels.get_backend("python"), kernels.get_backend(name)
    for dtype in (np.float32, np.float64):
        param = rng.normal(size=(30, 4)).astype(dtype)
        grad = rng.normal(size=(30, 4)).astype(dtype)
        rows = np.unique(rng.integers(0, 30, size=12)).astype(np.int64)
        outs = []
        for be in (ref, impl):
            p, m, v = param.copy(), np.full_like(param, 0.1), np.full_like(param, 0.2)
            be.sparse_adam_rows(p, grad, m, v, rows, 1e-3, 0.9, 0.999, 1e-8, 0.19, 0.002)
            dst = np.zeros_like(param)
            be.scatter_add_rows(dst, rows, grad[: len(rows)])
            outs.append((p, m, v, dst))
        for x, y in zip(*outs):
            assert np.array_equal(x, y)
    scores = np.sort(np.round(rng.random(200), 2))
    labels = rng.integers(0, 2, size=200).astype(np.int8)
    assert ref.rank_auc_sorted(scores, labels) == impl.rank_auc_sorted(scores, labels)


def test_training_is_deterministic(rng):
    def run():
        r = np.random.default_rng(7)
        net = MLP([3, 4, 1], r)
        opt = Adam(list(net.parameters().values()))
        x = Tensor(r.normal(size=(8, 3)))
        y = r.integers(0, 2, size=(8, 1))
        for _ in range(5):
            opt.zero_grad()
            binary_cross_entropy(sigmoid(net(x)), y).backward()
            opt.step()
        return [p.data.copy() for p in net.parameters().values()]
    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=8))
def test_sigmoid_gradient_property(xs):
    with precision("float64"):
        x = parameter(np.array(xs))
        sigmoid(x).sum().backward()
    s = 1.0 / (1.0 + np.exp(-np.array(xs)))
    assert np.allclose(x.grad, s * (1 - s), rtol=1e-12, atol=1e-15)


def test_pure_python_fallback_can_be_forced():
    import os
    import subprocess
    import sys
    env = dict(os.environ, MWUF_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import mwuf; print(mwuf.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
