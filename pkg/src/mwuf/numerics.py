"""Dense tensors with reverse-mode autodiff and a row-sparse Adam optimizer.

Tensors wrap numpy arrays. Every differentiable op records its parents and a
backward closure; :meth:`Tensor.backward` walks the graph in reverse
topological order. Embedding tables are gathered row-wise and receive
scattered gradients, which the optimizer consumes sparsely.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from . import kernels

EPS_CLIP = 1e-7

_dtype = np.float32


class DimensionError(ValueError):
    pass


class LookupError_(IndexError):
    """Row index outside an embedding table."""


class LabelError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class StateError(ValueError):
    pass


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. float64 for grad checks)."""
    global _dtype
    old = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "sparse", "name",
                 "_parents", "_backward", "_touched", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None, sparse=False):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.sparse = sparse
        self.name = name
        self._parents = ()
        self._backward = None
        self._touched = []

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        """Same values, cut from the graph."""
        return Tensor(self.data, dtype=self.data.dtype.type)

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        elif self.sparse and self._touched:
            rows = np.unique(np.concatenate(self._touched))
            self.grad[rows] = 0
        else:
            self.grad.fill(0)
        self._touched = []

    def touched_rows(self):
        if not self._touched:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(self._touched))

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_reduce(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_dtype))


def parameter(data, name=None, sparse=False):
    return Tensor(np.array(data, dtype=_dtype), requires_grad=True, name=name, sparse=sparse)


def _result(data, parents, backward_fn, what):
    _check_finite(data, what)
    out = Tensor(data, dtype=data.dtype.type)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.shape)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), _bw, "add")


def neg(a):
    def _bw(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), _bw, "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), _bw, "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), _bw, "matmul")


def relu(a):
    mask = a.data > 0

    def _bw(g):
        _accumulate(a, g * mask)

    return _result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), _bw, "relu")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    s = _sigmoid(a.data)

    def _bw(g):
        _accumulate(a, g * s * (1 - s))

    return _result(s, (a,), _bw, "sigmoid")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=ax),
                   tuple(tensors), _bw, "concat")


def reduce_sum(a, axis=None, keepdims=False):
    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), _bw, "sum")


def mean_reduce(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else a.shape[axis]

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape))

    return _result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), _bw, "mean")


def reshape(a, shape):
    def _bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), _bw, "reshape")


def gather(table, index):
    """Rows of ``table`` at ``index``; output shape is ``index.shape + (k,)``.

    The backward pass scatters into only the gathered rows and records them so
    a sparse optimizer can skip everything else.
    """
    index = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"gather: table must be 2-D, got {table.shape}")
    n_rows = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        bad = index[(index < 0) | (index >= n_rows)][0]
        raise LookupError_(f"gather: row {bad} outside table of {n_rows} rows")
    flat = np.ascontiguousarray(index.reshape(-1))

    def _bw(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        src = np.ascontiguousarray(g.reshape(-1, table.shape[1]), dtype=table.data.dtype)
        kernels.scatter_add_rows(table.grad, flat, src)
        table._touched.append(flat)

    return _result(table.data[index], (table,), _bw, "gather")


def binary_cross_entropy(prob, labels):
    """Mean log-loss; probabilities are clamped to [EPS_CLIP, 1 - EPS_CLIP]."""
    y = np.asarray(labels)
    if y.shape != prob.shape:
        raise DimensionError(f"bce: labels {y.shape} vs predictions {prob.shape}")
    if not np.isin(y, (0, 1)).all():
        raise LabelError("labels must be 0 or 1")
    y = y.astype(prob.data.dtype)
    p_raw = prob.data
    p = np.clip(p_raw, EPS_CLIP, 1 - EPS_CLIP)
    inside = (p_raw >= EPS_CLIP) & (p_raw <= 1 - EPS_CLIP)
    n = max(p.size, 1)
    loss = -(y * np.log(p) + (1 - y) * np.log1p(-p)).sum() / n

    def _bw(g):
        dp = (-y / p + (1 - y) / (1 - p)) / n
        _accumulate(prob, g * dp * inside)

    return _result(np.asarray(loss, dtype=p_raw.dtype), (prob,), _bw, "binary_cross_entropy")


# ---------------------------------------------------------------- backward

def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every leaf that requires gradients below ``loss``."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        _check_finite(node.grad, "gradient")
        node._backward(node.grad)
        # free intermediate buffers
        node.grad = None
    for node in order:
        if node._backward is None and node.grad is not None:
            _check_finite(node.grad, f"gradient of {node.name or 'leaf'}")


# ---------------------------------------------------------------- layers

def glorot_uniform(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Dense:
    def __init__(self, fan_in, fan_out, rng, name="dense", zero=False):
        w = np.zeros((fan_in, fan_out)) if zero else glorot_uniform(rng, fan_in, fan_out)
        self.weight = parameter(w, name=f"{name}.weight")
        self.bias = parameter(np.zeros(fan_out), name=f"{name}.bias")

    def __call__(self, x):
        return matmul(x, self.weight) + self.bias

    def parameters(self):
        return {self.weight.name: self.weight, self.bias.name: self.bias}


class MLP:
    """ReLU hidden layers followed by a linear output layer."""

    def __init__(self, sizes, rng, name="mlp", zero_last=False):
        self.layers = [
            Dense(a, b, rng, name=f"{name}.{i}", zero=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        return self.layers[-1](x)

    def parameters(self):
        out = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out


# ---------------------------------------------------------------- optimizer

class Adam:
    """Bias-corrected Adam over a list of tensors.

    Tensors flagged ``sparse`` only update the rows gathered since the last
    ``zero_grad``; untouched rows keep their moments and values.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, sparse=True):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.sparse = sparse
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if m.shape != p.shape:
                raise StateError(f"optimizer state {m.shape} does not match parameter {p.shape}")
            if p.grad is None:
                continue
            if p.grad.shape != p.shape:
                raise StateError(f"gradient {p.grad.shape} does not match parameter {p.shape}")
            if self.sparse and p.sparse:
                rows = p.touched_rows()
                if rows.size:
                    kernels.sparse_adam_rows(p.data, p.grad, m, v, rows, self.lr,
                                             self.beta1, self.beta2, self.eps, bias1, bias2)
            else:
                _dense_adam(p.data, p.grad, m, v, self.lr, self.beta1, self.beta2,
                            self.eps, bias1, bias2)

    def state_dict(self):
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


def _dense_adam(param, grad, m, v, lr, beta1, beta2, eps, bias1, bias2):
    dt = param.dtype.type
    m *= dt(beta1)
    m += dt(1.0 - beta1) * grad
    v *= dt(beta2)
    v += dt(1.0 - beta2) * grad * grad
    param -= dt(lr) * (m / dt(bias1)) / (np.sqrt(v / dt(bias2)) + dt(eps))


def adam_step(params, state):
    """Apply one Adam step using the gradients already on ``params``."""
    if [p.shape for p in params] != [m.shape for m in state.m]:
        raise StateError("parameter list does not match optimizer state")
    state.step()
    return params
