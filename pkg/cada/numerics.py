###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
"""
Differentiable array substrate.

A define-by-run reverse-mode engine on top of numpy. Every forward op
records its parents and a backward closure; ``Tensor.backward`` walks the
graph in reverse topological order. Data is float32 unless a
``precision`` block says otherwise (gradient checks run in float64).

Also holds the parameter tree (``Module``/``Parameter``), AdamW, the cosine
learning-rate schedule, the finite-difference checker and the checkpoint
file format.
"""
import contextlib
from dataclasses import dataclass, field
import hashlib
import json
import math
from pathlib import Path
import struct

import numpy as np
from logbook import Logger
from scipy import stats

from cada.errors import (
    CheckError,
    DimensionError,
    NumericError,
    RestoreError,
    TrainingError,
)

log = Logger("cada.numerics")

_state = dict(dtype=np.float32, grad_enabled=True)

MASK_VALUE = -1e9


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors in ``dtype`` for the duration of the block."""
    previous = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad():
    """Forward ops inside the block build no graph."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def current_dtype():
    return _state["dtype"]


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    grad = _unbroadcast(grad, tensor.data.shape)
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.data.dtype)
    else:
        tensor.grad += grad


class Tensor:
    """n-dimensional value with an optional gradient buffer."""

    def __init__(self, data, requires_grad=False, _children=(), _op=""):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._prev = tuple(_children)
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    # Graph plumbing.
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward without a seed gradient needs a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)

        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    # Arithmetic.
    def __add__(self, other):
        other = as_tensor(other)

        def backward(g):
            _accumulate(self, g)
            _accumulate(other, g)

        return make_op(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        return make_op(-self.data, (self,), lambda g: _accumulate(self, -g), "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def backward(g):
            _accumulate(self, g * other.data)
            _accumulate(other, g * self.data)

        return make_op(self.data * other.data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)

        def backward(g):
            _accumulate(self, g / other.data)
            _accumulate(other, -g * self.data / (other.data * other.data))

        return make_op(self.data / other.data, (self, other), backward, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        exponent = float(exponent)
        out_data = self.data ** exponent

        def backward(g):
            _accumulate(self, g * exponent * self.data ** (exponent - 1.0))

        return make_op(out_data, (self,), backward, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        out_data = self.data[index]

        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            _accumulate(self, full)

        return make_op(out_data, (self,), backward, "index")

    # Reductions and reshapes.
    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(self, np.broadcast_to(g, self.data.shape))

        return make_op(out_data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        old_shape = self.data.shape

        def backward(g):
            _accumulate(self, g.reshape(old_shape))

        return make_op(self.data.reshape(*shape), (self,), backward, "reshape")

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.data.ndim)))
        inverse = np.argsort(axes)

        def backward(g):
            _accumulate(self, g.transpose(inverse))

        return make_op(self.data.transpose(axes), (self,), backward, "transpose")

    @property
    def T(self):
        axes = list(range(self.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(*axes)

    # Elementwise.
    def exp(self):
        out_data = np.exp(self.data)
        return make_op(out_data, (self,), lambda g: _accumulate(self, g * out_data), "exp")

    def log(self):
        return make_op(
            np.log(self.data), (self,), lambda g: _accumulate(self, g / self.data), "log"
        )

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def make_op(data, parents, backward, op=""):
    """Wrap ``data`` as the output of an op; records the graph when needed."""
    needs_grad = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    if not needs_grad:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, _children=parents, _op=op)
    out._backward = backward
    return out


# Forward operators.
def matmul(a, b):
    """Matrix product over the last two axes (batched when ndim > 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return make_op(a.data @ b.data, (a, b), backward, "matmul")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            _accumulate(t, g[tuple(index)])

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return make_op(data, tuple(tensors), backward, "concat")


def take(x, indices, axis=0):
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0) if indices.ndim == 1 else g)
        _accumulate(x, full)

    return make_op(np.take(x.data, indices, axis=axis), (x,), backward, "take")


def _check_finite(x, name):
    if np.isnan(x.data).any():
        raise NumericError(f"{name} received NaN input with shape {x.shape}")


def softmax(x, axis=-1):
    x = as_tensor(x)
    _check_finite(x, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(x, out_data * (g - dot))

    return make_op(out_data, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    _check_finite(x, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        probs = np.exp(out_data)
        _accumulate(x, g - probs * g.sum(axis=axis, keepdims=True))

    return make_op(out_data, (x,), backward, "log_softmax")


def kl_div(p, q, eps=1e-8):
    """
    sum_i p_i * log((p_i + eps) / (q_i + eps)) along the last axis.

    The smoothing constant makes the divergence against a one-hot target
    finite. Either argument may carry a gradient.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_div length mismatch: {p.shape} vs {q.shape}")
    return (p * ((p + eps).log() - (q + eps).log())).sum(axis=-1)


def gelu(x):
    x = as_tensor(x)
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        grad = 0.5 * (1.0 + t) + 0.5 * x.data * sech2 * c * (1.0 + 3 * 0.044715 * x.data ** 2)
        _accumulate(x, g * grad)

    return make_op(out_data, (x,), backward, "gelu")


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalise over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    if gamma is not None and gamma.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm gamma {gamma.shape} does not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    std = np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered / std
    out_data = x_hat
    if gamma is not None:
        out_data = out_data * gamma.data
    if beta is not None:
        out_data = out_data + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        if gamma is not None:
            _accumulate(gamma, (g * x_hat).sum(axis=lead))
            g_hat = g * gamma.data
        else:
            g_hat = g
        if beta is not None:
            _accumulate(beta, g.sum(axis=lead))
        if x.requires_grad:
            dx = (
                g_hat
                - g_hat.mean(axis=-1, keepdims=True)
                - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
            ) / std
            _accumulate(x, dx)

    return make_op(out_data, parents, backward, "layer_norm")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(f"linear input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight.T)
    if bias is not None:
        out = out + bias
    return out


def embedding_lookup(table, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding ids outside table of {table.shape[0]} rows")
    return take(table, ids, axis=0)


def mean_pool(x, axis=0, start=None, stop=None):
    """Mean over ``axis``, optionally over the window [start, stop)."""
    x = as_tensor(x)
    if start is not None or stop is not None:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, stop)
        x = x[tuple(index)]
    if x.shape[axis] == 0:
        raise DimensionError("mean_pool over an empty window")
    return x.mean(axis=axis)


def l2_normalize(x, axis=-1, eps=1e-12):
    x = as_tensor(x)
    norm = ((x * x).sum(axis=axis, keepdims=True) + eps) ** 0.5
    return x / norm


def cosine_matrix(a, b):
    """Pairwise cosine similarity between the rows of ``a`` and ``b``."""
    return matmul(l2_normalize(a), l2_normalize(b).T)


def _split_heads(x, heads):
    batch, length, width = x.shape
    return x.reshape(batch, length, heads, width // heads).transpose(0, 2, 1, 3)


def attention(q, k, v, mask=None, heads=1, return_weights=False):
    """
    Multi-head scaled dot-product attention.

    :param q: (B, Lq, d) or (Lq, d) queries.
    :param k: (B, Lk, d) or (Lk, d) keys.
    :param v: same layout as ``k``.
    :param mask: optional boolean (B, Lk) or (Lk,) array, True marks a padded
        key that must receive zero weight.
    :return: concatenated head outputs (same layout as ``q``), plus the
        (B, heads, Lq, Lk) weight array when ``return_weights``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    unbatched = q.ndim == 2
    if unbatched:
        q, k, v = q.reshape(1, *q.shape), k.reshape(1, *k.shape), v.reshape(1, *v.shape)
    if q.shape[-1] != k.shape[-1] or k.shape[:2] != v.shape[:2]:
        raise DimensionError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    if q.shape[-1] % heads:
        raise DimensionError(f"width {q.shape[-1]} not divisible by {heads} heads")
    batch, q_len, width = q.shape
    k_len = k.shape[1]

    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(width // heads))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 1:
            mask = np.broadcast_to(mask, (batch, mask.shape[0]))
        if mask.shape[-1] != k_len:
            raise DimensionError(f"mask length {mask.shape[-1]} does not match key length {k_len}")
        additive = np.where(mask, MASK_VALUE, 0.0)[:, None, None, :]
        scores = scores + additive
    weights = softmax(scores, axis=-1)
    out = matmul(weights, vh).transpose(0, 2, 1, 3).reshape(batch, q_len, width)
    if unbatched:
        out = out.reshape(q_len, width)
    if return_weights:
        return out, weights.data
    return out


# Parameter tree.
def truncated_normal(rng, shape, std=0.02):
    values = stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=np.float32)


class Parameter(Tensor):
    """Trainable leaf tensor. ``name`` is set by the owning module tree."""

    def __init__(self, data, name=""):
        super().__init__(np.array(data, dtype=np.float32), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name


class Module:
    """Named tree of parameters and sub-modules."""

    def __init__(self):
        self._parameters = {}
        self._modules = {}

    def add_parameter(self, name, value):
        assert isinstance(value, Parameter)
        self._parameters[name] = value
        return value

    def add_module(self, name, module):
        assert isinstance(module, Module)
        self._modules[name] = module
        return module

    def named_parameters(self, prefix=""):
        """Every path to a parameter, aliases included."""
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + ".")

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for name, module in self._modules.items():
            yield from module.named_modules(prefix + name + ".")

    def parameters(self):
        """Distinct parameter storages, each once, in first-seen order."""
        seen = set()
        for _, param in self.named_parameters():
            if id(param) not in seen:
                seen.add(id(param))
                yield param

    def canonical_names(self):
        """Map every path to the first path that reaches the same storage."""
        first, names = {}, {}
        for path, param in self.named_parameters():
            first.setdefault(id(param), path)
            names[path] = first[id(param)]
        for param in self.parameters():
            param.name = first[id(param)]
        return names

    def shared_with(self, path):
        """Other paths aliasing the storage at ``path`` (symmetric)."""
        params = dict(self.named_parameters())
        target = params[path]
        return sorted(p for p, param in params.items() if param is target and p != path)

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# Optimisation.
@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 0.0


def adamw_step(params, grads, state, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
    """
    One decoupled-weight-decay Adam update, in place.

    :param params: dict name -> Parameter, one entry per distinct storage.
    :param grads: dict name -> gradient array.
    :param state: OptimizerState, updated in place.
    :return: number of storages updated.
    """
    storages = {}
    for name, param in params.items():
        if id(param.data) in storages:
            raise TrainingError(
                f"parameters {storages[id(param.data)]} and {name} share storage; "
                "pass each storage once"
            )
        storages[id(param.data)] = name

    state.step += 1
    state.lr = lr
    b1, b2 = betas
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    updated = 0
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            raise TrainingError(f"missing gradient for parameter {name}")
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        if weight_decay:
            param.data *= 1.0 - lr * weight_decay
        param.data -= (lr * (m / correction1) / (np.sqrt(v / correction2) + eps)).astype(
            param.data.dtype
        )
        updated += 1
    return updated


class AdamW:
    """AdamW over the distinct storages of a module tree."""

    def __init__(self, module, lr=3e-4, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.module = module
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = OptimizerState(lr=lr)
        self.update_counts = {}
        self.last_update_count = 0

    def params(self):
        names = self.module.canonical_names()
        return {names[path]: param for path, param in self.module.named_parameters() if names[path] == path}

    def zero_grad(self):
        self.module.zero_grad()

    def step(self, lr=None):
        params = self.params()
        grads = {name: param.grad for name, param in params.items()}
        self.last_update_count = adamw_step(
            params,
            grads,
            self.state,
            self.lr if lr is None else lr,
            self.weight_decay,
            self.betas,
            self.eps,
        )
        for name in params:
            self.update_counts[name] = self.update_counts.get(name, 0) + 1
        return self.last_update_count


class CosineSchedule:
    """Cosine decay from ``lr`` at step 0 to ``lr * min_ratio`` at the last step."""

    def __init__(self, lr, total_steps, warmup=0, min_ratio=0.01):
        self.lr = lr
        self.total_steps = max(int(total_steps), 1)
        self.warmup = warmup
        self.min_ratio = min_ratio

    def __call__(self, step):
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(self.total_steps - 1 - self.warmup, 1)
        progress = min(max(step - self.warmup, 0) / span, 1.0)
        scale = self.min_ratio + (1.0 - self.min_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress))
        return self.lr * scale


# Gradient checking.
@dataclass
class FiniteDiffReport:
    max_rel_error: float
    per_parameter: dict
    checked: int
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def finite_diff_check(
    loss_fn,
    params,
    h=1e-4,
    tolerance=1e-3,
    samples=12,
    rng=None,
    dtype=np.float64,
    floor=1e-6,
):
    """
    Compare analytic gradients with central differences.

    :param loss_fn: zero-argument callable returning a scalar Tensor built
        from ``params``.
    :param params: dict name -> Parameter (or a Module).
    :param h: step size, within [1e-4, 1e-2].
    :param samples: coordinates checked per parameter; half of them are the
        largest-magnitude analytic entries, the rest random.
    :param dtype: shadow precision the check runs in. Parameter storage is
        restored afterwards, in place.
    :return FiniteDiffReport:
    """
    if not 1e-4 <= h <= 1e-2:
        raise CheckError(f"finite-difference step {h} outside [1e-4, 1e-2]")
    if isinstance(params, Module):
        names = params.canonical_names()
        params = {names[p]: param for p, param in params.named_parameters() if names[p] == p}
    rng = rng or np.random.default_rng(0)

    originals = {name: (param.data, param.grad) for name, param in params.items()}
    try:
        with precision(dtype):
            for param in params.values():
                param.data = param.data.astype(dtype)
                param.grad = np.zeros_like(param.data)

            first, second = loss_fn().item(), loss_fn().item()
            if first != second:
                raise CheckError(f"loss_fn is not deterministic: {first!r} != {second!r}")

            loss = loss_fn()
            loss.backward()
            analytic = {name: param.grad.copy() for name, param in params.items()}

            per_parameter, checked = {}, 0
            for name, param in params.items():
                flat = param.data.reshape(-1)
                grad = analytic[name].reshape(-1)
                top = np.argsort(-np.abs(grad), kind="stable")[: max(samples // 2, 1)]
                extra = rng.choice(flat.size, size=min(samples - len(top), flat.size), replace=False)
                worst = 0.0
                for index in np.unique(np.concatenate([top, extra])):
                    saved = flat[index]
                    flat[index] = saved + h
                    plus = loss_fn().item()
                    flat[index] = saved - h
                    minus = loss_fn().item()
                    flat[index] = saved
                    numeric = (plus - minus) / (2 * h)
                    denom = max(abs(numeric), abs(grad[index]), floor)
                    worst = max(worst, abs(numeric - grad[index]) / denom)
                    checked += 1
                per_parameter[name] = worst
    finally:
        for name, param in params.items():
            data, grad = originals[name]
            param.data = data
            param.grad = grad
            if grad is not None:
                grad.fill(0.0)

    max_rel = max(per_parameter.values()) if per_parameter else 0.0
    log.debug(f"finite difference check: {checked} coordinates, max rel error {max_rel:.3e}")
    return FiniteDiffReport(max_rel, per_parameter, checked, tolerance)


# Checkpoints.
CHECKPOINT_MAGIC = b"CADACKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, module, optimizer=None, config_hash="", step=0, meta=None):
    """
    Write a self-describing checkpoint.

    Layout: magic, uint32 version, uint32 header length, UTF-8 JSON header,
    then the little-endian float32 payload of every tensor listed in the
    header. Aliased parameters are stored once and listed in ``aliases``.
    """
    names = module.canonical_names()
    tensors, chunks, offset = [], [], 0

    def add(name, array):
        nonlocal offset
        blob = np.ascontiguousarray(array, dtype="<f4").tobytes()
        tensors.append(dict(name=name, shape=list(array.shape), offset=offset, nbytes=len(blob)))
        chunks.append(blob)
        offset += len(blob)

    for path, param in module.named_parameters():
        if names[path] == path:
            add(path, param.data)
    if optimizer is not None:
        for name in sorted(optimizer.state.m):
            add("optim.m/" + name, optimizer.state.m[name])
            add("optim.v/" + name, optimizer.state.v[name])

    payload = b"".join(chunks)
    header = dict(
        version=CHECKPOINT_VERSION,
        config_hash=config_hash,
        step=int(step),
        aliases={p: c for p, c in names.items() if p != c},
        tensors=tensors,
        optimizer=None
        if optimizer is None
        else dict(step=optimizer.state.step, lr=optimizer.state.lr),
        payload_sha256=hashlib.sha256(payload).hexdigest(),
        meta=meta or {},
    )
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    log.info(f"checkpoint written to {path} at step {step}")
    return header


def read_checkpoint(path):
    """Parse and verify a checkpoint. Returns (header, dict name -> array)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise RestoreError(f"cannot read checkpoint {path}: {e}")
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 16:
        raise RestoreError(f"{path} is not a checkpoint file")
    version, header_len = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise RestoreError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise RestoreError(f"corrupted checkpoint header in {path}: {e}")
    payload = raw[16 + header_len :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise RestoreError(f"checkpoint payload checksum mismatch in {path}")
    arrays = {}
    for entry in header["tensors"]:
        blob = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
    return header, arrays


def load_checkpoint(path, module, optimizer=None, expected_hash=None, expected_config=None):
    """
    Restore weights (and optimizer state) into existing storage.

    :raises RestoreError: corrupted file, hash mismatch (with the differing
        config keys in ``diff``) or missing/ill-shaped tensors.
    """
    header, arrays = read_checkpoint(path)
    if expected_hash is not None and header["config_hash"] != expected_hash:
        stored = header.get("meta", {}).get("config", {})
        diff = {}
        if expected_config is not None:
            for key in sorted(set(stored) | set(expected_config)):
                if stored.get(key) != expected_config.get(key):
                    diff[key] = (stored.get(key), expected_config.get(key))
        raise RestoreError(
            f"checkpoint config hash {header['config_hash']} != {expected_hash}; differing keys: "
            + ", ".join(f"{k}: {a!r} -> {b!r}" for k, (a, b) in diff.items()),
            diff=diff,
        )

    names = module.canonical_names()
    for path_, param in module.named_parameters():
        if names[path_] != path_:
            continue
        if path_ not in arrays:
            raise RestoreError(f"checkpoint has no tensor for parameter {path_}")
        if arrays[path_].shape != param.data.shape:
            raise RestoreError(
                f"shape mismatch for {path_}: checkpoint {arrays[path_].shape} vs model {param.data.shape}"
            )
        param.data[...] = arrays[path_]
    for alias, canonical in header.get("aliases", {}).items():
        if names.get(alias) != canonical:
            raise RestoreError(f"alias {alias} -> {canonical} is not shared in this model")

    if optimizer is not None:
        if header.get("optimizer") is None:
            raise RestoreError(f"checkpoint {path} carries no optimizer state")
        optimizer.state.step = header["optimizer"]["step"]
        optimizer.state.lr = header["optimizer"]["lr"]
        optimizer.state.m = {k[len("optim.m/") :]: v.copy() for k, v in arrays.items() if k.startswith("optim.m/")}
        optimizer.state.v = {k[len("optim.v/") :]: v.copy() for k, v in arrays.items() if k.startswith("optim.v/")}
    log.info(f"checkpoint {path} restored at step {header['step']}")
    return header
