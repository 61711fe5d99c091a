"""
Small reverse-mode autodiff over numpy arrays, plus what training needs on top
of it: a named parameter store, Adam/AdamW, the warmup schedule, label-smoothed
cross-entropy and a finite-difference gradient checker.

Every layer in the repo is written against the ops in this file. Tensors carry
float arrays; integer token ids stay plain numpy arrays and enter the graph
through ``embedding``.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
MASK_VALUE = -1e9

_STATE = {"grad": True, "dtype": np.float32}


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, generation, oracle)."""
    previous = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = previous


@contextlib.contextmanager
def precision(dtype):
    """Set the float dtype for tensors created inside the block."""
    previous = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _STATE["dtype"] = previous


def default_dtype():
    return _STATE["dtype"]


def _as_float(data):
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data
    return np.asarray(data, dtype=_STATE["dtype"])


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    A node on the tape: an array, its accumulated gradient and the closure
    that pushes the gradient to its parents.
    """
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backprop", "_op")
    __array_priority__ = 100

    def __init__(self, data, _children=(), _op="", requires_grad=False):
        self.data = _as_float(data)
        self.grad = None
        self._backprop = None
        self._op = _op
        tracked = _STATE["grad"] and (requires_grad or any(c.requires_grad for c in _children))
        self.requires_grad = tracked
        self._prev = tuple(_children) if tracked else ()

    # -- plumbing ----------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def _accumulate(self, grad):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + grad

    def backward(self, grad=None):
        """Run the chain rule from this node back to every tracked leaf."""
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
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))

        self.grad = np.ones_like(self.data) if grad is None else _as_float(grad)
        for node in reversed(topo):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r})"

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def tensor(data, requires_grad=False):
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def add(a, b):
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _backprop(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))
        out._backprop = _backprop
    return out


def neg(a):
    a = _lift(a)
    out = Tensor(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backprop = lambda g: a._accumulate(-g)
    return out


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _backprop(g):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
            b._accumulate(_unbroadcast(g * a.data, b.shape))
        out._backprop = _backprop
    return out


def div(a, b):
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def _backprop(g):
            a._accumulate(_unbroadcast(g / b.data, a.shape))
            b._accumulate(_unbroadcast(-g * a.data / (b.data ** 2), b.shape))
        out._backprop = _backprop
    return out


def power(a, exponent):
    a = _lift(a)
    out = Tensor(a.data ** exponent, (a,), "pow")
    if out.requires_grad:
        out._backprop = lambda g: a._accumulate(g * exponent * a.data ** (exponent - 1))
    return out


def exp(a):
    a = _lift(a)
    out = Tensor(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        out._backprop = lambda g: a._accumulate(g * out.data)
    return out


def log(a):
    a = _lift(a)
    out = Tensor(np.log(a.data), (a,), "log")
    if out.requires_grad:
        out._backprop = lambda g: a._accumulate(g / a.data)
    return out


def tanh(a):
    a = _lift(a)
    out = Tensor(np.tanh(a.data), (a,), "tanh")
    if out.requires_grad:
        out._backprop = lambda g: a._accumulate(g * (1.0 - out.data ** 2))
    return out


def sigmoid(a):
    a = _lift(a)
    value = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    out = Tensor(value.astype(a.data.dtype, copy=False), (a,), "sigmoid")
    if out.requires_grad:
        out._backprop = lambda g: a._accumulate(g * out.data * (1.0 - out.data))
    return out


def relu(a):
    a = _lift(a)
    out = Tensor(np.maximum(a.data, 0), (a,), "relu")
    if out.requires_grad:
        out._backprop = lambda g: a._accumulate(g * (a.data > 0))
    return out


def masked_fill(a, mask, value=MASK_VALUE):
    """Replace entries where ``mask`` (a broadcastable bool array) is True."""
    a = _lift(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = Tensor(np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data), (a,), "masked_fill")
    if out.requires_grad:
        out._backprop = lambda g: a._accumulate(np.where(mask, 0, g))
    return out


def dropout(a, rate, rng):
    """Inverted dropout; identity when ``rate`` is 0 or no rng is given."""
    if rate <= 0 or rng is None:
        return _lift(a)
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _backprop(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))
        out._backprop = _backprop
    return out


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def tmax(a, axis, keepdims=False):
    """Max over one axis; ties send the gradient to the first maximum."""
    a = _lift(a)
    idx = np.argmax(a.data, axis=axis)
    value = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    out = Tensor(value if keepdims else np.squeeze(value, axis=axis), (a,), "max")
    if out.requires_grad:
        def _backprop(g):
            full = np.zeros_like(a.data)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(full, np.expand_dims(idx, axis), gg, axis=axis)
            a._accumulate(full)
        out._backprop = _backprop
    return out


def reshape(a, shape):
    a = _lift(a)
    out = Tensor(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backprop = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def transpose(a, axes=None):
    a = _lift(a)
    out = Tensor(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        inverse = None if axes is None else np.argsort(axes)
        out._backprop = lambda g: a._accumulate(np.transpose(g, inverse))
    return out


def getitem(a, index):
    a = _lift(a)
    out = Tensor(a.data[index], (a,), "getitem")
    if out.requires_grad:
        def _backprop(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)
        out._backprop = _backprop
    return out


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if out.requires_grad:
        sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

        def _backprop(g):
            for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
                t._accumulate(piece)
        out._backprop = _backprop
    return out


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in tensors], axis=axis)


# ---------------------------------------------------------------------------
# linear algebra and layers
# ---------------------------------------------------------------------------
def matmul(a, b):
    a, b = _lift(a), _lift(b)
    out = Tensor(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        def _backprop(g):
            if b.ndim == 1:
                # (..., d) @ (d,) -> (...)
                if a.requires_grad:
                    a._accumulate(g[..., None] * b.data)
                if b.requires_grad:
                    b._accumulate((a.data * g[..., None]).reshape(-1, b.shape[0]).sum(axis=0))
                return
            if a.requires_grad:
                a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
        out._backprop = _backprop
    return out


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else out + bias


def softmax(a, axis=-1):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=axis, keepdims=True), (a,), "softmax")
    if out.requires_grad:
        def _backprop(g):
            s = out.data
            a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))
        out._backprop = _backprop
    return out


def log_softmax(a, axis=-1):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - logz, (a,), "log_softmax")
    if out.requires_grad:
        def _backprop(g):
            s = np.exp(out.data)
            a._accumulate(g - s * g.sum(axis=axis, keepdims=True))
        out._backprop = _backprop
    return out


def embedding(table, ids):
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = _lift(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids], (table,), "embedding")
    if out.requires_grad:
        def _backprop(g):
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table._accumulate(full)
        out._backprop = _backprop
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    return centered * power(var + eps, -0.5) * gamma + beta


def positional_mean(x, operator):
    """
    Apply a fixed averaging operator along the position axis of ``x``
    (batch, L, d): ``out[:, i] = sum_j operator[i, j] * x[:, j]``.

    Window means, masked window means and block pooling are all instances of
    this op. The sum is accumulated in float64 and cast back.
    """
    x = _lift(x)
    op64 = np.asarray(operator, dtype=np.float64)
    value = np.einsum("ij,bjd->bid", op64, x.data.astype(np.float64))
    out = Tensor(value.astype(x.data.dtype), (x,), "positional_mean")
    if out.requires_grad:
        def _backprop(g):
            back = np.einsum("ij,bid->bjd", op64, g.astype(np.float64))
            x._accumulate(back.astype(x.data.dtype))
        out._backprop = _backprop
    return out


def window_operator(length, window):
    """Block-averaging matrix (ceil(L/window), L); the last block may be partial."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    rows = -(-length // window)
    op = np.zeros((rows, length))
    for r in range(rows):
        lo, hi = r * window, min(length, (r + 1) * window)
        op[r, lo:hi] = 1.0 / (hi - lo)
    return op


def pool_mean(x, window):
    """Non-overlapping mean pooling over positions of (batch, L, d)."""
    return positional_mean(x, window_operator(x.shape[1], window))


def pool_max(x, window):
    """Non-overlapping max pooling over positions of (batch, L, d); L % window == 0."""
    batch, length, dim = x.shape
    if length % window:
        raise ValueError(f"length {length} is not a multiple of window {window}")
    return tmax(reshape(x, (batch, length // window, window, dim)), axis=2)


def _pad_amounts(width, padding):
    if padding == "causal":
        return width - 1, 0
    if padding == "centered":
        left = (width - 1) // 2
        return left, width - 1 - left
    raise ValueError(f"unknown padding mode {padding!r}")


def conv1d(x, weight, bias=None, padding="causal"):
    """
    1-D convolution over positions. ``x`` is (batch, L, c_in), ``weight`` is
    (width, c_in, c_out); output is (batch, L, c_out). ``causal`` left-pads
    width-1 zeros so position t only sees t-width+1..t; ``centered`` splits
    the padding so the kernel reaches both ways.
    """
    x, weight = _lift(x), _lift(weight)
    width = weight.shape[0]
    left, right = _pad_amounts(width, padding)
    length = x.shape[1]
    xpad = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    value = sum(np.matmul(xpad[:, k:k + length, :], weight.data[k]) for k in range(width))
    out = Tensor(value, (x, weight), "conv1d")
    if out.requires_grad:
        def _backprop(g):
            if x.requires_grad:
                gpad = np.zeros_like(xpad)
                for k in range(width):
                    gpad[:, k:k + length, :] += np.matmul(g, weight.data[k].T)
                x._accumulate(gpad[:, left:left + length, :])
            if weight.requires_grad:
                gw = np.stack([np.einsum("blc,blo->co", xpad[:, k:k + length, :], g) for k in range(width)])
                weight._accumulate(gw)
        out._backprop = _backprop
    return out if bias is None else out + bias


def depthwise_conv1d(x, kernel, padding="centered"):
    """Per-channel 1-D convolution: ``kernel`` is (width, d) for x (batch, L, d)."""
    x, kernel = _lift(x), _lift(kernel)
    width = kernel.shape[0]
    left, right = _pad_amounts(width, padding)
    length = x.shape[1]
    xpad = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    value = sum(xpad[:, k:k + length, :] * kernel.data[k] for k in range(width))
    out = Tensor(value, (x, kernel), "depthwise_conv1d")
    if out.requires_grad:
        def _backprop(g):
            if x.requires_grad:
                gpad = np.zeros_like(xpad)
                for k in range(width):
                    gpad[:, k:k + length, :] += g * kernel.data[k]
                x._accumulate(gpad[:, left:left + length, :])
            if kernel.requires_grad:
                kernel._accumulate(np.stack([(xpad[:, k:k + length, :] * g).sum(axis=(0, 1))
                                             for k in range(width)]))
        out._backprop = _backprop
    return out


def required_ops():
    """The op inventory every layer in the repo is built from."""
    return {
        "matmul": matmul, "add": add, "tanh": tanh, "sigmoid": sigmoid, "relu": relu,
        "softmax": softmax, "pool_mean": pool_mean, "pool_max": pool_max,
        "embedding": embedding, "conv1d": conv1d, "depthwise_conv1d": depthwise_conv1d,
        "layer_norm": layer_norm, "concat": concat, "masked_fill": masked_fill,
    }


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------
@dataclass
class TrainHyper:
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    warmup_steps: int = 0
    batch_size: int = 32
    label_smoothing: float = 0.0
    max_steps: int = 5000
    patience: int = 10
    weight_decay: float = 0.01
    schedule: str = "constant"
    clip_norm: float = 1.0
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"optimizer must be adam or adamw, got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.schedule not in ("constant", "inverse_sqrt"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


class ParamStore:
    """
    Named float parameter arrays plus Adam moment slots.

    :param dtype: storage dtype of parameters (float32 for training).
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.m = {}
        self.v = {}

    def add(self, name, array):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        array = np.array(array, dtype=self.dtype)
        self.params[name] = array
        self.m[name] = np.zeros_like(array)
        self.v[name] = np.zeros_like(array)
        return array

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def tensors(self, requires_grad=True):
        """Fresh leaf tensors over the stored arrays for one forward pass."""
        return {name: Tensor(arr, requires_grad=requires_grad) for name, arr in self.params.items()}

    def copy(self):
        clone = ParamStore(self.dtype)
        for name, arr in self.params.items():
            clone.params[name] = arr.copy()
            clone.m[name] = self.m[name].copy()
            clone.v[name] = self.v[name].copy()
        return clone

    def astype(self, dtype):
        clone = ParamStore(dtype)
        for name, arr in self.params.items():
            clone.add(name, arr)
        return clone


def collect_grads(tensors):
    """Map name -> gradient array (None when the parameter was not used)."""
    return {name: t.grad for name, t in tensors.items()}


def lr_schedule(step, hyper):
    """Linear warmup from 0 to 1 over ``warmup_steps``, then 1 (or inverse-sqrt decay)."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    warmup = hyper.warmup_steps
    if warmup > 0 and step < warmup:
        return step / warmup
    if hyper.schedule == "inverse_sqrt" and warmup > 0:
        return math.sqrt(warmup / max(step, 1))
    return 1.0


def clip_grad_norm(grads, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
    if max_norm and max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * scale
    return total


def optimizer_step(store, grads, hyper, step, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    One Adam/AdamW update in place. ``step`` is the 1-based update number: it
    drives bias correction and the learning-rate schedule.
    """
    if step < 1:
        raise ValueError(f"step is 1-based, got {step}")
    lr = hyper.learning_rate * lr_schedule(step, hyper)
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    for name, param in store.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param)
        if g.shape != param.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {param.shape}")
        g = g.astype(store.dtype, copy=False)
        m = store.m[name] = beta1 * store.m[name] + (1 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1 - beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        if hyper.optimizer == "adamw" and hyper.weight_decay > 0:
            param -= (lr * hyper.weight_decay * param).astype(store.dtype)
        param -= (lr * update).astype(store.dtype)
    return store


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def smoothed_ce(logits, target_ids, smoothing=0.0, ignore_id=PAD_ID):
    """
    Mean cross-entropy of ``logits`` (..., V) against the mixture of a
    (1 - s) one-hot and an s/V uniform. Positions whose target is
    ``ignore_id`` are left out of the mean.
    """
    logits = _lift(logits)
    vocab = logits.shape[-1]
    targets = np.asarray(target_ids, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    keep = np.ones(targets.shape, dtype=bool) if ignore_id is None else targets != ignore_id
    if np.any((targets[keep] < 0) | (targets[keep] >= vocab)):
        raise ValueError(f"target id out of range [0, {vocab})")

    logp = log_softmax(reshape(logits, (-1, vocab)), axis=-1)
    flat_targets = np.where(keep, targets, 0).reshape(-1)
    weights = np.full((flat_targets.size, vocab), smoothing / vocab)
    weights[np.arange(flat_targets.size), flat_targets] += 1.0 - smoothing
    weights *= keep.reshape(-1, 1)
    count = max(int(keep.sum()), 1)
    return tsum(logp * Tensor(weights.astype(logp.data.dtype))) * (-1.0 / count)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------
@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    tol: float = 1e-4
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(fn, params, eps=1e-3, tol=1e-4, max_elements=64, seed=0):
    """
    Compare reverse-mode gradients of the scalar ``fn(tensors)`` with central
    finite differences. ``params`` maps name -> array; parameters with more
    than ``max_elements`` entries are checked on a seeded random subset.
    Runs in float64.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    with precision(np.float64):
        arrays = {name: np.array(arr, dtype=np.float64) for name, arr in params.items()}
        leaves = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
        fn(leaves).backward()
        for name, arr in arrays.items():
            analytic = leaves[name].grad
            if analytic is None:
                analytic = np.zeros_like(arr)
            flat = arr.reshape(-1)
            picks = np.arange(flat.size)
            if flat.size > max_elements:
                picks = rng.choice(flat.size, size=max_elements, replace=False)
            worst = 0.0
            for i in picks:
                original = flat[i]
                with no_grad():
                    flat[i] = original + eps
                    plus = float(fn({k: Tensor(v) for k, v in arrays.items()}).data)
                    flat[i] = original - eps
                    minus = float(fn({k: Tensor(v) for k, v in arrays.items()}).data)
                flat[i] = original
                numeric = (plus - minus) / (2 * eps)
                a = float(analytic.reshape(-1)[i])
                err = relative_error(a, numeric) if np.isfinite([a, numeric]).all() else math.inf
                worst = max(worst, err)
            report.errors[name] = worst
            if not worst <= tol:
                report.failures.append(name)
    return report
