"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default; float64 is kept when given,
which gradient checks rely on). Every differentiable operation records its
parents and a backward closure; the creation counter of each node gives a
valid topological order, so the reverse pass is a sort followed by a single
sweep that visits each node once.

Reductions accumulate in float64 and are cast back to the tensor dtype.
Image batches are channel-last, either ``(H, W, C)`` or ``(N, H, W, C)``.
"""

import itertools

import numpy as np

from . import backend

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(op={self.op}, shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _node(data, op, parents, backward_fn):
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.op = op
    out.name = None
    out._parents = parents if out.requires_grad else ()
    out._backward = backward_fn if out.requires_grad else None
    out._id = next(_ids)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(shape) if s == 1 and grad.shape[i + extra] != 1
    )
    out = grad.sum(axis=axes, dtype=np.float64, keepdims=True)
    if extra:
        out = out.reshape(out.shape[extra:])
    return out.reshape(shape).astype(grad.dtype)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- element-wise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, "sub", (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, "mul", (a, b), backward)


def scale(a, s):
    a = as_tensor(a)
    s = a.data.dtype.type(s)

    def backward(g):
        return (g * s,)

    return _node(a.data * s, "scale", (a,), backward)


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1 - y * y),)

    return _node(y, "tanh", (a,), backward)


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0

    def backward(g):
        return (g * pos,)

    return _node(np.where(pos, a.data, a.data.dtype.type(0)), "relu", (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # split on sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)

    def backward(g):
        return (g * y * (1 - y),)

    return _node(y, "sigmoid", (a,), backward)


def clamp(a, lo=0.0, hi=1.0):
    """Clamp to ``[lo, hi]``; the gradient passes only where the input is inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside,)

    return _node(np.clip(a.data, lo, hi).astype(a.dtype), "clamp", (a,), backward)


def remap(a, index):
    """Gather ``a.flat[index]`` into an array of ``index.shape``; ``-1`` yields 0.

    Used for resize-and-pad input transforms; the backward pass scatters
    with ``np.add.at``, which accumulates sequentially.
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    flat = a.data.reshape(-1)
    valid = index >= 0
    out = np.zeros(index.shape, dtype=a.dtype)
    out[valid] = flat[index[valid]]

    def backward(g):
        ga = np.zeros(flat.shape, dtype=np.float64)
        np.add.at(ga, index[valid], g[valid])
        return (ga.reshape(a.shape).astype(a.dtype),)

    return _node(out, "remap", (a,), backward)


# ------------------------------------------------------------------ reductions


def mean(a, axes=None):
    a = as_tensor(a)
    axes = tuple(range(a.data.ndim)) if axes is None else tuple(np.atleast_1d(axes))
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    value = a.data.mean(axis=axes, dtype=np.float64).astype(a.dtype)

    def backward(g):
        g = np.expand_dims(np.asarray(g), axes)
        return (np.broadcast_to(g / a.dtype.type(count), a.shape).astype(a.dtype),)

    return _node(value, "mean", (a,), backward)


def mse(a, b):
    """Mean over all elements of ``(a - b)**2``, returned as a scalar tensor."""
    a, b = as_tensor(a), as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    value = np.asarray(np.mean(diff * diff), dtype=a.dtype)
    n = diff.size

    def backward(g):
        d = (2.0 * float(g) / n) * diff
        return d.astype(a.dtype), (-d).astype(b.dtype)

    return _node(value, "mse", (a, b), backward)


# --------------------------------------------------------------- convolution


def conv2d(x, w, b=None):
    """Stride-1 convolution with zero "same" padding.

    ``x`` is ``(H, W, C)`` or ``(N, H, W, C)``; ``w`` is ``(K, K, C, C_out)``
    with odd ``K``; ``b`` is ``(C_out,)`` or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    single = x.data.ndim == 3
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be 3-D or 4-D, got {x.shape}")
    if w.data.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ShapeError(f"conv2d: weight must be (K, K, C, C_out) with odd K, got {w.shape}")
    if w.shape[2] != x.shape[-1]:
        raise ShapeError(f"conv2d: weight expects {w.shape[2]} input channels, input has {x.shape[-1]}")
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({w.shape[3]},)")

    dtype = x.dtype
    xb = np.ascontiguousarray(x.data[None] if single else x.data)
    wk = np.ascontiguousarray(w.data, dtype=dtype)
    y = backend.conv2d_forward(xb, wk, None if b is None else b.data)
    k = w.shape[0]

    def backward(g):
        gb = np.ascontiguousarray(g[None] if single else g, dtype=dtype)
        gx = gw = gbias = None
        if x.requires_grad:
            flipped = np.ascontiguousarray(wk[::-1, ::-1].transpose(0, 1, 3, 2))
            gx = backend.conv2d_forward(gb, flipped, None)
            gx = gx[0] if single else gx
        if w.requires_grad:
            gw = backend.conv2d_weight_grad(xb, gb, k).astype(w.dtype)
        if b is not None and b.requires_grad:
            gbias = gb.sum(axis=(0, 1, 2), dtype=np.float64).astype(b.dtype)
        return (gx, gw) if b is None else (gx, gw, gbias)

    parents = (x, w) if b is None else (x, w, b)
    return _node(y[0] if single else y, "conv2d", parents, backward)


# -------------------------------------------------------------- gradients


def grad(loss, wrt):
    """Reverse-mode gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors that do not influence the loss get a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    wrt = list(wrt)
    grads = {}
    if loss.requires_grad:
        nodes = []
        seen = set()
        stack = [loss]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen.add(node._id)
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._id, reverse=True)
        grads[loss._id] = np.ones(loss.shape, dtype=loss.dtype)
        for node in nodes:
            g = grads.pop(node._id, None) if node._backward is not None else grads.get(node._id)
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
    return [
        np.asarray(grads[t._id], dtype=t.dtype).reshape(t.shape) if t._id in grads else np.zeros_like(t.data)
        for t in wrt
    ]


class Graph:
    """A traced computation with declared input shapes.

    ``fn`` receives one :class:`Tensor` per input and returns the output
    tensor. :meth:`forward` builds a fresh trace on each call; the most
    recent trace is what :meth:`backward` differentiates.
    """

    def __init__(self, fn, input_shapes, input_names=None, requires_grad=True):
        self.fn = fn
        self.input_shapes = [tuple(s) for s in input_shapes]
        self.input_names = list(input_names or [f"input{i}" for i in range(len(self.input_shapes))])
        self.requires_grad = requires_grad
        self.inputs = None
        self.output = None

    def forward(self, *arrays):
        if len(arrays) != len(self.input_shapes):
            raise ShapeError(f"graph expects {len(self.input_shapes)} inputs, got {len(arrays)}")
        inputs = []
        for arr, shape, nm in zip(arrays, self.input_shapes, self.input_names):
            t = arr if isinstance(arr, Tensor) else Tensor(arr, requires_grad=self.requires_grad, name=nm)
            if t.shape != shape:
                raise ShapeError(f"node {nm!r}: expected shape {shape}, got {t.shape}")
            inputs.append(t)
        self.inputs = inputs
        self.output = self.fn(*inputs)
        return self.output

    def backward(self, loss=None):
        if self.output is None:
            raise RuntimeError("backward called before forward")
        loss = self.output if loss is None else loss
        return grad(loss, self.inputs)


def forward(graph, inputs):
    return graph.forward(*inputs)


def backward(graph, loss_node=None):
    return graph.backward(loss_node)


# ----------------------------------------------------- non-differentiable helpers


def sign(t):
    """Element-wise sign in {-1, 0, 1}."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return np.sign(data).astype(data.dtype if data.dtype.kind == "f" else np.float32)


def project_linf(w, epsilon):
    """Clamp a perturbation to the L-infinity ball of radius ``epsilon`` about zero."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    w = np.asarray(w)
    eps = w.dtype.type(epsilon)
    return np.clip(w, -eps, eps)


def clip_ball(candidate, center, epsilon):
    """Clamp ``candidate`` to ``[center - eps, center + eps]`` and then to ``[0, 1]``."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    candidate = np.asarray(candidate)
    center = np.asarray(center, dtype=candidate.dtype)
    if candidate.shape != center.shape:
        raise ShapeError(f"clip_ball: shapes differ, {candidate.shape} vs {center.shape}")
    eps = candidate.dtype.type(epsilon)
    out = np.clip(candidate, center - eps, center + eps)
    # center +/- eps can round outward; pull those elements back one ulp at a time
    for _ in range(4):
        hi = out - center > eps
        lo = center - out > eps
        if not (hi.any() or lo.any()):
            break
        out = np.where(hi, np.nextafter(out, center), out)
        out = np.where(lo, np.nextafter(out, center), out)
    return np.clip(out, 0, 1).astype(candidate.dtype)
