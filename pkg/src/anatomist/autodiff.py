"""Minimal dense-tensor reverse-mode automatic differentiation.

Double precision throughout. No broadcasting beyond scalar-with-anything:
shape mismatches raise instead of silently expanding, and the few places
that need expansion get explicit ops (add_bias, stack_rows, ...).  Every
op records a closure that scatters its output gradient back onto its
parents; backward() runs one reverse topological sweep and accumulates
(+=) into every requires_grad leaf.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError, UsageError, ValidationError

_MASK_NEG = -1e30  # additive attention-mask value; underflows to 0 after softmax


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, grad={'set' if self.grad is not None else 'none'})"

    # arithmetic sugar used by model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data

    def backward(grad):
        ga = grad if a.shape == out_data.shape else np.sum(grad).reshape(a.shape)
        gb = grad if b.shape == out_data.shape else np.sum(grad).reshape(b.shape)
        return ga, gb

    return _node(out_data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out_data = a.data * b.data

    def backward(grad):
        ga = grad * b.data
        gb = grad * a.data
        if a.shape != out_data.shape:
            ga = np.sum(ga).reshape(a.shape)
        if b.shape != out_data.shape:
            gb = np.sum(gb).reshape(b.shape)
        return ga, gb

    return _node(out_data, (a, b), "mul", backward)


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)

    def backward(grad):
        return (grad * factor,)

    return _node(a.data * factor, (a,), "scale", backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(grad):
        return (grad * mask,)

    return _node(np.where(mask, a.data, 0.0), (a,), "relu", backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(grad):
        return (grad * out_data,)

    return _node(out_data, (a,), "exp", backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log: input must be strictly positive")

    def backward(grad):
        return (grad / a.data,)

    return _node(np.log(a.data), (a,), "log", backward)


def sum_(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sum(a.data, axis=axis)

    def backward(grad):
        if axis is None:
            return (np.full_like(a.data, float(grad)),)
        return (np.broadcast_to(np.expand_dims(grad, axis), a.shape).copy(),)

    return _node(out_data, (a,), "sum", backward)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if a.size == 0:
        raise ValidationError("mean: empty input")
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValidationError("concat: need at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        slicer = [slice(None)] * grad.ndim
        grads = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(grad[tuple(slicer)])
        return tuple(grads)

    return _node(out_data, tuple(tensors), "concat", backward)


def stack_rows(vectors) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    vectors = [_as_tensor(v) for v in vectors]
    if not vectors or any(v.data.ndim != 1 for v in vectors):
        raise ShapeError("stack_rows: needs one or more 1-D tensors")
    out_data = np.stack([v.data for v in vectors], axis=0)

    def backward(grad):
        return tuple(grad[i] for i in range(len(vectors)))

    return _node(out_data, tuple(vectors), "stack_rows", backward)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose: 2-D only")

    def backward(grad):
        return (grad.T.copy(),)

    return _node(a.data.T.copy(), (a,), "transpose", backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul: 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape} differ")

    def backward(grad):
        return grad @ b.data.T, a.data.T @ grad

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def add_bias(x, bias) -> Tensor:
    """Add a length-d bias vector to every row of an n-by-d matrix."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.shape} and {bias.shape}")

    def backward(grad):
        return grad, grad.sum(axis=0)

    return _node(x.data + bias.data[None, :], (x, bias), "add_bias", backward)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("slice_cols: 2-D only")

    def backward(grad):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = grad
        return (gx,)

    return _node(x.data[:, start:stop].copy(), (x,), "slice_cols", backward)


def gather_rows(x, indices) -> Tensor:
    """Select rows of a matrix (or elements of a vector) by index."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= x.shape[0]):
        raise ValidationError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def backward(grad):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, grad)
        return (gx,)

    return _node(x.data[idx], (x,), "gather_rows", backward)


# Embedding lookup is row gathering over the embedding table.
embedding_lookup = gather_rows


# ---------------------------------------------------------------------------
# normalization / similarity / losses


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(grad):
        dot = np.sum(grad * out_data, axis=axis, keepdims=True)
        return ((grad - dot) * out_data,)

    return _node(out_data, (x,), "softmax", backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = gain.data * xhat + bias.data

    def backward(grad):
        dxhat = grad * gain.data
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(x.data.ndim - 1))
        ggain = np.sum(grad * xhat, axis=axes)
        gbias = np.sum(grad, axis=axes)
        return gx, ggain, gbias

    return _node(out_data, (x, gain, bias), "layer_norm", backward)


def normalize_rows(x) -> Tensor:
    """Scale each row of a matrix to unit Euclidean norm."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("normalize_rows: 2-D only")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("normalize_rows: zero-norm row")
    out_data = x.data / norms

    def backward(grad):
        dots = np.sum(grad * out_data, axis=1, keepdims=True)
        return ((grad - out_data * dots) / norms,)

    return _node(out_data, (x,), "normalize_rows", backward)


def cosine_sim(u, v) -> Tensor:
    """Cosine similarity of two 1-D vectors; zero norms are a domain error."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise ShapeError("cosine_sim: 1-D vectors only")
    _same_shape(u, v, "cosine_sim")
    nu = np.linalg.norm(u.data)
    nv = np.linalg.norm(v.data)
    if nu == 0 or nv == 0:
        raise NumericError("cosine_sim: zero-norm input")
    c = float(u.data @ v.data / (nu * nv))

    def backward(grad):
        g = float(grad)
        gu = g * (v.data / (nu * nv) - c * u.data / (nu * nu))
        gv = g * (u.data / (nu * nv) - c * v.data / (nv * nv))
        return gu, gv

    return _node(c, (u, v), "cosine_sim", backward)


def cross_entropy(logits, targets, ignore_id: int = -1) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ignore_id.

    All targets ignored yields 0 with zero gradient.
    """
    logits = _as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or tgt.ndim != 1 or tgt.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} vs {tgt.shape[0]} targets"
        )
    keep = tgt != ignore_id
    if np.any((tgt[keep] < 0) | (tgt[keep] >= logits.shape[1])):
        raise ValidationError("cross_entropy: target id out of vocabulary range")
    n_kept = int(np.sum(keep))

    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - logz
    if n_kept == 0:
        loss = 0.0
    else:
        rows = np.nonzero(keep)[0]
        loss = -float(np.mean(logp[rows, tgt[rows]]))

    def backward(grad):
        g = np.zeros_like(logits.data)
        if n_kept:
            p = np.exp(logp)
            rows = np.nonzero(keep)[0]
            g[rows] = p[rows]
            g[rows, tgt[rows]] -= 1.0
            g *= float(grad) / n_kept
        return (g,)

    return _node(loss, (logits,), "cross_entropy", backward)


# ---------------------------------------------------------------------------
# backward sweep and verification


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate gradients of everything the scalar loss depends on."""
    if loss.size != 1:
        raise UsageError("backward: loss must be a scalar tensor")
    if not loss._parents and not loss.requires_grad:
        raise UsageError("backward: tensor has no recorded graph")
    order = _toposort(loss)
    for node in order:
        if node._parents:
            node.grad = np.zeros_like(node.data)
        elif node.grad is None:
            node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            parent.grad += np.asarray(g).reshape(parent.shape)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


def grad_check(f, inputs, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps the given tensors to a scalar Tensor.  Returns
    max |a - n| / max(|a|, |n|, 1e-8) over every element of every input.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    loss = f(*inputs)
    backward(loss)
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(*inputs).item()
            flat[i] = orig - h
            down = f(*inputs).item()
            flat[i] = orig
            n = (up - down) / (2 * h)
            ai = a.reshape(-1)[i]
            worst = max(worst, abs(ai - n) / max(abs(ai), abs(n), 1e-8))
    return worst
