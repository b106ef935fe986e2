"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a C-contiguous row-major float64 ndarray, so ``data``
is always a flat contiguous buffer viewed through ``shape``. Operations
that need gradients link the output to its inputs together with a
backward rule; ``backward`` replays those links in reverse topological
order. There is no broadcasting beyond leading-batch-dimension equality:
use :func:`expand` to make shapes match explicitly.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class GradientError(RuntimeError):
    """Raised when backward is invoked outside its contract."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer math)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-dimensional float64 array that can participate in a gradient tape.

    ``data`` is kept C-contiguous, so ``data.reshape(-1)`` is the flat
    row-major buffer. ``grad`` is populated (same shape) on leaves after
    ``backward``; repeated backward calls accumulate into it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the functional forms below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)


class Tape:
    """Topologically ordered record of the operations reaching one tensor.

    Each entry is a non-leaf tensor carrying its input identities
    (``_parents``) and backward rule. The order guarantees every entry
    appears after all producers of its inputs.
    """

    def __init__(self, ops: list):
        self.ops = ops

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls([t for t in order if t._backward is not None])

    def run_backward(self, output: Tensor, seed: np.ndarray):
        if output._backward is None:
            if output.requires_grad:
                _accumulate_leaf(output, seed)
            return
        grads: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    _accumulate_leaf(parent, pg)
                else:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg


def _accumulate_leaf(leaf: Tensor, g: np.ndarray):
    g = np.asarray(g)
    if g.shape != leaf.shape:
        g = g.reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    ``loss`` must be scalar (one element). Calling twice without
    zeroing grads adds the gradients together.
    """
    if loss.size != 1:
        raise GradientError(f"backward requires a scalar tensor, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    Tape.trace(loss).run_backward(loss, seed)


def _record(out: Tensor, parents: tuple, backward_fn):
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} must match exactly")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        out = Tensor(a.data + float(b))
        return _record(out, (a,), lambda g: (g,))
    b = as_tensor(b)
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        out = Tensor(a.data - float(b))
        return _record(out, (a,), lambda g: (g,))
    b = as_tensor(b)
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        c = float(b)
        out = Tensor(a.data * c)
        return _record(out, (a,), lambda g: (g * c,))
    b = as_tensor(b)
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / float(b))
    b = as_tensor(b)
    _check_same_shape(a, b, "div")
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * 0.5 / od,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * od,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    ad = a.data
    return _record(out, (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0
    return _record(out, (a,), lambda g: (g * mask,))


_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU via the tanh approximation (smooth, finite-difference friendly)."""
    x = a.data
    u = _GELU_K * (x + _GELU_C * x**3)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t))

    def bwd(g):
        du = _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _record(out, (a,), bwd)


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-p) in train mode, identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * mask)
    return _record(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape))
    old = a.shape
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {a.ndim}")
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _record(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def expand(a: Tensor, shape) -> Tensor:
    """Explicitly broadcast: new leading axes and stretched size-1 axes only."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < a.ndim:
        raise ShapeError(f"expand: target rank {len(shape)} < input rank {a.ndim}")
    lead = len(shape) - a.ndim
    for adim, tdim in zip(a.shape, shape[lead:]):
        if adim != tdim and adim != 1:
            raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    out = Tensor(np.ascontiguousarray(np.broadcast_to(a.data, shape)))
    stretched = tuple(lead + i for i, adim in enumerate(a.shape) if adim == 1 and shape[lead + i] != 1)
    lead_axes = tuple(range(lead))

    def bwd(g):
        if lead_axes:
            g = g.sum(axis=lead_axes)
        if stretched:
            g = g.sum(axis=tuple(ax - lead for ax in stretched), keepdims=True)
        return (g.reshape(a.shape),)

    return _record(out, (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(pieces)

    return _record(out, tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of bounds for axis {axis} of {a.shape}"
        )
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    out = Tensor(np.ascontiguousarray(a.data[tuple(sl)]))
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[tuple(sl)] = g
        return (full,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _normalize_axis(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.full(shape, g),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.ascontiguousarray(np.broadcast_to(g, shape)),)

    return _record(out, (a,), bwd)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _normalize_axis(axis, a.ndim)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))
    s = tensor_sum(a, axis, keepdims)
    return mul(s, 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product. Leading batch dims must be equal, or absent
    on one side (that side is applied to every batch element)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    abatch, bbatch = a.shape[:-2], b.shape[:-2]
    if abatch and bbatch and abatch != bbatch:
        raise ShapeError(f"matmul: batch dimensions {abatch} and {bbatch} must be equal")
    out = Tensor(np.matmul(a.data, b.data))
    ad, bd = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        # collapse batch dims the operand never had
        if ga.ndim > ad.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - ad.ndim)))
        if gb.ndim > bd.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - bd.ndim)))
        return (np.ascontiguousarray(ga), np.ascontiguousarray(gb))

    return _record(out, (a, b), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``; rows sum to one."""
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return _record(out, (a,), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at the label index; labels are class indices."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [batch, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bsz, ncls = logits.shape
    if labels.shape[0] != bsz:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for batch of {bsz}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= ncls:
        raise IndexError(f"cross_entropy: labels must lie in [0, {ncls})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    probs = e / denom
    nll = np.log(denom[:, 0]) - z[np.arange(bsz), labels]
    out = Tensor(np.float64(nll.mean()))

    def bwd(g):
        grad = probs.copy()
        grad[np.arange(bsz), labels] -= 1.0
        return (grad * (float(g) / bsz),)

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of [B,C,H,W] with [O,C,kh,kw] kernels."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and weight, got {x.shape} and {weight.shape}")
    bsz, cin, h, w = x.shape
    cout, cw, kh, kw = weight.shape
    if cw != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {cw}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({hp},{wp})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    acc = np.zeros((bsz, cout, ho * wo))
    wd = weight.data
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            acc += np.matmul(wd[:, :, i, j], patch.reshape(bsz, cin, ho * wo))
    outd = acc.reshape(bsz, cout, ho, wo)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        outd = outd + bias.data.reshape(1, cout, 1, 1)
    out = Tensor(outd)

    def bwd(g):
        g2 = g.reshape(bsz, cout, ho * wo)
        need_x = x.requires_grad
        need_w = weight.requires_grad
        gxp = np.zeros((bsz, cin, hp, wp)) if need_x else None
        gw = np.zeros_like(wd) if need_w else None
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                if need_w:
                    patch_flat = patch.reshape(bsz, cin, ho * wo)
                    gw[:, :, i, j] = np.tensordot(g2, patch_flat, axes=([0, 2], [0, 2]))
                if need_x:
                    contrib = np.matmul(wd[:, :, i, j].T, g2).reshape(bsz, cin, ho, wo)
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
        gx = None
        if need_x:
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, parents, bwd)
