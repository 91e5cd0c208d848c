"""Dense tensors with reverse-mode automatic differentiation.

Storage and kernels are numpy arrays; the gradient graph, the local gradient
rules and the backward sweep live here. Tensors default to float32. Every op
preserves the dtype of its inputs, so a graph built from float64 tensors is
differentiated in float64 (used by the finite-difference checks).

Broadcasting is explicit: elementwise ops require equal shapes or a Python
scalar, and adding a bias vector along the last axis is its own op.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_flop_counter: list[int] | None = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A node in the gradient graph.

    ``data`` is the forward value, ``grad`` is allocated lazily on the first
    accumulation. ``_parents`` and ``_backward`` form the backprop record.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_flops():
    """Count matmul floating-point operations (2 per multiply-accumulate).

    Yields a one-element list whose entry holds the running total.
    """
    global _flop_counter
    prev = _flop_counter
    counter = [0]
    _flop_counter = counter
    try:
        yield counter
    finally:
        _flop_counter = prev


def _record(flops: int) -> None:
    if _flop_counter is not None:
        _flop_counter[0] += int(flops)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _make(a.data + np.asarray(b, dtype=a.dtype), (a,), lambda g: a.accumulate(g))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: a.accumulate(-g))


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -np.asarray(b))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        s = np.asarray(b, dtype=a.dtype)
        if s.ndim:
            raise ShapeError("mul: non-tensor operand must be a scalar; use mul_const for arrays")
        return _make(a.data * s, (a,), lambda g: a.accumulate(g * s))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (masks)."""
    c = np.asarray(c, dtype=a.dtype)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: shapes {a.shape} and {c.shape} differ")
    return _make(a.data * c, (a,), lambda g: a.accumulate(g * c))


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant array of the same shape (additive attention masks)."""
    c = np.asarray(c, dtype=a.dtype)
    if c.shape != a.shape:
        raise ShapeError(f"add_const: shapes {a.shape} and {c.shape} differ")
    return _make(a.data + c, (a,), lambda g: a.accumulate(g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., j] + b[j]``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.shape} and {b.shape} incompatible")

    def backward(g):
        if x.requires_grad:
            x.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(x.data + b.data, (x, b), backward)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """``x[i, :] * s[i]`` for a 2-D ``x`` and 1-D ``s``."""
    if x.ndim != 2 or s.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: shapes {x.shape} and {s.shape} incompatible")

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * s.data[:, None])
        if s.requires_grad:
            s.accumulate((g * x.data).sum(axis=1))

    return _make(x.data * s.data[:, None], (x, s), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: x.accumulate(g * mask))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: x.accumulate(g * out))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: x.accumulate(g / x.data))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: x.accumulate(np.broadcast_to(g, x.shape)))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(
        np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: x.accumulate(np.broadcast_to(g / n, x.shape))
    )


def sum_axis(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    return _make(
        x.data.sum(axis=axis), (x,), lambda g: x.accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))
    )


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0 of a 2-D tensor."""
    if x.ndim != 2:
        raise ShapeError(f"mean_rows expects 2-D input, got {x.shape}")
    n = x.shape[0]
    return _make(x.data.mean(axis=0), (x,), lambda g: x.accumulate(np.broadcast_to(g / n, x.shape)))


def stack_scalars(items: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a vector."""
    items = list(items)
    data = np.array([t.data for t in items], dtype=items[0].dtype)

    def backward(g):
        for i, t in enumerate(items):
            if t.requires_grad:
                t.accumulate(np.asarray(g[i], dtype=t.dtype))

    return _make(data, items, backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: x.accumulate(g.reshape(x.shape)))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: x.accumulate(g.transpose(inv)))


def index(x: Tensor, key) -> Tensor:
    """Basic-slice a tensor (``x[key]``)."""

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        x.accumulate(full)

    return _make(np.ascontiguousarray(x.data[key]), (x,), backward)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``x[idx]`` of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x.accumulate(full)

    return _make(x.data[idx], (x,), backward)


def scatter_rows(parts: Sequence[tuple[Tensor, np.ndarray]], n_rows: int) -> Tensor:
    """Assemble an ``n_rows`` matrix from disjoint row blocks ``(rows, positions)``.

    Rows not covered by any block are zero.
    """
    parts = [(t, np.asarray(i, dtype=np.int64)) for t, i in parts]
    width = parts[0][0].shape[1]
    out = np.zeros((n_rows, width), dtype=parts[0][0].dtype)
    for t, i in parts:
        out[i] = t.data

    def backward(g):
        for t, i in parts:
            if t.requires_grad:
                t.accumulate(g[i])

    return _make(out, [t for t, _ in parts], backward)


def pick(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[i] = x[i, idx[i]]`` for a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        x.accumulate(full)

    return _make(x.data[rows, idx], (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported forms: ``[m,k] @ [k,n]``; ``[...,m,k] @ [k,n]`` (a weight applied
    to every leading index); ``[...,m,k] @ [...,k,n]`` with equal leading dims.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim == 2:
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))
        _record(2 * a2.shape[0] * k * n)

        def backward(g):
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                a.accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b.accumulate(a2.T @ g2)

        return _make(out, (a, b), backward)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    out = a.data @ b.data
    _record(2 * int(np.prod(a.shape[:-1])) * a.shape[-1] * b.shape[-1])

    def backward_batched(g):
        if a.requires_grad:
            a.accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b.accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, (a, b), backward_batched)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add_bias(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# normalization


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max-subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x.accumulate(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        x.accumulate(g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            x.accumulate(
                inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            )

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: tuple[int, int] = (0, 0)) -> Tensor:
    """2-D cross-correlation.

    x: [B, C_in, H, W]; w: [C_out, C_in, kh, kw]; b: [C_out]. ``pad`` zero-pads
    (H, W) symmetrically.
    """
    bsz, cin, _, _ = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w or b.shape != (cout,):
        raise ShapeError(f"conv2d: input {x.shape}, weight {w.shape}, bias {b.shape} incompatible")
    ph, pw = pad
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    hp, wp = xp.shape[2:]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape[2:]}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: [B, ho, wo, C_in*kh*kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz, ho, wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T + b.data
    _record(2 * bsz * ho * wo * cols.shape[-1] * cout)

    def backward(g):
        # g: [B, C_out, ho, wo]
        gt = g.transpose(0, 2, 3, 1)
        if b.requires_grad:
            b.accumulate(gt.reshape(-1, cout).sum(axis=0))
        if w.requires_grad:
            w.accumulate((gt.reshape(-1, cout).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape))
        if x.requires_grad:
            gcols = (gt @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            x.accumulate(gxp[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]])

    return _make(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (x, w, b), backward)


# ---------------------------------------------------------------------------
# backward sweep


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Gradients are added to whatever ``grad`` already holds; zero leaf grads
    between steps. Intermediate buffers are released after use.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                node.grad = None  # interior node; leaves keep theirs
    # the root is interior too, but keep its seed gradient visible
    loss.grad = np.ones_like(loss.data)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    rtol: float = 1e-3,
    atol: float = 1e-6,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of ``fn()`` against central differences.

    Returns the worst relative error seen; raises AssertionError above ``rtol``.
    The error for one entry is ``|a - n| / max(|a|, |n|, atol / rtol)``, which
    makes ``atol`` an absolute floor.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            positions = (rng or np.random.default_rng(0)).choice(flat.size, max_checks, replace=False)
        for i in positions:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(fn().data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(ga.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), atol / rtol)
            worst = max(worst, err)
            if err > rtol:
                raise AssertionError(
                    f"gradient mismatch in {t.name or t.shape} at flat index {i}: analytic {a:.6g}, numeric {num:.6g}"
                )
    return worst


def init_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, name: str | None = None) -> Tensor:
    """Uniform in +-1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)).astype(DEFAULT_DTYPE), requires_grad=True, name=name)


def zeros(shape: Sequence[int], name: str | None = None) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


def ones(shape: Sequence[int], name: str | None = None) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=DEFAULT_DTYPE), requires_grad=True, name=name)
