"""Dense float32 tensors with reverse-mode automatic differentiation.

Values are stored as float32; reductions (matmul, convolution, softmax
normalization, sums) accumulate in float64 before rounding back, which keeps
small-scale losses and gradients stable without doubling memory. All ops are
deterministic: repeated backward passes over identical inputs produce
byte-identical gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeMismatchError",
    "Tensor",
    "Parameter",
    "add",
    "scale",
    "matmul",
    "affine",
    "relu",
    "conv2d",
    "max_pool2d",
    "softmax",
    "cross_entropy",
    "sum_all",
    "reshape",
    "backward",
]


class ShapeMismatchError(ValueError):
    """Operands cannot be combined; the message names both shapes."""


class Tensor:
    """A dense float32 array plus the links needed for the backward pass.

    Ops record themselves on the output (parents + a backward closure) only
    when at least one operand requires gradients, so inference-only forward
    passes build no graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable tensor. Its gradient buffer always exists and has
    the same shape as the value (zero when unreached by backward)."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.asarray(g, dtype=np.float32).copy()
    else:
        t.grad += np.asarray(g, dtype=np.float32)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"add: {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _from_op(a.data + b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s32 = np.float32(s)

    def bwd(g):
        _accum(a, g * s32)

    return _from_op(a.data * s32, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.data.shape} @ {b.data.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)

    def bwd(g):
        g64 = g.astype(np.float64)
        if a.requires_grad:
            _accum(a, g64 @ b64.T)
        if b.requires_grad:
            _accum(b, a64.T @ g64)

    return _from_op((a64 @ b64).astype(np.float32), (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Dense layer: x @ w + b with x (B, K), w (K, N), b (N,)."""
    if (
        x.data.ndim != 2
        or w.data.ndim != 2
        or x.data.shape[1] != w.data.shape[0]
        or b.data.shape != (w.data.shape[1],)
    ):
        raise ShapeMismatchError(
            f"affine: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}"
        )
    x64 = x.data.astype(np.float64)
    w64 = w.data.astype(np.float64)
    out = (x64 @ w64 + b.data.astype(np.float64)).astype(np.float32)

    def bwd(g):
        g64 = g.astype(np.float64)
        if x.requires_grad:
            _accum(x, g64 @ w64.T)
        if w.requires_grad:
            _accum(w, x64.T @ g64)
        if b.requires_grad:
            _accum(b, g64.sum(axis=0))

    return _from_op(out, (x, w, b), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        _accum(x, g * mask)

    return _from_op(np.where(mask, x.data, np.float32(0.0)), (x,), bwd)


def _im2col(arr: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        arr = np.pad(arr, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(arr, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    # (B, OH, OW, C, KH, KW) -> contiguous (B, OH, OW, KH, KW, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    *,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D convolution, NHWC input x and (KH, KW, Cin, F) kernel w."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatchError(f"conv2d: x {x.data.shape}, w {w.data.shape}")
    batch, h, wid, cin = x.data.shape
    kh, kw, wcin, nf = w.data.shape
    if cin != wcin:
        raise ShapeMismatchError(
            f"conv2d: input channels {x.data.shape} vs kernel {w.data.shape}"
        )
    if b is not None and b.data.shape != (nf,):
        raise ShapeMismatchError(f"conv2d: bias {b.data.shape} vs {nf} filters")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatchError(
            f"conv2d: kernel {w.data.shape} too large for input {x.data.shape}"
        )
    cols = _im2col(x.data, kh, kw, stride, padding)
    cols64 = cols.reshape(-1, kh * kw * cin).astype(np.float64)
    w64 = w.data.reshape(-1, nf).astype(np.float64)
    out64 = cols64 @ w64
    if b is not None:
        out64 += b.data.astype(np.float64)
    out = out64.reshape(batch, oh, ow, nf).astype(np.float32)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g64 = g.reshape(-1, nf).astype(np.float64)
        if w.requires_grad:
            _accum(w, (cols64.T @ g64).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g64.sum(axis=0))
        if x.requires_grad:
            dcols = (g64 @ w64.T).reshape(batch, oh, ow, kh, kw, cin)
            dxp = np.zeros(
                (batch, h + 2 * padding, wid + 2 * padding, cin), dtype=np.float64
            )
            for ki in range(kh):
                for kj in range(kw):
                    dxp[
                        :,
                        ki : ki + stride * oh : stride,
                        kj : kj + stride * ow : stride,
                        :,
                    ] += dcols[:, :, :, ki, kj, :]
            if padding:
                dxp = dxp[:, padding : padding + h, padding : padding + wid, :]
            _accum(x, dxp)

    return _from_op(out, parents, bwd)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; window stride equals the window size.
    Ties route the gradient to the first (row-major) maximum."""
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"max_pool2d: expected NHWC, got {x.data.shape}")
    batch, h, wid, c = x.data.shape
    s = size
    if s < 1 or h % s or wid % s:
        raise ShapeMismatchError(
            f"max_pool2d: input {x.data.shape} not divisible by window {s}"
        )
    oh, ow = h // s, wid // s
    r = (
        x.data.reshape(batch, oh, s, ow, s, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(batch, oh, ow, s * s, c)
    )
    idx = r.argmax(axis=3)
    out = np.take_along_axis(r, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bwd(g):
        if not x.requires_grad:
            return
        dr = np.zeros_like(r)
        np.put_along_axis(dr, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        dx = (
            dr.reshape(batch, oh, ow, s, s, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(batch, h, wid, c)
        )
        _accum(x, dx)

    return _from_op(out, (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis (max subtraction,
    float64 normalization)."""
    z = x.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p64 = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if not x.requires_grad:
            return
        g64 = g.astype(np.float64)
        inner = (g64 * p64).sum(axis=-1, keepdims=True)
        _accum(x, p64 * (g64 - inner))

    return _from_op(p64.astype(np.float32), (x,), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """-log softmax(logits)[label].

    A single logits vector with an int label yields a scalar; a (B, N) batch
    with a length-B label array yields the per-sample loss vector. The
    float64 softmax is cached so the backward pass stays exact even when the
    float32 probabilities saturate to 0 or 1.
    """
    single = logits.data.ndim == 1
    z = np.atleast_2d(logits.data).astype(np.float64)
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    batch, n = z.shape
    if lab.shape != (batch,):
        raise ShapeMismatchError(
            f"cross_entropy: logits {logits.data.shape} vs labels {lab.shape}"
        )
    if (lab < 0).any() or (lab >= n).any():
        raise IndexError(f"cross_entropy: label out of range for {n} classes")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    rows = np.arange(batch)
    losses = (-logp[rows, lab]).astype(np.float32)
    p64 = np.exp(logp)
    out = np.asarray(losses[0] if single else losses, dtype=np.float32)

    def bwd(g):
        if not logits.requires_grad:
            return
        g64 = np.asarray(g, dtype=np.float64).reshape(-1, 1)
        d = p64.copy()
        d[rows, lab] -= 1.0
        d *= g64
        _accum(logits, d[0] if single else d)

    return _from_op(out, (logits,), bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar (float64 accumulation)."""
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=np.float32)

    def bwd(g):
        _accum(x, np.full(x.data.shape, g, dtype=np.float32))

    return _from_op(out, (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"reshape: {x.data.shape} -> {shape}") from exc

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _from_op(out, (x,), bwd)


def backward(loss: Tensor) -> None:
    """Populate gradients of everything reachable from a scalar loss.

    Nodes are visited in reverse topological order exactly once, so shared
    subexpressions accumulate rather than double-count. Tensors not on the
    path keep their existing (zero for parameters) gradients.
    """
    if loss.data.shape != ():
        raise ShapeMismatchError(f"backward: loss must be scalar, got {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not connected to a recorded forward pass")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones((), dtype=np.float32)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
