"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

A ``Node`` wraps an immutable float64 ndarray plus an optional backward
closure; graphs are rebuilt per step and traversed once by ``backward``.
Only the operations the detector stack needs are provided. Broadcasting is
limited to python scalars and 0-d nodes; everything else must shape-match.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, NumericError

Array = np.ndarray


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One value in the computation graph.

    ``grad`` is lazily allocated on first accumulation and always matches
    ``value``'s shape. Nodes with ``requires_grad=False`` never receive
    gradient, which is how frozen tensors (e.g. the orthogonal basis) are
    kept out of training.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = _as_f64(value)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Node, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # Small operator sugar; all semantics live in the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(np.full(self.value.shape, float(other))), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def constant(value) -> Node:
    """Leaf node that never accumulates gradient."""
    return Node(value, requires_grad=False)


def parameter(value) -> Node:
    """Leaf node that accumulates gradient across backward calls."""
    return Node(value, requires_grad=True)


def _make(value: Array, parents: tuple[Node, ...], backward_fn) -> Node:
    out = Node(value, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(node: Node, g: Array) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def _reduce_to(g: Array, shape) -> Array:
    # Collapses gradient of a 0-d operand used against an array operand.
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


def _check_pair(a: Node, b: Node, opname: str) -> None:
    if a.value.shape != b.value.shape and a.value.ndim != 0 and b.value.ndim != 0:
        raise ContractError(
            f"{opname}: shapes {a.value.shape} and {b.value.shape} do not match "
            "(only scalar broadcast is supported)"
        )


def _wrap(x) -> Node:
    if isinstance(x, Node):
        return x
    return constant(_as_f64(x))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Node, b) -> Node:
    b = _wrap(b)
    _check_pair(a, b, "add")
    out_val = a.value + b.value

    def backward(g):
        _accum(a, _reduce_to(g, a.value.shape))
        _accum(b, _reduce_to(g, b.value.shape))

    return _make(out_val, (a, b), backward)


def sub(a: Node, b) -> Node:
    b = _wrap(b)
    _check_pair(a, b, "sub")
    out_val = a.value - b.value

    def backward(g):
        _accum(a, _reduce_to(g, a.value.shape))
        _accum(b, _reduce_to(-g, b.value.shape))

    return _make(out_val, (a, b), backward)


def mul(a: Node, b) -> Node:
    b = _wrap(b)
    _check_pair(a, b, "mul")
    out_val = a.value * b.value

    def backward(g):
        _accum(a, _reduce_to(g * b.value, a.value.shape))
        _accum(b, _reduce_to(g * a.value, b.value.shape))

    return _make(out_val, (a, b), backward)


def div(a: Node, b) -> Node:
    b = _wrap(b)
    _check_pair(a, b, "div")
    out_val = a.value / b.value

    def backward(g):
        _accum(a, _reduce_to(g / b.value, a.value.shape))
        _accum(b, _reduce_to(-g * a.value / (b.value * b.value), b.value.shape))

    return _make(out_val, (a, b), backward)


def neg(a: Node) -> Node:
    def backward(g):
        _accum(a, -g)

    return _make(-a.value, (a,), backward)


def relu(a: Node) -> Node:
    mask = a.value > 0.0

    def backward(g):
        _accum(a, g * mask)

    return _make(a.value * mask, (a,), backward)


def sigmoid(a: Node) -> Node:
    # Stable on both tails.
    v = a.value
    s = np.empty_like(v)
    pos = v >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    s[~pos] = ev / (1.0 + ev)

    def backward(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), backward)


def exp(a: Node) -> Node:
    e = np.exp(a.value)

    def backward(g):
        _accum(a, g * e)

    return _make(e, (a,), backward)


def log(a: Node) -> Node:
    def backward(g):
        _accum(a, g / a.value)

    return _make(np.log(a.value), (a,), backward)


def softplus(a: Node) -> Node:
    """log(1 + e^x), stable for large |x|."""
    v = np.logaddexp(0.0, a.value)
    s = np.empty_like(a.value)
    pos = a.value >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    ev = np.exp(a.value[~pos])
    s[~pos] = ev / (1.0 + ev)

    def backward(g):
        _accum(a, g * s)

    return _make(v, (a,), backward)


def pow_const(a: Node, p: float) -> Node:
    """a**p for a >= 0 and constant p >= 0."""
    if p < 0:
        raise ContractError("pow_const: exponent must be >= 0")
    if p == 0:
        return constant(np.ones_like(a.value))
    if p == 1:
        return a
    out_val = np.power(a.value, p)

    def backward(g):
        # subgradient 0 at a == 0 when p > 1
        base = np.where(a.value > 0, a.value, 1.0)
        local = p * np.power(base, p - 1.0) * (a.value > 0)
        _accum(a, g * local)

    return _make(out_val, (a,), backward)


def absval(a: Node) -> Node:
    """|a|; subgradient 0 at exactly 0."""
    sgn = np.sign(a.value)

    def backward(g):
        _accum(a, g * sgn)

    return _make(np.abs(a.value), (a,), backward)


def maximum(a: Node, b) -> Node:
    """Elementwise max; ties route gradient to the first argument."""
    b = _wrap(b)
    _check_pair(a, b, "maximum")
    take_a = a.value >= b.value

    def backward(g):
        _accum(a, _reduce_to(g * take_a, a.value.shape))
        _accum(b, _reduce_to(g * ~take_a, b.value.shape))

    return _make(np.maximum(a.value, b.value), (a, b), backward)


def minimum(a: Node, b) -> Node:
    """Elementwise min; ties route gradient to the first argument."""
    b = _wrap(b)
    _check_pair(a, b, "minimum")
    take_a = a.value <= b.value

    def backward(g):
        _accum(a, _reduce_to(g * take_a, a.value.shape))
        _accum(b, _reduce_to(g * ~take_a, b.value.shape))

    return _make(np.minimum(a.value, b.value), (a, b), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(a: Node) -> Node:
    def backward(g):
        _accum(a, np.full(a.value.shape, float(g)))

    return _make(np.sum(a.value), (a,), backward)


def mean_all(a: Node) -> Node:
    n = a.value.size

    def backward(g):
        _accum(a, np.full(a.value.shape, float(g) / n))

    return _make(np.mean(a.value), (a,), backward)


def reshape(a: Node, shape) -> Node:
    shape = tuple(shape)

    def backward(g):
        _accum(a, g.reshape(a.value.shape))

    return _make(a.value.reshape(shape), (a,), backward)


def flatten(a: Node) -> Node:
    return reshape(a, (a.value.size,))


def transpose(a: Node, axes: Sequence[int]) -> Node:
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.value.transpose(axes)), (a,), backward)


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ContractError(
            f"matmul: incompatible shapes {a.value.shape} @ {b.value.shape}"
        )
    out_val = a.value @ b.value

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.value.T)
        if b.requires_grad:
            _accum(b, a.value.T @ g)

    return _make(out_val, (a, b), backward)


# ---------------------------------------------------------------------------
# gather / scatter style ops


def take_rows(a: Node, idx) -> Node:
    """Select rows of a 2-d node; backward scatters (duplicates accumulate)."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        if a.requires_grad:
            buf = np.zeros(a.value.shape)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _make(a.value[idx], (a,), backward)


def column(a: Node, j: int) -> Node:
    """Column j of a 2-d node as a 1-d node."""

    def backward(g):
        if a.requires_grad:
            buf = np.zeros(a.value.shape)
            buf[:, j] = g
            _accum(a, buf)

    return _make(a.value[:, j].copy(), (a,), backward)


def slice_cols(a: Node, j0: int, j1: int) -> Node:
    """Columns [j0, j1) of a 2-d node."""

    def backward(g):
        if a.requires_grad:
            buf = np.zeros(a.value.shape)
            buf[:, j0:j1] = g
            _accum(a, buf)

    return _make(a.value[:, j0:j1].copy(), (a,), backward)


def stack_columns(cols: Sequence[Node]) -> Node:
    """Stack 1-d nodes of equal length into an [M, k] node."""
    cols = tuple(cols)
    out_val = np.stack([c.value for c in cols], axis=1)

    def backward(g):
        for i, c in enumerate(cols):
            _accum(c, g[:, i])

    return _make(out_val, cols, backward)


def concat_rows(parts: Sequence[Node]) -> Node:
    """Concatenate nodes along axis 0."""
    parts = tuple(parts)
    sizes = [p.value.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for i, p in enumerate(parts):
            _accum(p, g[offsets[i]:offsets[i + 1]])

    return _make(np.concatenate([p.value for p in parts], axis=0), parts, backward)


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(a: Node, kernel: Node, stride: int = 1, padding: int = 0,
           bias: Node | None = None) -> Node:
    """Cross-correlation of [Cin,H,W] (or [B,Cin,H,W]) with [Cout,k,k,Cin].

    ``bias``, when given, is a per-output-channel [Cout] node. Gradients flow
    to input, kernel and bias. Output must be finite.
    """
    batched = a.value.ndim == 4
    x = a.value if batched else a.value[None]
    w = kernel.value
    if x.ndim != 4 or w.ndim != 4:
        raise ContractError("conv2d: input must be 3-d or 4-d, kernel 4-d")
    B, cin, H, W = x.shape
    cout, k, k2, cin_k = w.shape
    if k != k2 or k % 2 == 0:
        raise ContractError(f"conv2d: kernel must be square with odd size, got {w.shape}")
    if cin_k != cin:
        raise ContractError(f"conv2d: kernel expects {cin_k} input channels, input has {cin}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride must be >= 1 and padding >= 0")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ContractError("conv2d: output would be empty")

    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    sb, sc, sh, sw = xp.strides
    win = as_strided(
        xp,
        shape=(B, cin, k, k, Ho, Wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
    )
    # column layout (di, dj, ci) matches the kernel's [k, k, Cin] flattening
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 2, 3, 1)).reshape(
        B * Ho * Wo, k * k * cin
    )
    wflat = w.reshape(cout, k * k * cin)
    lin = cols @ wflat.T
    if bias is not None:
        if bias.value.shape != (cout,):
            raise ContractError(f"conv2d: bias shape {bias.value.shape} != ({cout},)")
        lin = lin + bias.value
    out = lin.reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out if batched else out[0])
    if not np.isfinite(out).all():
        raise NumericError("conv2d produced non-finite output")

    def backward(g):
        g4 = (g if batched else g[None]).transpose(0, 2, 3, 1).reshape(B * Ho * Wo, cout)
        if bias is not None and bias.requires_grad:
            _accum(bias, g4.sum(axis=0))
        if kernel.requires_grad:
            _accum(kernel, (g4.T @ cols).reshape(cout, k, k, cin))
        if a.requires_grad:
            gcols = (g4 @ wflat).reshape(B, Ho, Wo, k, k, cin)
            gc = gcols.transpose(0, 5, 3, 4, 1, 2)  # [B, Cin, k, k, Ho, Wo]
            gxp = np.zeros(xp.shape)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride] += gc[:, :, di, dj]
            gx = gxp[:, :, padding:padding + H, padding:padding + W]
            _accum(a, gx if batched else gx[0])

    parents = (a, kernel) if bias is None else (a, kernel, bias)
    return _make(out, parents, backward)


def max_pool2(a: Node) -> Node:
    """2x2 max pool with stride 2 over the trailing two axes (must be even)."""
    v = a.value
    H, W = v.shape[-2], v.shape[-1]
    if H % 2 or W % 2:
        raise ContractError(f"max_pool2: trailing dims must be even, got {v.shape}")
    lead = v.shape[:-2]
    x = v.reshape(-1, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4)
    x = x.reshape(-1, H // 2, W // 2, 4)
    idx = np.argmax(x, axis=-1)  # first max on ties: deterministic
    out = np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]
    out = out.reshape(*lead, H // 2, W // 2)

    def backward(g):
        if not a.requires_grad:
            return
        buf = np.zeros((x.shape[0], H // 2, W // 2, 4))
        np.put_along_axis(buf, idx[..., None], g.reshape(-1, H // 2, W // 2)[..., None], axis=-1)
        buf = buf.reshape(-1, H // 2, W // 2, 2, 2).transpose(0, 1, 3, 2, 4)
        _accum(a, buf.reshape(v.shape))

    return _make(out, (a,), backward)


def global_avg_pool(a: Node) -> Node:
    """Mean over the trailing two (spatial) axes."""
    v = a.value
    if v.ndim < 3:
        raise ContractError("global_avg_pool: need at least [C,H,W]")
    H, W = v.shape[-2], v.shape[-1]

    def backward(g):
        _accum(a, np.broadcast_to(g[..., None, None] / (H * W), v.shape).copy())

    return _make(v.mean(axis=(-2, -1)), (a,), backward)


def _norm_along(a: Node, axis: int, eps: float, scale: float) -> Node:
    v = a.value
    raw = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    r = np.maximum(raw, eps)
    out = scale * v / r

    def backward(g):
        live = raw > eps  # clamped slices have constant denominator
        dot = np.sum(g * v, axis=axis, keepdims=True)
        _accum(a, scale * (g / r - v * (dot / (r * r * r)) * live))

    return _make(out, (a,), backward)


def l2_normalize(a: Node, eps: float = 1e-12) -> Node:
    """Normalize along the last axis to unit L2 norm, clamping ||x|| by eps."""
    if eps <= 0:
        raise ContractError("l2_normalize: eps must be > 0")
    return _norm_along(a, -1, eps, 1.0)


def channel_norm(a: Node, eps: float = 1e-12) -> Node:
    """Rescale each spatial location's channel vector to norm sqrt(C).

    Operates on [C,H,W] or [B,C,H,W]. Parameter-free; keeps downstream
    feature scales (and hence cosine-head gradient magnitudes) independent of
    how large the trunk activations happen to be.
    """
    if a.value.ndim not in (3, 4):
        raise ContractError(f"channel_norm: need [C,H,W] or [B,C,H,W], got {a.value.shape}")
    if eps <= 0:
        raise ContractError("channel_norm: eps must be > 0")
    c = a.value.shape[-3]
    return _norm_along(a, -3, eps, float(np.sqrt(c)))


# ---------------------------------------------------------------------------
# backward driver and the finite-difference oracle


def _topo(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Node) -> None:
    """Populate grads of every requires_grad node reachable from a scalar loss."""
    if loss.value.ndim != 0:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    loss.grad = np.array(1.0)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def finite_diff_check(f, x: Array, step: float = 1e-5) -> float:
    """Max relative error between analytic grad of f and central differences.

    ``f`` maps a Node to a scalar Node and must be deterministic. The
    denominator clamps at 1e-8 so near-zero coordinates stay comparable.
    """
    if step <= 0:
        raise ContractError("finite_diff_check: step must be > 0")
    x = _as_f64(x)
    xn = parameter(x)
    backward(f(xn))
    analytic = xn.grad if xn.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = numeric.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xp[i] += step
        fp = float(f(constant(xp.reshape(x.shape))).value)
        xm = x.copy().reshape(-1)
        xm[i] -= step
        fm = float(f(constant(xm.reshape(x.shape))).value)
        flat[i] = (fp - fm) / (2.0 * step)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-8)
    return float(rel.max()) if rel.size else 0.0
