"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays (row-major, 64-bit floats). While a
ComputationTape is active, every differentiable operation appends a node
holding its inputs and a backward rule; ``tape.backward(loss)`` replays the
nodes in reverse execution order, which is a valid topological order by
construction, visiting each node exactly once. Gradients of leaf tensors
accumulate across backward calls until ``zero_grad``.

Broadcasting follows numpy's trailing-dimension alignment everywhere.
Iterative algorithms built on these ops (e.g. routing loops) are
differentiated by unrolling: every iteration's ops land on the tape.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericsError, ShapeError

__all__ = [
    "Tensor",
    "ComputationTape",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "power",
    "tanh",
    "logistic",
    "relu",
    "maximum_const",
    "softmax",
    "matmul",
    "einsum",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "im2col",
    "conv2d",
    "sq_dist",
    "weighted_sq_dev",
    "as_tensor",
]

_TAPE_STACK: list["ComputationTape"] = []


def _active_tape() -> "ComputationTape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients.

    ``values`` is immutable by convention once the tensor is constructed;
    only ``grad`` accumulates (and the optimizer rebinds parameter values
    between steps).
    """

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: ComputationTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("output", "inputs", "backward_cb")

    def __init__(self, output, inputs, backward_cb):
        self.output = output
        self.inputs = inputs
        self.backward_cb = backward_cb


class ComputationTape:
    """Ordered record of executed operations for one forward pass.

    Used as a context manager::

        with ComputationTape() as tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "ComputationTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from
        ``loss``. Repeated calls without ``zero_grad`` accumulate leaf
        gradients."""
        if loss.values.ndim != 0 and loss.values.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        # clear intermediate grads so a second backward pass does not
        # double-count; leaves are never node outputs, so they keep theirs
        for node in self.nodes:
            node.output.grad = None
        loss.grad = np.ones_like(loss.values)
        for node in reversed(self.nodes):
            if node.output.grad is None:
                continue
            node.backward_cb(node.output.grad)


def backward(loss: Tensor, tape: ComputationTape) -> None:
    tape.backward(loss)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_cb) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, inputs, backward_cb))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values + b.values)

    def cb(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _record(out, (a, b), cb)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values - b.values)

    def cb(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _record(out, (a, b), cb)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values * b.values)

    def cb(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.values, b.shape))

    return _record(out, (a, b), cb)


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.values == 0.0):
        raise NumericsError("division by zero")
    vals = a.values / b.values
    if not np.all(np.isfinite(vals)):
        raise NumericsError("overflow in division")
    out = Tensor(vals)

    def cb(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.values, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * vals / b.values, b.shape))

    return _record(out, (a, b), cb)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.values)

    def cb(g):
        a.accumulate_grad(-g)

    return _record(out, (a,), cb)


def exp(a: Tensor) -> Tensor:
    vals = np.exp(a.values)
    if not np.all(np.isfinite(vals)):
        raise NumericsError("overflow in exp")
    out = Tensor(vals)

    def cb(g):
        a.accumulate_grad(g * vals)

    return _record(out, (a,), cb)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise NumericsError("log of a non-positive value")
    out = Tensor(np.log(a.values))

    def cb(g):
        a.accumulate_grad(g / a.values)

    return _record(out, (a,), cb)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.values < 0.0):
        raise NumericsError("sqrt of a negative value")
    vals = np.sqrt(a.values)
    out = Tensor(vals)

    def cb(g):
        # callers keep inputs strictly positive (epsilon guards)
        a.accumulate_grad(g / (2.0 * vals))

    return _record(out, (a,), cb)


def square(a: Tensor) -> Tensor:
    out = Tensor(a.values * a.values)

    def cb(g):
        a.accumulate_grad(2.0 * g * a.values)

    return _record(out, (a,), cb)


def power(a: Tensor, p: float) -> Tensor:
    if not float(p).is_integer() and np.any(a.values < 0.0):
        raise NumericsError("fractional power of a negative value")
    vals = a.values**p
    if not np.all(np.isfinite(vals)):
        raise NumericsError("overflow in power")
    out = Tensor(vals)

    def cb(g):
        a.accumulate_grad(g * p * a.values ** (p - 1.0))

    return _record(out, (a,), cb)


def tanh(a: Tensor) -> Tensor:
    vals = np.tanh(a.values)
    out = Tensor(vals)

    def cb(g):
        a.accumulate_grad(g * (1.0 - vals * vals))

    return _record(out, (a,), cb)


def logistic(a: Tensor) -> Tensor:
    """1/(1+exp(-x)), computed without overflow for large |x|."""
    x = a.values
    vals = np.empty_like(x)
    pos = x >= 0
    vals[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    vals[~pos] = ex / (1.0 + ex)
    out = Tensor(vals)

    def cb(g):
        a.accumulate_grad(g * vals * (1.0 - vals))

    return _record(out, (a,), cb)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.values, 0.0))

    def cb(g):
        a.accumulate_grad(g * (a.values > 0.0))

    return _record(out, (a,), cb)


def maximum_const(a: Tensor, c: float) -> Tensor:
    """max(x, c) elementwise against a python constant."""
    out = Tensor(np.maximum(a.values, c))

    def cb(g):
        a.accumulate_grad(g * (a.values > c))

    return _record(out, (a,), cb)


# ---------------------------------------------------------------------------
# reductions and activations with structured backward rules


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.values.sum(axis=axis, keepdims=keepdims))

    def cb(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            g = np.expand_dims(g, tuple(ax % a.ndim for ax in axes))
        a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _record(out, (a,), cb)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def softmax(a: Tensor, axis: int) -> Tensor:
    """Normalized exponentials along ``axis``, max-subtracted for stability.

    Outputs are in (0, 1] and sum to 1 along the axis.
    """
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    x = a.values
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    vals = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(vals)

    def cb(g):
        dot = (g * vals).sum(axis=axis, keepdims=True)
        a.accumulate_grad(vals * (g - dot))

    return _record(out, (a,), cb)


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with numpy batch broadcasting.

    Backward: dA = dC @ B^T, dB = A^T @ dC (batch dims summed back)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires >=2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents disagree: {a.shape} x {b.shape}"
        )
    out = Tensor(np.matmul(a.values, b.values))

    def cb(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _record(out, (a, b), cb)


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Einstein summation over explicit subscripts (no ellipsis).

    Each operand's gradient is itself an einsum of the output gradient with
    the remaining operands, which requires every operand index to appear in
    the other operands or the output, and no repeated index within one
    operand. All uses in this package satisfy that.
    """
    if "..." in subscripts or "->" not in subscripts:
        raise ShapeError(f"unsupported einsum spec {subscripts!r}")
    in_spec, out_spec = subscripts.split("->")
    in_subs = in_spec.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError(
            f"einsum spec {subscripts!r} expects {len(in_subs)} operands, "
            f"got {len(operands)}"
        )
    for sub, op in zip(in_subs, operands):
        if len(sub) != op.ndim or len(set(sub)) != len(sub):
            raise ShapeError(
                f"einsum operand {op.shape} does not match subscript {sub!r}"
            )
    vals = np.einsum(subscripts, *[t.values for t in operands], optimize=True)
    out = Tensor(vals)

    def cb(g):
        for k, t in enumerate(operands):
            if not t.requires_grad:
                continue
            others = [s for i, s in enumerate(in_subs) if i != k]
            arrays = [operands[i].values for i in range(len(operands)) if i != k]
            spec = ",".join(others + [out_spec]) + "->" + in_subs[k]
            gk = np.einsum(spec, *arrays, g, optimize=True)
            t.accumulate_grad(gk)

    return _record(out, operands, cb)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.values.reshape(shape))

    def cb(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _record(out, (a,), cb)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(a.values.transpose(axes)))
    inv = np.argsort(axes)

    def cb(g):
        a.accumulate_grad(g.transpose(inv))

    return _record(out, (a,), cb)


# ---------------------------------------------------------------------------
# convolution machinery


def _conv_out_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def im2col(a: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    """Gather all kernel-sized windows of a [N,C,H,W] tensor.

    Returns [N, H'*W', C, K, K] with zero padding; the backward rule
    scatter-adds window gradients back onto the input grid.
    """
    if a.ndim != 4:
        raise ShapeError(f"im2col expects [N,C,H,W], got {a.shape}")
    n, c, h, w = a.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = _conv_out_extent(h, kernel, stride, padding)
    wo = _conv_out_extent(w, kernel, stride, padding)
    if ho <= 0 or wo <= 0:
        from .errors import ConfigurationError

        raise ConfigurationError(
            f"window {kernel}x{kernel} stride {stride} padding {padding} "
            f"yields non-positive output extent on {h}x{w}"
        )
    padded = a.values
    if padding:
        padded = np.pad(
            padded, ((0, 0), (0, 0), (padding, padding), (padding, padding))
        )
    # index maps: rows[p, ky] and cols[p, kx] for flattened position p
    ys = (np.arange(ho) * stride)[:, None] + np.arange(kernel)[None, :]
    xs = (np.arange(wo) * stride)[:, None] + np.arange(kernel)[None, :]
    rows = ys[:, None, :, None]  # [ho, 1, K, 1]
    cols = xs[None, :, None, :]  # [1, wo, 1, K]
    patches = padded[:, :, rows, cols]  # [N, C, ho, wo, K, K]
    patches = np.ascontiguousarray(patches.transpose(0, 2, 3, 1, 4, 5))
    out = Tensor(patches.reshape(n, ho * wo, c, kernel, kernel))

    def cb(g):
        gp = np.zeros((n, c, hp, wp))
        gg = g.reshape(n, ho, wo, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
        np.add.at(
            gp,
            (slice(None), slice(None), rows, cols),
            gg,
        )
        if padding:
            gp = gp[:, :, padding:-padding, padding:-padding]
        a.accumulate_grad(gp)

    return _record(out, (a,), cb)


def conv2d(
    a: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """Zero-padded cross-correlation of [N,C,H,W] with [O,C,K,K] filters,
    differentiable in both operands. Built from im2col plus one matmul."""
    if a.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects [N,C,H,W] and [O,C,K,K], got {a.shape} and "
            f"{kernel.shape}"
        )
    n, c, h, w = a.shape
    o, ck, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernel must be square, got {kernel.shape}")
    if ck != c:
        raise ShapeError(
            f"conv2d channel mismatch: input {a.shape} vs kernel {kernel.shape}"
        )
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x"
            f"{w + 2 * padding}"
        )
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(w, kw, stride, padding)
    patches = im2col(a, kh, stride, padding)  # [N, ho*wo, C, K, K]
    flat = reshape(patches, (n, ho * wo, c * kh * kw))
    kflat = transpose(reshape(kernel, (o, c * kh * kw)), (1, 0))
    prod = matmul(flat, kflat)  # [N, ho*wo, O]
    return reshape(transpose(prod, (0, 2, 1)), (n, o, ho, wo))


# ---------------------------------------------------------------------------
# fused vote-field contractions (keep routing loops off vote-sized storage)


def sq_dist(votes: Tensor, mu: Tensor, weights: Tensor | None = None) -> Tensor:
    """sum_d w_d (V_bijd - mu_bjd)^2 -> [b,i,j]; w defaults to ones.

    The (V - mu) difference is recomputed in backward instead of being
    stored, so no vote-sized intermediate stays on the tape.
    """
    if votes.ndim != 4 or mu.ndim != 3:
        raise ShapeError(
            f"sq_dist expects votes [b,i,j,d] and mu [b,j,d], got "
            f"{votes.shape} and {mu.shape}"
        )
    v, m = votes.values, mu.values
    diff = v - m[:, None]
    if weights is None:
        vals = np.einsum("bijd,bijd->bij", diff, diff, optimize=True)
    else:
        vals = np.einsum(
            "bijd,bjd->bij", diff * diff, weights.values, optimize=True
        )
    out = Tensor(vals)

    def cb(g):
        d = v - m[:, None]
        wd = d if weights is None else d * weights.values[:, None]
        if votes.requires_grad:
            votes.accumulate_grad(2.0 * g[..., None] * wd)
        if mu.requires_grad:
            mu.accumulate_grad(-2.0 * np.einsum("bij,bijd->bjd", g, wd))
        if weights is not None and weights.requires_grad:
            weights.accumulate_grad(np.einsum("bij,bijd->bjd", g, d * d))

    inputs = (votes, mu) if weights is None else (votes, mu, weights)
    return _record(out, inputs, cb)


def weighted_sq_dev(w: Tensor, votes: Tensor, mu: Tensor) -> Tensor:
    """sum_i w_bij (V_bijd - mu_bjd)^2 -> [b,j,d] (weighted second moment
    about mu), with the difference recomputed in backward."""
    if w.ndim != 3 or votes.ndim != 4 or mu.ndim != 3:
        raise ShapeError(
            f"weighted_sq_dev expects w [b,i,j], votes [b,i,j,d], mu "
            f"[b,j,d], got {w.shape}, {votes.shape}, {mu.shape}"
        )
    v, m = votes.values, mu.values
    diff = v - m[:, None]
    vals = np.einsum("bij,bijd->bjd", w.values, diff * diff, optimize=True)
    out = Tensor(vals)

    def cb(g):
        d = v - m[:, None]
        if w.requires_grad:
            w.accumulate_grad(np.einsum("bijd,bjd->bij", d * d, g))
        gw = 2.0 * w.values[..., None] * d * g[:, None]
        if votes.requires_grad:
            votes.accumulate_grad(gw)
        if mu.requires_grad:
            mu.accumulate_grad(-gw.sum(axis=1))

    return _record(out, (w, votes, mu), cb)
