"""Dense float64 tensors with reverse-mode automatic differentiation.

A `Tape` records every operation whose inputs are watched; `Tape.backward`
runs the chain rule in reverse recording order (which is a topological
order by construction).  Tensors that carry no tape handle are plain
immutable values, so the same forward code serves both training and
inference.

Conventions fixed here:
  * 4-D feature maps are [batch, channels, height, width].
  * Convolution uses cross-correlation semantics.
  * relu gradient at exactly 0 is 0; |x| gradient at 0 is 0; the
    gradient of a spatial max pool goes to the first maximal element
    in row-major order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class _Node:
    __slots__ = ("inputs", "backward_fn")

    def __init__(self, inputs, backward_fn):
        self.inputs = inputs          # node ids (None for constants)
        self.backward_fn = backward_fn  # None for leaves

    @property
    def is_leaf(self):
        return self.backward_fn is None


class Tape:
    """Append-only record of operations plus per-node gradient slots."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._grads: Optional[list[Optional[np.ndarray]]] = None

    def __len__(self):
        return len(self._nodes)

    def watch(self, tensor: "Tensor") -> "Tensor":
        """Register a leaf and return a tensor bound to this tape.

        The returned tensor shares the input's data buffer; gradients for
        it are available from `grad` after `backward`.
        """
        node_id = len(self._nodes)
        self._nodes.append(_Node((), None))
        return Tensor._wrap(tensor.data, self, node_id)

    def _record(self, data: np.ndarray, input_ids, backward_fn) -> "Tensor":
        node_id = len(self._nodes)
        self._nodes.append(_Node(tuple(input_ids), backward_fn))
        return Tensor._wrap(data, self, node_id)

    def backward(self, loss: "Tensor") -> None:
        """Accumulate gradients of `loss` w.r.t. every node on the tape.

        The loss must be a scalar recorded on this tape.  Leaves that do
        not reach the loss end up with zero gradient.
        """
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss tensor is not recorded on this tape")
        if loss.data.shape != ():
            raise ShapeError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        grads: list[Optional[np.ndarray]] = [None] * len(self._nodes)
        grads[loss.node_id] = np.ones((), dtype=np.float64)
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self._nodes[nid]
            if node.backward_fn is None:
                continue
            for input_id, gin in zip(node.inputs, node.backward_fn(g)):
                if input_id is None or gin is None:
                    continue
                if grads[input_id] is None:
                    grads[input_id] = gin
                else:
                    grads[input_id] = grads[input_id] + gin
        self._grads = grads

    def grad(self, tensor: "Tensor") -> np.ndarray:
        """Gradient of the last backward pass w.r.t. `tensor`."""
        if tensor.tape is not self or tensor.node_id is None:
            raise ValueError("tensor is not recorded on this tape")
        if self._grads is None:
            raise RuntimeError("backward has not been run on this tape")
        g = self._grads[tensor.node_id]
        if g is None:
            return np.zeros_like(tensor.data)
        return np.asarray(g, dtype=np.float64)


class Tensor:
    """N-dimensional float64 array, optionally bound to a gradient tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.tape: Optional[Tape] = None
        self.node_id: Optional[int] = None

    @classmethod
    def _wrap(cls, data, tape, node_id):
        t = cls.__new__(cls)
        t.data = data
        t.tape = tape
        t.node_id = node_id
        return t

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        taped = "" if self.tape is None else f", node={self.node_id}"
        return f"Tensor(shape={self.data.shape}{taped})"

    # arithmetic sugar; scalars become constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; divide by scalars")
        return mul(self, _as_tensor(1.0 / other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands are recorded on different tapes")
    return tape


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor._wrap(data, None, None)
    ids = tuple(t.node_id if t.tape is tape else None for t in inputs)
    return tape._record(data, ids, backward_fn)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` over the axes numpy stretched to reach `g.shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} are not broadcastable"
        ) from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _emit(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting.

    Size-1 axes are stretched; the gradient sums back over stretched axes.
    """
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * b_data, a_data.shape),
            _unbroadcast(g * a_data, b_data.shape),
        )

    return _emit(out, (a, b), backward)


# per-channel / per-position weighting is plain broadcasting
broadcast_mul = mul


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def backward(g):
        return (g * mask,)

    return _emit(out, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def backward(g):
        return (g * sign,)

    return _emit(out, (a,), backward)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    a_data = a.data

    def backward(g):
        return (2.0 * a_data * g,)

    return _emit(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; inputs must be non-negative.

    The derivative at exactly 0 is taken as 0 so that losses built from
    norms stay finite at a perfect fit.
    """
    if np.any(a.data < 0.0):
        raise ValueError("sqrt requires non-negative input")
    out = np.sqrt(a.data)
    half_inv = np.zeros_like(out)
    np.divide(0.5, out, out=half_inv, where=out > 0.0)

    def backward(g):
        return (g * half_inv,)

    return _emit(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and reshapes


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def sum_over(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes_t = _norm_axes(axes, a.data.ndim)
    out = a.data.sum(axis=axes_t, keepdims=keepdims)
    shape = a.data.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes_t)
        return (np.broadcast_to(g, shape),)

    return _emit(out, (a,), backward)


def mean_over(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes_t = _norm_axes(axes, a.data.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes_t]))
    out = a.data.mean(axis=axes_t, keepdims=keepdims)
    shape = a.data.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes_t)
        return (np.broadcast_to(g / count, shape),)

    return _emit(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _emit(out, (a,), backward)


def flatten_batch(a: Tensor) -> Tensor:
    """[B, ...] -> [B, prod(...)]"""
    return reshape(a, (a.data.shape[0], -1))


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate [B,Ca,H,W] and [B,Cb,H,W] along channels."""
    sa, sb = a.data.shape, b.data.shape
    if len(sa) != 4 or len(sb) != 4:
        raise ShapeError("concat_channels expects 4-D feature maps")
    if sa[0] != sb[0]:
        raise ShapeError(f"concat_channels: batch {sa[0]} != {sb[0]}")
    if sa[2:] != sb[2:]:
        raise ShapeError(
            f"concat_channels: spatial extents {sa[2:]} != {sb[2:]}"
        )
    out = np.concatenate((a.data, b.data), axis=1)
    ca = sa[1]

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _emit(out, (a, b), backward)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.data.shape
    if len(shape) != 4:
        raise ShapeError("slice_channels expects a 4-D feature map")
    if not (0 <= start <= stop <= shape[1]):
        raise ShapeError(
            f"slice_channels: [{start}:{stop}] out of range for {shape[1]} channels"
        )
    out = a.data[:, start:stop].copy()

    def backward(g):
        gin = np.zeros(shape)
        gin[:, start:stop] = g
        return (gin,)

    return _emit(out, (a,), backward)


# ---------------------------------------------------------------------------
# network layers


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation with per-output-channel bias.

    x: [B,Cin,H,W], kernel: [Cout,Cin,kH,kW], bias: [Cout].
    Output spatial extents: floor((H + 2*padding - kH)/stride) + 1.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D, got {x.data.ndim}-D")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D, got {kernel.data.ndim}-D")
    if stride < 1:
        raise ValueError("conv2d: stride must be a positive int")
    if padding < 0:
        raise ValueError("conv2d: padding must be non-negative")
    batch, cin, h, w = x.data.shape
    cout, cin_k, kh, kw = kernel.data.shape
    if cin_k != cin:
        raise ShapeError(
            f"conv2d: input has {cin} channels but kernel expects {cin_k}"
        )
    if bias.data.shape != (cout,):
        raise ShapeError(
            f"conv2d: bias shape {bias.data.shape} does not match {cout} output channels"
        )
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {hp}")
    if kw > wp:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding:
        xp = np.zeros((batch, cin, hp, wp))
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    col = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    col = col.reshape(batch * ho * wo, cin * kh * kw)
    kmat = kernel.data.reshape(cout, -1)
    out = col @ kmat.T + bias.data
    out = np.ascontiguousarray(
        out.reshape(batch, ho, wo, cout).transpose(0, 3, 1, 2)
    )

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(batch * ho * wo, cout)
        gb = g.sum(axis=(0, 2, 3))
        gk = (gmat.T @ col).reshape(cout, cin, kh, kw)
        gcol = (gmat @ kmat).reshape(batch, ho, wo, cin, kh, kw)
        gcol = gcol.transpose(0, 3, 4, 5, 1, 2)  # [B,Cin,kh,kw,Ho,Wo]
        gxp = np.zeros((batch, cin, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride,
                    j:j + stride * wo:stride] += gcol[:, :, i, j]
        if padding:
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        else:
            gx = gxp
        return gx, gk, gb

    return _emit(out, (x, kernel, bias), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight.T + bias for x: [B,N], weight: [M,N], bias: [M]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    _, n = x.data.shape
    m, n_w = weight.data.shape
    if n_w != n:
        raise ShapeError(
            f"linear: input features {n} do not match weight inner extent {n_w}"
        )
    if bias.data.shape != (m,):
        raise ShapeError(
            f"linear: bias shape {bias.data.shape} does not match {m} outputs"
        )
    out = x.data @ weight.data.T + bias.data
    x_data, w_data = x.data, weight.data

    def backward(g):
        return g @ w_data, g.T @ x_data, g.sum(axis=0)

    return _emit(out, (x, weight, bias), backward)


def global_max_pool_spatial(x: Tensor) -> Tensor:
    """Per-channel maximum over all spatial positions: [B,C,H,W] -> [B,C,1,1]."""
    if x.data.ndim != 4:
        raise ShapeError("global_max_pool_spatial expects a 4-D feature map")
    batch, channels, h, w = x.data.shape
    flat = x.data.reshape(batch, channels, h * w)
    idx = flat.argmax(axis=2)  # first maximum in row-major order
    out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(
        batch, channels, 1, 1
    )

    def backward(g):
        gflat = np.zeros((batch, channels, h * w))
        np.put_along_axis(gflat, idx[..., None], g.reshape(batch, channels, 1), axis=2)
        return (gflat.reshape(batch, channels, h, w),)

    return _emit(out, (x,), backward)


def global_avg_pool_channels(x: Tensor) -> Tensor:
    """Per-position mean over channels: [B,C,H,W] -> [B,1,H,W]."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool_channels expects a 4-D feature map")
    channels = x.data.shape[1]
    out = x.data.mean(axis=1, keepdims=True)
    shape = x.data.shape

    def backward(g):
        return (np.broadcast_to(g / channels, shape),)

    return _emit(out, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate every pixel factor x factor: [B,C,H,W] -> [B,C,fH,fW]."""
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest expects a 4-D feature map")
    if factor < 1:
        raise ValueError("upsample_nearest: factor must be a positive int")
    if factor == 1:
        return _emit(x.data.copy(), (x,), lambda g: (g,))
    batch, channels, h, w = x.data.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        return (g.reshape(batch, channels, h, factor, w, factor).sum(axis=(3, 5)),)

    return _emit(out, (x,), backward)
