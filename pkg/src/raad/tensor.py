"""Reverse-mode automatic differentiation on float64 numpy arrays.

A ``Tape`` records operations in execution order; ``backward`` walks the
tape in reverse, accumulating vector-Jacobian products.  Only the op set
needed by the pipeline is provided: conv2d (im2col), average pooling,
relu, align-corners bilinear resizing, mean-squared error, top-k mean
(hard mining), channel slicing and elementwise arithmetic.

Gradient flow follows two rules: an op records a tape node only when some
input requires a gradient, and ``backward`` deposits ``.grad`` on every
requires-grad tensor it reaches.  Detached tensors (requires_grad=False)
never receive gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

_TAPES: list["Tape"] = []


class Tape:
    """Execution-ordered op recording; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        if popped is not self:
            raise ContractError("tape stack corrupted: exited a tape that is not innermost")
        return False


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """Immutable-by-convention float64 array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise ContractError(f"{what} contains non-finite values")
        return self

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- elementwise arithmetic (strict shapes; scalars allowed) --

    def __add__(self, other):
        return _binary("add", self, other, lambda a, b: a + b,
                       lambda go, a, b: (go, go))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other, lambda a, b: a - b,
                       lambda go, a, b: (go, -go))

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        return _binary("mul", self, other, lambda a, b: a * b,
                       lambda go, a, b: (go * b, go * a))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        if _TAPES:
            _TAPES[-1].nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _binary(name, a, b, fwd, bwd) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{name}: shape {a.shape} vs {b.shape} (no broadcasting)")
    out = Tensor(fwd(a.data, b.data))

    def backward(go):
        ga, gb = bwd(go, a.data, b.data)
        pairs = []
        if a.requires_grad:
            pairs.append((a, _unbroadcast(ga, a.shape)))
        if b.requires_grad:
            pairs.append((b, _unbroadcast(gb, b.shape)))
        return pairs

    return _record(out, (a, b), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.sum(g).reshape(shape)
    raise DimensionError(f"gradient shape {g.shape} does not reduce to {shape}")


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/dx into ``.grad`` of every reachable requires-grad tensor.

    Repeated calls without zeroing add up.  Flow buffers are local to the
    call, so earlier residue on intermediate tensors cannot double-count.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise ContractError("loss is non-finite before backward")
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        go = flow.get(id(node.out))
        if go is None:
            continue
        for tensor, g in node.backward(go):
            key = id(tensor)
            if key in flow:
                flow[key] = flow[key] + g
            else:
                flow[key] = g
                touched[key] = tensor
    for key, tensor in touched.items():
        if tensor.requires_grad:
            g = flow[key]
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- ops


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))

    def bw(go):
        if not x.requires_grad:
            return []
        return [(x, go * (x.data > 0.0))]

    return _record(out, (x,), bw)


def tensor_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.float64(x.data.sum()))

    def bw(go):
        if not x.requires_grad:
            return []
        return [(x, np.full_like(x.data, float(go)))]

    return _record(out, (x,), bw)


def mse_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean of elementwise squared differences; scalar output."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse_mean: shape {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ContractError("mse_mean on empty tensors")
    diff = a.data - b.data
    out = Tensor(np.float64(np.mean(diff * diff)))

    def bw(go):
        scale = 2.0 * float(go) / a.size
        pairs = []
        if a.requires_grad:
            pairs.append((a, scale * diff))
        if b.requires_grad:
            pairs.append((b, -scale * diff))
        return pairs

    return _record(out, (a, b), bw)


def topk_mean(x: Tensor, k: int) -> Tensor:
    """Mean of the k largest entries; gradient reaches only those entries.

    Ties are broken by first linear index (stable order), so the selected
    set is deterministic.
    """
    x = _as_tensor(x)
    if x.size == 0:
        raise ContractError("topk_mean on an empty tensor")
    if not 1 <= k <= x.size:
        raise ParameterError(f"topk_mean: k={k} outside [1, {x.size}]")
    flat = x.data.ravel()
    idx = np.argsort(-flat, kind="stable")[:k]
    out = Tensor(np.float64(flat[idx].mean()))

    def bw(go):
        if not x.requires_grad:
            return []
        g = np.zeros_like(flat)
        g[idx] = float(go) / k
        return [(x, g.reshape(x.shape))]

    return _record(out, (x,), bw)


def channel_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    """Slice channels [lo, hi) of an [N, C, H, W] tensor."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"channel_slice expects 4-d input, got {x.ndim}-d")
    if not 0 <= lo < hi <= x.shape[1]:
        raise ParameterError(f"channel_slice [{lo},{hi}) outside 0..{x.shape[1]}")
    out = Tensor(x.data[:, lo:hi].copy())

    def bw(go):
        if not x.requires_grad:
            return []
        g = np.zeros_like(x.data)
        g[:, lo:hi] = go
        return [(x, g)]

    return _record(out, (x,), bw)


# -- convolution ------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for a in range(kh):
        a_end = a + stride * oh
        for b in range(kw):
            b_end = b + stride * ow
            cols[:, :, a, b] = x[:, :, a:a_end:stride, b:b_end:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(dcol: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int,
            oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    dcols = dcol.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for a in range(kh):
        a_end = a + stride * oh
        for b in range(kw):
            b_end = b + stride * ow
            # overlapping windows must accumulate, not overwrite
            dx[:, :, a:a_end:stride, b:b_end:stride] += dcols[:, :, a, b]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-d cross-correlation of [N,Cin,H,W] with [Cout,Cin,kh,kw] plus bias."""
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    bias = _as_tensor(bias)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-d [N,C,H,W], got {x.ndim}-d")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-d, got {weight.ndim}-d")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d channel axis: input has {cin}, weight expects {wcin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d bias axis: expected ({cout},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: stride {stride} / padding {padding} out of domain")
    if kh < 1 or kw < 1:
        raise ParameterError("conv2d: kernel dims must be >= 1")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(
            f"conv2d spatial axis: padded input {h + 2 * padding}x{w + 2 * padding} "
            f"smaller than kernel {kh}x{kw}")

    col, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(cout, -1)
    out2 = col @ w2.T + bias.data
    out = Tensor(out2.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2))

    def bw(go):
        g2 = go.transpose(0, 2, 3, 1).reshape(-1, cout)
        pairs = []
        if weight.requires_grad:
            pairs.append((weight, (g2.T @ col).reshape(weight.shape)))
        if bias.requires_grad:
            pairs.append((bias, g2.sum(axis=0)))
        if x.requires_grad:
            pairs.append((x, _col2im(g2 @ w2, x.shape, kh, kw, stride, padding, oh, ow)))
        return pairs

    return _record(out, (x, weight, bias), bw)


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Non-padded average pooling; trailing rows/cols that do not fill a
    window are ignored in both directions of the computation."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d input must be 4-d, got {x.ndim}-d")
    stride = kernel if stride is None else stride
    if kernel < 1 or stride < 1:
        raise ParameterError(f"avg_pool2d: kernel {kernel} / stride {stride} must be >= 1")
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise DimensionError(f"avg_pool2d spatial axis: input {h}x{w} smaller than window {kernel}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    acc = np.zeros((n, c, oh, ow), dtype=np.float64)
    for a in range(kernel):
        for b in range(kernel):
            acc += x.data[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride]
    out = Tensor(acc / (kernel * kernel))

    def bw(go):
        if not x.requires_grad:
            return []
        g = np.zeros_like(x.data)
        share = go / (kernel * kernel)
        for a in range(kernel):
            for b in range(kernel):
                g[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] += share
        return [(x, g)]

    return _record(out, (x,), bw)


# -- bilinear resize --------------------------------------------------

def _resize_plan(n_in: int, n_out: int):
    if n_out == 1:
        src = np.zeros(1, dtype=np.float64)
    else:
        src = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
    i0 = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize over the trailing two axes (plain data).

    Computed in lerp form (v0 + f*(v1-v0)) so constant inputs are
    reproduced exactly and corner samples land on corner pixels.
    """
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"bilinear resize target {out_h}x{out_w} must be >= 1")
    h, w = x.shape[-2:]
    y0, y1, fy = _resize_plan(h, out_h)
    x0, x1, fx = _resize_plan(w, out_w)
    Y0, Y1 = y0[:, None], y1[:, None]
    X0, X1 = x0[None, :], x1[None, :]
    v00 = x[..., Y0, X0]
    v01 = x[..., Y0, X1]
    v10 = x[..., Y1, X0]
    v11 = x[..., Y1, X1]
    top = v00 + fx[None, :] * (v01 - v00)
    bot = v10 + fx[None, :] * (v11 - v10)
    return top + fy[:, None] * (bot - top)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable align-corners bilinear resize of [N,C,H,W]."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"bilinear_resize input must be 4-d, got {x.ndim}-d")
    n, c, h, w = x.shape
    out = Tensor(bilinear_resize_array(x.data, out_h, out_w))

    def bw(go):
        if not x.requires_grad:
            return []
        y0, y1, fy = _resize_plan(h, out_h)
        x0, x1, fx = _resize_plan(w, out_w)
        wy1 = fy[:, None]
        wy0 = 1.0 - wy1
        wx1 = fx[None, :]
        wx0 = 1.0 - wx1
        lead = n * c
        g = np.zeros((lead, h, w), dtype=np.float64)
        go2 = go.reshape(lead, out_h, out_w)
        li = np.arange(lead)[:, None, None]
        Y0, Y1 = y0[None, :, None], y1[None, :, None]
        X0, X1 = x0[None, None, :], x1[None, None, :]
        np.add.at(g, (li, Y0, X0), go2 * (wy0 * wx0))
        np.add.at(g, (li, Y0, X1), go2 * (wy0 * wx1))
        np.add.at(g, (li, Y1, X0), go2 * (wy1 * wx0))
        np.add.at(g, (li, Y1, X1), go2 * (wy1 * wx1))
        return [(x, g.reshape(x.shape))]

    return _record(out, (x,), bw)
