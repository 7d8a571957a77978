"""Dense tensors with reverse-mode automatic differentiation.

Small-scale kernel: numpy arrays for storage, a dynamically built graph of
closures for backward. No broadcasting except scalar scaling; shape errors
are raised eagerly so network bugs surface at the faulty op, not at backward.
"""
from __future__ import annotations

import numpy as np

try:  # optional fast conv backend; the im2col path below is the reference
    import torch as _torch
    import torch.nn.functional as _F

    _torch.set_num_threads(1)
except ImportError:  # pragma: no cover - exercised only without torch
    _torch = None

__all__ = [
    "ShapeError",
    "Tensor",
    "tensor",
    "add", "sub", "mul", "scale", "relu", "sigmoid", "tanh",
    "matmul", "add_rowvec", "linear",
    "conv2d", "global_avg_pool", "avg_pool2x2",
    "tsum", "reshape", "concat", "split",
    "backward", "finite_diff_check", "he_normal",
]


class ShapeError(ValueError):
    """Raised when tensor shapes violate an op's contract."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense real array participating in a reverse-mode autodiff graph.

    ``requires_grad`` marks trainable leaves; interior nodes always receive
    gradients during backward so fan-out accumulates additively.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None, _prev=(), _op=""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = tuple(_prev)
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float32):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _acc(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g.astype(t.data.dtype, copy=False)


def _require_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = Tensor(a.data + b.data, _prev=(a, b), _op="add")

    def bw(g):
        _acc(a, g)
        _acc(b, g)
    out._backward = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, _prev=(a, b), _op="sub")

    def bw(g):
        _acc(a, g)
        _acc(b, -g)
    out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, _prev=(a, b), _op="mul")

    def bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)
    out._backward = bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * a.data.dtype.type(s), _prev=(a,), _op="scale")

    def bw(g):
        _acc(a, g * a.data.dtype.type(s))
    out._backward = bw
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), _prev=(a,), _op="relu")

    def bw(g):
        _acc(a, g * (a.data > 0))
    out._backward = bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y.astype(a.dtype, copy=False), _prev=(a,), _op="sigmoid")

    def bw(g):
        _acc(a, g * out.data * (1.0 - out.data))
    out._backward = bw
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data), _prev=(a,), _op="tanh")

    def bw(g):
        _acc(a, g * (1.0 - out.data * out.data))
    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, _prev=(a, b), _op="matmul")

    def bw(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)
    out._backward = bw
    return out


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of an (n, d) matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rowvec: incompatible shapes {x.shape} and {b.shape}")
    out = Tensor(x.data + b.data[None, :], _prev=(x, b), _op="add_rowvec")

    def bw(g):
        _acc(x, g)
        _acc(b, g.sum(axis=0))
    out._backward = bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    if b is not None:
        y = add_rowvec(y, b)
    return y


# ---------------------------------------------------------------------------
# convolution

def _conv_out_extent(h, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols, oh, ow


def _col2im(dcols, xshape, kh, kw, stride, pad):
    b, c, h, w = xshape
    oh, ow = dcols.shape[-2:]
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x: Tensor, k: Tensor, stride=1, pad=0, groups=1) -> Tensor:
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d: expects 4-D input/kernel, got {x.shape} and {k.shape}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"conv2d: channels ({cin}->{cout}) not divisible by groups={groups}")
    if kcin != cin // groups:
        raise ShapeError(f"conv2d: kernel expects {kcin} input channels per group, input has {cin}//{groups}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: spatial extents {h}x{w} (pad {pad}) smaller than kernel {kh}x{kw}")

    if _torch is not None:
        xt = _torch.from_numpy(x.data)
        kt = _torch.from_numpy(k.data)
        y = _F.conv2d(xt, kt, stride=stride, padding=pad, groups=groups)
        out = Tensor(y.numpy(), _prev=(x, k), _op="conv2d")

        def bw_torch(g):
            gt = _torch.from_numpy(np.ascontiguousarray(g))
            dk = _torch.nn.grad.conv2d_weight(
                xt, k.shape, gt, stride=stride, padding=pad, groups=groups)
            dx = _torch.nn.grad.conv2d_input(
                x.shape, kt, gt, stride=stride, padding=pad, groups=groups)
            _acc(k, dk.numpy())
            _acc(x, dx.numpy())
        out._backward = bw_torch
        return out

    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    cig = cin // groups
    cog = cout // groups
    span = cig * kh * kw
    length = oh * ow
    # (b, groups, cig*kh*kw, L) -> per group a (b*L, span) GEMM operand
    cols_m = [np.ascontiguousarray(
        cols.reshape(b, groups, span, length)[:, gi].transpose(0, 2, 1)
    ).reshape(b * length, span) for gi in range(groups)]
    k_m = k.data.reshape(groups, cog, span)
    parts = [cols_m[gi] @ k_m[gi].T for gi in range(groups)]   # (b*L, cog) each
    y = np.concatenate(parts, axis=1) if groups > 1 else parts[0]
    y = y.reshape(b, length, cout).transpose(0, 2, 1).reshape(b, cout, oh, ow)
    out = Tensor(np.ascontiguousarray(y), _prev=(x, k), _op="conv2d")

    def bw(g):
        g2 = np.ascontiguousarray(g.reshape(b, cout, length).transpose(0, 2, 1)
                                  ).reshape(b * length, cout)
        dk = np.empty_like(k.data)
        dcols = np.empty((b, groups, span, length), dtype=g.dtype)
        for gi in range(groups):
            g_gi = g2[:, gi * cog:(gi + 1) * cog]
            dk[gi * cog:(gi + 1) * cog] = (g_gi.T @ cols_m[gi]).reshape(cog, cig, kh, kw)
            dcols[:, gi] = (g_gi @ k_m[gi]).reshape(b, length, span).transpose(0, 2, 1)
        dx = _col2im(dcols.reshape(b, cin, kh, kw, oh, ow), x.shape, kh, kw, stride, pad)
        _acc(k, dk)
        _acc(x, dx)
    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# pooling / shape ops

def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expects 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)), _prev=(x,), _op="gap")

    def bw(g):
        _acc(x, np.broadcast_to(g[:, :, None, None], x.shape) / (h * w))
    out._backward = bw
    return out


def avg_pool2x2(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2x2: expects 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2: spatial extents {h}x{w} not even and >= 2")
    y = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out = Tensor(y, _prev=(x,), _op="avg2x2")

    def bw(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
        _acc(x, gx)
    out._backward = bw
    return out


def tsum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype), _prev=(x,), _op="sum")

    def bw(g):
        _acc(x, np.full(x.shape, float(g), dtype=x.dtype))
    out._backward = bw
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), _prev=(x,), _op="reshape")

    def bw(g):
        _acc(x, g.reshape(x.shape))
    out._backward = bw
    return out


def concat(parts, axis) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 _prev=tuple(parts), _op="concat")
    extents = [p.shape[axis] for p in parts]

    def bw(g):
        off = 0
        for p, e in zip(parts, extents):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(off, off + e)
            _acc(p, g[tuple(idx)])
            off += e
    out._backward = bw
    return out


def split(x: Tensor, n_parts, axis):
    """Split into n_parts equal contiguous slices along axis."""
    extent = x.shape[axis]
    if extent % n_parts:
        raise ShapeError(f"split: extent {extent} on axis {axis} not divisible by {n_parts}")
    step = extent // n_parts
    outs = []
    for p in range(n_parts):
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(p * step, (p + 1) * step)
        idx = tuple(idx)
        part = Tensor(np.ascontiguousarray(x.data[idx]), _prev=(x,), _op="split")

        def bw(g, idx=idx):
            full = np.zeros(x.shape, dtype=x.dtype)
            full[idx] = g
            _acc(x, full)
        part._backward = bw
        outs.append(part)
    return outs


# ---------------------------------------------------------------------------
# backward pass

def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, iter(root._prev))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for child in it:
            if id(child) not in seen:
                seen.add(id(child))
                stack.append((child, iter(child._prev)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor):
    """Populate .grad of every reachable node by reverse-topological traversal."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(root: Tensor):
    for node in _toposort(root):
        node.grad = None


# ---------------------------------------------------------------------------
# verification / init

def finite_diff_check(f, x: Tensor, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f must map a Tensor to a scalar Tensor and be deterministic across calls
    (freeze any stochastic coefficients before checking). Run at 64-bit.
    """
    xt = Tensor(x.data.astype(np.float64), requires_grad=True)
    y = f(xt)
    if y.data.size != 1:
        raise ShapeError("finite_diff_check: f must return a scalar")
    backward(y)
    analytic = np.zeros(xt.shape, dtype=np.float64) if xt.grad is None else xt.grad

    y0 = float(f(Tensor(xt.data.copy())).data)
    y1 = float(f(Tensor(xt.data.copy())).data)
    if y0 != y1:
        raise ValueError("finite_diff_check: f is not deterministic under repeated evaluation")

    flat = xt.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(xt.data.copy())).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(xt.data.copy())).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * eps)
    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.abs(a))
    return float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0


def he_normal(rng, shape, fan_in, dtype=np.float32):
    """Fan-in-scaled Gaussian initialization for conv/linear weights."""
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)
