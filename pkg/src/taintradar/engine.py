"""Dense tensors, CNN forward primitives, and tape-based reverse-mode autodiff.

Every operation is recorded as a node on an explicit ``Tape``; ``backward``
walks the tape in reverse and returns the gradient of a scalar with respect
to every recorded node (inputs, weights, patch pixels, feature maps alike).
Layout convention is row-major NCHW for image tensors. ReLU uses subgradient
0 at exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class UnsupportedParameterError(ValueError):
    """Operation parameter outside its legal range (e.g. negative stride)."""


class Tensor:
    """A dense real-valued array, optionally bound to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, dtype=None, tape: "Tape" = None, node_id: int = None):
        self.data = np.asarray(data, dtype=dtype)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


@dataclass
class Node:
    kind: str
    parents: tuple
    params: dict
    value: np.ndarray


class Tape:
    """Append-only record of operations; single-writer, replayable."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []

    def leaf(self, data) -> Tensor:
        """Record an input/parameter tensor and return its bound handle."""
        value = np.ascontiguousarray(np.asarray(data, dtype=self.dtype))
        self.nodes.append(Node("leaf", (), {}, value))
        return Tensor(value, tape=self, node_id=len(self.nodes) - 1)

    def _bind(self, t: Tensor) -> int:
        if t.tape is self:
            return t.node_id
        if t.tape is None:
            value = np.ascontiguousarray(np.asarray(t.data, dtype=self.dtype))
            self.nodes.append(Node("leaf", (), {}, value))
            return len(self.nodes) - 1
        raise ValueError("operands recorded on different tapes")

    def __len__(self):
        return len(self.nodes)


# ---------------------------------------------------------------------------
# Operation registry: kind -> (forward, vjp).
# forward(values, params) -> ndarray
# vjp(values, out_value, grad_out, params) -> list of per-parent gradients
# ---------------------------------------------------------------------------

@dataclass
class _Op:
    forward: Callable
    vjp: Callable


OPS: dict[str, _Op] = {}


def _register(kind):
    def deco(cls):
        OPS[kind] = _Op(cls.forward, cls.vjp)
        return cls
    return deco


def _record(kind: str, operands: Sequence[Tensor], params: dict) -> Tensor:
    tape = None
    for t in operands:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands recorded on different tapes")
    values = [t.data for t in operands]
    out = OPS[kind].forward(values, params)
    if tape is None:
        return Tensor(out)
    ids = tuple(tape._bind(t) for t in operands)
    tape.nodes.append(Node(kind, ids, params, out))
    return Tensor(out, tape=tape, node_id=len(tape.nodes) - 1)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(kind, a, b):
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise ShapeError(f"{kind}: dimension {axis} mismatch ({da} vs {db})")
        raise ShapeError(f"{kind}: rank mismatch ({a.shape} vs {b.shape})")


# -- convolution -------------------------------------------------------------

def _conv_windows(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, oh, ow, kh, kw),
        (s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)


@_register("conv2d")
class _Conv2d:
    @staticmethod
    def forward(values, params):
        x, w = values[0], values[1]
        b = values[2] if len(values) > 2 else None
        stride, pad = params["stride"], params["pad"]
        if stride < 1:
            raise UnsupportedParameterError(f"conv2d: stride must be >= 1, got {stride}")
        if pad < 0:
            raise UnsupportedParameterError(f"conv2d: padding must be >= 0, got {pad}")
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(
                f"conv2d: input channels (dim 1 = {x.shape[1]}) do not match "
                f"kernel input channels ({w.shape[1]})")
        kh, kw = w.shape[2], w.shape[3]
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        if xp.shape[2] < kh or xp.shape[3] < kw:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2]}x{xp.shape[3]}")
        win = _conv_windows(xp, kh, kw, stride)
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N,OH,OW,OC)
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
        if b is not None:
            if b.shape != (w.shape[0],):
                raise ShapeError(f"conv2d: bias shape {b.shape} does not match out channels ({w.shape[0]},)")
            out += b[None, :, None, None]
        return out

    @staticmethod
    def vjp(values, out, g, params):
        x, w = values[0], values[1]
        stride, pad = params["stride"], params["pad"]
        kh, kw = w.shape[2], w.shape[3]
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        win = _conv_windows(xp, kh, kw, stride)
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (OC,C,kh,kw)
        # (N,OH,OW,C,kh,kw) contributions, scattered back over the strided windows
        pre = np.tensordot(g, w, axes=([1], [0]))
        gxp = np.zeros_like(xp)
        oh, ow = g.shape[2], g.shape[3]
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    pre[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:xp.shape[2] - pad, pad:xp.shape[3] - pad] if pad else gxp
        grads = [gx, gw]
        if len(values) > 2:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads


@_register("dense")
class _Dense:
    @staticmethod
    def forward(values, params):
        x, w = values[0], values[1]
        b = values[2] if len(values) > 2 else None
        if x.ndim != 2 or w.ndim != 2:
            raise ShapeError(f"dense: expected 2-d input and weight, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[0]:
            raise ShapeError(
                f"dense: input features (dim 1 = {x.shape[1]}) do not match weight rows ({w.shape[0]})")
        out = x @ w
        if b is not None:
            if b.shape != (w.shape[1],):
                raise ShapeError(f"dense: bias shape {b.shape} does not match units ({w.shape[1]},)")
            out = out + b[None, :]
        return out

    @staticmethod
    def vjp(values, out, g, params):
        x, w = values[0], values[1]
        grads = [g @ w.T, x.T @ g]
        if len(values) > 2:
            grads.append(g.sum(axis=0))
        return grads


@_register("relu")
class _Relu:
    @staticmethod
    def forward(values, params):
        return np.maximum(values[0], 0)

    @staticmethod
    def vjp(values, out, g, params):
        return [g * (values[0] > 0)]


@_register("maxpool2d")
class _MaxPool2d:
    @staticmethod
    def forward(values, params):
        x = values[0]
        k, stride = params["kernel"], params["stride"]
        if k < 1 or stride < 1:
            raise UnsupportedParameterError(f"maxpool2d: kernel/stride must be >= 1, got {k}/{stride}")
        if x.ndim != 4:
            raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
        if x.shape[2] < k or x.shape[3] < k:
            raise ShapeError(f"maxpool2d: window {k} larger than input {x.shape[2]}x{x.shape[3]}")
        win = _conv_windows(x, k, k, stride)
        flat = win.reshape(win.shape[:4] + (k * k,))
        return np.ascontiguousarray(flat.max(axis=-1))

    @staticmethod
    def vjp(values, out, g, params):
        x = values[0]
        k, stride = params["kernel"], params["stride"]
        win = _conv_windows(x, k, k, stride)
        flat = win.reshape(win.shape[:4] + (k * k,))
        arg = flat.argmax(axis=-1)  # first maximal element on ties
        n, c, oh, ow = arg.shape
        ni, ci, oi, oj = np.indices((n, c, oh, ow), sparse=False)
        rows = oi * stride + arg // k
        cols = oj * stride + arg % k
        gx = np.zeros_like(x)
        np.add.at(gx, (ni, ci, rows, cols), g)
        return [gx]


@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(values, params):
        x = values[0]
        shape = params["shape"]
        if int(np.prod(shape)) != x.size:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
        return x.reshape(shape)

    @staticmethod
    def vjp(values, out, g, params):
        return [g.reshape(values[0].shape)]


@_register("flatten")
class _Flatten:
    @staticmethod
    def forward(values, params):
        x = values[0]
        if x.ndim < 2:
            raise ShapeError(f"flatten: expected batched input, got {x.shape}")
        return x.reshape(x.shape[0], -1)

    @staticmethod
    def vjp(values, out, g, params):
        return [g.reshape(values[0].shape)]


@_register("add")
class _Add:
    @staticmethod
    def forward(values, params):
        _check_same_shape("add", values[0], values[1])
        return values[0] + values[1]

    @staticmethod
    def vjp(values, out, g, params):
        return [g, g]


@_register("elementwise-mul")
class _Mul:
    @staticmethod
    def forward(values, params):
        _check_same_shape("elementwise-mul", values[0], values[1])
        return values[0] * values[1]

    @staticmethod
    def vjp(values, out, g, params):
        return [g * values[1], g * values[0]]


@_register("scale")
class _Scale:
    @staticmethod
    def forward(values, params):
        return values[0] * params["factor"]

    @staticmethod
    def vjp(values, out, g, params):
        return [g * params["factor"]]


@_register("add-scalar")
class _AddScalar:
    @staticmethod
    def forward(values, params):
        return values[0] + params["value"]

    @staticmethod
    def vjp(values, out, g, params):
        return [g]


def _check_temperature(t):
    if not t > 0:
        raise UnsupportedParameterError(f"temperature must be > 0, got {t}")


@_register("softmax-t")
class _SoftmaxT:
    @staticmethod
    def forward(values, params):
        z = values[0]
        _check_temperature(params["temperature"])
        if z.ndim not in (1, 2):
            raise ShapeError(f"softmax: expected 1-d or 2-d logits, got {z.shape}")
        if z.shape[-1] < 2:
            raise ShapeError(f"softmax: need at least 2 classes, got {z.shape[-1]}")
        s = z / params["temperature"]
        s = s - s.max(axis=-1, keepdims=True)  # overflow guard for confident logits
        e = np.exp(s)
        p = e / e.sum(axis=-1, keepdims=True)
        # floor keeps every component strictly inside (0, 1) so log(p) stays finite
        p = np.maximum(p, np.finfo(p.dtype).tiny)
        return p / p.sum(axis=-1, keepdims=True)

    @staticmethod
    def vjp(values, out, g, params):
        t = params["temperature"]
        inner = (g * out).sum(axis=-1, keepdims=True)
        return [out * (g - inner) / t]


@_register("log-softmax-t")
class _LogSoftmaxT:
    @staticmethod
    def forward(values, params):
        z = values[0]
        _check_temperature(params["temperature"])
        s = z / params["temperature"]
        s = s - s.max(axis=-1, keepdims=True)
        return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))

    @staticmethod
    def vjp(values, out, g, params):
        t = params["temperature"]
        p = np.exp(out)
        return [(g - p * g.sum(axis=-1, keepdims=True)) / t]


@_register("log")
class _Log:
    @staticmethod
    def forward(values, params):
        return np.log(values[0])

    @staticmethod
    def vjp(values, out, g, params):
        return [g / values[0]]


@_register("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(values, params):
        x = values[0]
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    @staticmethod
    def vjp(values, out, g, params):
        return [g * out * (1.0 - out)]


@_register("abs")
class _Abs:
    @staticmethod
    def forward(values, params):
        return np.abs(values[0])

    @staticmethod
    def vjp(values, out, g, params):
        return [g * np.sign(values[0])]


@_register("sqrt")
class _Sqrt:
    @staticmethod
    def forward(values, params):
        return np.sqrt(values[0])

    @staticmethod
    def vjp(values, out, g, params):
        return [np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0)]


@_register("sum")
class _Sum:
    @staticmethod
    def forward(values, params):
        return np.asarray(values[0].sum())

    @staticmethod
    def vjp(values, out, g, params):
        return [np.full_like(values[0], g.item())]


@_register("mean")
class _Mean:
    @staticmethod
    def forward(values, params):
        return np.asarray(values[0].mean())

    @staticmethod
    def vjp(values, out, g, params):
        x = values[0]
        return [np.full_like(x, g.item() / x.size)]


@_register("max")
class _Max:
    @staticmethod
    def forward(values, params):
        return np.asarray(values[0].max())

    @staticmethod
    def vjp(values, out, g, params):
        x = values[0]
        gx = np.zeros_like(x)
        gx.flat[int(x.argmax())] = g.item()  # first maximal element on ties
        return [gx]


@_register("div")
class _Div:
    """Elementwise division of a tensor by a one-element tensor."""

    @staticmethod
    def forward(values, params):
        a, s = values
        if s.size != 1:
            raise ShapeError(f"div: divisor must hold one element, got shape {s.shape}")
        return a / s.item()

    @staticmethod
    def vjp(values, out, g, params):
        a, s = values
        sv = s.item()
        ga = g / sv
        gs = np.asarray(-(g * a).sum() / (sv * sv), dtype=s.dtype).reshape(s.shape)
        return [ga, gs]


@_register("pick")
class _Pick:
    @staticmethod
    def forward(values, params):
        x = values[0]
        if x.ndim != 1:
            raise ShapeError(f"pick: expected 1-d input, got {x.shape}")
        return np.asarray(x[params["index"]])

    @staticmethod
    def vjp(values, out, g, params):
        gx = np.zeros_like(values[0])
        gx[params["index"]] = g.item()
        return [gx]


@_register("pick-rows")
class _PickRows:
    @staticmethod
    def forward(values, params):
        x = values[0]
        idx = params["indices"]
        return x[np.arange(x.shape[0]), idx]

    @staticmethod
    def vjp(values, out, g, params):
        gx = np.zeros_like(values[0])
        gx[np.arange(gx.shape[0]), params["indices"]] = g
        return [gx]


@_register("channel-weighted-sum")
class _ChannelWeightedSum:
    """Weighted sum over the channel axis with a fixed weight vector."""

    @staticmethod
    def forward(values, params):
        x = values[0]
        w = params["weights"]
        if x.ndim != 3 or x.shape[0] != w.shape[0]:
            raise ShapeError(f"channel-weighted-sum: input {x.shape} vs weights {w.shape}")
        return np.tensordot(w, x, axes=1)

    @staticmethod
    def vjp(values, out, g, params):
        w = params["weights"]
        return [w[:, None, None] * g[None, :, :]]


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear interpolation matrix (n_out x n_in), half-pixel-centres convention."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m


@_register("bilinear-upsample")
class _BilinearUpsample:
    @staticmethod
    def forward(values, params):
        x = values[0]
        if x.ndim != 2:
            raise ShapeError(f"bilinear-upsample: expected 2-d map, got {x.shape}")
        r = _interp_matrix(x.shape[0], params["out_h"]).astype(x.dtype)
        c = _interp_matrix(x.shape[1], params["out_w"]).astype(x.dtype)
        return r @ x @ c.T

    @staticmethod
    def vjp(values, out, g, params):
        x = values[0]
        r = _interp_matrix(x.shape[0], params["out_h"]).astype(x.dtype)
        c = _interp_matrix(x.shape[1], params["out_w"]).astype(x.dtype)
        return [r.T @ g @ c]


@_register("nearest-resize")
class _NearestResize:
    @staticmethod
    def forward(values, params):
        x = values[0]
        if x.ndim != 3:
            raise ShapeError(f"nearest-resize: expected CHW input, got {x.shape}")
        oh, ow = params["out_h"], params["out_w"]
        ri = np.minimum(((np.arange(oh) + 0.5) * x.shape[1] / oh).astype(int), x.shape[1] - 1)
        ci = np.minimum(((np.arange(ow) + 0.5) * x.shape[2] / ow).astype(int), x.shape[2] - 1)
        return np.ascontiguousarray(x[:, ri[:, None], ci[None, :]])

    @staticmethod
    def vjp(values, out, g, params):
        x = values[0]
        oh, ow = params["out_h"], params["out_w"]
        ri = np.minimum(((np.arange(oh) + 0.5) * x.shape[1] / oh).astype(int), x.shape[1] - 1)
        ci = np.minimum(((np.arange(ow) + 0.5) * x.shape[2] / ow).astype(int), x.shape[2] - 1)
        gx = np.zeros_like(x)
        cc, rr = np.meshgrid(ci, ri)
        for ch in range(x.shape[0]):
            np.add.at(gx[ch], (rr, cc), g[ch])
        return [gx]


@_register("stack0")
class _Stack0:
    """Stack same-shape tensors along a new leading axis."""

    @staticmethod
    def forward(values, params):
        base = values[0].shape
        for v in values[1:]:
            if v.shape != base:
                raise ShapeError(f"stack0: mismatched shapes {base} vs {v.shape}")
        return np.stack(values, axis=0)

    @staticmethod
    def vjp(values, out, g, params):
        return [g[i] for i in range(len(values))]


@_register("slice0")
class _Slice0:
    """Select one index along the leading axis."""

    @staticmethod
    def forward(values, params):
        return values[0][params["index"]]

    @staticmethod
    def vjp(values, out, g, params):
        gx = np.zeros_like(values[0])
        gx[params["index"]] = g
        return [gx]


@_register("spatial-mul")
class _SpatialMul:
    """Multiply a CHW tensor by an HW map, per channel."""

    @staticmethod
    def forward(values, params):
        x, m = values
        if x.ndim != 3 or m.ndim != 2 or x.shape[1:] != m.shape:
            raise ShapeError(f"spatial-mul: CHW {x.shape} incompatible with map {m.shape}")
        return x * m[None, :, :]

    @staticmethod
    def vjp(values, out, g, params):
        x, m = values
        return [g * m[None, :, :], (g * x).sum(axis=0)]


@_register("embed")
class _Embed:
    """Place a CHW block into a zero canvas of shape (C, out_h, out_w)."""

    @staticmethod
    def forward(values, params):
        x = values[0]
        oh, ow = params["out_h"], params["out_w"]
        y, xo = params["offset"]
        if x.ndim != 3:
            raise ShapeError(f"embed: expected CHW input, got {x.shape}")
        if y < 0 or xo < 0 or y + x.shape[1] > oh or xo + x.shape[2] > ow:
            raise ShapeError(
                f"embed: block {x.shape[1]}x{x.shape[2]} at ({y},{xo}) exceeds canvas {oh}x{ow}")
        out = np.zeros((x.shape[0], oh, ow), dtype=x.dtype)
        out[:, y:y + x.shape[1], xo:xo + x.shape[2]] = x
        return out

    @staticmethod
    def vjp(values, out, g, params):
        x = values[0]
        y, xo = params["offset"]
        return [g[:, y:y + x.shape[1], xo:xo + x.shape[2]]]


# ---------------------------------------------------------------------------
# Public op functions
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    ops = [_as_tensor(x), _as_tensor(w)] + ([_as_tensor(b)] if b is not None else [])
    return _record("conv2d", ops, {"stride": int(stride), "pad": int(pad)})


def dense(x, w, b=None) -> Tensor:
    ops = [_as_tensor(x), _as_tensor(w)] + ([_as_tensor(b)] if b is not None else [])
    return _record("dense", ops, {})


def relu(x) -> Tensor:
    return _record("relu", [_as_tensor(x)], {})


def maxpool2d(x, kernel: int = 2, stride: int = 2) -> Tensor:
    return _record("maxpool2d", [_as_tensor(x)], {"kernel": int(kernel), "stride": int(stride)})


def flatten(x) -> Tensor:
    return _record("flatten", [_as_tensor(x)], {})


def reshape(x, shape) -> Tensor:
    return _record("reshape", [_as_tensor(x)], {"shape": tuple(int(s) for s in shape)})


def add(a, b) -> Tensor:
    return _record("add", [_as_tensor(a), _as_tensor(b)], {})


def mul(a, b) -> Tensor:
    return _record("elementwise-mul", [_as_tensor(a), _as_tensor(b)], {})


def scale(x, factor: float) -> Tensor:
    return _record("scale", [_as_tensor(x)], {"factor": float(factor)})


def add_scalar(x, value: float) -> Tensor:
    return _record("add-scalar", [_as_tensor(x)], {"value": float(value)})


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def one_minus(x) -> Tensor:
    return add_scalar(scale(x, -1.0), 1.0)


def softmax_with_temperature(z, temperature: float) -> Tensor:
    """Softened softmax p_i = exp(Z_i/T) / sum_k exp(Z_k/T), max-subtracted."""
    return _record("softmax-t", [_as_tensor(z)], {"temperature": float(temperature)})


def log_softmax(z, temperature: float = 1.0) -> Tensor:
    return _record("log-softmax-t", [_as_tensor(z)], {"temperature": float(temperature)})


def log(x) -> Tensor:
    return _record("log", [_as_tensor(x)], {})


def sigmoid(x) -> Tensor:
    return _record("sigmoid", [_as_tensor(x)], {})


def absolute(x) -> Tensor:
    return _record("abs", [_as_tensor(x)], {})


def sqrt(x) -> Tensor:
    return _record("sqrt", [_as_tensor(x)], {})


def tsum(x) -> Tensor:
    return _record("sum", [_as_tensor(x)], {})


def tmean(x) -> Tensor:
    return _record("mean", [_as_tensor(x)], {})


def tmax(x) -> Tensor:
    return _record("max", [_as_tensor(x)], {})


def div(a, b) -> Tensor:
    return _record("div", [_as_tensor(a), _as_tensor(b)], {})


def pick(x, index: int) -> Tensor:
    return _record("pick", [_as_tensor(x)], {"index": int(index)})


def pick_rows(x, indices) -> Tensor:
    return _record("pick-rows", [_as_tensor(x)], {"indices": np.asarray(indices, dtype=np.int64)})


def channel_weighted_sum(x, weights) -> Tensor:
    return _record("channel-weighted-sum", [_as_tensor(x)],
                   {"weights": np.array(weights, copy=True)})


def bilinear_upsample(x, out_h: int, out_w: int) -> Tensor:
    return _record("bilinear-upsample", [_as_tensor(x)], {"out_h": int(out_h), "out_w": int(out_w)})


def nearest_resize(x, out_h: int, out_w: int) -> Tensor:
    return _record("nearest-resize", [_as_tensor(x)], {"out_h": int(out_h), "out_w": int(out_w)})


def stack0(tensors) -> Tensor:
    return _record("stack0", [_as_tensor(t) for t in tensors], {})


def slice0(x, index: int) -> Tensor:
    return _record("slice0", [_as_tensor(x)], {"index": int(index)})


def spatial_mul(x, m) -> Tensor:
    return _record("spatial-mul", [_as_tensor(x), _as_tensor(m)], {})


def embed(x, out_h: int, out_w: int, offset: tuple) -> Tensor:
    return _record("embed", [_as_tensor(x)],
                   {"out_h": int(out_h), "out_w": int(out_w), "offset": (int(offset[0]), int(offset[1]))})


def l2_norm(x, eps: float = 1e-12) -> Tensor:
    """sqrt(sum(x^2) + eps), recorded on the tape."""
    return sqrt(add_scalar(tsum(mul(x, x)), eps))


def l1_norm(x) -> Tensor:
    return tsum(absolute(x))


_PRIMITIVE_KINDS = {
    "conv2d": lambda ops, p: conv2d(*ops, stride=p.get("stride", 1), pad=p.get("pad", 0)),
    "dense": lambda ops, p: dense(*ops),
    "relu": lambda ops, p: relu(*ops),
    "maxpool2d": lambda ops, p: maxpool2d(*ops, kernel=p.get("kernel", 2), stride=p.get("stride", 2)),
    "flatten": lambda ops, p: flatten(*ops),
    "add": lambda ops, p: add(*ops),
    "scale": lambda ops, p: scale(ops[0], p["factor"]),
    "elementwise-mul": lambda ops, p: mul(*ops),
}


def forward_primitive(kind: str, operands: Sequence, params: dict = None) -> Tensor:
    """Dispatch a primitive by name; records on the operands' tape if any."""
    if kind not in _PRIMITIVE_KINDS:
        raise UnsupportedParameterError(f"unknown primitive kind '{kind}'")
    return _PRIMITIVE_KINDS[kind]([_as_tensor(o) for o in operands], params or {})


# ---------------------------------------------------------------------------
# Reverse accumulation
# ---------------------------------------------------------------------------

class Grads:
    """Gradient of one scalar w.r.t. every node; zeros for unaffected nodes."""

    def __init__(self, tape: Tape, table: dict):
        self._tape = tape
        self._table = table

    def _node_id(self, key) -> int:
        if isinstance(key, Tensor):
            if key.tape is not self._tape:
                raise ValueError("tensor does not belong to this tape")
            return key.node_id
        return int(key)

    def __getitem__(self, key) -> Tensor:
        nid = self._node_id(key)
        g = self._table.get(nid)
        if g is None:
            g = np.zeros_like(self._tape.nodes[nid].value)
        return Tensor(g)

    def array(self, key) -> np.ndarray:
        return self[key].data


def backward(tape: Tape, scalar: Tensor) -> Grads:
    """Reverse-accumulate gradients of a one-element node over the whole tape."""
    if scalar.tape is not tape:
        raise ValueError("root tensor does not belong to this tape")
    if scalar.data.size != 1:
        raise ShapeError(f"backward: root must hold exactly one element, got shape {scalar.shape}")
    root = scalar.node_id
    table: dict[int, np.ndarray] = {root: np.ones_like(tape.nodes[root].value)}
    for nid in range(root, -1, -1):
        g = table.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.kind == "leaf":
            continue
        parent_values = [tape.nodes[p].value for p in node.parents]
        pgrads = OPS[node.kind].vjp(parent_values, node.value, g, node.params)
        for pid, pg in zip(node.parents, pgrads):
            if pg is None:
                continue
            acc = table.get(pid)
            if acc is None:
                table[pid] = pg.astype(tape.nodes[pid].value.dtype, copy=False)
            else:
                table[pid] = acc + pg
    return Grads(tape, table)


def replay(tape: Tape) -> bool:
    """Re-execute every recorded node; True iff all outputs match bit-for-bit."""
    for node in tape.nodes:
        if node.kind == "leaf":
            continue
        values = [tape.nodes[p].value for p in node.parents]
        fresh = OPS[node.kind].forward(values, node.params)
        if not np.array_equal(fresh, node.value):
            return False
    return True


# ---------------------------------------------------------------------------
# Test oracle and optimizer
# ---------------------------------------------------------------------------

def _to_scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    if isinstance(value, np.ndarray):
        if value.size != 1:
            raise ShapeError(f"expected a scalar, got shape {value.shape}")
        return value.item()
    return float(value)


def finite_difference_gradient(f: Callable, x, h: float = 1e-4) -> Tensor:
    """Central-difference gradient estimate of a tensor-to-scalar function."""
    if not h > 0:
        raise UnsupportedParameterError(f"finite differences need h > 0, got {h}")
    x = _as_tensor(x)
    base = np.array(x.data, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _to_scalar(f(Tensor(base.copy())))
        flat[i] = orig - h
        fm = _to_scalar(f(Tensor(base.copy())))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)


class Adam:
    """Adam update rule over a list of arrays, updated in place."""

    def __init__(self, params: list, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: list) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
