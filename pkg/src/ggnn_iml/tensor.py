"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable computation in the package goes through :func:`record_op`,
which evaluates one primitive from a fixed table and, when any input requires a
gradient, appends a node to the active :class:`Tape`.  :func:`backward` walks the
tape in reverse creation order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DIV_EPS = 1e-12
LOG_EPS = 1e-12

_PRECISIONS = {np.dtype(np.float32): "single", np.dtype(np.float64): "double"}


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _PRECISIONS:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self) -> str:
        return _PRECISIONS[self.data.dtype]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, precision={self.precision}{flag})"

    # arithmetic sugar; every method routes through record_op
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return record_op("add", [self, self._lift(other)])

    def __radd__(self, other):
        return record_op("add", [self._lift(other), self])

    def __sub__(self, other):
        return record_op("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return record_op("sub", [self._lift(other), self])

    def __mul__(self, other):
        return record_op("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        return record_op("mul", [self._lift(other), self])

    def __truediv__(self, other):
        return record_op("div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return record_op("div", [self._lift(other), self])

    def __neg__(self):
        return record_op("neg", [self])

    def __matmul__(self, other):
        return record_op("matmul", [self, other])

    def exp(self):
        return record_op("exp", [self])

    def log(self):
        return record_op("log", [self])

    def sqrt(self):
        return record_op("sqrt", [self])

    def relu(self):
        return record_op("relu", [self])

    def sigmoid(self):
        return record_op("sigmoid", [self])

    def sum(self, axis=None, keepdims: bool = False):
        return record_op("reduce_sum", [self], {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims: bool = False):
        return record_op("reduce_mean", [self], {"axis": axis, "keepdims": keepdims})

    def max(self, axis: int):
        return record_op("max", [self], {"axis": axis})

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record_op("reshape", [self], {"shape": tuple(shape)})

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return record_op("transpose", [self], {"axes": tuple(axes) if axes else None})


@dataclass(eq=False)
class Node:
    primitive: str
    inputs: tuple[Tensor, ...]
    attrs: dict[str, Any]
    saved: Any
    output: Tensor
    index: int = -1
    tape: "Tape | None" = None


class Tape:
    """Ordered record of primitive applications; creation order is topological."""

    def __init__(self):
        self.nodes: list[Node] = []

    def append(self, node: Node) -> None:
        node.index = len(self.nodes)
        node.tape = self
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output.node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().tapes.pop()

    def replay(self) -> bool:
        """Re-run every node from its recorded inputs; True iff all outputs match bit-exactly."""
        for node in self.nodes:
            fwd = PRIMITIVES[node.primitive][0]
            out, _ = fwd(*(t.data for t in node.inputs), **node.attrs)
            if out.shape != node.output.shape or not np.array_equal(out, node.output.data):
                return False
        return True


class _State(threading.local):
    def __init__(self):
        self.tapes: list[Tape] = []
        self.default = Tape()
        self.grad_enabled = True


_local = _State()


def _state() -> _State:
    return _local


def current_tape() -> Tape:
    st = _state()
    return st.tapes[-1] if st.tapes else st.default


@contextmanager
def no_grad():
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state().grad_enabled


# ---------------------------------------------------------------------------
# primitive table: name -> (forward, backward)
# forward(*arrays, **attrs) -> (out, saved)
# backward(g, saved, inputs, out, **attrs) -> tuple of input grads (None = no grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _f_add(a, b):
    return a + b, None


def _b_add(g, saved, ins, out):
    return _unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)


def _f_sub(a, b):
    return a - b, None


def _b_sub(g, saved, ins, out):
    return _unbroadcast(g, ins[0].shape), _unbroadcast(-g, ins[1].shape)


def _f_mul(a, b):
    return a * b, None


def _b_mul(g, saved, ins, out):
    a, b = ins
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _guard(b):
    # push magnitudes below DIV_EPS away from zero, keeping sign (zero maps to +eps)
    return np.where(np.abs(b) < DIV_EPS, np.where(b < 0, -DIV_EPS, DIV_EPS), b).astype(b.dtype)


def _f_div(a, b):
    bg = _guard(b)
    return a / bg, bg


def _b_div(g, bg, ins, out):
    a, b = ins
    ga = _unbroadcast(g / bg, a.shape)
    gb = -g * a / (bg * bg)
    gb = np.where(np.abs(b) < DIV_EPS, 0.0, gb).astype(gb.dtype)
    return ga, _unbroadcast(gb, b.shape)


def _f_neg(a):
    return -a, None


def _b_neg(g, saved, ins, out):
    return (-g,)


def _f_exp(a):
    return np.exp(a), None


def _b_exp(g, saved, ins, out):
    return (g * out,)


def _f_log(a):
    ag = np.maximum(a, LOG_EPS).astype(a.dtype)
    return np.log(ag), ag


def _b_log(g, ag, ins, out):
    return (np.where(ins[0] < LOG_EPS, 0.0, g / ag).astype(g.dtype),)


def _f_sqrt(a):
    return np.sqrt(a), None


def _b_sqrt(g, saved, ins, out):
    return (g * 0.5 / np.maximum(out, DIV_EPS).astype(out.dtype),)


def _f_relu(a):
    return np.maximum(a, 0).astype(a.dtype), None


def _b_relu(g, saved, ins, out):
    return (g * (ins[0] > 0),)


def _f_sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, None


def _b_sigmoid(g, saved, ins, out):
    return (g * out * (1 - out),)


def _f_matmul(a, b):
    return np.matmul(a, b), None


def _b_matmul(g, saved, ins, out):
    a, b = ins
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
    gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
    if a.ndim == 1:
        ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
    if b.ndim == 1:
        gb = gb.reshape(gb.shape[:-1])
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _im2col(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return cols[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)


def _f_conv2d(x, w, b=None, stride=1, padding=0):
    kh, kw = w.shape[2:]
    cols = _im2col(x, kh, kw, stride, padding)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if b is not None:
        out += b[None, :, None, None]
    return out, None


def _b_conv2d(g, saved, ins, out, stride=1, padding=0):
    x, w = ins[0], ins[1]
    kh, kw = w.shape[2:]
    B, C, H, W = x.shape
    Ho, Wo = g.shape[2:]
    cols = _im2col(x, kh, kw, stride, padding).transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, -1)
    gw = (g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1) @ cols.T).reshape(w.shape)
    gcols = np.tensordot(g, w, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
    gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
    grads = [gx, gw]
    if len(ins) == 3:
        grads.append(g.sum(axis=(0, 2, 3)))
    return tuple(grads)


def _pool_bins(n, s):
    return [((i * n) // s, -((-(i + 1) * n) // s)) for i in range(s)]


def _f_avg_pool2d(x, output_size):
    oh, ow = output_size
    H, W = x.shape[-2:]
    out = np.empty(x.shape[:-2] + (oh, ow), dtype=x.dtype)
    for i, (r0, r1) in enumerate(_pool_bins(H, oh)):
        for j, (c0, c1) in enumerate(_pool_bins(W, ow)):
            out[..., i, j] = x[..., r0:r1, c0:c1].mean(axis=(-2, -1))
    return out, None


def _b_avg_pool2d(g, saved, ins, out, output_size):
    x = ins[0]
    oh, ow = output_size
    H, W = x.shape[-2:]
    gx = np.zeros_like(x)
    for i, (r0, r1) in enumerate(_pool_bins(H, oh)):
        for j, (c0, c1) in enumerate(_pool_bins(W, ow)):
            gx[..., r0:r1, c0:c1] += g[..., i, j][..., None, None] / ((r1 - r0) * (c1 - c0))
    return (gx,)


def _f_global_avg_pool(x):
    return x.mean(axis=(-2, -1)), None


def _b_global_avg_pool(g, saved, ins, out):
    x = ins[0]
    H, W = x.shape[-2:]
    return (np.broadcast_to(g[..., None, None] / (H * W), x.shape).astype(x.dtype),)


def _f_upsample(x, factor):
    return x.repeat(factor, axis=-2).repeat(factor, axis=-1), None


def _b_upsample(g, saved, ins, out, factor):
    x = ins[0]
    H, W = x.shape[-2:]
    g = g.reshape(x.shape[:-2] + (H, factor, W, factor))
    return (g.sum(axis=(-3, -1)),)


def _f_concat(*xs, axis=0):
    return np.concatenate(xs, axis=axis), None


def _b_concat(g, saved, ins, out, axis=0):
    splits = np.cumsum([x.shape[axis] for x in ins])[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _f_gather_rows(x, index):
    return x[index], None


def _b_gather_rows(g, saved, ins, out, index):
    x = ins[0]
    gx = np.zeros_like(x)
    np.add.at(gx, index.reshape(-1), g.reshape((-1,) + x.shape[1:]))
    return (gx,)


def _f_reduce_sum(x, axis=None, keepdims=False):
    return np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=x.dtype), None


def _expand_reduced(g, x, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.ndim for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, x.shape)


def _b_reduce_sum(g, saved, ins, out, axis=None, keepdims=False):
    return (np.array(_expand_reduced(g, ins[0], axis, keepdims)),)


def _f_reduce_mean(x, axis=None, keepdims=False):
    return np.asarray(x.mean(axis=axis, keepdims=keepdims), dtype=x.dtype), None


def _b_reduce_mean(g, saved, ins, out, axis=None, keepdims=False):
    x = ins[0]
    n = x.size // max(out.size, 1)
    return (np.array(_expand_reduced(g, x, axis, keepdims)) / n,)


def _f_max(x, axis):
    idx = np.argmax(x, axis=axis)  # first occurrence: lowest index wins ties
    return np.take_along_axis(x, np.expand_dims(idx, axis), axis).squeeze(axis), idx


def _b_max(g, idx, ins, out, axis):
    gx = np.zeros_like(ins[0])
    np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
    return (gx,)


def _f_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def _b_layer_norm(g, saved, ins, out, eps=1e-5):
    xhat, rstd = saved
    gamma = ins[1]
    gxhat = g * gamma
    d = xhat.shape[-1]
    gx = rstd / d * (d * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
    red = tuple(range(g.ndim - 1))
    return gx, (g * xhat).sum(axis=red), g.sum(axis=red)


def _f_reshape(x, shape):
    return x.reshape(shape), None


def _b_reshape(g, saved, ins, out, shape):
    return (g.reshape(ins[0].shape),)


def _f_transpose(x, axes=None):
    return np.transpose(x, axes), None


def _b_transpose(g, saved, ins, out, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return (np.transpose(g, inv),)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (_f_add, _b_add),
    "sub": (_f_sub, _b_sub),
    "mul": (_f_mul, _b_mul),
    "div": (_f_div, _b_div),
    "neg": (_f_neg, _b_neg),
    "exp": (_f_exp, _b_exp),
    "log": (_f_log, _b_log),
    "sqrt": (_f_sqrt, _b_sqrt),
    "relu": (_f_relu, _b_relu),
    "sigmoid": (_f_sigmoid, _b_sigmoid),
    "matmul": (_f_matmul, _b_matmul),
    "conv2d": (_f_conv2d, _b_conv2d),
    "avg_pool2d": (_f_avg_pool2d, _b_avg_pool2d),
    "global_avg_pool": (_f_global_avg_pool, _b_global_avg_pool),
    "nearest_upsample2d": (_f_upsample, _b_upsample),
    "concat": (_f_concat, _b_concat),
    "gather_rows": (_f_gather_rows, _b_gather_rows),
    "reduce_sum": (_f_reduce_sum, _b_reduce_sum),
    "reduce_mean": (_f_reduce_mean, _b_reduce_mean),
    "max": (_f_max, _b_max),
    "layer_norm": (_f_layer_norm, _b_layer_norm),
    "reshape": (_f_reshape, _b_reshape),
    "transpose": (_f_transpose, _b_transpose),
}


def _validate(primitive: str, xs: Sequence[np.ndarray], attrs: dict) -> None:
    """Shape preconditions; raises ShapeError naming the primitive and the dims."""
    if primitive in ("add", "sub", "mul", "div"):
        _check_broadcast(primitive, xs[0], xs[1])
    elif primitive == "matmul":
        a, b = xs
        if a.ndim == 0 or b.ndim == 0:
            raise ShapeError("matmul: scalar operands are not allowed")
        ka = a.shape[-1]
        kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
        if ka != kb:
            raise ShapeError(f"matmul: inner dimensions differ ({ka} vs {kb}) for shapes {a.shape} @ {b.shape}")
    elif primitive == "conv2d":
        x, w = xs[0], xs[1]
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input channels {x.shape[1]} != kernel channels {w.shape[1]}")
        p, s = attrs.get("padding", 0), attrs.get("stride", 1)
        if x.shape[2] + 2 * p < w.shape[2] or x.shape[3] + 2 * p < w.shape[3]:
            raise ShapeError(f"conv2d: spatial size {x.shape[2:]} smaller than kernel {w.shape[2:]}")
        if s < 1:
            raise ShapeError(f"conv2d: stride must be >= 1, got {s}")
        if len(xs) == 3 and xs[2].shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {xs[2].shape} != ({w.shape[0]},)")
    elif primitive == "avg_pool2d":
        oh, ow = attrs["output_size"]
        if xs[0].ndim < 2 or xs[0].shape[-2] < oh or xs[0].shape[-1] < ow:
            raise ShapeError(f"avg_pool2d: spatial size {xs[0].shape[-2:]} smaller than output {(oh, ow)}")
    elif primitive in ("global_avg_pool", "nearest_upsample2d"):
        if xs[0].ndim < 2:
            raise ShapeError(f"{primitive}: need at least 2 spatial dims, got {xs[0].shape}")
    elif primitive == "concat":
        axis = attrs.get("axis", 0)
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)):
                raise ShapeError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
    elif primitive == "gather_rows":
        idx = attrs["index"]
        if idx.size and (idx.min() < 0 or idx.max() >= xs[0].shape[0]):
            raise ShapeError(f"gather_rows: index out of range for {xs[0].shape[0]} rows")
    elif primitive == "layer_norm":
        x, gamma, beta = xs
        if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match last axis {x.shape[-1]}")
    elif primitive == "reshape":
        if int(np.prod(attrs["shape"])) != xs[0].size and -1 not in attrs["shape"]:
            raise ShapeError(f"reshape: cannot reshape {xs[0].shape} into {attrs['shape']}")


def record_op(primitive: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    if primitive not in PRIMITIVES:
        raise KeyError(f"unknown primitive {primitive!r}")
    attrs = attrs or {}
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) > 1:
        raise TypeError(f"{primitive}: inputs mix precisions {sorted(str(d) for d in dtypes)}")
    arrays = [t.data for t in inputs]
    _validate(primitive, arrays, attrs)
    fwd = PRIMITIVES[primitive][0]
    out_data, saved = fwd(*arrays, **attrs)
    out_data = np.asarray(out_data, dtype=arrays[0].dtype)
    need = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=need)
    if need:
        node = Node(primitive, tuple(inputs), attrs, saved, out)
        current_tape().append(node)
        out.node = node
    return out


def backward(root: Tensor, accumulate: bool = True) -> dict[int, np.ndarray]:
    """Propagate d(root)/d(.) to every requires-grad tensor reachable on root's tape.

    Leaf tensors get their ``.grad`` accumulated when ``accumulate`` is set.
    Returns a map ``id(tensor) -> gradient``.
    """
    if root.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root.node is None or root.node.tape is None:
        raise TapeError("root is not on a tape")
    tape = root.node.tape
    if root.node.index >= len(tape.nodes) or tape.nodes[root.node.index] is not root.node:
        raise TapeError("root is not on its tape (tape was cleared)")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    keep: dict[int, Tensor] = {id(root): root}
    bwd_table = PRIMITIVES
    for node in reversed(tape.nodes[: root.node.index + 1]):
        g = grads.get(id(node.output))
        if g is None:
            continue
        bwd = bwd_table[node.primitive][1]
        in_grads = bwd(g, node.saved, tuple(t.data for t in node.inputs), node.output.data, **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.dtype)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                keep[key] = t
    if accumulate:
        for key, t in keep.items():
            if t.node is None and t.requires_grad:
                t.grad = grads[key] if t.grad is None else t.grad + grads[key]
    return grads


# ---------------------------------------------------------------------------
# functional helpers


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    ins = [x, w] if b is None else [x, w, b]
    return record_op("conv2d", ins, {"stride": stride, "padding": padding})


def avg_pool2d(x: Tensor, output_size) -> Tensor:
    if isinstance(output_size, int):
        output_size = (output_size, output_size)
    return record_op("avg_pool2d", [x], {"output_size": tuple(output_size)})


def global_avg_pool(x: Tensor) -> Tensor:
    return record_op("global_avg_pool", [x])


def upsample(x: Tensor, factor: int) -> Tensor:
    return record_op("nearest_upsample2d", [x], {"factor": int(factor)})


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return record_op("concat", list(xs), {"axis": axis})


def gather_rows(x: Tensor, index) -> Tensor:
    return record_op("gather_rows", [x], {"index": np.asarray(index, dtype=np.int64)})


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return record_op("layer_norm", [x, gamma, beta], {"eps": eps})


def softplus(x: Tensor) -> Tensor:
    # relu(x) + log(1 + exp(-|x|)), overflow-free for either sign
    ax = x.relu() + (-x).relu()
    return x.relu() + (1.0 + (-ax).exp()).log()


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    worst_index: tuple = field(default_factory=tuple)


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5, rel_tol: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare backward() gradients of scalar ``f`` at ``point`` with central differences.

    ``max_coords`` limits the check to a seeded random subset of components.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ValueError("grad_check point must be finite")
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape():
        y = f(x)
        if y.size != 1:
            raise TapeError(f"grad_check needs a scalar function, got shape {y.shape}")
        grads = backward(y, accumulate=False)
    analytic = grads.get(id(x), np.zeros_like(x0))
    flat = np.arange(x0.size)
    if max_coords is not None and max_coords < x0.size:
        flat = np.sort(np.random.default_rng(seed).choice(x0.size, size=max_coords, replace=False))
    worst, worst_idx = 0.0, ()
    with no_grad():
        for k in flat:
            idx = np.unravel_index(k, x0.shape)
            xp = x0.copy()
            xp[idx] += step
            xm = x0.copy()
            xm[idx] -= step
            num = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2 * step)
            ana = float(analytic[idx])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            if err > worst:
                worst, worst_idx = err, idx
    return GradCheckReport(worst, worst < rel_tol, len(flat), worst_idx)


def grad_check_params(f: Callable[[], Tensor], params: dict[str, Tensor], step: float = 1e-5,
                      rel_tol: float = 1e-4, max_coords: int | None = None, seed: int = 0) -> dict[str, GradCheckReport]:
    """Finite-difference check of d f() / d p for every named parameter, perturbing ``p.data`` in place.

    ``f`` closes over the parameters; each report covers one tensor (at most ``max_coords`` components).
    """
    with Tape():
        y = f()
        if y.size != 1:
            raise TapeError(f"grad_check needs a scalar function, got shape {y.shape}")
        grads = backward(y, accumulate=False)
    rng = np.random.default_rng(seed)
    reports = {}
    with no_grad():
        for name, p in params.items():
            analytic = grads.get(id(p), np.zeros_like(p.data))
            flat = np.arange(p.size)
            if max_coords is not None and max_coords < p.size:
                flat = np.sort(rng.choice(p.size, size=max_coords, replace=False))
            base = p.data
            worst, worst_idx = 0.0, ()
            for k in flat:
                idx = np.unravel_index(k, base.shape)
                vals = []
                for sign in (1.0, -1.0):
                    moved = base.copy()
                    moved[idx] += sign * step
                    p.data = moved
                    vals.append(f().item())
                p.data = base
                num = (vals[0] - vals[1]) / (2 * step)
                ana = float(analytic[idx])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                if err > worst:
                    worst, worst_idx = err, idx
            reports[name] = GradCheckReport(worst, worst < rel_tol, len(flat), worst_idx)
    return reports
