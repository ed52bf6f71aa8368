"""Minimal N-d tensor with reverse-mode autodiff.

Operations recorded while a :class:`Graph` is active (see :func:`record`) are
appended to that graph's node list, so node ids are topologically ordered by
construction. :func:`backward` walks the list once in reverse and then frees
it. Tensors built outside a recording context never carry a graph node.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "graph_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.floating)) and data.dtype in (np.float32, np.float64):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.graph_node: tuple[Graph, int] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def astype(self, dtype) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None or x.dtype == dtype else Tensor(x.data.astype(dtype))
    return Tensor(x, dtype=dtype)


# --------------------------------------------------------------------------
# recording context


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor | None, ...]
    backward: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]
    needs: tuple[bool, ...]


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def active_graph() -> Graph | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@contextmanager
def record():
    """Record operations into a fresh graph for one forward/backward pass."""
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    g = Graph()
    stack.append(g)
    try:
        yield g
    finally:
        stack.pop()


@contextmanager
def no_record():
    """Suspend recording, e.g. for a stop-gradient branch."""
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _participates(t: Tensor | None, graph: Graph) -> bool:
    if t is None:
        return False
    if t.graph_node is not None:
        return t.graph_node[0] is graph
    return t.requires_grad


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor | None], backward) -> Tensor:
    res = Tensor(out)
    graph = active_graph()
    if graph is None:
        return res
    needs = tuple(_participates(t, graph) for t in inputs)
    if not any(needs):
        return res
    if graph.consumed:
        raise GraphError("recording into a graph that has already been consumed by backward")
    graph.nodes.append(Node(op, tuple(inputs), backward, needs))
    res.graph_node = (graph, len(graph.nodes) - 1)
    return res


def backward(loss: Tensor) -> None:
    """Write d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf in the graph.

    Leaves that took part in the recording but are unreachable from ``loss``
    receive zeros. The graph is consumed; a second call raises.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.graph_node is None:
        raise GraphError("loss was not produced inside a recording context")
    graph, last = loss.graph_node
    if graph.consumed:
        raise GraphError("backward called twice on a consumed graph")

    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[last] = np.ones_like(loss.data)
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}

    for node in graph.nodes:
        for t, need in zip(node.inputs, node.needs):
            if need and t.graph_node is None:
                leaves[id(t)] = t

    for idx in range(last, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = graph.nodes[idx]
        in_grads = node.backward(g, node.needs)
        for t, need, ig in zip(node.inputs, node.needs, in_grads):
            if not need or ig is None:
                continue
            if t.graph_node is not None:
                j = t.graph_node[1]
                grads[j] = ig if grads[j] is None else grads[j] + ig
            else:
                k = id(t)
                leaf_grads[k] = ig if k not in leaf_grads else leaf_grads[k] + ig
        grads[idx] = None

    for k, t in leaves.items():
        g = leaf_grads.get(k)
        t.grad = np.zeros_like(t.data) if g is None else g.reshape(t.shape).astype(t.dtype, copy=False)

    graph.consumed = True
    graph.nodes.clear()


# --------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _bcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _bcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _bcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _emit("mul", ad * bd, (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = x.dtype.type(s)
    return _emit("scale", x.data * s, (x,), lambda g, needs: (g * s,))


def shift(x: Tensor, s: float) -> Tensor:
    """Add a python scalar."""
    s = x.dtype.type(s)
    return _emit("shift", x.data + s, (x,), lambda g, needs: (g,))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))  # logistic without exp overflow

    def bw(g, needs):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _emit("silu", xd * sig, (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(x.data)

    def bw(g, needs):
        return (g * 0.5 / out,)

    return _emit("sqrt", out, (x,), bw)


# --------------------------------------------------------------------------
# reductions and reshaping


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    keep = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g, needs):
        return (np.broadcast_to(g.reshape(keep), shape).copy(),)

    return _emit("sum", x.data.sum(axis=axes), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    keep = tuple(1 if i in axes else n for i, n in enumerate(shape))
    inv = x.dtype.type(1.0 / count)

    def bw(g, needs):
        return (np.broadcast_to(g.reshape(keep) * inv, shape).copy(),)

    return _emit("mean", x.data.mean(axis=axes), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g, needs: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = -3) -> Tensor:
    """Concatenate along ``axis`` (channel axis of C×H×W / N×C×H×W by default)."""
    if not tensors:
        raise ShapeError("concat: no inputs")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(
                f"concat: extents {[tt.shape for tt in tensors]} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g, needs):
        idx = [slice(None)] * nd
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            idx[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return out

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


# --------------------------------------------------------------------------
# layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for x of shape (..., in) and w of shape (out, in)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input extent {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight rows {w.shape[0]}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g, needs):
        gx = g @ wd if needs[0] else None
        gw = None
        if needs[1]:
            gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None and needs[2] else None
        return gx, gw, gb

    return _emit("linear", out, (x, w, b), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "same") -> Tensor:
    """Stride-1 2-D convolution (cross-correlation) on N×C×H×W via im2col."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd_ = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight {w.shape} expects {ci}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {o} output channels")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: 'same' padding needs odd kernel, got {kh}x{kw}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    oh, ow = h + 2 * ph - kh + 1, wd_ + 2 * pw - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd_}")

    xd = x.data
    wmat = w.data.reshape(o, -1)
    # per-image column matrices laid out (N, C*kh*kw, oh*ow) so that both
    # products are plain batched matmuls and col2im adds contiguous slabs
    if kh == 1 and kw == 1 and not (ph or pw):
        cols = xd.reshape(n, c, h * wd_)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
        cols = np.empty((n, c, kh, kw, oh, ow), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + oh, j:j + ow]
        cols = cols.reshape(n, c * kh * kw, oh * ow)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, o, oh, ow)

    def bw(g, needs):
        gm = g.reshape(n, o, oh * ow)
        gx = gw = gb = None
        if needs[1]:
            gw = np.einsum("nop,nkp->ok", gm, cols, optimize=True).reshape(o, c, kh, kw)
        if b is not None and needs[2]:
            gb = gm.sum(axis=(0, 2))
        if needs[0]:
            dcols = np.matmul(wmat.T, gm)
            if kh == 1 and kw == 1 and not (ph or pw):
                gx = dcols.reshape(n, c, h, wd_)
            else:
                dcols = dcols.reshape(n, c, kh, kw, oh, ow)
                gxp = np.zeros((n, c, h + 2 * ph, wd_ + 2 * pw), dtype=dcols.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + oh, j:j + ow] += dcols[:, :, i, j]
                gx = gxp[:, :, ph:ph + h, pw:pw + wd_] if ph or pw else gxp
        return gx, gw, gb

    return _emit("conv2d", out, (x, w, b), bw)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization over N×C×H×W with per-channel affine."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine {gamma.shape}/{beta.shape} must be ({c},)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (xc * inv).reshape(n, c, h, w)
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def bw(g, needs):
        gx = gg = gbeta = None
        if needs[1]:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if needs[2]:
            gbeta = g.sum(axis=(0, 2, 3))
        if needs[0]:
            dxh = (g * gd).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (dxh - dxh.mean(axis=2, keepdims=True)
                        - xh * (dxh * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        return gx, gg, gbeta

    return _emit("group_norm", out, (x, gamma, beta), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2× upsampling of the last two axes."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g, needs):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _emit("upsample2x", out, (x,), bw)


def avgpool2x(x: Tensor) -> Tensor:
    """2×2 average pooling with stride 2 on the last two axes."""
    s = x.shape
    if s[-1] % 2 or s[-2] % 2:
        raise ShapeError(f"avgpool2x: spatial extents {s[-2:]} must be even")
    out = x.data.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).mean(axis=(-3, -1))
    q = x.dtype.type(0.25)

    def bw(g, needs):
        return ((g * q).repeat(2, axis=-2).repeat(2, axis=-1),)

    return _emit("avgpool2x", out, (x,), bw)


def sinusoidal_embedding(x, dim: int, dtype=DEFAULT_DTYPE, max_period: float = 10000.0) -> Tensor:
    """Fixed sin/cos features of scalar(s) ``x`` at geometrically spaced frequencies.

    Returns shape (dim,) for a scalar and (N, dim) for a length-N vector. The
    features are constants, so the result never joins a graph.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"sinusoidal_embedding: dim must be positive and even, got {dim}")
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    xa = np.asarray(x, dtype=np.float64)
    ang = xa[..., None] * freqs
    return Tensor(np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(dtype))


# --------------------------------------------------------------------------
# tag dispatch

OPS: dict[str, Callable[..., Tensor]] = {
    "conv2d": conv2d,
    "linear": linear,
    "concat": lambda *xs, axis=-3: concat(xs, axis=axis),
    "add": add,
    "sub": sub,
    "mul": mul,
    "silu": silu,
    "group_norm": group_norm,
    "upsample2x": upsample2x,
    "avgpool2x": avgpool2x,
    "scale": scale,
    "shift": shift,
    "sum": tsum,
    "mean": mean,
    "sqrt": sqrt,
    "reshape": reshape,
    "sinusoidal_embedding": sinusoidal_embedding,
}


def op_apply(op: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown operator {op!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **(attrs or {}))


# --------------------------------------------------------------------------
# verification


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``coords`` restricts the comparison to the given flat indices (all by
    default). Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with record():
        out = fn(leaf)
        if out.graph_node is None:  # output does not depend on x
            leaf.grad = np.zeros_like(leaf.data)
        else:
            backward(out)
    analytic = leaf.grad.reshape(-1)

    base = leaf.data.reshape(-1)
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = base[i]
        base[i] = orig + step
        fp = float(fn(Tensor(leaf.data)).data)
        base[i] = orig - step
        fm = float(fn(Tensor(leaf.data)).data)
        base[i] = orig
        num = (fp - fm) / (2 * step)
        a = float(analytic[i])
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# raw dump format: b"CCMT", u32 rank, u32 extents..., f32 payload (all little-endian)

_MAGIC = b"CCMT"


def dump_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    head = _MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def load_bytes(buf: bytes) -> Tensor:
    if buf[:4] != _MAGIC:
        raise ValueError("not a CCMT tensor dump")
    (rank,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != off + 4 * count:
        raise ValueError(f"CCMT payload size {len(buf) - off} does not match shape {shape}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
    return Tensor(arr.astype(np.float32))


def dump(t: Tensor, path) -> None:
    Path(path).write_bytes(dump_bytes(t))


def load(path) -> Tensor:
    return load_bytes(Path(path).read_bytes())
