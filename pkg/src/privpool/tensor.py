"""Dense tensors with reverse-mode automatic differentiation.

Data lives in row-major numpy arrays (float64 by default, float32
selectable). Differentiable ops record nodes onto an explicit Tape in
execution order, which is already a topological order, so backward()
is a single reverse sweep that visits each node once. Gradients
accumulate on requires_grad leaves; repeated backward calls without
zero_grad keep accumulating.

Tensors are treated as immutable once they participate in the tape;
the optimizer mutates parameter data only between iterations, after
the tape has been discarded.
"""

from __future__ import annotations

import contextlib
import struct
import threading

import numpy as np

_DTYPES = (np.float32, np.float64)
_default_dtype = np.float64

_tls = threading.local()


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Select float32 or float64 for newly created tensors."""
    global _default_dtype
    dt = np.dtype(dtype).type
    if dt not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dt


@contextlib.contextmanager
def using_dtype(dtype):
    """Scoped default-dtype override."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


def _tape_stack() -> list:
    if not hasattr(_tls, "tapes"):
        _tls.tapes = []
        _tls.grad_enabled = True
    return _tls.tapes


def _grad_enabled() -> bool:
    _tape_stack()
    return _tls.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    _tape_stack()
    prev = _tls.grad_enabled
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


class Tape:
    """Ordered record of executed differentiable ops for one thread.

    Use as a context manager; ops executed inside record a node when
    any input requires grad. Nodes are appended in execution order.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self.nodes)


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "index", "tape")

    def __init__(self, out, parents, backward_fn, index, tape):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = index
        self.tape = tape


class Tensor:
    """Real-valued dense tensor; wraps a numpy array."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        if arr.dtype.type not in _DTYPES:
            arr = arr.astype(_default_dtype)
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor dims must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def is_leaf(self) -> bool:
        return self._node is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; all routed through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _result(arr: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    out._node = None
    return out


def _should_record(*tensors) -> bool:
    if not _grad_enabled():
        return False
    stack = _tape_stack()
    if not stack:
        return False
    return any(t.requires_grad for t in tensors)


def _record(out: Tensor, parents: tuple, backward_fn) -> None:
    tape = _tape_stack()[-1]
    node = _Node(out, parents, backward_fn, len(tape.nodes), tape)
    tape.nodes.append(node)
    out._node = node
    out.requires_grad = True


def backward(root: Tensor) -> None:
    """Reverse sweep from a scalar root; accumulates grads on leaves."""
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    node = root._node
    if node is None:
        raise ValueError("backward: root was not recorded on a tape "
                         "(compute it inside `with Tape():` with requires_grad inputs)")
    tape = node.tape
    adjoint: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.data.dtype)}
    for n in reversed(tape.nodes[: node.index + 1]):
        g = adjoint.pop(id(n.out), None)
        if g is None:
            continue
        grads = n.backward_fn(g)
        for p, pg in zip(n.parents, grads):
            if pg is None:
                continue
            if p._node is not None and p._node.tape is tape:
                key = id(p)
                prev = adjoint.get(key)
                adjoint[key] = pg if prev is None else prev + pg
            elif p.requires_grad:
                p.grad = pg.copy() if p.grad is None else p.grad + pg


# ---------------------------------------------------------------------------
# broadcasting helpers

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, fwd, bwd_a, bwd_b, name: str):
    a, b = _wrap(a), _wrap(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as e:
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from e
    out = _result(data)
    if _should_record(a, b):
        def backward_fn(g):
            ga = _unbroadcast(bwd_a(g, a.data, b.data), a.shape) if a.requires_grad else None
            gb = _unbroadcast(bwd_b(g, a.data, b.data), b.shape) if b.requires_grad else None
            return ga, gb
        _record(out, (a, b), backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b):
    return _binary(a, b, np.multiply,
                   lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b):
    return _binary(a, b, np.divide,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y), "div")


def neg(a):
    a = _wrap(a)
    out = _result(-a.data)
    if _should_record(a):
        _record(out, (a,), lambda g: (-g,))
    return out


def relu(a):
    a = _wrap(a)
    out = _result(np.maximum(a.data, 0))
    if _should_record(a):
        mask = a.data > 0
        _record(out, (a,), lambda g: (g * mask,))
    return out


def sigmoid(a):
    a = _wrap(a)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    out = _result(s)
    if _should_record(a):
        _record(out, (a,), lambda g: (g * s * (1.0 - s),))
    return out


def exp(a):
    a = _wrap(a)
    e = np.exp(a.data)
    out = _result(e)
    if _should_record(a):
        _record(out, (a,), lambda g: (g * e,))
    return out


def log(a):
    a = _wrap(a)
    if np.min(a.data) <= 0.0:
        raise ValueError("log: inputs must be strictly positive")
    out = _result(np.log(a.data))
    if _should_record(a):
        _record(out, (a,), lambda g: (g / a.data,))
    return out


def sqrt(a):
    a = _wrap(a)
    if np.min(a.data) < 0.0:
        raise ValueError("sqrt: inputs must be non-negative")
    r = np.sqrt(a.data)
    out = _result(r)
    if _should_record(a):
        _record(out, (a,), lambda g: (g * 0.5 / r,))
    return out


def clip(a, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient passes only where input lies inside."""
    a = _wrap(a)
    out = _result(np.clip(a.data, lo, hi))
    if _should_record(a):
        mask = (a.data >= lo) & (a.data <= hi)
        _record(out, (a,), lambda g: (g * mask,))
    return out


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape):
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    out = _result(a.data.reshape(shape))
    if _should_record(a):
        orig = a.shape
        _record(out, (a,), lambda g: (g.reshape(orig),))
    return out


def broadcast_to(a, shape):
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ValueError(f"broadcast: cannot expand {a.shape} to {shape}") from e
    out = _result(data)
    if _should_record(a):
        orig = a.shape
        _record(out, (a,), lambda g: (_unbroadcast(g, orig),))
    return out


def transpose(a, axes=None):
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    out = _result(np.transpose(a.data, axes).copy())
    if _should_record(a):
        inv = tuple(np.argsort(axes))
        _record(out, (a,), lambda g: (np.transpose(g, inv),))
    return out


def concat(tensors, axis: int = 0):
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ValueError("concat: need at least one tensor")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]}") from e
    out = _result(data)
    if _should_record(*ts):
        sizes = [t.shape[axis] for t in ts]
        splits = np.cumsum(sizes)[:-1]
        def backward_fn(g):
            return tuple(np.split(g, splits, axis=axis))
        _record(out, tuple(ts), backward_fn)
    return out


def take(a, indices, axis: int = 0):
    """Gather slices along an axis by integer index."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"take: indices must be 1-D, got shape {idx.shape}")
    if idx.size == 0:
        raise ValueError("take: empty index list")
    if idx.min() < 0 or idx.max() >= a.shape[axis]:
        raise ValueError(f"take: index out of range for axis {axis} of {a.shape}")
    out = _result(np.take(a.data, idx, axis=axis))
    if _should_record(a):
        shape = a.shape
        def backward_fn(g):
            buf = np.zeros(shape, dtype=g.dtype)
            moved = np.moveaxis(buf, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            return (buf,)
        _record(out, (a,), backward_fn)
    return out


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a, axis=None, keepdims: bool = False):
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    out = _result(a.data.sum(axis=axes, keepdims=keepdims))
    if _should_record(a):
        shape = a.shape
        def backward_fn(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape).copy(),)
        _record(out, (a,), backward_fn)
    return out


def tmean(a, axis=None, keepdims: bool = False):
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = _result(a.data.mean(axis=axes, keepdims=keepdims))
    if _should_record(a):
        shape = a.shape
        def backward_fn(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g / count, shape).copy(),)
        _record(out, (a,), backward_fn)
    return out


def tmax(a, axis=None, keepdims: bool = False):
    """Max over axes; gradient routes to the first maximum in scan order."""
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    out_data = a.data.max(axis=axes, keepdims=keepdims)
    out = _result(out_data)
    if _should_record(a):
        kept = [i for i in range(a.ndim) if i not in axes]
        perm = tuple(kept) + axes
        moved = np.transpose(a.data, perm)
        outer = moved.shape[: len(kept)]
        red = int(np.prod(moved.shape[len(kept):])) if axes else 1
        flat = moved.reshape(outer + (red,))
        arg = flat.argmax(axis=-1)
        def backward_fn(g):
            if not keepdims:
                gk = np.expand_dims(g, axes)
            else:
                gk = g
            gouter = np.transpose(gk, perm).reshape(outer)
            buf = np.zeros_like(flat)
            np.put_along_axis(buf, arg[..., None], gouter[..., None], axis=-1)
            buf = buf.reshape(moved.shape)
            return (np.transpose(buf, tuple(np.argsort(perm))),)
        _record(out, (a,), backward_fn)
    return out


# ---------------------------------------------------------------------------
# matmul

def matmul(a, b):
    """2-D a[i,k] @ b[k,j], or batched 3-D a[n,i,k] @ b[n,k,j]."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ValueError(f"matmul: need both 2-D or both 3-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data)
    if _should_record(a, b):
        def backward_fn(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
            return ga, gb
        _record(out, (a, b), backward_fn)
    return out


# ---------------------------------------------------------------------------
# convolution and pooling (NHWC layout)

def conv2d(x, kernel, bias=None, *, stride: int = 1, padding: int = 0):
    """x[n,h,w,ci] * kernel[kh,kw,ci,co] (+ bias[co]) -> [n,h',w',co].

    Zero padding; h' = (h + 2p - kh)//stride + 1.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    if bias is not None:
        bias = _wrap(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d: need x[n,h,w,ci], kernel[kh,kw,ci,co]; "
                         f"got {x.shape} and {kernel.shape}")
    n, h, w, ci = x.shape
    kh, kw, kci, co = kernel.shape
    if kci != ci:
        raise ValueError(f"conv2d: channel mismatch, x has {ci}, kernel expects {kci}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({co},)")
    s, p = int(stride), int(padding)
    h2 = (h + 2 * p - kh) // s + 1
    w2 = (w + 2 * p - kw) // s + 1
    if h2 <= 0 or w2 <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{w} pad {p}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    out_data = np.zeros((n, h2, w2, co), dtype=x.data.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xs = xp[:, ki: ki + s * h2: s, kj: kj + s * w2: s, :]
            out_data += np.tensordot(xs, kernel.data[ki, kj], axes=([3], [0]))
    if bias is not None:
        out_data += bias.data

    out = _result(out_data)
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    if _should_record(*parents):
        def backward_fn(g):
            gx = gk = gb = None
            if kernel.requires_grad:
                gk = np.zeros_like(kernel.data)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    xs = xp[:, ki: ki + s * h2: s, kj: kj + s * w2: s, :]
                    if gk is not None:
                        gk[ki, kj] = np.tensordot(xs, g, axes=([0, 1, 2], [0, 1, 2]))
                    if x.requires_grad:
                        gxp[:, ki: ki + s * h2: s, kj: kj + s * w2: s, :] += \
                            np.tensordot(g, kernel.data[ki, kj], axes=([3], [1]))
            if x.requires_grad:
                gx = gxp[:, p: p + h, p: p + w, :] if p else gxp
            if bias is not None and bias.requires_grad:
                gb = g.sum(axis=(0, 1, 2))
            return (gx, gk) if bias is None else (gx, gk, gb)
        _record(out, parents, backward_fn)
    return out


def maxpool2d(x, kernel: int, *, stride: int | None = None, same_pad: bool = False):
    """Spatial max pool on x[n,h,w,c]; pads with -inf when same_pad.

    same_pad requires stride 1 and keeps the spatial size. Gradient
    routes to the first maximum in row-major window order.
    """
    x = _wrap(x)
    if x.ndim != 4:
        raise ValueError(f"maxpool2d: need x[n,h,w,c], got {x.shape}")
    k = int(kernel)
    s = k if stride is None else int(stride)
    if same_pad and s != 1:
        raise ValueError("maxpool2d: same_pad requires stride 1")
    if k < 1 or s < 1:
        raise ValueError(f"maxpool2d: kernel/stride must be >= 1, got {k}/{s}")
    n, h, w, c = x.shape
    p = k // 2 if same_pad else 0

    if k == 1 and s == 1:
        out = _result(x.data.copy())
        if _should_record(x):
            _record(out, (x,), lambda g: (g,))
        return out

    if p == 0 and s == k and h % k == 0 and w % k == 0:
        # non-overlapping fast path (backbone downsampling)
        h2, w2 = h // k, w // k
        win = x.data.reshape(n, h2, k, w2, k, c).transpose(0, 1, 3, 5, 2, 4)
        flat = win.reshape(n, h2, w2, c, k * k)
        arg = flat.argmax(axis=-1)
        out = _result(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])
        if _should_record(x):
            def backward_fn(g):
                buf = np.zeros_like(flat)
                np.put_along_axis(buf, arg[..., None], g[..., None], axis=-1)
                buf = buf.reshape(n, h2, w2, c, k, k).transpose(0, 1, 4, 2, 5, 3)
                return (buf.reshape(n, h, w, c),)
            _record(out, (x,), backward_fn)
        return out

    if h + 2 * p < k or w + 2 * p < k:
        raise ValueError(f"maxpool2d: kernel {k} too large for input {h}x{w} pad {p}")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)),
                constant_values=-np.inf) if p else x.data
    h2 = (h + 2 * p - k) // s + 1
    w2 = (w + 2 * p - k) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::s, ::s]  # [n,h2,w2,c,k,k]
    flat = win.reshape(n, h2, w2, c, k * k)
    arg = flat.argmax(axis=-1)
    out = _result(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])
    if _should_record(x):
        def backward_fn(g):
            buf = np.zeros_like(xp)
            ii, jj = np.unravel_index(arg, (k, k))
            nn_, hh, ww, cc = np.indices(arg.shape, sparse=False)
            src_h = hh * s + ii
            src_w = ww * s + jj
            np.add.at(buf, (nn_, src_h, src_w, cc), g)
            return (buf[:, p: p + h, p: p + w, :] if p else buf,)
        _record(out, (x,), backward_fn)
    return out


# ---------------------------------------------------------------------------
# softmax / cross-entropy

def softmax(a, axis: int = -1):
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _result(s)
    if _should_record(a):
        def backward_fn(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            return (s * (g - dot),)
        _record(out, (a,), backward_fn)
    return out


def cross_entropy(logits, labels):
    """Mean negative log softmax probability of integer labels[n]."""
    logits = _wrap(logits)
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ValueError(f"cross_entropy: need logits[n,c], labels[n]; "
                         f"got {logits.shape} and {y.shape}")
    n, c = logits.shape
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"cross_entropy: label out of range [0,{c})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    denom = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(denom))[:, 0]
    nll = lse - z[np.arange(n), y]
    out = _result(np.asarray(nll.mean(), dtype=z.dtype))
    if _should_record(logits):
        probs = e / denom
        def backward_fn(g):
            gz = probs.copy()
            gz[np.arange(n), y] -= 1.0
            return (gz * (g / n),)
        _record(out, (logits,), backward_fn)
    return out


# ---------------------------------------------------------------------------
# generic dispatch

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "clip": clip,
    "sum": tsum,
    "mean": tmean,
    "max": tmax,
    "maxpool2d": maxpool2d,
    "concat": concat,
    "take": take,
    "reshape": reshape,
    "broadcast": broadcast_to,
    "transpose": transpose,
    "softmax": softmax,
    "cross_entropy": cross_entropy,
}


def forward_op(name: str, inputs, **params):
    """Execute a registered op by name; records on tape like direct calls."""
    fn = _OPS.get(name)
    if fn is None:
        raise ValueError(f"unknown op '{name}'; valid: {sorted(_OPS)}")
    if name == "concat":
        return fn(inputs, **params)
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# serialization: magic 'PTNS', u8 dtype code, u8 ndim, u32 dims, raw data,
# all little-endian, row-major

_MAGIC = b"PTNS"
_CODE_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_DTYPE_OF = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensor(path, t: Tensor) -> None:
    arr = np.ascontiguousarray(t.data)
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        raise ValueError(f"save_tensor: unsupported dtype {arr.dtype}")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<BB", code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"load_tensor: bad magic in {path}")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    if code not in _DTYPE_OF:
        raise ValueError(f"load_tensor: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 6)
    offset = 6 + 4 * ndim
    dt = _DTYPE_OF[code]
    count = int(np.prod(dims)) if ndim else 1
    data = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    if data.size != count:
        raise ValueError(f"load_tensor: truncated payload in {path}")
    arr = data.reshape(dims).astype(dt.newbyteorder("="))
    return Tensor(arr, dtype=arr.dtype.type)


# ---------------------------------------------------------------------------
# finite-difference gradient checking

class GradCheckReport:
    """Per-input max relative errors for one gradient check."""

    def __init__(self, name: str, tolerance: float, per_input: dict):
        self.name = name
        self.tolerance = tolerance
        self.per_input = per_input
        self.max_rel_error = max(per_input.values()) if per_input else 0.0
        self.passed = self.max_rel_error < tolerance

    def __repr__(self) -> str:
        verdict = "ok" if self.passed else "FAIL"
        return (f"GradCheckReport({self.name}: max_rel={self.max_rel_error:.3e} "
                f"tol={self.tolerance:.0e} {verdict})")


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray) -> float:
    floor = 1e-6 * max(1.0, float(np.max(np.abs(numeric))) if numeric.size else 1.0)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(fn, inputs: dict, tolerance: float = 1e-4, h: float = 1e-5,
               seed: int = 0, name: str = "op", symmetric: tuple = ()) -> GradCheckReport:
    """Compare tape gradients of fn(**inputs) against central differences.

    fn maps named Tensors to a Tensor of any shape; the output is
    projected to a scalar with fixed random weights. Inputs named in
    `symmetric` are square matrices perturbed as (i,j)+(j,i) pairs and
    compared against the symmetrized analytic gradient. Callers are
    responsible for sampling inputs away from relu/max kinks.
    """
    tensors = {k: Tensor(np.asarray(v.data if isinstance(v, Tensor) else v,
                                    dtype=np.float64), requires_grad=True)
               for k, v in inputs.items()}
    with no_grad():
        probe = fn(**{k: Tensor(t.data) for k, t in tensors.items()})
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(probe.shape)

    def scalar(values: dict) -> float:
        with no_grad():
            out = fn(**{k: Tensor(v) for k, v in values.items()})
        return float((out.data * proj).sum())

    with Tape():
        out = fn(**tensors)
        root = tsum(mul(out, Tensor(proj)))
        backward(root)

    values = {k: t.data.copy() for k, t in tensors.items()}
    per_input = {}
    for key, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        base = values[key]
        if key in symmetric:
            d = base.shape[0]
            pairs = [(i, j) for i in range(d) for j in range(i, d)]
            num = np.zeros(len(pairs))
            ana = np.zeros(len(pairs))
            for idx, (i, j) in enumerate(pairs):
                pert = base.copy()
                pert[i, j] += h
                if i != j:
                    pert[j, i] += h
                up = scalar({**values, key: pert})
                pert = base.copy()
                pert[i, j] -= h
                if i != j:
                    pert[j, i] -= h
                dn = scalar({**values, key: pert})
                num[idx] = (up - dn) / (2 * h)
                ana[idx] = analytic[i, j] + (analytic[j, i] if i != j else 0.0)
            per_input[key] = _rel_errors(ana, num)
        else:
            num = np.zeros(base.size)
            flat = base.reshape(-1)
            for idx in range(base.size):
                orig = flat[idx]
                flat[idx] = orig + h
                up = scalar(values)
                flat[idx] = orig - h
                dn = scalar(values)
                flat[idx] = orig
                num[idx] = (up - dn) / (2 * h)
            per_input[key] = _rel_errors(analytic.reshape(-1), num)
    return GradCheckReport(name, tolerance, per_input)
