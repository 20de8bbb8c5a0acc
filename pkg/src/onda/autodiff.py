"""Reverse-mode automatic differentiation on numpy arrays.

Every backward rule is written with Tensor operations, so a gradient taken
with ``create_graph=True`` is itself a differentiable expression. Hessian-vector
products are obtained by differentiating ``grad(theta) . v`` a second time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised by a primitive whose operands have incompatible shapes."""

    def __init__(self, primitive: str, *shapes, detail: str = ""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{primitive}: incompatible shapes " + ", ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradientError(RuntimeError):
    pass


# Stack of tapes currently recording. Operations record onto every active tape.
_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in creation order, which is a topological order of the
    computation graph; `gradient` replays them in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def watch(self, value, dtype=None) -> "Tensor":
        if isinstance(value, ParamVector):
            value = value.values
        return Tensor(np.array(value, dtype=dtype, copy=True), requires_grad=True)

    def _record(self, node: "Tensor") -> None:
        self._index[id(node)] = len(self.nodes)
        self.nodes.append(node)

    def __contains__(self, node: "Tensor") -> bool:
        i = self._index.get(id(node))
        return i is not None and self.nodes[i] is node

    def gradient(self, target: "Tensor", sources: Sequence["Tensor"],
                 create_graph: bool = False) -> list["Tensor"]:
        """d target / d source for each source; unreachable sources get zeros."""
        if target.data.size != 1:
            raise GradientError(f"gradient target must be scalar, got shape {target.shape}")
        zeros = [Tensor(np.zeros_like(s.data)) for s in sources]
        if not target.requires_grad:
            if any(target is s for s in sources):
                return [Tensor(np.ones_like(s.data)) if target is s else z
                        for s, z in zip(sources, zeros)]
            return zeros
        if target not in self:
            raise GradientError("gradient target was not recorded on this tape")
        keep = {id(s) for s in sources}
        grads: dict[int, Tensor] = {id(target): Tensor(np.ones_like(target.data))}
        stop = self._index[id(target)]
        with _recording(create_graph):
            for node in reversed(self.nodes[: stop + 1]):
                key = id(node)
                g = grads.get(key) if key in keep else grads.pop(key, None)
                if g is None:
                    continue
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    pk = id(parent)
                    grads[pk] = grads[pk] + pg if pk in grads else pg
        return [grads.get(id(s), z) for s, z in zip(sources, zeros)]


class _recording:
    """Pause (enabled=False) or keep recording during a backward pass."""

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        self.saved = _ACTIVE[:]
        if not self.enabled:
            _ACTIVE.clear()

    def __exit__(self, *exc):
        _ACTIVE[:] = self.saved


class no_grad(_recording):
    def __init__(self):
        super().__init__(False)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = "leaf"

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)
    T = property(lambda self: transpose(self))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, key: getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Convert operands; bare Python scalars adopt the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.isscalar(b):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.isscalar(a):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out.op = op
        for tape in _ACTIVE:
            tape._record(out)
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable") from None


def _sum_to_array(x: np.ndarray, shape: tuple) -> np.ndarray:
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


# ---------------------------------------------------------------- primitives

def sum_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _node("sum_to", _sum_to_array(x.data, shape), (x,),
                 lambda g: (broadcast_to(g, x.shape),))


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _node("broadcast_to", np.broadcast_to(x.data, shape), (x,),
                 lambda g: (sum_to(g, x.shape),))


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _node("add", a.data + b.data, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _node("sub", a.data - b.data, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node("neg", -a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _node("mul", a.data * b.data, (a, b),
                 lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)

    def vjp(g):
        ga = sum_to(div(g, b), a.shape)
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _node("div", a.data / b.data, (a, b), vjp)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if p == 1:
        return a
    return _node("pow", a.data ** p, (a,), lambda g: (mul(g, mul(power(a, p - 1), float(p))),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # second derivative is taken as zero: the mask is a constant
    mask = (a.data.real > 0).astype(a.data.real.dtype)
    return _node("relu", a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _node("matmul", a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _node("reshape", data, (a,), lambda g: (reshape(g, a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node("transpose", a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),))


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else axis
    axes = {ax % len(shape) for ax in axes}
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if isinstance(axis, list):
        axis = tuple(axis)
    kshape = _keepdims_shape(a.shape, axis)
    return _node("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (broadcast_to(reshape(g, kshape), a.shape),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size // int(np.prod(_keepdims_shape(a.shape, axis)))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    return _node("getitem", a.data[key], (a,), lambda g: (scatter(g, key, a.shape),))


def scatter(g, key, shape) -> Tensor:
    """Adjoint of basic indexing: place `g` at `key` inside zeros of `shape`."""
    g = as_tensor(g)
    out = np.zeros(shape, dtype=g.data.dtype)
    out[key] = g.data
    return _node("scatter", out, (g,), lambda h: (getitem(h, key),))


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col(x, kh: int, kw: int, stride: int = 1, ph: int = 0, pw: int = 0) -> Tensor:
    """(N, C, H, W) -> sliding windows of shape (N, OH, OW, C, kh, kw)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("im2col", x.shape, detail="expected (N, C, H, W)")
    n, c, h, w = x.shape
    oh, ow = _out_size(h, kh, stride, ph), _out_size(w, kw, stride, pw)
    if oh < 1 or ow < 1:
        raise ShapeError("im2col", x.shape, (kh, kw), detail="kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return _node("im2col", cols, (x,),
                 lambda g: (col2im(g, x.shape, kh, kw, stride, ph, pw),))


def col2im(cols, x_shape, kh: int, kw: int, stride: int = 1, ph: int = 0, pw: int = 0) -> Tensor:
    cols = as_tensor(cols)
    n, c, h, w = x_shape
    _, oh, ow = cols.shape[:3]
    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=cols.data.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols.data[..., i, j]
    xp = xp.transpose(0, 3, 1, 2)
    out = xp[:, :, ph:ph + h, pw:pw + w]
    return _node("col2im", out, (cols,),
                 lambda g: (im2col(g, kh, kw, stride, ph, pw),))


# ---------------------------------------------------------------- composites

def conv2d(x, w, b=None, stride: int = 1, padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Dense 2-D convolution; w has shape (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape, detail="input channels must match kernel")
    n = x.shape[0]
    o, c, kh, kw = w.shape
    if kh == 1 and kw == 1 and stride == 1 and padding == (0, 0):
        h, wd = x.shape[2:]
        rows = reshape(transpose(x, (0, 2, 3, 1)), (n * h * wd, c))
        oh, ow = h, wd
    else:
        cols = im2col(x, kh, kw, stride, *padding)
        oh, ow = cols.shape[1:3]
        rows = reshape(cols, (n * oh * ow, c * kh * kw))
    y = matmul(rows, transpose(reshape(w, (o, c * kh * kw))))
    y = transpose(reshape(y, (n, oh, ow, o)), (0, 3, 1, 2))
    if b is not None:
        y = y + reshape(b, (1, o, 1, 1))
    return y


def depthwise_conv2d(x, w, b=None, stride: int = 1, padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Per-channel convolution; w has shape (C, 1, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != 1 or x.shape[1] != w.shape[0]:
        raise ShapeError("depthwise_conv2d", x.shape, w.shape,
                         detail="kernel must be (C, 1, kh, kw) with C = input channels")
    n, c, h, wd = x.shape
    _, _, kh, kw = w.shape
    ph, pw = padding
    oh, ow = _out_size(h, kh, stride, ph), _out_size(wd, kw, stride, pw)
    if oh < 1 or ow < 1:
        raise ShapeError("depthwise_conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    xp = x
    if ph or pw:
        xp = scatter(x, (slice(None), slice(None), slice(ph, ph + h), slice(pw, pw + wd)),
                     (n, c, h + 2 * ph, wd + 2 * pw))
    taps = reshape(w, (c, kh * kw))
    y = None
    for i in range(kh):
        for j in range(kw):
            window = getitem(xp, (slice(None), slice(None),
                                  slice(i, i + stride * oh, stride), slice(j, j + stride * ow, stride)))
            term = window * reshape(getitem(taps, (slice(None), i * kw + j)), (1, c, 1, 1))
            y = term if y is None else y + term
    if b is not None:
        y = y + reshape(b, (1, c, 1, 1))
    return y


def avg_pool2d(x, kernel: tuple[int, int], stride: int) -> Tensor:
    x = as_tensor(x)
    kh, kw = kernel
    cols = im2col(x, kh, kw, stride)
    return transpose(mean(cols, axis=(4, 5)), (0, 3, 1, 2))


def global_avg_pool(x) -> Tensor:
    return mean(as_tensor(x), axis=(2, 3))


def batch_norm(x, gamma, beta, mean_=None, var=None, eps: float = 1e-5):
    """Per-channel normalisation of (N, C, H, W).

    With `mean_`/`var` given, those statistics are used as constants (frozen
    mode). Otherwise batch statistics are computed in-graph and returned
    alongside the output so the caller can update running estimates.
    """
    x = as_tensor(x)
    c = x.shape[1]
    g = reshape(gamma, (1, c, 1, 1))
    bt = reshape(beta, (1, c, 1, 1))
    if mean_ is not None:
        inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(1, c, 1, 1)
        return (x - Tensor(mean_.astype(x.dtype).reshape(1, c, 1, 1))) * (g * Tensor(inv)) + bt, None
    mu = mean(x, axis=(0, 2, 3), keepdims=True)
    centered = x - mu
    v = mean(centered * centered, axis=(0, 2, 3), keepdims=True)
    y = centered * power(v + eps, -0.5) * g + bt
    return y, (mu.data.reshape(c).real.copy(), v.data.reshape(c).real.copy())


def linear(x, w, b=None) -> Tensor:
    """x (N, C) times w (D, C) transposed, plus bias (D,)."""
    y = matmul(as_tensor(x), transpose(as_tensor(w)))
    return y + b if b is not None else y


def sq_dist(a, b) -> Tensor:
    """Row-wise squared Euclidean distance of two (N, D) tensors."""
    d = as_tensor(a) - as_tensor(b)
    return tsum(d * d, axis=-1)


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple[int, ...]
    offset: int
    layer: int = -1
    role: str = ""

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamLayout:
    """Named slices of a flat parameter vector.

    Entries that belong to a layer are sliced per output channel along axis 0,
    which gives the (layer, channel, offset) -> flat index map.
    """

    def __init__(self, entries: Iterable[tuple]):
        self.entries: list[ParamEntry] = []
        self._by_name: dict[str, ParamEntry] = {}
        self._by_layer: dict[int, list[ParamEntry]] = {}
        off = 0
        for item in entries:
            name, shape, *rest = item
            e = ParamEntry(name, tuple(int(s) for s in shape), off, *rest)
            if name in self._by_name:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.entries.append(e)
            self._by_name[name] = e
            if e.layer >= 0:
                self._by_layer.setdefault(e.layer, []).append(e)
            off += e.size
        self.size = off

    @classmethod
    def flat(cls, n: int) -> "ParamLayout":
        return cls([("theta", (n,))])

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and self.entries == other.entries

    def __getitem__(self, name: str) -> ParamEntry:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def layer_entries(self, layer: int) -> list[ParamEntry]:
        return self._by_layer.get(layer, [])

    def channel_indices(self, layer: int, channel: int, roles=None) -> np.ndarray:
        """Flat indices of every parameter slice producing output `channel` of `layer`."""
        parts = []
        for e in self.layer_entries(layer):
            if roles is not None and e.role not in roles:
                continue
            per = e.size // e.shape[0]
            parts.append(np.arange(e.offset + channel * per, e.offset + (channel + 1) * per))
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def flat_index(self, layer: int, channel: int, offset: int) -> int:
        idx = self.channel_indices(layer, channel)
        if not 0 <= offset < len(idx):
            raise IndexError(f"offset {offset} outside channel slice of size {len(idx)}")
        return int(idx[offset])

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {e.name: flat[e.offset:e.offset + e.size].reshape(e.shape) for e in self.entries}

    def tensors(self, theta: Tensor) -> dict[str, Tensor]:
        return {e.name: reshape(getitem(theta, slice(e.offset, e.offset + e.size)), e.shape)
                for e in self.entries}


@dataclass
class ParamVector:
    """Flat view over all trainable parameters."""

    values: np.ndarray
    layout: ParamLayout = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.dtype.kind in "biu":
            self.values = self.values.astype(np.float64)
        if self.values.ndim != 1:
            raise ValueError("ParamVector values must be one-dimensional")
        if self.layout is None:
            self.layout = ParamLayout.flat(len(self.values))
        if self.layout.size != len(self.values):
            raise ValueError(f"layout covers {self.layout.size} entries, vector has {len(self.values)}")

    def __len__(self):
        return len(self.values)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def unflatten(self) -> dict[str, np.ndarray]:
        return self.layout.views(self.values)

    @classmethod
    def flatten(cls, arrays: dict[str, np.ndarray], layout: ParamLayout) -> "ParamVector":
        flat = np.concatenate([np.asarray(arrays[e.name]).ravel() for e in layout.entries]) \
            if layout.entries else np.zeros(0)
        return cls(flat, layout)


# ---------------------------------------------------------------- drivers

def _values(x) -> np.ndarray:
    return x.values if isinstance(x, ParamVector) else np.asarray(x)


def _scalar(loss, where: str) -> Tensor:
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", type(loss).__name__)
        raise GradientError(f"{where}: loss must be a scalar Tensor, got {shape}")
    return loss


def grad(loss: Tensor, wrt: Tensor, layout: ParamLayout | None = None) -> ParamVector:
    """Gradient of a scalar recorded on an active tape with respect to leaf `wrt`."""
    _scalar(loss, "grad")
    for tape in reversed(_ACTIVE):
        if loss in tape:
            (g,) = tape.gradient(loss, [wrt])
            return ParamVector(g.data.reshape(-1), layout)
    raise GradientError("loss was not produced under an active tape")


def value_and_grad(loss_fn: Callable[[Tensor], Tensor], at) -> tuple[float, ParamVector]:
    layout = at.layout if isinstance(at, ParamVector) else None
    with Tape() as tape:
        theta = tape.watch(_values(at))
        loss = _scalar(loss_fn(theta), "value_and_grad")
        (g,) = tape.gradient(loss, [theta])
    return loss.item(), ParamVector(g.data, layout)


def hvp_many(loss_fn: Callable[[Tensor], Tensor], at, vs: Sequence) -> list[ParamVector]:
    """Hessian-vector products for several directions sharing one gradient graph."""
    layout = at.layout if isinstance(at, ParamVector) else None
    theta0 = _values(at)
    vs = [_values(v) for v in vs]
    for v in vs:
        if v.shape != theta0.shape:
            raise ShapeError("hvp", theta0.shape, v.shape, detail="direction length mismatch")
    with Tape() as tape:
        theta = tape.watch(theta0)
        loss = _scalar(loss_fn(theta), "hvp")
        (g,) = tape.gradient(loss, [theta], create_graph=True)
        out = []
        for v in vs:
            dot = tsum(g * Tensor(v))
            (hv,) = tape.gradient(dot, [theta])
            out.append(ParamVector(hv.data, layout))
    return out


def hvp(loss_fn: Callable[[Tensor], Tensor], at, v) -> ParamVector:
    """H v with H the Hessian of `loss_fn` at `at` (reverse-over-reverse)."""
    return hvp_many(loss_fn, at, [v])[0]


class SGD:
    """Classical momentum: v <- momentum * v + g; theta <- theta - lr * v."""

    def __init__(self, lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocity: np.ndarray | None = None

    def step(self, params: ParamVector, grads: ParamVector) -> ParamVector:
        if self.velocity is None or self.velocity.shape != params.values.shape:
            self.velocity = np.zeros_like(params.values)
        return sgd_step(params, grads, self.lr, self.momentum, self.velocity)


def sgd_step(params: ParamVector, grads: ParamVector, lr: float, momentum: float = 0.0,
             velocity: np.ndarray | None = None) -> ParamVector:
    g = _values(grads)
    if len(g) != len(params):
        raise ShapeError("sgd_step", params.values.shape, g.shape)
    bad = np.flatnonzero(~np.isfinite(g))
    if len(bad):
        raise FloatingPointError(f"non-finite gradient at parameter index {int(bad[0])}")
    if velocity is None:
        velocity = np.zeros_like(params.values)
    velocity *= momentum
    velocity += g
    params.values -= lr * velocity
    return params
