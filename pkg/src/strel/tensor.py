"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the action-localization pipeline needs are provided.
Every op records a closure that maps the output gradient to input
gradients; ``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class DegenerateInputError(ValueError):
    """Raised when an op receives an empty extent it cannot reduce."""


class Tensor:
    __slots__ = ("data", "_requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self._requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor that tracks gradients."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE).reshape(self.shape)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


class Parameter(Tensor):
    """A named, trainable tensor. Frozen parameters do not track gradients."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str, frozen: bool = False):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)
        self.name = name
        self.frozen = frozen

    @property
    def requires_grad(self) -> bool:
        return not self.frozen

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x, shape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=DTYPE)
    if shape is not None and arr.ndim == 0:
        arr = np.full(shape, float(arr))
    return Tensor(arr)


def _make(data, parents, backward) -> Tensor:
    parents = tuple(parents)
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, _parents=parents if rg else (), _backward=backward if rg else None)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.shape)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.shape)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a = _as_tensor(a)
    b = _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d] along the last axis."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def scale_channels(x: Tensor, s: Tensor, axis: int = 0) -> Tensor:
    """Multiply x by a per-channel vector ``s`` laid along ``axis``."""
    if s.ndim != 1 or x.shape[axis] != s.shape[0]:
        raise ShapeError(f"scale_channels: {s.shape} vs axis {axis} of {x.shape}")
    shp = [1] * x.ndim
    shp[axis] = -1
    sv = s.data.reshape(shp)
    other = tuple(i for i in range(x.ndim) if i != axis)
    xd = x.data
    return _make(xd * sv, (x, s), lambda g: (g * sv, (g * xd).sum(axis=other)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(out, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


# shape ------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DegenerateInputError("concat: no parts")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: {p.shape} does not match {ref} off axis {ax}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=ax), parts, backward)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DegenerateInputError("stack: no parts")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape != ref:
            raise ShapeError(f"stack: {p.shape} vs {ref}")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _make(np.stack([p.data for p in parts], axis=axis), parts, backward)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries along one axis by integer index or index array."""
    idx = np.asarray(index)
    ax = axis % x.ndim
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        if idx.ndim == 0:
            sl = [slice(None)] * len(shape)
            sl[ax] = int(idx)
            out[tuple(sl)] += g
        else:
            np.add.at(out, (slice(None),) * ax + (idx,), g)
        return (out,)

    return _make(np.take(x.data, idx, axis=ax), (x,), backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[sl] = g
        return (out,)

    return _make(x.data[sl], (x,), backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Expand size-1 axes; gradients are summed back over the expanded axes."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
        raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a == 1 and b != 1)
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (g.sum(axis=axes, keepdims=True),))


# reductions -------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.data.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def reduce(x: Tensor, axes, mode: str = "mean") -> Tensor:
    """Mean or max over ``axes`` (removed from the result).

    Max routes the whole gradient to the first maximal element.
    """
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % x.ndim for a in axes))
    if not axes:
        return x
    for a in axes:
        if x.shape[a] == 0:
            raise DegenerateInputError(f"reduce: axis {a} of {x.shape} is empty")
    shape = x.shape
    keep = tuple(i for i in range(x.ndim) if i not in axes)
    out_shape = tuple(shape[i] for i in keep)
    if mode == "mean":
        n = int(np.prod([shape[a] for a in axes]))
        expand = tuple(1 if i in axes else shape[i] for i in range(x.ndim))

        def backward(g):
            return (np.broadcast_to(g.reshape(expand) / n, shape).copy(),)

        return _make(x.data.mean(axis=axes), (x,), backward)
    if mode == "max":
        moved = np.transpose(x.data, keep + axes).reshape(out_shape + (-1,))
        arg = moved.argmax(axis=-1)
        out = np.take_along_axis(moved, arg[..., None], axis=-1)[..., 0]
        red = tuple(shape[a] for a in axes)
        inv = tuple(np.argsort(keep + axes))

        def backward(g):
            flat = np.zeros(moved.shape, dtype=DTYPE)
            np.put_along_axis(flat, arg[..., None], g[..., None], axis=-1)
            return (flat.reshape(out_shape + red).transpose(inv),)

        return _make(out, (x,), backward)
    raise ValueError(f"reduce: unknown mode {mode!r}")


# linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared) or has
    the same leading axes as ``a``.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def softmax_last(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}, bias {bias.shape} vs last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), backward)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean elementwise sigmoid cross-entropy in log-sum-exp form."""
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs labels {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce: labels must be 0 or 1")
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        return ((_sigmoid(z) - y) * (float(g) / n),)

    return _make(np.array(loss.mean()), (logits,), backward)


# convolution and region sampling ----------------------------------------------

def conv3d(x: Tensor, w: Tensor, stride=(1, 1, 1), padding: int = 1) -> Tensor:
    """3-D convolution of x[N, C, T, H, W] with w[O, C, kt, kh, kw] (no bias)."""
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} vs weight {w.shape}")
    st, sh, sw = stride
    p = padding
    O, C, kt, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    N, _, Tp, Hp, Wp = xp.shape
    To = (Tp - kt) // st + 1
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw][:, :, :To, :Ho, :Wo]
    # cols: [N, To, Ho, Wo, C*kt*kh*kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(N, To, Ho, Wo, -1)
    wmat = w.data.reshape(O, -1)
    out = (cols @ wmat.T).transpose(0, 4, 1, 2, 3)
    xshape = x.shape
    need_gx = x.requires_grad

    def backward(g):
        gm = g.transpose(0, 2, 3, 4, 1)  # N, To, Ho, Wo, O
        gw = (gm.reshape(-1, O).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
        if not need_gx:
            return None, gw
        gcols = (gm @ wmat).reshape(N, To, Ho, Wo, C, kt, kh, kw)
        gxp = np.zeros_like(xp)
        for a in range(kt):
            for b in range(kh):
                for c in range(kw):
                    gxp[:, :, a:a + st * To:st, b:b + sh * Ho:sh, c:c + sw * Wo:sw] += \
                        gcols[..., a, b, c].transpose(0, 4, 1, 2, 3)
        gx = gxp[:, :, p:p + xshape[2], p:p + xshape[3], p:p + xshape[4]]
        return gx, gw

    return _make(out, (x, w), backward)


# gradient checking ------------------------------------------------------------

def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``x.data`` (perturbed in place)."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f().item()
        flat[i] = old - h
        fm = f().item()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


# checkpoints ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"STRELCKPT"
CHECKPOINT_VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write name -> array in the versioned flat binary format, sorted by name.

    Layout: ``STRELCKPT <version>\\n<count>\\n`` then per entry a text line
    ``<name> <ndim> <d1> ... <dn>\\n`` followed by little-endian float64 values.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" %d\n%d\n" % (CHECKPOINT_VERSION, len(arrays)))
        for name in sorted(arrays):
            if any(c.isspace() for c in name):
                raise ValueError(f"checkpoint names may not contain whitespace: {name!r}")
            arr = np.asarray(arrays[name], dtype="<f8", order="C")
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {arr.ndim} {dims}".rstrip().encode() + b"\n")
            fh.write(arr.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        head = fh.readline().split()
        if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if int(head[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {int(head[1])}")
        count = int(fh.readline())
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            fields = fh.readline().decode().split()
            name, ndim = fields[0], int(fields[1])
            shape = tuple(int(d) for d in fields[2:2 + ndim])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated entry {name}")
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(DTYPE)
        return out


def save_parameters(path, params: Iterable[Parameter], extra: dict[str, np.ndarray] | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for p in params:
        if p.name in arrays:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        arrays[p.name] = p.data
    if extra:
        arrays.update(extra)
    save_arrays(path, arrays)
