"""Dense float64 tensors with a tape-based reverse-mode gradient engine.

Only the operations the forecasting models need are provided. Every op is a
pure function of its inputs; when a :class:`Tape` is active and at least one
input requires a gradient, the op appends a record holding a closure that maps
the output gradient to input gradients.

    >>> w = Tensor([[2.0]], requires_grad=True, name="w")
    >>> x = Tensor(np.ones((1, 1, 1)))
    >>> with Tape() as tape:
    ...     loss = sum_all(channel_linear(x, w, Tensor([0.0])))
    >>> reverse_gradients(tape, loss)["w"]
    array([[1.]])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

ACTIVATIONS = ("relu", "elu", "selu", "leaky_relu")

ELU_ALPHA = 1.0
SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946
LEAKY_SLOPE = 0.01

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-d array of doubles.

    Leaf tensors created with ``requires_grad=True`` are differentiable
    parameters; give them a ``name`` so they can be found in the gradient map.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad):
        # internal: takes ownership of a freshly computed array
        arr = np.asarray(arr, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("operation produced a non-finite value")
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations.

    Activate with ``with Tape() as tape:``. A tape belongs to the thread that
    entered it; other threads see no active tape.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(arr, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], tuple]):
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape() if needs else None
    out = Tensor._wrap(arr, tape is not None)
    if tape is not None:
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def reverse_gradients(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> dict:
    """Back-propagate from a scalar ``loss`` through ``tape``.

    Returns a gradient map ``{name: array}`` for every named leaf reached,
    plus zero arrays for any entry of ``params`` that the loss does not touch.
    Uses of the same leaf accumulate.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.name is not None:
                leaves[key] = inp
    gmap = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        if leaf.name in gmap:
            gmap[leaf.name] = gmap[leaf.name] + g
        else:
            gmap[leaf.name] = g
    for p in params:
        gmap.setdefault(p.name, np.zeros_like(p.data))
    return gmap


# -- elementwise ----------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def activation(x: Tensor, kind: str) -> Tensor:
    x = as_tensor(x)
    d = x.data
    pos = d > 0
    if kind == "relu":
        out = np.where(pos, d, 0.0)
        slope = pos.astype(np.float64)
    elif kind == "elu":
        em1 = np.expm1(np.minimum(d, 0.0))
        out = np.where(pos, d, ELU_ALPHA * em1)
        slope = np.where(pos, 1.0, ELU_ALPHA * (em1 + 1.0))
    elif kind == "selu":
        em1 = np.expm1(np.minimum(d, 0.0))
        out = SELU_SCALE * np.where(pos, d, SELU_ALPHA * em1)
        slope = SELU_SCALE * np.where(pos, 1.0, SELU_ALPHA * (em1 + 1.0))
    elif kind == "leaky_relu":
        out = np.where(pos, d, LEAKY_SLOPE * d)
        slope = np.where(pos, 1.0, LEAKY_SLOPE)
    else:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return _emit(out, (x,), lambda g: (g * slope,))


# -- structural -----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _emit(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _emit(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def take(table: Tensor, index: tuple) -> Tensor:
    """Basic indexing ``table[index]``; entries are integers or slices."""
    table = as_tensor(table)
    index = tuple(index)
    for axis, i in enumerate(index):
        if isinstance(i, slice):
            continue
        n = table.shape[axis]
        if not 0 <= i < n:
            raise IndexError(f"index {i} out of range for axis {axis} of size {n}")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit(table.data[index].copy(), (table,), backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    x = as_tensor(x)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {src} to {tuple(shape)}") from e
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _emit(out, (x,), backward)


def neighborhood(x: Tensor, k: int) -> Tensor:
    """Gather each pixel's k×k neighbourhood into channels, zero padded.

    [H, W, C] -> [H, W, k*k*C], channel order (dy, dx, c).
    """
    x = as_tensor(x)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {k}")
    if k == 1:
        return x
    H, W, C = x.shape
    r = k // 2
    padded = np.pad(x.data, ((r, r), (r, r), (0, 0)))
    out = np.concatenate(
        [padded[dy:dy + H, dx:dx + W, :] for dy in range(k) for dx in range(k)], axis=-1
    )

    def backward(g):
        gp = np.zeros_like(padded)
        j = 0
        for dy in range(k):
            for dx in range(k):
                gp[dy:dy + H, dx:dx + W, :] += g[..., j * C:(j + 1) * C]
                j += 1
        return (gp[r:r + H, r:r + W, :],)

    return _emit(out, (x,), backward)


# -- layers ---------------------------------------------------------------


def channel_linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel dense layer (a 1×1 convolution) over the last axis."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.data.ndim != 2 or bias.shape != (weights.shape[0],):
        raise DimensionError(f"weights {weights.shape} / bias {bias.shape} are not congruent")
    if x.shape[-1] != weights.shape[1]:
        raise DimensionError(f"input has {x.shape[-1]} channels, weights expect {weights.shape[1]}")
    xd, wd = x.data, weights.data
    out = xd @ wd.T + bias.data
    cin, cout = wd.shape[1], wd.shape[0]

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = g @ wd if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, cin) if weights.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _emit(out, (x, weights, bias), backward)


def bilinear_sample(field: Tensor, displacement: Tensor) -> Tensor:
    """Warp a [H, W] field by per-pixel (dx, dy) offsets in pixel units.

    ``dx`` moves along columns and ``dy`` along rows. Source coordinates are
    clamped to the image, so samples past the border repeat the edge.
    """
    field, displacement = as_tensor(field), as_tensor(displacement)
    if field.data.ndim != 2 or displacement.shape != field.shape + (2,):
        raise DimensionError(f"field {field.shape} / displacement {displacement.shape}")
    H, W = field.shape
    f = field.data
    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                             indexing="ij")
    sx_raw = cols + displacement.data[..., 0]
    sy_raw = rows + displacement.data[..., 1]
    sx = np.clip(sx_raw, 0.0, W - 1)
    sy = np.clip(sy_raw, 0.0, H - 1)
    x0 = np.minimum(np.floor(sx).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(sy).astype(np.intp), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = sx - x0
    wy = sy - y0
    f00, f01 = f[y0, x0], f[y0, x1]
    f10, f11 = f[y1, x0], f[y1, x1]
    out = (1 - wy) * ((1 - wx) * f00 + wx * f01) + wy * ((1 - wx) * f10 + wx * f11)
    inside_x = ((sx_raw >= 0) & (sx_raw <= W - 1)).astype(np.float64)
    inside_y = ((sy_raw >= 0) & (sy_raw <= H - 1)).astype(np.float64)
    dout_dx = ((1 - wy) * (f01 - f00) + wy * (f11 - f10)) * inside_x
    dout_dy = ((1 - wx) * (f10 - f00) + wx * (f11 - f01)) * inside_y

    def backward(g):
        gf = None
        if field.requires_grad:
            gf = np.zeros_like(f)
            np.add.at(gf, (y0, x0), g * (1 - wy) * (1 - wx))
            np.add.at(gf, (y0, x1), g * (1 - wy) * wx)
            np.add.at(gf, (y1, x0), g * wy * (1 - wx))
            np.add.at(gf, (y1, x1), g * wy * wx)
        gd = np.stack([g * dout_dx, g * dout_dy], axis=-1) if displacement.requires_grad else None
        return gf, gd

    return _emit(out, (field, displacement), backward)


# -- reductions and losses -------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return _emit(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def squared_error_mean(pred: Tensor, target, mask=None) -> Tensor:
    """Mean of squared differences, optionally restricted to ``mask == 1``.

    An empty mask yields 0 with zero gradient.
    """
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    if mask is None:
        n = diff.size
        w = None
    else:
        w = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        if w.shape != pred.shape:
            raise DimensionError(f"mask {w.shape} vs prediction {pred.shape}")
        n = float(w.sum())
        if n == 0:
            return _emit(np.array(0.0), (pred,), lambda g: (np.zeros(pred.shape),))
        diff = diff * w
    value = np.array(float(np.sum(diff * diff)) / n)
    return _emit(value, (pred,), lambda g: (float(g) * 2.0 * diff / n,))


def binary_cross_entropy(prob: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    prob = as_tensor(prob)
    m = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if m.shape != prob.shape:
        raise DimensionError(f"probabilities {prob.shape} vs target {m.shape}")
    p = np.clip(prob.data, eps, 1.0 - eps)
    live = ((prob.data >= eps) & (prob.data <= 1.0 - eps)).astype(np.float64)
    n = p.size
    value = np.array(-float(np.sum(m * np.log(p) + (1 - m) * np.log1p(-p))) / n)
    dp = (-m / p + (1 - m) / (1 - p)) * live / n
    return _emit(value, (prob,), lambda g: (float(g) * dp,))
