"""Minimal float64 tensor library with tape-style reverse-mode autodiff.

Every differentiable operation is a plain function taking and returning
:class:`Tensor`. When any input requires a gradient the op attaches a
:class:`Node` carrying a closure that maps the output gradient to input
gradients. :func:`backward` gathers the nodes reachable from the loss, orders
them by execution sequence and replays them in exact reverse.

There is no implicit broadcasting. Shape promotion is always explicit
(:func:`expand`), so every binary op requires identical operand shapes.
"""

from __future__ import annotations

import itertools
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exceptions import (
    DegenerateInputError,
    DimensionError,
    DomainError,
    NonFiniteError,
    ParameterError,
    UsageError,
)

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "tensor",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "log",
    "xlogx",
    "gelu",
    "sum",
    "mean",
    "softmax",
    "l2_normalize",
    "layer_norm",
    "clamp_gated",
    "euclidean_distance",
    "matmul",
    "reshape",
    "transpose",
    "take",
    "expand",
    "backward",
    "finite_difference_grad",
    "relative_error",
    "save_tnsr",
    "load_tnsr",
]

_sequence = itertools.count()


class Node:
    """One executed operation on the tape."""

    __slots__ = ("seq", "op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: "Tensor", backward_fn: Callable):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.op!r}, seq={self.seq})"


class Tensor:
    """Dense float64 array that may participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), out, backward_fn)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _axis(t: Tensor, axis: int, op: str) -> int:
    if not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"{op}: axis {axis} invalid for shape {t.shape}")
    return axis % t.ndim


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make("log", out, (a,), lambda g: (g / ad,))


def xlogx(a: Tensor) -> Tensor:
    """``a * ln(a)`` for ``a >= 0`` with ``0 ln 0 = 0``; the gradient at exactly 0 is taken as 0."""
    ad = a.data
    if (ad < 0).any():
        raise DomainError("xlogx: inputs must be non-negative")
    pos = ad > 0
    safe = np.where(pos, ad, 1.0)
    logs = np.log(safe)
    return _make("xlogx", np.where(pos, ad * logs, 0.0), (a,), lambda g: (g * np.where(pos, logs + 1.0, 0.0),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make("gelu", out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# reductions and normalisations
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    if axis is None:
        shape = a.shape
        return _make("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = _axis(a, axis, "sum")
    shape = a.shape
    return _make(
        "sum",
        a.data.sum(axis=ax),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.size
        shape = a.shape
        return _make("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),))
    ax = _axis(a, axis, "mean")
    n = a.shape[ax]
    shape = a.shape
    return _make(
        "mean",
        a.data.mean(axis=ax),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),),
    )


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(a, axis, "softmax")
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _make("softmax", s, (a,), backward_fn)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(a, axis, "l2_normalize")
    norm = np.sqrt((a.data**2).sum(axis=ax, keepdims=True))
    if (norm <= 1e-12).any():
        raise DegenerateInputError("l2_normalize: slice norm below 1e-12")
    y = a.data / norm

    def backward_fn(g):
        return ((g - y * (g * y).sum(axis=ax, keepdims=True)) / norm,)

    return _make("l2_normalize", y, (a,), backward_fn)


def layer_norm(a: Tensor, scale: Tensor, shift: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise each slice along ``axis`` then apply per-feature scale and shift.

    ``scale`` and ``shift`` are 1-D with length ``a.shape[axis]``.
    """
    ax = _axis(a, axis, "layer_norm")
    d = a.shape[ax]
    if scale.shape != (d,) or shift.shape != (d,):
        raise DimensionError(
            f"layer_norm: scale/shift shapes {scale.shape}/{shift.shape} do not match feature size {d}"
        )
    bshape = [1] * a.ndim
    bshape[ax] = d
    gam = scale.data.reshape(bshape)
    bet = shift.data.reshape(bshape)
    mu = a.data.mean(axis=ax, keepdims=True)
    xc = a.data - mu
    var = (xc**2).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gam + bet
    other = tuple(i for i in range(a.ndim) if i != ax)

    def backward_fn(g):
        gx = g * gam
        dx = inv * (gx - gx.mean(axis=ax, keepdims=True) - xhat * (gx * xhat).mean(axis=ax, keepdims=True))
        return dx, (g * xhat).sum(axis=other), g.sum(axis=other)

    return _make("layer_norm", out, (a, scale, shift), backward_fn)


def clamp_gated(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; the gradient passes wherever ``lo <= a <= hi``."""
    if not lo < hi:
        raise ParameterError(f"clamp_gated: need lo < hi, got lo={lo}, hi={hi}")
    mask = (a.data >= lo) & (a.data <= hi)
    return _make("clamp_gated", np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """``||a - b||_2`` as a scalar; the gradient at ``a == b`` is defined as zero."""
    _same_shape(a, b, "euclidean_distance")
    diff = a.data - b.data
    dist = np.sqrt((diff**2).sum())

    def backward_fn(g):
        if dist == 0.0:
            z = np.zeros_like(diff)
            return z, z
        u = g * diff / dist
        return u, -u

    return _make("euclidean_distance", np.asarray(dist), (a, b), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched product of equal-batch 3-D operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    ok = a.ndim == b.ndim and a.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and a.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make("matmul", ad @ bd, (a, b), backward_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(
        "transpose",
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def take(a: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate in backward."""
    ax = _axis(a, axis, "take")
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[ax]):
        raise DimensionError(f"take: indices out of range for axis {ax} of size {a.shape[ax]}")
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape)
        np.add.at(full, (slice(None),) * ax + (idx,), g)
        return (full,)

    return _make("take", np.take(a.data, idx, axis=ax), (a,), backward_fn)


def expand(a: Tensor, n: int) -> Tensor:
    """Tile ``a`` ``n`` times along a new leading axis (explicit broadcast)."""
    if n < 1:
        raise ParameterError(f"expand: n must be >= 1, got {n}")
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _make("expand", out, (a,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


class Graph:
    """Executed operations reachable from a root, in execution order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen: set[int] = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor):
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so a leaf used along
    several paths (or across several calls) receives the sum.
    """
    if loss.size != 1:
        raise UsageError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    if loss.node is None:
        leaves[id(loss)] = loss
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if not inp.requires_grad or gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
            if inp.node is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def finite_difference_grad(
    f: Callable[[Tensor], Tensor | float],
    t: Tensor,
    h: float = 1e-4,
    indices: Sequence[int] | None = None,
) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``t``.

    ``indices`` restricts evaluation to a subset of flat entries; the rest of
    the returned gradient is left at zero.
    """
    base = t.data.reshape(-1).copy()
    out = np.zeros_like(base)
    flat = range(base.size) if indices is None else indices

    def evaluate(vec):
        val = f(Tensor(vec.reshape(t.shape)))
        return val.item() if isinstance(val, Tensor) else float(val)

    for i in flat:
        orig = base[i]
        base[i] = orig + h
        fp = evaluate(base)
        base[i] = orig - h
        fm = evaluate(base)
        base[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(t.shape))


def relative_error(analytic, numeric) -> float:
    """Max absolute difference scaled by the larger of the two gradients' max magnitudes."""
    a = np.asarray(analytic.data if isinstance(analytic, Tensor) else analytic, dtype=np.float64)
    n = np.asarray(numeric.data if isinstance(numeric, Tensor) else numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    diff = np.abs(a - n).max(initial=0.0)
    if scale == 0.0:
        return diff
    return float(diff / scale)


# ---------------------------------------------------------------------------
# .tnsr files
# ---------------------------------------------------------------------------

_MAGIC = b"TNSR"


def save_tnsr(path, array) -> None:
    """Write ``array`` as: magic, u32 rank, u32 dims, little-endian float64 data."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array, dtype=np.float64)
    header = _MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f8").tobytes(order="C"))


def load_tnsr(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a .tnsr file (bad magic)")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(raw) != offset + 8 * count:
        raise ValueError(f"{path}: payload size does not match dims {dims}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims)
