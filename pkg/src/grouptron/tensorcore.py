"""Small dense-tensor engine with reverse-mode automatic differentiation.

Everything is float64. A ``Tensor`` produced by an op keeps a reference to
its parents and a closure that pushes the upstream gradient back to them;
``backward`` orders the recorded graph topologically and replays it in
reverse. Ops are only recorded when at least one input requires grad and
grad mode is enabled (see :func:`no_grad`).
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NumericError",
    "no_grad",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "take",
    "mean",
    "sum_",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "temporal_conv",
    "graph_matmul",
    "backward",
    "grad_check",
    "GradCheckReport",
    "save_snapshot",
    "load_snapshot",
]


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    # make ndarray <op> Tensor defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a sum is NaN/Inf whenever any element is
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not np.isfinite(total):
        raise NumericError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # overflow-free form
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def graph_matmul(adj: np.ndarray, x) -> Tensor:
    """Batched product of per-timestep adjacency ``adj`` (T, N, N) with ``x`` (T, N, C)."""
    adj = np.asarray(adj, dtype=np.float64)
    x = _as_tensor(x)
    if adj.ndim != 3 or x.ndim != 3 or adj.shape[0] != x.shape[0] or adj.shape[2] != x.shape[1]:
        raise ValueError(f"graph_matmul: adjacency {adj.shape} incompatible with features {x.shape}")
    return matmul(Tensor(adj), x)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of empty sequence")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1 :] != ts[0].shape[:ax] + ts[0].shape[ax + 1 :]:
            raise ValueError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return np.split(g, sizes, axis=ax)

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if len({t.shape for t in ts}) != 1:
        raise ValueError("stack: shapes differ")

    def bw(g):
        return [np.take(g, i, axis=axis) for i in range(len(ts))]

    return _make(np.stack([t.data for t in ts], axis=axis), ts, bw, "stack")


def _is_row_gather(index) -> bool:
    return isinstance(index, np.ndarray) and index.ndim == 1 and index.dtype.kind in "iu"


def _has_array(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def take(a, index) -> Tensor:
    """Numpy-style indexing (basic slices or integer arrays)."""
    a = _as_tensor(a)
    out = a.data[index]

    def bw(g):
        if _is_row_gather(index):
            # scatter-add of gathered rows as a one-hot product; much faster than ufunc.at
            sel = np.zeros((a.shape[0], len(index)))
            sel[index, np.arange(len(index))] = 1.0
            return ((sel @ g.reshape(len(index), -1)).reshape(a.shape),)
        full = np.zeros_like(a.data)
        if _has_array(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), bw, "take")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def sum_(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    y = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape),)

    return _make(np.asarray(y, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    y = a.data.mean(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape),)

    return _make(np.asarray(y, dtype=np.float64), (a,), bw, "mean")


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (a,), bw, "log_softmax")


def temporal_conv(x, kernel, bias=None) -> Tensor:
    """1-D convolution along axis 0 with same-padding.

    ``x`` is (T, ..., C_in), ``kernel`` is (k, C_in, C_out) with odd k,
    ``bias`` is (C_out,). Output position t sees inputs t - k//2 .. t + k//2.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if kernel.ndim != 3 or kernel.shape[0] % 2 == 0:
        raise ValueError(f"temporal_conv kernel must be (odd k, C_in, C_out), got {kernel.shape}")
    if x.shape[-1] != kernel.shape[1]:
        raise ValueError(f"temporal_conv: input channels {x.shape[-1]} != kernel {kernel.shape[1]}")
    k = kernel.shape[0]
    half = k // 2
    T = x.shape[0]
    pad = [(half, half)] + [(0, 0)] * (x.ndim - 1)
    xp = np.pad(x.data, pad)
    y = np.zeros(x.shape[:-1] + (kernel.shape[2],))
    for j in range(k):
        y += xp[j : j + T] @ kernel.data[j]
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (kernel.shape[2],):
            raise ValueError(f"temporal_conv bias shape {bias.shape} != ({kernel.shape[2]},)")
        y = y + bias.data
        parents.append(bias)

    def bw(g):
        grads = [None, None, None]
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j : j + T] += g @ kernel.data[j].T
            grads[0] = gxp[half : half + T]
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            g2 = g.reshape(-1, g.shape[-1])
            for j in range(k):
                gk[j] = xp[j : j + T].reshape(-1, xp.shape[-1]).T @ g2
            grads[1] = gk
        if bias is not None and bias.requires_grad:
            grads[2] = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return grads

    return _make(y, parents, bw, "temporal_conv")


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Gradients add onto existing ``.grad`` buffers; zero them between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-6,
    exclude: Callable[[np.ndarray], np.ndarray] | None = None,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(x)`` against central differences.

    ``exclude`` maps x.data to a boolean mask of entries to skip (e.g. inputs
    near a relu kink). ``indices`` restricts the check to chosen entries.
    """
    x.grad = None
    x.requires_grad = True
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    mask = np.zeros(x.shape, dtype=bool) if exclude is None else np.asarray(exclude(x.data))
    idx_list = list(np.ndindex(*x.shape)) if indices is None else [tuple(i) for i in indices]
    worst = 0.0
    checked = excluded = 0
    with no_grad():
        for idx in idx_list:
            if mask[idx]:
                excluded += 1
                continue
            orig = x.data[idx]
            x.data[idx] = orig + h
            fp = f(x).item()
            x.data[idx] = orig - h
            fm = f(x).item()
            x.data[idx] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, float(relative_error(np.array(analytic[idx]), np.array(num))))
            checked += 1
    return GradCheckReport(worst, checked, excluded, tol)


@dataclass
class ParamCheckReport:
    """Finite-difference check of one parameter tensor's gradient.

    ``norm_rel_error`` is ||a - n|| / max(||a||, ||n||) over every checked
    entry and direction; ``max_entry_error`` is the worst per-entry
    :func:`relative_error`, which is noise-dominated for entries far below
    the finite-difference resolution.
    """

    norm_rel_error: float
    max_entry_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.norm_rel_error < self.tol


def grad_check_params(
    f: Callable[[], Tensor | dict[str, Tensor]],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    indices: dict[str, Iterable[tuple[int, ...]]] | None = None,
    n_directions: int = 0,
    seed: int = 0,
) -> dict[tuple[str, str], ParamCheckReport]:
    """Central-difference check of every parameter gradient of ``f()``.

    ``f`` returns a scalar or a dict of named scalars; every scalar is
    checked from the same perturbed evaluations. ``indices[name]`` limits the
    entries checked for that tensor (default: all). ``n_directions`` adds
    random unit-direction derivatives per tensor, which touch every entry.
    Reports are keyed by (scalar name, parameter name); a bare scalar is
    named ``"value"``.
    """

    def values() -> dict[str, Tensor]:
        out = f()
        return out if isinstance(out, dict) else {"value": out}

    terms = list(values())
    analytic: dict[str, dict[str, np.ndarray]] = {}
    for term in terms:
        for p in params.values():
            p.grad = None
            p.requires_grad = True
        backward(values()[term])
        analytic[term] = {n: np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                          for n, p in params.items()}

    def scalars() -> np.ndarray:
        v = values()
        return np.array([v[t].item() for t in terms])

    rng = np.random.default_rng(seed)
    reports = {}
    with no_grad():
        for name, p in params.items():
            sel = (indices or {}).get(name)
            idx_list = list(np.ndindex(*p.shape)) if sel is None else [tuple(i) for i in sel]
            rows_a, rows_n = [], []
            for idx in idx_list:
                orig = p.data[idx]
                p.data[idx] = orig + h
                fp = scalars()
                p.data[idx] = orig - h
                fm = scalars()
                p.data[idx] = orig
                rows_a.append([analytic[t][name][idx] for t in terms])
                rows_n.append((fp - fm) / (2 * h))
            base = p.data
            for _ in range(n_directions):
                v = rng.normal(size=p.shape)
                v /= np.linalg.norm(v)
                p.data = base + h * v
                fp = scalars()
                p.data = base - h * v
                fm = scalars()
                p.data = base
                rows_a.append([float((analytic[t][name] * v).sum()) for t in terms])
                rows_n.append((fp - fm) / (2 * h))
            A, N = np.array(rows_a), np.array(rows_n)
            for j, term in enumerate(terms):
                diff = np.linalg.norm(A[:, j] - N[:, j])
                scale = max(np.linalg.norm(A[:, j]), np.linalg.norm(N[:, j]))
                norm_err = 0.0 if diff == 0.0 else diff / scale
                entry = float(relative_error(A[:, j], N[:, j]).max()) if len(A) else 0.0
                reports[(term, name)] = ParamCheckReport(float(norm_err), entry, len(A), tol)
    return reports


# ---------------------------------------------------------------- snapshots

_MAGIC = b"GTSNAP\x00\x01"
SNAPSHOT_VERSION = 1


def save_snapshot(path, params: dict[str, Tensor], meta: bytes = b"") -> None:
    """Binary layout (little-endian): magic, u32 version, u32 count, u32 meta_len,
    meta bytes, then per tensor: u32 path_len, path utf-8, u32 ndim, u64 dims,
    raw float64 data."""
    chunks = [_MAGIC, struct.pack("<III", SNAPSHOT_VERSION, len(params), len(meta)), meta]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_snapshot(path) -> tuple[dict[str, np.ndarray], bytes]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(_MAGIC):
        raise ValueError(f"{path}: not a parameter snapshot")
    pos = len(_MAGIC)
    version, count, meta_len = struct.unpack_from("<III", buf, pos)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    pos += 12
    meta = buf[pos : pos + meta_len]
    pos += meta_len
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out, meta
