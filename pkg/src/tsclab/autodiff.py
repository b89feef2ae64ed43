"""Reverse-mode automatic differentiation over dense numpy arrays.

Only the operations the graph encoder and the policy heads need are provided.
Gather/scatter over explicit index arrays stands in for sparse graph storage.
"""

from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

_GRAD = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape."""
    global _GRAD
    prev, _GRAD = _GRAD, False
    try:
        yield
    finally:
        _GRAD = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=None if like is None else like.data.dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    live = _GRAD and any(p.requires_grad for p in parents)
    out.requires_grad = live
    if live:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    x = a.data
    y = np.maximum(x, slope * x) if 0.0 <= slope <= 1.0 else np.where(x > 0, x, slope * x)

    def bw(g):
        gy = g * slope
        np.copyto(gy, g, where=x > 0)
        return (gy,)

    return _result(y, (a,), bw)


def huber(a: Tensor, delta: float = 1.0) -> Tensor:
    x = a.data
    small = np.abs(x) <= delta
    y = np.where(small, 0.5 * x * x, delta * (np.abs(x) - 0.5 * delta))
    return _result(y, (a,), lambda g: (g * np.where(small, x, delta * np.sign(x)),))


# -- shape and reductions ---------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(y), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    try:
        y = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(y, parts, bw)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _result(a.data @ b.data, (a, b), bw)


# -- graph primitives ---------------------------------------------------------------

def scatter_rows(values: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    """``out[k] = sum of values[i] with ids[i] == k`` for any trailing shape."""
    tail = values.shape[1:]
    flat = values.reshape(len(ids), -1)
    # a 0/1 incidence matrix turns the scatter into one sparse product
    incidence = sparse.csr_matrix(
        (np.ones(len(ids), dtype=values.dtype), (ids, np.arange(len(ids)))), shape=(n, len(ids))
    )
    return np.asarray(incidence @ flat).reshape((n,) + tail)


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``a[index]``."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        return (scatter_rows(g, index, a.shape[0]),)

    return _result(a.data[index], (a,), bw)


def segment_sum(a: Tensor, segment: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``a`` sharing a segment id; rows are added in index order."""
    segment = np.asarray(segment, dtype=np.int64)
    if segment.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_sum: {segment.shape[0]} ids for {a.shape[0]} rows")
    out = scatter_rows(a.data, segment, n_segments)
    return _result(out, (a,), lambda g: (g[segment],))


def segment_mean(a: Tensor, segment: np.ndarray, n_segments: int) -> Tensor:
    counts = np.bincount(np.asarray(segment, dtype=np.int64), minlength=n_segments).astype(a.data.dtype)
    inv = (1.0 / np.maximum(counts, 1.0)).astype(a.data.dtype)
    return mul(segment_sum(a, segment, n_segments), inv.reshape((-1,) + (1,) * (a.data.ndim - 1)))


def _group_max(x: np.ndarray, group: np.ndarray, n: int) -> np.ndarray:
    m = np.full((n,) + x.shape[1:], -np.inf, dtype=x.dtype)
    if len(group) == 0:
        return m
    if np.all(group[1:] >= group[:-1]):
        starts = np.flatnonzero(np.r_[True, group[1:] != group[:-1]])
        m[group[starts]] = np.maximum.reduceat(x, starts, axis=0)
    else:
        np.maximum.at(m, group, x)
    return m


def grouped_softmax(logits: Tensor, group: np.ndarray, n_groups: int) -> Tensor:
    """Softmax of ``logits`` rows normalised independently within each group (per column)."""
    group = np.asarray(group, dtype=np.int64)
    if group.shape[0] != logits.shape[0]:
        raise ShapeError(f"grouped_softmax: {group.shape[0]} group ids for {logits.shape[0]} rows")
    x = logits.data
    e = np.exp(x - _group_max(x, group, n_groups)[group])
    den = scatter_rows(e, group, n_groups)
    y = e / den[group]

    def bw(g):
        gy = g * y
        return (gy - y * scatter_rows(gy, group, n_groups)[group],)

    return _result(y, (logits,), bw)


def grouped_log_softmax(logits: Tensor, group: np.ndarray, n_groups: int) -> Tensor:
    group = np.asarray(group, dtype=np.int64)
    x = logits.data
    shifted = x - _group_max(x, group, n_groups)[group]
    e = np.exp(shifted)
    den = scatter_rows(e, group, n_groups)
    # groups without members keep a zero denominator; they are never gathered
    y = shifted - np.log(den, out=np.zeros_like(den), where=den > 0)[group]
    p = np.exp(y)

    def bw(g):
        return (g - p * scatter_rows(g, group, n_groups)[group],)

    return _result(y, (logits,), bw)


# -- normalisation and regularisation --------------------------------------------------

def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean and unit variance (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _result(y, (a,), bw)


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


# -- backward pass ----------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# -- parameters and optimiser --------------------------------------------------------

class ParamStore:
    """Named learnable arrays plus their AdamW moments."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def uniform(self, name: str, shape, bound: float, rng: np.random.Generator) -> Tensor:
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def linear(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
        return self.uniform(name, (fan_in, fan_out), 1.0 / np.sqrt(fan_in), rng)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def count(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def copy_values_from(self, other: "ParamStore") -> None:
        for name, p in self.params.items():
            p.data[...] = other.params[name].data

    def clone(self) -> "ParamStore":
        out = ParamStore(self.dtype)
        for name, p in self.params.items():
            out.add(name, p.data.copy())
        return out

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}


def adamw_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """Decoupled-weight-decay Adam with bias correction; clears gradients afterwards."""
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad
        m, v = store.m[name], store.v[name]
        p.data *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        g[...] = 0.0


# -- checkpoints ------------------------------------------------------------------------

_MAGIC = b"TSCLCKPT"
_VERSION = 1
_DTYPES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODES = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(store: ParamStore, path: str | Path, meta: dict | None = None) -> None:
    """Little-endian binary: header, JSON metadata, parameter records, optimiser state."""
    out = bytearray()
    out += _MAGIC + struct.pack("<IB", _VERSION, _DTYPES[store.dtype])
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<IQ", len(store.params), store.step_count)
    le = store.dtype.newbyteorder("<")
    for name, p in store.params.items():
        key = name.encode()
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        for arr in (p.data, store.m[name], store.v[name]):
            out += np.ascontiguousarray(arr, dtype=le).tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, code = struct.unpack_from("<IB", buf, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 13
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off:off + n].decode())
    off += n
    count, step_count = struct.unpack_from("<IQ", buf, off)
    off += 12
    dtype = _CODES[code]
    le = dtype.newbyteorder("<")
    store = ParamStore(dtype)
    store.step_count = step_count
    for _ in range(count):
        (k,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + k].decode()
        off += k
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays = []
        for _ in range(3):
            arrays.append(np.frombuffer(buf, dtype=le, count=size, offset=off).reshape(shape).astype(dtype))
            off += size * dtype.itemsize
        store.add(name, arrays[0])
        store.m[name][...] = arrays[1]
        store.v[name][...] = arrays[2]
    return store, meta


def parameters_reachable(loss: Tensor) -> Iterable[Tensor]:
    return [n for n in _topological(loss) if n._backward is None]
