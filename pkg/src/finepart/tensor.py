"""Dense 2-D tensors with a dynamic reverse-mode tape.

Every op builds a fresh node holding its parents and a closure that maps the
output gradient to parent gradients. ``backward`` walks the graph in reverse
topological order. Data is always float64.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix

DTYPE = np.float64

# distances below this are treated as exact zeros by ``sqrt`` (zero subgradient)
SQRT_FLOOR = 1e-12


class TensorError(ValueError):
    """Shape mismatches, non-finite values and misuse of the tape."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        name: str | None = None,
    ):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) else data.astype(DTYPE, copy=False)
        if _backward is None and not np.all(np.isfinite(arr)):
            raise TensorError("non-finite value" + (f" in {name}" if name else ""))
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=DTYPE)
    if like is not None and arr.ndim == 0:
        arr = np.full(like.shape, float(arr), dtype=DTYPE)
    return Tensor(arr)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn, name: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        out = Tensor.__new__(Tensor)
        out.data, out.requires_grad, out.grad = data, False, None
        out._parents, out._backward, out._consumed, out.name = (), None, False, name
        return out
    return Tensor(data, requires_grad=True, _parents=parents, _backward=fn, name=name)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    """Sum of two tensors. ``b`` may be a (1, k) row broadcast over the rows of ``a``."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if a.data.ndim == 2 and b.data.shape == (1, a.shape[1]):
        return _node(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)), "add_row")
    raise TensorError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_same(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; a python scalar multiplies every entry."""
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)
        return _node(a.data * s, (a,), lambda g: (g * s,), "scale")
    b = as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)
    return _node(y, (a,), lambda g: (g * (y > 0),), "relu")


def sqrt(a: Tensor) -> Tensor:
    """Square root of a nonnegative tensor; zero subgradient at (numerical) zero."""
    x = np.maximum(a.data, 0.0)
    y = np.sqrt(x)
    live = y > SQRT_FLOOR ** 0.5

    def fn(g):
        out = np.zeros_like(g)
        np.divide(g, 2.0 * y, out=out, where=live)
        return (out,)

    return _node(y, (a,), fn, "sqrt")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data > lo) & (a.data < hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clamp")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _node(ad @ bd, (a, b), fn, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``b`` a (1, k) row, as one tape node."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (1, w.shape[1]):
        raise TensorError(f"linear: shape mismatch {x.shape} @ {w.shape} + {b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    out += b.data

    def fn(g):
        return (
            g @ wd.T if x.requires_grad else None,
            xd.T @ g if w.requires_grad else None,
            g.sum(axis=0, keepdims=True) if b.requires_grad else None,
        )

    return _node(out, (x, w, b), fn, "linear")


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------- reductions and shape ops

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def max_pool_rows(a: Tensor) -> Tensor:
    """Column-wise max over rows, returned as a (1, k) row. Ties route gradient to the first row."""
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise TensorError(f"max_pool_rows: need a nonempty 2-D tensor, got {a.shape}")
    idx = np.argmax(a.data, axis=0)
    cols = np.arange(a.shape[1])
    n = a.shape[0]

    def fn(g):
        out = np.zeros((n, len(cols)))
        out[idx, cols] = g[0]
        return (out,)

    return _node(a.data[idx, cols][None, :], (a,), fn, "max_pool_rows")


def mean_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise TensorError(f"mean_rows: need a nonempty 2-D tensor, got {a.shape}")
    n = a.shape[0]
    return _node(a.data.mean(axis=0, keepdims=True), (a,), lambda g: (np.repeat(g / n, n, axis=0),), "mean_rows")


def repeat_rows(a: Tensor, n: int) -> Tensor:
    if a.data.ndim != 2 or a.shape[0] != 1:
        raise TensorError(f"repeat_rows: need a (1, k) row, got {a.shape}")
    return _node(np.repeat(a.data, n, axis=0), (a,), lambda g: (g.sum(axis=0, keepdims=True),), "repeat_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Horizontal concatenation: rows of every part are joined side by side."""
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise TensorError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    return _node(
        np.concatenate([p.data for p in parts], axis=1),
        tuple(parts),
        lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))),
        "concat_cols",
    )


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Vertical concatenation (stacking rows)."""
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1 or any(p.data.ndim != 2 for p in parts):
        raise TensorError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return _node(
        np.concatenate([p.data for p in parts], axis=0),
        tuple(parts),
        lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))),
        "concat_rows",
    )


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    unique = len(np.unique(idx)) == len(idx)

    def fn(g):
        out = np.zeros(shape)
        if unique:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), fn, "take_rows")


def take_cols(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    unique = len(np.unique(idx)) == len(idx)

    def fn(g):
        out = np.zeros(shape)
        if unique:  # plain scatter is much cheaper than add.at
            out[:, idx] = g
        else:
            np.add.at(out.T, idx, g.T)
        return (out,)

    return _node(a.data[:, idx], (a,), fn, "take_cols")


def pad_cols(a: Tensor, width: int) -> Tensor:
    """Zero-pad (or truncate) columns to exactly ``width``."""
    n, k = a.shape
    if k >= width:
        return take_cols(a, np.arange(width)) if k > width else a
    out = np.zeros((n, width))
    out[:, :k] = a.data
    return _node(out, (a,), lambda g: (g[:, :k],), "pad_cols")


# ---------------------------------------------------------------- normalisations

def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape[1] == 0:
        raise TensorError(f"softmax_rows: empty rows in shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _node(y, (a,), fn, "softmax_rows")


def row_normalize(a: Tensor) -> Tensor:
    """Divide each row by its sum (rows must have positive sums)."""
    s = a.data.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise TensorError("row_normalize: nonpositive row sum")
    y = a.data / s

    def fn(g):
        return ((g - (g * y).sum(axis=1, keepdims=True)) / s,)

    return _node(y, (a,), fn, "row_normalize")


def sq_euclid_rowpairs(a: Tensor, b: Tensor | None = None) -> Tensor:
    """Matrix of squared Euclidean distances between the rows of ``a`` and ``b`` (default ``a``)."""
    same = b is None
    b = a if same else b
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise TensorError(f"sq_euclid_rowpairs: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = (ad * ad).sum(axis=1)
    nb = na if same else (bd * bd).sum(axis=1)
    d = np.maximum(na[:, None] + nb[None, :] - 2.0 * (ad @ bd.T), 0.0)
    if same:
        np.fill_diagonal(d, 0.0)

        def fn(g):
            gs = g + g.T
            return (2.0 * (gs.sum(axis=1)[:, None] * ad - gs @ ad),)

        return _node(d, (a,), fn, "sq_euclid_rowpairs")

    def fn2(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * ad - g @ bd)
        gb = 2.0 * (g.sum(axis=0)[:, None] * bd - g.T @ ad)
        return ga, gb

    return _node(d, (a, b), fn2, "sq_euclid_rowpairs")


def neighbor_mean(x: Tensor, neighbors: Sequence[Sequence[int]]) -> Tensor:
    """Row ``v`` of the output is the mean of ``x`` over ``neighbors[v]``; zero when that list is empty.

    The per-node contributions are sorted by value before summing, so the result
    does not depend on how nodes or neighbour lists are ordered.
    """
    n, k = x.shape
    if len(neighbors) != n:
        raise TensorError(f"neighbor_mean: {len(neighbors)} neighbour lists for {n} rows")
    deg = np.array([len(nb) for nb in neighbors], dtype=np.int64)
    width = int(deg.max()) if n else 0
    out = np.zeros((n, k))
    if width:
        idx = np.zeros((n, width), dtype=np.int64)
        mask = np.zeros((n, width), dtype=bool)
        for v, nb in enumerate(neighbors):
            idx[v, : len(nb)] = nb
            mask[v, : len(nb)] = True
        gathered = np.where(mask[:, :, None], x.data[idx], 0.0)
        gathered.sort(axis=1)
        has = deg > 0
        out[has] = gathered[has].sum(axis=1) / deg[has, None]
    else:
        idx = mask = None

    def fn(g):
        if idx is None:
            return (np.zeros_like(x.data),)
        rows, slots = np.nonzero(mask)
        # d out[v] / d x[u] = 1 / deg(v) for every edge v <- u
        weight = csr_matrix((1.0 / deg[rows], (idx[rows, slots], rows)), shape=(n, n))
        return (weight @ g,)

    return _node(out, (x,), fn, "neighbor_mean")


# ---------------------------------------------------------------- fused margin ops

def margin_pair_loss(dist: Tensor, same: np.ndarray, margin: float) -> Tensor:
    """``sum(same * d + (1 - same) * max(0, margin - d))`` over every entry of ``dist``."""
    d = dist.data
    same = np.asarray(same, dtype=bool)
    hinge = np.maximum(margin - d, 0.0)
    value = np.where(same, d, hinge).sum()
    # d(pull)/dd = 1 ; d(push)/dd = -1 inside the margin
    local = np.where(same, 1.0, np.where(hinge > 0, -1.0, 0.0))
    return _node(np.array(value), (dist,), lambda g: (float(g) * local,), "margin_pair_loss")


def margin_similarity(dist: Tensor, margin: float) -> Tensor:
    """``clamp(1 - d / margin, 0, 1)`` elementwise."""
    d = dist.data
    raw = 1.0 - d / margin
    live = (raw > 0.0) & (raw < 1.0)
    return _node(np.clip(raw, 0.0, 1.0), (dist,), lambda g: (g * live * (-1.0 / margin),), "margin_similarity")


# ---------------------------------------------------------------- tape

def _topo(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if loss.data.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TensorError("backward on a detached graph (loss does not require grad)")
    if loss._consumed:
        raise TensorError("backward called twice on the same graph")
    if not np.all(np.isfinite(loss.data)):
        raise TensorError("non-finite loss")
    loss._consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            if not np.all(np.isfinite(node.grad)):
                raise TensorError("non-finite gradient" + (f" for {node.name}" if node.name else ""))
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is |a - n| / max(1, |a|, |n|) so near-zero entries compare absolutely.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + step
            up = fn().item()
            flat[k] = old - step
            down = fn().item()
            flat[k] = old
            num = (up - down) / (2 * step)
            a = analytic.reshape(-1)[k]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    for p in params:
        p.grad = None
    return worst


# ---------------------------------------------------------------- parameters and optimiser

class Parameter(Tensor):
    """A named leaf tensor plus its Adam moment buffers."""

    __slots__ = ("m", "v")

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise TensorError("parameter names must be unique")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def step(self) -> None:
        missing = [p.name for p in self.params if p.grad is None]
        if missing:
            raise TensorError(f"adam_step: missing gradients for {missing[:5]}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            p.m = b1 * p.m + (1 - b1) * g
            p.v = b2 * p.v + (1 - b2) * g * g
            p.data -= self.lr * (p.m / c1) / (np.sqrt(p.v / c2) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(opt: Adam) -> None:
    opt.step()


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"FPNCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Sequence[Parameter], tag: str = "") -> None:
    """Write parameters as: magic, u32 version, u32 tag length, tag, then per parameter
    u32 name length, name, u32 rank, u64 dims, little-endian float64 payload."""
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    t = tag.encode()
    buf += struct.pack("<I", len(t)) + t
    for p in params:
        name = p.name.encode()
        buf += struct.pack("<I", len(name)) + name
        buf += struct.pack("<I", p.data.ndim)
        buf += struct.pack(f"<{p.data.ndim}Q", *p.data.shape)
        buf += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    """Return ``(tag, {name: array})`` preserving file order."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise TensorError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise TensorError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (tlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    tag = raw[off:off + tlen].decode()
    off += tlen
    out: dict[str, np.ndarray] = {}
    try:
        while off < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", raw, off)
            off += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(DTYPE).reshape(dims)
            off += 8 * count
            out[name] = arr
    except (struct.error, ValueError) as exc:
        raise TensorError(f"{path}: truncated checkpoint") from exc
    return tag, out
