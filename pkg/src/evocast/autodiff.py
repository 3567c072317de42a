"""Minimal dense reverse-mode tape over float64 numpy arrays.

Every operation takes and returns 2-d arrays (row vectors are (1, d),
scalars are (1, 1)) and registers its adjoint on the owning tape. A -inf
entry is the masking sentinel for masked_softmax; all other values must
stay finite. One tape serves one forward pass; backward replays records
in exact reverse order and accumulates leaf gradients into the store by
summation, so independent tapes may be reduced into one store.
"""

from __future__ import annotations

import math
import struct

import numpy as np


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("value", "tape", "requires_grad", "grad")

    def __init__(self, value, tape, requires_grad):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None

    def item(self) -> float:
        return float(self.value[0, 0])


class Param:
    """A named tensor with a paired gradient buffer and optimizer slots."""

    __slots__ = ("name", "value", "grad", "m", "v")

    def __init__(self, name, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        if self.value.ndim != 2:
            raise ShapeError(f"param {name}: expected 2-d tensor, got {self.value.shape}")
        self.grad = np.zeros_like(self.value)
        self.m = None
        self.v = None


def xavier_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


class ParameterStore:
    """Named parameters with unique names; gradient shape == value shape."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, value)
        self._params[name] = p
        return p

    def create(self, name: str, shape, rng: np.random.Generator) -> Param:
        return self.add(name, xavier_uniform(shape, rng))

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def params(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[:] = 0.0


CHECKPOINT_MAGIC = b"EVCK"
CHECKPOINT_VERSION = 1


def save_params(path, store: ParameterStore) -> None:
    """Write named tensors: shape headers plus little-endian float64 data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(store.names())))
        for name in store.names():
            p = store[name]
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.value.ndim))
            for d in p.value.shape:
                fh.write(struct.pack("<I", d))
            fh.write(p.value.astype("<f8").tobytes())


def load_params(path) -> ParameterStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    store = ParameterStore()
    offset = 12
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + nlen].decode()
        offset += nlen
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape))
        value = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        store.add(name, value.reshape(shape).copy())
    return store


class Tape:
    """Ordered op record; backward visits records in exact reverse order."""

    def __init__(self):
        self._records: list[tuple[Node, tuple[Node, ...], object]] = []
        self._leaves: list[tuple[Node, Param]] = []
        self._leaf_cache: dict[int, Node] = {}

    def constant(self, value) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"constant: expected 2-d array, got {arr.shape}")
        return Node(arr, self, requires_grad=False)

    def leaf(self, param: Param) -> Node:
        node = self._leaf_cache.get(id(param))
        if node is None:
            node = Node(param.value, self, requires_grad=True)
            self._leaf_cache[id(param)] = node
            self._leaves.append((node, param))
        return node

    def _record(self, value, inputs, backfn) -> Node:
        needs = any(x.requires_grad for x in inputs)
        out = Node(value, self, requires_grad=needs)
        if needs:
            self._records.append((out, tuple(inputs), backfn))
        return out

    def backward(self, out: Node) -> None:
        """Accumulate d(out)/d(leaf) into each leaf param's grad buffer."""
        if out.tape is not self:
            raise ValueError("node does not belong to this tape")
        if out.value.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar, got {out.value.shape}")
        out.grad = np.ones((1, 1))
        for node, inputs, backfn in reversed(self._records):
            g = node.grad
            if g is None:
                continue
            for inp, gi in zip(inputs, backfn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.value)
                inp.grad += gi
        for node, param in self._leaves:
            if node.grad is not None:
                param.grad += node.grad


def _same_tape(*nodes) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("operands belong to different tapes")
    return tape


def matmul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value

    def backfn(g):
        return g @ bv.T, av.T @ g

    return tape._record(av @ bv, (a, b), backfn)


def add(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: {a.value.shape} vs {b.value.shape}")
    return tape._record(a.value + b.value, (a, b), lambda g: (g, g))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape._record(a.value * c, (a,), lambda g: (g * c,))


def transpose(a: Node) -> Node:
    return a.tape._record(a.value.T.copy(), (a,), lambda g: (g.T,))


def concat_cols(nodes) -> Node:
    nodes = list(nodes)
    tape = _same_tape(*nodes)
    rows = nodes[0].value.shape[0]
    for n in nodes:
        if n.value.shape[0] != rows:
            raise ShapeError(f"concat_cols: row mismatch {n.value.shape}")
    widths = [n.value.shape[1] for n in nodes]
    offsets = np.cumsum([0] + widths)

    def backfn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(nodes)))

    return tape._record(np.concatenate([n.value for n in nodes], axis=1), nodes, backfn)


def concat_rows(nodes) -> Node:
    nodes = list(nodes)
    tape = _same_tape(*nodes)
    cols = nodes[0].value.shape[1]
    for n in nodes:
        if n.value.shape[1] != cols:
            raise ShapeError(f"concat_rows: column mismatch {n.value.shape}")
    heights = [n.value.shape[0] for n in nodes]
    offsets = np.cumsum([0] + heights)

    def backfn(g):
        return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(nodes)))

    return tape._record(np.concatenate([n.value for n in nodes], axis=0), nodes, backfn)


def add_outer(col: Node, row: Node) -> Node:
    """Outer sum of two column vectors: out[i, j] = col[i] + row[j]."""
    tape = _same_tape(col, row)
    if col.value.shape[1] != 1 or row.value.shape[1] != 1:
        raise ShapeError(
            f"add_outer: need column vectors, got {col.value.shape}, {row.value.shape}"
        )

    def backfn(g):
        return g.sum(axis=1, keepdims=True), g.sum(axis=0)[:, None]

    return tape._record(col.value + row.value.T, (col, row), backfn)


def gather_rows(a: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.value.shape

    def backfn(g):
        da = np.zeros(shape)
        np.add.at(da, idx, g)
        return (da,)

    return a.tape._record(a.value[idx].copy(), (a,), backfn)


def slice_rows(a: Node, start: int, stop: int) -> Node:
    shape = a.value.shape

    def backfn(g):
        da = np.zeros(shape)
        da[start:stop] = g
        return (da,)

    return a.tape._record(a.value[start:stop].copy(), (a,), backfn)


def masked_softmax(a: Node) -> Node:
    """Row-wise softmax treating -inf entries as excluded (weight 0).

    A fully masked row is an error: it means an empty attention context.
    """
    x = a.value
    if np.isnan(x).any():
        raise ValueError("masked_softmax: NaN input")
    unmasked = x != -np.inf
    if not unmasked.any(axis=1).all():
        bad = int(np.flatnonzero(~unmasked.any(axis=1))[0])
        raise ValueError(f"masked_softmax: row {bad} is fully masked")
    rowmax = np.where(unmasked, x, -np.inf).max(axis=1, keepdims=True)
    y = np.exp(x - rowmax)
    y /= y.sum(axis=1, keepdims=True)

    def backfn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return a.tape._record(y, (a,), backfn)


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    x = a.value
    pos = x > 0

    def backfn(g):
        return (g * np.where(pos, 1.0, slope),)

    return a.tape._record(np.where(pos, x, slope * x), (a,), backfn)


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return a.tape._record(y, (a,), lambda g: (g * (1.0 - y * y),))


def hinge(a: Node) -> Node:
    """Elementwise max(0, x)."""
    pos = a.value > 0
    return a.tape._record(
        np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,)
    )


def mean_rows(a: Node) -> Node:
    n = a.value.shape[0]
    return a.tape._record(
        a.value.mean(axis=0, keepdims=True), (a,),
        lambda g: (np.repeat(g / n, n, axis=0),),
    )


def inner(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"inner: {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    val = np.array([[float((av * bv).sum())]])

    def backfn(g):
        s = float(g[0, 0])
        return s * bv, s * av

    return tape._record(val, (a, b), backfn)


def l2_sq(a: Node) -> Node:
    av = a.value
    val = np.array([[float((av * av).sum())]])
    return a.tape._record(val, (a,), lambda g: (2.0 * float(g[0, 0]) * av,))


def sum_all(a: Node) -> Node:
    shape = a.value.shape
    val = np.array([[float(a.value.sum())]])
    return a.tape._record(
        val, (a,), lambda g: (np.full(shape, float(g[0, 0])),)
    )


ACTIVATIONS = {
    "tanh": tanh,
    "leaky_relu": leaky_relu,
    "identity": lambda a: a,
}


def grad_check(f, store: ParameterStore, h: float = 1e-6, names=None) -> float:
    """Max relative error between tape gradients and central differences.

    f rebuilds its forward pass from the store on every call and returns a
    scalar Node; it must be deterministic.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    names = list(names if names is not None else store.names())
    store.zero_grad()
    out = f()
    if not np.isfinite(out.value).all():
        raise ValueError("grad_check: non-finite objective")
    out.tape.backward(out)
    analytic = {nm: store[nm].grad.copy() for nm in names}

    worst = 0.0
    for nm in names:
        flat = store[nm].value.reshape(-1)
        gflat = analytic[nm].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            rel = abs(gflat[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, rel)
    return worst
