"""Dense float64 tensors with a reverse-mode differentiation tape.

Primitives record themselves on the tape that is active in the current
context (`with Tape() as tape:`). Outside a tape they just compute, which is
what evaluation and the sparse fast path rely on.
"""

import struct
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
MASK_FILL = -1e9

_active_tape: ContextVar["Tape | None"] = ContextVar("active_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "tape_id", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class TapeNode:
    op: str
    output: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive calls; parents always precede children."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def tracks(self, tensor: Tensor) -> bool:
        return tensor.requires_grad or tensor._tape is self

    def record(self, op: str, output: Tensor, parents: tuple[Tensor, ...], backward) -> None:
        output.tape_id = len(self.nodes)
        output._tape = self
        self.nodes.append(TapeNode(op=op, output=output, parents=parents, backward=backward))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar `loss` for each tensor in `wrt` (zeros when unreachable)."""

        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss; received shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.tape_id + 1]):
            upstream = grads.get(id(node.output))
            if upstream is None:
                continue
            for parent, grad in zip(node.parents, node.backward(upstream)):
                if grad is None or not self.tracks(parent):
                    continue
                key = id(parent)
                grads[key] = grads[key] + grad if key in grads else grad
        return [grads.get(id(tensor), np.zeros_like(tensor.data)) for tensor in wrt]


def _emit(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and any(tape.tracks(parent) for parent in parents):
        tape.record(op, out, parents, backward)
    return out


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# Elementwise -----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; `b` may also be a row vector broadcast over the rows of a 2-D `a`."""

    a, b = _as_tensor(a), _as_tensor(b)
    row_broadcast = a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]
    if a.shape != b.shape and not row_broadcast:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        return g, (g.sum(axis=0) if row_broadcast else g)

    return _emit("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    a = _as_tensor(a)
    return _emit("scale", a.data * factor, (a,), lambda g: (g * factor,))


def _relu_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _emit("relu", np.maximum(a.data, 0.0), (a,), lambda g: (_relu_grad(a.data, g),))


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, float(g)),))


# Linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose needs a matrix; received shape {a.shape}")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""

    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise ValueError(f"concat shape mismatch: {t.shape[:-1]} vs {lead}")
    sizes = [t.shape[-1] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=-1))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=-1), tensors, backward)


def take_rows(a: Tensor, rows: Sequence[int] | np.ndarray) -> Tensor:
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, rows, g)
        return (grad,)

    return _emit("take_rows", a.data[rows], (a,), backward)


# Lookups -----------------------------------------------------------------------


def embedding_lookup(table: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    """Row gather; the backward pass scatter-adds into the table."""

    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding id out of range for table with {table.shape[0]} rows")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _emit("embedding", table.data[ids], (table,), backward)


def lookup_scalar(
    table: Tensor,
    ids: np.ndarray,
    column: int,
    where: np.ndarray | None = None,
) -> Tensor:
    """out[...] = table[ids[...], column], zeroed where `where` is False."""

    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"lookup id out of range for table with {table.shape[0]} rows")
    if not 0 <= column < table.shape[1]:
        raise ValueError(f"column {column} out of range for table with {table.shape[1]} columns")
    values = table.data[ids, column]
    if where is not None:
        values = np.where(where, values, 0.0)

    def backward(g):
        grad = np.zeros_like(table.data)
        selected = g if where is None else np.where(where, g, 0.0)
        np.add.at(grad[:, column], ids.ravel(), selected.ravel())
        return (grad,)

    return _emit("lookup_scalar", values, (table,), backward)


# Normalisation and losses --------------------------------------------------------


def masked_row_softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax restricted to the in-mask support; out-of-mask entries are exactly 0.

    The row max is taken over in-mask entries only and out-of-mask entries
    never enter the exponential, so no -inf arithmetic reaches the output.
    """

    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"masked_row_softmax needs a matrix; received shape {logits.shape}")
    x = logits.data
    if mask is None:
        shifted = x - x.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ValueError(f"mask shape {mask.shape} does not match logits {x.shape}")
        if not mask.any(axis=1).all():
            raise RuntimeError("focal mask has an empty row; self-inclusion invariant violated")
        row_max = np.where(mask, x, -np.inf).max(axis=1, keepdims=True)
        exp = np.exp(np.where(mask, x - row_max, -np.inf))
    probs = exp / exp.sum(axis=1, keepdims=True)

    def backward(g):
        return (probs * (g - (g * probs).sum(axis=1, keepdims=True)),)

    return _emit("masked_row_softmax", probs, (logits,), backward)


def masked_row_softmax_reference(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Forward-only dense variant adding a -1e9 bias off the mask; for cross-checks."""

    x = np.asarray(logits, dtype=np.float64)
    if mask is not None:
        x = x + np.where(np.asarray(mask, dtype=bool), 0.0, MASK_FILL)
    exp = np.exp(x - x.max(axis=1, keepdims=True))
    return exp / exp.sum(axis=1, keepdims=True)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"layer_norm shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=1, keepdims=True) + eps)
    normalized = centered * inv_std

    def backward(g):
        d_norm = g * gamma.data
        d_x = inv_std * (
            d_norm
            - d_norm.mean(axis=1, keepdims=True)
            - normalized * (d_norm * normalized).mean(axis=1, keepdims=True)
        )
        return d_x, (g * normalized).sum(axis=0), g.sum(axis=0)

    return _emit("layer_norm", normalized * gamma.data + beta.data, (x, gamma, beta), backward)


def cross_entropy(
    logits: Tensor,
    labels: Sequence[int] | np.ndarray,
    class_weights: Sequence[float] | np.ndarray | None = None,
) -> Tensor:
    """Weighted mean of -log softmax(logits)[label]; per-node weights normalized to mean 1."""

    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels has shape {labels.shape}; expected ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    weights = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (c,):
        raise ValueError(f"class_weights has shape {weights.shape}; expected ({c},)")

    node_weights = weights[labels]
    node_weights = node_weights / node_weights.mean()
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -(node_weights * log_probs[rows, labels]).mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (float(g) * grad * node_weights[:, None] / n,)

    return _emit("cross_entropy", np.asarray(loss), (logits,), backward)


# Checkpoint container ------------------------------------------------------------

CHECKPOINT_MAGIC = b"FFGTCKPT"
CHECKPOINT_VERSION = 1


def encode_checkpoint(records: Iterable[tuple[str, np.ndarray]]) -> bytes:
    """Little-endian container: magic, version, count, then (name, shape, float64 data) records."""

    records = list(records)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(records))]
    for name, values in records:
        values = np.asarray(values, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        chunks.append(values.astype("<f8").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> list[tuple[str, np.ndarray]]:
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    offset = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", blob, offset)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset += 8

    records = []
    for _ in range(count):
        (name_length,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_length].decode("utf-8")
        offset += name_length
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
        offset += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * size
        records.append((name, values))
    if offset != len(blob):
        raise ValueError(f"trailing bytes in checkpoint ({len(blob) - offset})")
    return records
