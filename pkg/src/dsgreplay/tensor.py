"""Dense float64 tensors with reverse-mode autodiff, first-order optimizers and
a flat binary checkpoint format.

Every differentiable operation is registered in ``OPS`` and reachable through
:func:`forward_op`; the ``Tensor`` dunder methods are thin shortcuts onto the
same registry.  A node is recorded only when at least one input requires
gradients, and the graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand extents are incompatible with an op."""


class GraphError(RuntimeError):
    """Raised for misuse of the autodiff graph (non-scalar loss, detached loss)."""


class OptimizerError(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs and the closure mapping the output
    gradient to per-input gradients (``None`` for inputs that need none)."""

    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return forward_op("add", [self, _as_tensor(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return forward_op("sub", [self, _as_tensor(other)])

    def __rsub__(self, other):
        return forward_op("sub", [_as_tensor(other), self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return forward_op("scalar_mul", [self], {"scalar": float(other)})
        return forward_op("mul", [self, other])

    __rmul__ = __mul__

    def __neg__(self):
        return forward_op("scalar_mul", [self], {"scalar": -1.0})

    def __matmul__(self, other):
        return forward_op("matmul", [self, other])

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_op("reshape", [self], {"shape": shape})


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast extents {a} and {b}") from None


# ---------------------------------------------------------------------------
# op implementations: each returns (output array, backward closure)
# ---------------------------------------------------------------------------


def _op_add(a, b):
    _broadcast_shape("add", a.shape, b.shape)
    out = a.data + b.data
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _op_sub(a, b):
    _broadcast_shape("sub", a.shape, b.shape)
    out = a.data - b.data
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _op_mul(a, b):
    _broadcast_shape("mul", a.shape, b.shape)
    out = a.data * b.data
    return out, lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))


def _op_scalar_mul(a, scalar: float):
    return a.data * scalar, lambda g: (g * scalar,)


def _op_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible extents {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return out, lambda g: (g @ b.data.T, a.data.T @ g)


def _op_conv1d(x, w, b=None, stride: int = 1, padding: int = 0):
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected input (B,C,L) and kernel (O,C,K), got {x.shape} and {w.shape}")
    batch, channels, length = x.shape
    out_ch, in_ch, k = w.shape
    if in_ch != channels:
        raise ShapeError(f"conv1d: input has {channels} channels but kernel expects {in_ch}")
    if b is not None and b.shape != (out_ch,):
        raise ShapeError(f"conv1d: bias extents {b.shape} do not match {out_ch} output channels")
    padded_len = length + 2 * padding
    if padded_len < k:
        raise ShapeError(f"conv1d: padded length {padded_len} shorter than kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    # (B, C, L_out, K) -> (B, L_out, C*K)
    windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    l_out = windows.shape[2]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(batch * l_out, channels * k)
    wmat = w.data.reshape(out_ch, channels * k)
    out = (cols @ wmat.T).reshape(batch, l_out, out_ch).transpose(0, 2, 1)
    if b is not None:
        out = out + b.data[None, :, None]
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        g2 = g.transpose(0, 2, 1).reshape(batch * l_out, out_ch)
        dw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(batch, l_out, channels, k)
        dxp = np.zeros_like(xp)
        span = stride * (l_out - 1) + 1
        for j in range(k):
            dxp[:, :, j : j + span : stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        dx = dxp[:, :, padding : padding + length] if padding else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return out, backward_fn


def _op_relu(x):
    mask = x.data > 0
    return x.data * mask, lambda g: (g * mask,)


def _op_maxpool1d(x, kernel: int = 2, stride: int | None = None):
    stride = kernel if stride is None else stride
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d: expected (B,C,L), got {x.shape}")
    length = x.shape[2]
    if length < kernel:
        raise ShapeError(f"maxpool1d: length {length} shorter than kernel {kernel}")
    windows = sliding_window_view(x.data, kernel, axis=2)[:, :, ::stride, :]
    arg = windows.argmax(axis=3)
    out = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]
    l_out = out.shape[2]
    src = np.arange(l_out) * stride + arg  # (B, C, L_out) source index

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        bi, ci, _ = np.indices(g.shape, sparse=True)
        np.add.at(dx, (bi, ci, src), g)
        return (dx,)

    return out, backward_fn


def _op_global_avg_pool1d(x):
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool1d: expected (B,C,L), got {x.shape}")
    length = x.shape[2]
    out = x.data.mean(axis=2)
    return out, lambda g: (np.broadcast_to(g[:, :, None] / length, x.shape).copy(),)


def _op_batchnorm1d(x, gamma, beta, running_mean=None, running_var=None, train: bool = True,
                    momentum: float = 0.1, eps: float = 1e-5):
    if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm1d: input {x.shape} vs affine extents {gamma.shape}, {beta.shape}")
    if train:
        n = x.shape[0] * x.shape[2]
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2))
        dbeta = g.sum(axis=(0, 2))
        dxhat = g * gamma.data[None, :, None]
        if train:
            m = x.shape[0] * x.shape[2]
            dx = (inv_std[None, :, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            )
        else:
            dx = dxhat * inv_std[None, :, None]
        return dx, dgamma, dbeta

    return out, backward_fn


def _op_dropout(x, rate: float = 0.5, train: bool = True, rng: np.random.Generator | None = None):
    if not train or rate == 0.0:
        return x.data.copy(), lambda g: (g,)
    if rng is None:
        raise ValueError("dropout: train mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x.data * keep, lambda g: (g * keep,)


def _op_softmax_cross_entropy(logits, labels=None, reduction: str = "mean"):
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (B,K) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    batch, k = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: label outside [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    nll = -logp[np.arange(batch), labels]
    scale = 1.0 / batch if reduction == "mean" else 1.0
    out = np.asarray(nll.sum() * scale)

    def backward_fn(g):
        probs = np.exp(logp)
        probs[np.arange(batch), labels] -= 1.0
        return (probs * (g * scale),)

    return out, backward_fn


def _op_mse(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)
    return out, lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n)


def _op_concat(*tensors, axis: int = 0):
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: extents {[a.shape for a in arrays]} differ off axis {axis}") from None
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


def _op_slice(x, axis: int = 0, start: int = 0, stop: int | None = None):
    extent = x.shape[axis]
    stop = extent if stop is None else stop
    if not 0 <= start < stop <= extent:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for extent {extent} on axis {axis}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[index] = g
        return (dx,)

    return x.data[index].copy(), backward_fn


def _op_reshape(x, shape=()):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return out, lambda g: (g.reshape(x.shape),)


def _op_embedding_lookup(table, indices=None):
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index outside table of {table.shape[0]} rows")
    out = table.data[idx]

    def backward_fn(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return out, backward_fn


def _op_upsample1d(x, factor: int = 2):
    if x.ndim != 3:
        raise ShapeError(f"upsample1d: expected (B,C,L), got {x.shape}")
    out = np.repeat(x.data, factor, axis=2)
    b, c, length = x.shape
    return out, lambda g: (g.reshape(b, c, length, factor).sum(axis=3),)


OPS: dict[str, Callable] = {
    "add": _op_add,
    "sub": _op_sub,
    "mul": _op_mul,
    "scalar_mul": _op_scalar_mul,
    "matmul": _op_matmul,
    "conv1d": _op_conv1d,
    "relu": _op_relu,
    "maxpool1d": _op_maxpool1d,
    "global_avg_pool1d": _op_global_avg_pool1d,
    "batchnorm1d": _op_batchnorm1d,
    "dropout": _op_dropout,
    "softmax_cross_entropy": _op_softmax_cross_entropy,
    "mse": _op_mse,
    "concat": _op_concat,
    "slice": _op_slice,
    "reshape": _op_reshape,
    "embedding_lookup": _op_embedding_lookup,
    "upsample1d": _op_upsample1d,
}


def forward_op(op_kind: str, inputs: Sequence[Tensor | None], params: dict | None = None) -> Tensor:
    """Run ``op_kind`` on ``inputs`` and record it when any input needs grads.

    ``None`` entries in ``inputs`` stand for absent optional operands (e.g. a
    conv bias) and are passed through positionally.
    """
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op_kind {op_kind!r}") from None
    out_arr, backward_fn = fn(*inputs, **(params or {}))
    out = Tensor._wrap(np.asarray(out_arr, dtype=np.float64))
    live = tuple(t for t in inputs if t is not None)
    if _grad_enabled and any(t.requires_grad for t in live):
        out.requires_grad = True
        out.node = Node(op_kind, live, backward_fn)
    return out


# convenience wrappers ------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    return forward_op("conv1d", [x, w, b], {"stride": stride, "padding": padding})


def relu(x: Tensor) -> Tensor:
    return forward_op("relu", [x])


def maxpool1d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    return forward_op("maxpool1d", [x], {"kernel": kernel, "stride": stride})


def global_avg_pool1d(x: Tensor) -> Tensor:
    return forward_op("global_avg_pool1d", [x])


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    return forward_op("dropout", [x], {"rate": rate, "train": train, "rng": rng})


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    return forward_op("softmax_cross_entropy", [logits], {"labels": labels, "reduction": reduction})


def mse(pred: Tensor, target: Tensor) -> Tensor:
    return forward_op("mse", [pred, target])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return forward_op("concat", list(tensors), {"axis": axis})


def slice_(x: Tensor, axis: int, start: int, stop: int | None = None) -> Tensor:
    return forward_op("slice", [x], {"axis": axis, "start": start, "stop": stop})


def embedding_lookup(table: Tensor, indices) -> Tensor:
    return forward_op("embedding_lookup", [table], {"indices": indices})


def upsample1d(x: Tensor, factor: int = 2) -> Tensor:
    return forward_op("upsample1d", [x], {"factor": factor})


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """Recorded nodes reachable from a root, in execution (topological) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise GraphError("loss is detached: no recorded operation requires gradients")
    graph = Graph.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def optimizer_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """Update ``params`` in place. Grads are left for the caller to zero."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise OptimizerError(f"parameter {i} has no gradient")
    state.step_count += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for p in params:
            p.data -= lr * p.grad
        return
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, p in enumerate(params):
        m, v = state.moments.get(i) or (np.zeros_like(p.data), np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        state.moments[i] = (m, v)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RFTN"


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | Path, arrays: Sequence[np.ndarray]) -> None:
    """Write arrays as: magic, u32 count, then per array u32 rank, u32 extents,
    little-endian float64 payload."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(arrays))]
    for arr in arrays:
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an RFTN checkpoint")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = []
    for _ in range(count):
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        out.append(np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64))
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
