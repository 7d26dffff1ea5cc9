"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (encoders, fusion, training) runs on this engine.
Tensors wrap contiguous float64 numpy arrays; operations executed inside a
``Tape`` context record one node per call, in execution order, so a single
reverse sweep over the tape yields gradients for every trainable leaf.

The engine is deliberately small: only the operations the model needs, all
with hand-derived backward rules that are validated against central finite
differences in the test suite.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Parameters",
    "active_tape",
    "record",
    "matmul",
    "add",
    "mul",
    "scale",
    "relu",
    "softmax_rows",
    "layer_norm_rows",
    "cross_entropy_logits",
    "concat_rows",
    "mean_rows",
    "slice_rows",
    "embedding_lookup",
    "transpose",
    "reshape",
    "sum_all",
]


class Tensor:
    """A dense float64 array plus the flags the tape needs.

    ``data`` is always a C-contiguous float64 ndarray, so ``data.ravel()``
    is the flat row-major view of the values.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        # asarray with order="C", not ascontiguousarray: the latter would
        # promote 0-d (scalar) values to shape (1,)
        arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


# One active tape per thread; independent model instances on separate
# threads therefore never share recording state.
_LOCAL = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Execution-ordered record of operations for one forward pass.

    Nodes are appended in the order ops run, which is a topological order
    by construction. The backward sweep walks the list once in reverse,
    so gradient accumulation order is fixed and runs are reproducible.
    """

    def __init__(self):
        # each node: (out, inputs, backward_fn); backward_fn(grad_out)
        # returns one gradient array per input (entries for constant
        # inputs are ignored).
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _LOCAL.tape = None
        return False

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def add_node(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append((out, inputs, backward))
        self._tracked.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar loss for every requires_grad leaf on the tape."""
        if loss.data.shape != ():
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        accum: dict[int, np.ndarray] = {id(loss): np.ones(())}
        leaves: dict[Tensor, np.ndarray] = {}
        for out, inputs, backward in reversed(self.nodes):
            g = accum.get(id(out))
            if g is None:
                continue
            input_grads = backward(g)
            for t, gi in zip(inputs, input_grads):
                if not self.tracks(t):
                    continue
                prev = accum.get(id(t))
                accum[id(t)] = gi if prev is None else prev + gi
                if t.requires_grad:
                    leaves[t] = accum[id(t)]
        return leaves

    def gradients(self, loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
        """Like backward(), but aligned with ``wrt``; leaves off the path get zeros."""
        leaf_map = self.backward(loss)
        return [leaf_map.get(t, np.zeros(t.data.shape)) for t in wrt]


def record(out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Attach ``out`` to the active tape if any input is tracked."""
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.add_node(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D x 2-D, or 1-D row vector x 2-D."""
    if b.data.ndim != 2:
        raise ValueError(f"matmul: second operand must be 2-D, got {b.data.shape}")
    if a.data.ndim == 2:
        if a.data.shape[1] != b.data.shape[0]:
            raise ValueError(f"matmul: inner dimensions disagree {a.data.shape} x {b.data.shape}")
        out = Tensor(a.data @ b.data)

        def backward(g):
            return g @ b.data.T, a.data.T @ g

        return record(out, (a, b), backward)
    if a.data.ndim == 1:
        if a.data.shape[0] != b.data.shape[0]:
            raise ValueError(f"matmul: inner dimensions disagree {a.data.shape} x {b.data.shape}")
        out = Tensor(a.data @ b.data)

        def backward(g):
            return b.data @ g, np.outer(a.data, g)

        return record(out, (a, b), backward)
    raise ValueError(f"matmul: first operand must be 1-D or 2-D, got {a.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over the rows of a."""
    if a.data.shape == b.data.shape:
        out = Tensor(a.data + b.data)

        def backward(g):
            return g, g

        return record(out, (a, b), backward)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        out = Tensor(a.data + b.data)

        def backward(g):
            return g, g.sum(axis=0)

        return record(out, (a, b), backward)
    raise ValueError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul: shapes disagree {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data * b.data)

    def backward(g):
        return g * b.data, g * a.data

    return record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def backward(g):
        return (g * c,)

    return record(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    pos = a.data > 0.0

    def backward(g):
        return (g * pos,)

    return record(out, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, shift-stable per row."""
    if a.data.ndim != 2:
        raise ValueError(f"softmax_rows: expected 2-D input, got {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return record(out, (a,), backward)


def layer_norm_rows(a: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Per-row layer normalization with biased variance.

    Accepts a 2-D [m, d] tensor or a single 1-D [d] vector; ``gain`` and
    ``bias`` are 1-D [d].
    """
    if a.data.ndim not in (1, 2):
        raise ValueError(f"layer_norm_rows: expected 1-D or 2-D input, got {a.data.shape}")
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError("layer_norm_rows: gain/bias shape must match the feature dim")
    x = a.data
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor(gain.data * xhat + bias.data)

    def backward(g):
        gh = g * gain.data
        dx = (gh - gh.mean(axis=-1, keepdims=True)
              - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) * inv_std
        if a.data.ndim == 2:
            dgain = (g * xhat).sum(axis=0)
            dbias = g.sum(axis=0)
        else:
            dgain = g * xhat
            dbias = g
        return dx, dgain, dbias

    return record(out, (a, gain, bias), backward)


def cross_entropy_logits(logits: Tensor, answer: int) -> Tensor:
    """Negative log softmax probability of ``answer`` for a 1-D logit vector."""
    if logits.data.ndim != 1:
        raise ValueError(f"cross_entropy_logits: expected 1-D logits, got {logits.data.shape}")
    n = logits.data.shape[0]
    answer = int(answer)
    if not 0 <= answer < n:
        raise ValueError(f"cross_entropy_logits: answer {answer} out of range [0, {n})")
    z = logits.data
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    out = Tensor(np.asarray(lse - z[answer]))
    p = np.exp(z - lse)

    def backward(g):
        dz = p * g
        dz = dz.copy()
        dz[answer] -= g
        return (dz,)

    return record(out, (logits,), backward)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the first axis (2-D with equal column counts, or 1-D)."""
    if not tensors:
        raise ValueError("concat_rows: need at least one tensor")
    ndim = tensors[0].data.ndim
    if any(t.data.ndim != ndim for t in tensors):
        raise ValueError("concat_rows: mixed ranks")
    if ndim == 2:
        cols = {t.data.shape[1] for t in tensors}
        if len(cols) != 1:
            raise ValueError(f"concat_rows: column counts disagree: {sorted(cols)}")
    elif ndim != 1:
        raise ValueError("concat_rows: only 1-D or 2-D tensors")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
    sizes = [t.data.shape[0] for t in tensors]

    def backward(g):
        grads, offset = [], 0
        for s in sizes:
            grads.append(g[offset:offset + s])
            offset += s
        return tuple(grads)

    return record(out, tuple(tensors), backward)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the rows of a 2-D [n, d] tensor; returns a 1-D [d] vector."""
    if a.data.ndim != 2:
        raise ValueError(f"mean_rows: expected 2-D input, got {a.data.shape}")
    n = a.data.shape[0]
    if n == 0:
        raise ValueError("mean_rows: empty input")
    out = Tensor(a.data.mean(axis=0))

    def backward(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return record(out, (a,), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"slice_rows: expected 2-D input, got {a.data.shape}")
    if not 0 <= start <= stop <= a.data.shape[0]:
        raise ValueError(f"slice_rows: range [{start}, {stop}) outside {a.data.shape[0]} rows")
    out = Tensor(a.data[start:stop])

    def backward(g):
        da = np.zeros(a.data.shape)
        da[start:stop] = g
        return (da,)

    return record(out, (a,), backward)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table`` by integer id; gradients scatter-add back."""
    if table.data.ndim != 2:
        raise ValueError(f"embedding_lookup: table must be 2-D, got {table.data.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("embedding_lookup: ids must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError("embedding_lookup: id out of range")
    out = Tensor(table.data[idx])

    def backward(g):
        dt = np.zeros(table.data.shape)
        np.add.at(dt, idx, g)
        return (dt,)

    return record(out, (table,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-D input, got {a.data.shape}")
    out = Tensor(a.data.T)

    def backward(g):
        return (g.T,)

    return record(out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        return (g.reshape(a.data.shape),)

    return record(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum()))

    def backward(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return record(out, (a,), backward)


# ---------------------------------------------------------------------------
# trainable parameters
# ---------------------------------------------------------------------------


class Parameters:
    """Insertion-ordered registry of named trainable tensors.

    Block names are the unit of checkpointing and gradient checking, so
    every trainable array in a model must be created through ``new``.
    """

    def __init__(self):
        self._blocks: dict[str, Tensor] = {}

    def new(self, name: str, shape: Sequence[int], init: str, rng: np.random.Generator) -> Tensor:
        if name in self._blocks:
            raise ValueError(f"parameter block {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "linear":
            # fan_in is the first axis: weights are stored [in, out]
            bound = 1.0 / np.sqrt(max(shape[0], 1))
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "embed":
            data = rng.normal(0.0, 0.02, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self._blocks[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._blocks[name]

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def __len__(self) -> int:
        return len(self._blocks)

    def names(self) -> list[str]:
        return list(self._blocks)

    def tensors(self) -> list[Tensor]:
        return list(self._blocks.values())

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._blocks.items())
