"""Rank-4 tensors and a reverse-mode gradient tape.

Every value flowing through the network is an ``(N, C, H, W)`` array.  Channel
descriptors produced by the gates use ``H = W = 1``; fully connected weights are
stored as ``(C_out, C_in, 1, 1)`` so that every parameter is rank-4 as well.

Differentiation is tape based::

    with GradTape() as tape:
        tape.watch(w)
        loss = ops.sum_all(ops.conv2d(x, w, spec=spec))
    grads = backward(tape, loss.grad_id)
    grads[w.grad_id]

Ops record themselves on the active tape only when at least one input is
tracked by it, so evaluation outside a tape costs nothing extra.
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ids = itertools.count(1)
_active_tape: contextvars.ContextVar[Optional["GradTape"]] = contextvars.ContextVar(
    "active_tape", default=None
)


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable-by-convention 4-D array with an optional tape identifier."""

    __slots__ = ("data", "grad_id")

    def __init__(self, data, dtype=None, grad_id: Optional[int] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        if arr.ndim != 4:
            raise ValueError(f"Tensor must be rank-4 (N, C, H, W), got shape {arr.shape}")
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"Tensor dims must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad_id = grad_id

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def is_descriptor(self) -> bool:
        return self.data.shape[2] == 1 and self.data.shape[3] == 1

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad_id={self.grad_id})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(frozen=True)
class TapeNode:
    op: str
    out_id: int
    out_shape: tuple[int, ...]
    input_ids: tuple[Optional[int], ...]
    input_shapes: tuple[tuple[int, ...], ...]
    backward_fn: BackwardFn


@dataclass
class GradTape:
    """Ordered record of differentiable ops.

    Nodes are appended in execution order, which is a topological order of the
    dataflow graph, so replaying them in reverse is enough for backpropagation.
    """

    nodes: list[TapeNode] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)
    _tracked: set[int] = field(default_factory=set)
    _token: object = None

    def __enter__(self) -> "GradTape":
        if self._token is not None:
            raise TapeError("tape is already active")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)  # type: ignore[arg-type]
        self._token = None

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if t.grad_id is None:
                t.grad_id = next(_ids)
            self.leaves[t.grad_id] = t
            self._tracked.add(t.grad_id)

    def tracks(self, t: Tensor) -> bool:
        return t.grad_id is not None and t.grad_id in self._tracked

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> None:
        out.grad_id = next(_ids)
        self._tracked.add(out.grad_id)
        self.nodes.append(
            TapeNode(
                op=op,
                out_id=out.grad_id,
                out_shape=out.shape,
                input_ids=tuple(t.grad_id if self.tracks(t) else None for t in inputs),
                input_shapes=tuple(t.shape for t in inputs),
                backward_fn=backward_fn,
            )
        )


def active_tape() -> Optional[GradTape]:
    return _active_tape.get()


def record(op: str, out: Tensor, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Attach ``out`` to the active tape when any of ``inputs`` is tracked."""
    tape = _active_tape.get()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(op, out, inputs, backward_fn)
    return out


def backward(tape: GradTape, loss_id: Optional[int]) -> dict[int, Tensor]:
    """Reverse-mode sweep from a scalar ``(1, 1, 1, 1)`` output.

    Returns gradients for every watched leaf (zeros for leaves the loss does not
    reach).  The tape itself is not modified, so the sweep can be repeated.
    """
    if loss_id is None or loss_id not in tape._tracked:
        raise TapeError(f"unknown tensor id {loss_id!r}")
    if loss_id in tape.leaves:
        seed_shape = tape.leaves[loss_id].shape
        dtype = tape.leaves[loss_id].dtype
    else:
        node = next(n for n in tape.nodes if n.out_id == loss_id)
        seed_shape = node.out_shape
        dtype = None
    if seed_shape != (1, 1, 1, 1):
        raise TapeError(f"backward seed must be a (1, 1, 1, 1) tensor, got {seed_shape}")
    if dtype is None:
        dtype = next(iter(tape.leaves.values())).dtype if tape.leaves else DEFAULT_DTYPE

    grads: dict[int, np.ndarray] = {loss_id: np.ones((1, 1, 1, 1), dtype=dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for in_id, shape, ig in zip(node.input_ids, node.input_shapes, in_grads):
            if in_id is None or ig is None:
                continue
            if ig.shape != shape:
                raise TapeError(f"{node.op}: gradient shape {ig.shape} != input shape {shape}")
            grads[in_id] = grads[in_id] + ig if in_id in grads else ig
    return {
        i: Tensor(grads[i] if i in grads else np.zeros_like(t.data)) for i, t in tape.leaves.items()
    }
