"""Rank-4 tensors with reverse-mode differentiation.

All network data is held as ``(batch, height, width, channels)`` arrays.
Weights reuse the same rank: convolution kernels are
``(out_channels, k, k, in_channels)`` and per-channel vectors (bias, gamma,
beta) are ``(1, 1, 1, channels)``.

Graph recording is per thread. Inside :func:`no_grad` no parents or backward
closures are kept, so intermediates are released as soon as the caller drops
them; this is what keeps tiled inference memory flat.
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .memtrack import TRACKER, UntrackedAllocation

_local = threading.local()
_dtype = np.float32
_strict = False
_live: "weakref.WeakSet[Tensor]" = weakref.WeakSet()


class BackwardError(RuntimeError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def default_dtype():
    return _dtype


@contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors.

    Used by gradient checks, which need float64 to make central differences
    meaningful at a 1e-3 step.
    """
    global _dtype
    previous = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = previous


def set_strict_tracking(enabled: bool) -> None:
    """Keep a registry of live tensors so :func:`verify_tracking` can audit the counter."""
    global _strict
    _strict = enabled


def verify_tracking() -> None:
    if not _strict:
        return
    live = sum(t.nbytes for t in list(_live))
    if live != TRACKER.current:
        raise UntrackedAllocation(
            f"live tensors hold {live} bytes but the tracker reports {TRACKER.current}"
        )


class Tensor:
    __slots__ = (
        "_data",
        "_grad",
        "_nbytes",
        "requires_grad",
        "name",
        "_parents",
        "_backward",
        "_consumed",
        "__weakref__",
    )

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: Sequence["Tensor"] = (),
        _backward: Callable | None = None,
    ):
        self._nbytes = 0
        self._grad = None
        arr = np.ascontiguousarray(data, dtype=_dtype)
        if arr.ndim != 4:
            raise ValueError(f"Tensor needs rank 4 data, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all tensor dims must be >= 1, got {arr.shape}")
        TRACKER.alloc(arr.nbytes)
        self._nbytes = arr.nbytes
        self._data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward
        self._consumed = False
        if _strict:
            _live.add(self)

    def __del__(self):
        nbytes = self._nbytes
        if self._grad is not None:
            nbytes += self._grad.nbytes
        if nbytes:
            TRACKER.free(nbytes)
            self._nbytes = 0
            self._grad = None

    # -- data access -------------------------------------------------------

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self._data.shape

    shape = dims

    @property
    def nbytes(self) -> int:
        return self._nbytes + (0 if self._grad is None else self._grad.nbytes)

    @property
    def grad(self) -> np.ndarray | None:
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray | None) -> None:
        if value is not None:
            value = np.ascontiguousarray(value, dtype=self._data.dtype)
            if value.shape != self._data.shape:
                raise ValueError(f"grad shape {value.shape} != data shape {self._data.shape}")
            TRACKER.alloc(value.nbytes)
        if self._grad is not None:
            TRACKER.free(self._grad.nbytes)
        self._grad = value

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self._data.copy())

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(dims={self.dims}, requires_grad={self.requires_grad})"

    # -- operators (thin wrappers over ops) --------------------------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op's output, recording the graph edge only when a parent needs it.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent
    and must not capture the output tensor, so the graph stays acyclic and
    reference counting frees intermediates deterministically.
    """
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad.

    The graph is released afterwards; a second call on the same loss raises.
    """
    if loss._consumed:
        raise BackwardError("backward() already ran on this graph; run a new forward pass")
    if loss._data.size != 1:
        raise BackwardError(f"backward() needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any tensor that requires grad")

    order = _topological(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss._data)}
    TRACKER.alloc(loss._data.nbytes)
    try:
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            TRACKER.free(g.nbytes)
            if node._backward is None:
                if node.grad is None:
                    node.grad = g
                else:
                    node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            del g
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    old = pending[key]
                    pending[key] = old + pg
                    TRACKER.alloc(pending[key].nbytes)
                    TRACKER.free(old.nbytes)
                else:
                    pending[key] = pg
                    TRACKER.alloc(pg.nbytes)
    finally:
        for leftover in pending.values():
            TRACKER.free(leftover.nbytes)
        pending.clear()
        for node in order:
            node._parents = ()
            node._backward = None
        loss._consumed = True


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
