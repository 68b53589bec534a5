"""Dense float tensors and the reverse-mode differentiation tape.

Design notes:

* A ``Tensor`` owns a numpy array that is frozen (read-only) after
  construction.  Shapes never change in place; reshaping returns a new
  handle.  The single sanctioned exception is a ``Parameter`` value,
  which the optimizer updates in place between forward passes.
* Differentiable ops (see :mod:`cardiacseg.ops`) record themselves on the
  innermost active :class:`Tape`.  With no active tape they are plain
  numpy computations, which is what inference uses.
* A tape is single-use: ``backward`` consumes it.  Distinct tapes on
  distinct threads are independent (the active-tape stack is
  thread-local).
"""

from __future__ import annotations

import threading
import warnings

import numpy as np

from .errors import DimensionError, StateError, UsageError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_CARRIER_DTYPES = _FLOAT_DTYPES + (np.dtype(np.uint8),)

_state = threading.local()
_default_dtype = [np.dtype(np.float32)]


def set_default_dtype(dtype) -> None:
    """Select the element type for newly created float tensors.

    Training normally runs in float32; gradient checks require float64
    because finite differences are unreliable in single precision.
    """
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise UsageError(f"unsupported element type {dtype!r}: use float32 or float64")
    _default_dtype[0] = dt


def get_default_dtype() -> np.dtype:
    return _default_dtype[0]


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    """The innermost tape opened on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional numeric array with an immutable shape.

    ``requires_grad`` marks tensors whose gradient should be accumulated
    during ``Tape.backward``; after a backward pass the gradient (a numpy
    array of identical shape) is published on ``.grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *, _own=False, _mutable=False):
        if isinstance(data, Tensor):
            data = data.data
        if _own and isinstance(data, np.ndarray) and dtype is None:
            arr = data
        else:
            arr = np.array(data, dtype=dtype)
            if dtype is None:
                if arr.dtype not in _CARRIER_DTYPES:
                    arr = arr.astype(get_default_dtype())
        if requires_grad and arr.dtype not in _FLOAT_DTYPES:
            raise UsageError("gradients are only tracked for float tensors")
        if not _mutable:
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False, mutable: bool = False) -> "Tensor":
        """Take ownership of ``arr`` without copying (internal fast path)."""
        return cls(arr, requires_grad=requires_grad, _own=True, _mutable=mutable)

    @classmethod
    def zeros(cls, shape, dtype=None, requires_grad: bool = False) -> "Tensor":
        return cls._wrap(np.zeros(shape, dtype=dtype or get_default_dtype()), requires_grad)

    @classmethod
    def ones(cls, shape, dtype=None, requires_grad: bool = False) -> "Tensor":
        return cls._wrap(np.ones(shape, dtype=dtype or get_default_dtype()), requires_grad)

    # -- views ----------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying (read-only) array."""
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(self.data.astype(dtype), requires_grad=False)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"


class _Entry:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of the differentiable ops executed under it.

    Operations append themselves in execution order, so inputs of an
    entry always precede it (topological order by construction).
    ``backward`` walks the record once in reverse and accumulates
    gradients keyed by tensor identity.
    """

    def __init__(self):
        self._entries: list[_Entry] = []
        self._grads: dict[int, np.ndarray] = {}
        self._output_ids: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise StateError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    @property
    def consumed(self) -> bool:
        return self._consumed

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self):
        """Read-only view of recorded entries (used by structural tests)."""
        return tuple(self._entries)

    def record(self, out: Tensor, inputs, backward_fn) -> None:
        if self._consumed:
            raise StateError("tape already consumed by backward()")
        self._entries.append(_Entry(out, tuple(inputs), backward_fn))
        self._output_ids.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(t) for every requires_grad ancestor of ``loss``.

        Returns a mapping from tensor to gradient and publishes the same
        arrays on each tensor's ``.grad``.  The tape is consumed.
        """
        if self._consumed:
            raise StateError("tape already consumed by backward()")
        if not isinstance(loss, Tensor):
            raise UsageError("backward() expects a Tensor loss")
        if loss.size != 1:
            raise UsageError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        if id(loss) not in self._output_ids:
            warnings.warn("loss was not computed on this tape; no gradients produced", stacklevel=2)
            return {}

        grads = self._grads
        grads[id(loss)] = np.ones_like(loss.data)
        for entry in reversed(self._entries):
            g_out = grads.get(id(entry.out))
            if g_out is None:
                continue
            in_grads = entry.backward_fn(g_out)
            for t, g in zip(entry.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                g = np.asarray(g, dtype=t.data.dtype)
                if g.shape != t.shape:
                    raise DimensionError(
                        f"backward produced gradient of shape {g.shape} for tensor of shape {t.shape}"
                    )
                acc = grads.get(id(t))
                grads[id(t)] = g if acc is None else acc + g

        result: dict[Tensor, np.ndarray] = {}
        seen: set[int] = set()
        for entry in self._entries:
            for t in entry.inputs + (entry.out,):
                if id(t) in seen or not t.requires_grad:
                    continue
                seen.add(id(t))
                g = grads.get(id(t))
                if g is not None:
                    t.grad = g
                    result[t] = g
        return result

    def grad(self, t: Tensor) -> np.ndarray | None:
        """Gradient accumulated for ``t``, or None (valid after backward)."""
        return self._grads.get(id(t))


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Functional alias for ``tape.backward(loss)``."""
    return tape.backward(loss)


class Parameter:
    """Learnable tensor plus its gradient buffer and Adam moment state.

    ``value``, ``grad``, ``m`` and ``v`` always share one shape.  The
    name is a dotted path unique within a network, assigned when the
    owning module is built.
    """

    __slots__ = ("value", "grad", "m", "v", "name")

    def __init__(self, data, name: str = "", dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else get_default_dtype())
        if arr.dtype not in _FLOAT_DTYPES:
            raise UsageError("parameters must be float32 or float64")
        self.value = Tensor._wrap(arr, requires_grad=True, mutable=True)
        self.grad = np.zeros_like(arr)
        self.m = np.zeros_like(arr)
        self.v = np.zeros_like(arr)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.grad.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {self.grad.shape}")
        self.grad += g

    def set_value(self, arr: np.ndarray) -> None:
        """Overwrite the parameter value in place (checkpoint load)."""
        arr = np.asarray(arr)
        if arr.shape != self.value.shape:
            raise DimensionError(f"cannot load shape {arr.shape} into parameter {self.name!r} of shape {self.value.shape}")
        self.value.data[...] = arr.astype(self.value.dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"
