"""Core tensor type and the recording tape for reverse-mode differentiation."""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]


class NonFiniteError(FloatingPointError):
    """Raised when a tensor holds NaN or Inf where finite values are required."""


class TapeError(RuntimeError):
    """Raised on misuse of the tape, e.g. backward from a disconnected node."""


_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype() -> np.dtype:
    return np.dtype(_get("dtype", np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype (e.g. float64 for gradient checks)."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: Tuple["Tensor", ...], output: "Tensor", backward: BackwardFn):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations.

    Records are appended as ops execute, so inputs always precede the ops that
    consume them. A tape is consumed by exactly one :func:`backward` call and is
    owned by the thread that created it.
    """

    def __init__(self) -> None:
        self.records: List[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs, output, backward) -> None:
        output._tape = self
        output._index = len(self.records)
        self.records.append(_Record(tuple(inputs), output, backward))

    def clear(self) -> None:
        for rec in self.records:
            rec.output._tape = None
            rec.output._gbuf = None
        self.records = []


def current_tape() -> Tape:
    tape = _get("tape", None)
    if tape is None:
        tape = Tape()
        _state.tape = tape
    return tape


def reset_tape() -> None:
    """Drop any records left over from forward passes that were never differentiated."""
    current_tape().clear()


class Tensor:
    """Dense float array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._index = -1
        self._gbuf: Optional[np.ndarray] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar; implementations live in functional ------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __pow__(self, exponent: float):
        from . import functional as F
        return F.power(self, exponent)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def astype(self, dtype):
        from . import functional as F
        return F.astype(self, dtype)

    def backward(self) -> None:
        backward(self)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if dtype is None:
        dtype = get_default_dtype()
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result and put it on the tape if any input needs a gradient."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and is_grad_enabled())
    if out.requires_grad:
        current_tape().record(inputs, out, backward_fn)
    return out


def check_finite(t: Tensor, name: str = "tensor") -> Tensor:
    """Validation op: raise :class:`NonFiniteError` if ``t`` holds NaN/Inf."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteError(f"{name} has {bad} non-finite element(s)")
    return t


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    The tape that recorded ``loss`` is replayed once in reverse and then cleared;
    calling backward twice on the same graph is an error.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._index < 0 or loss._index >= len(tape.records) \
            or tape.records[loss._index].output is not loss:
        raise TapeError("loss is not connected to a tape (no recorded op produced it)")

    records = tape.records
    loss._gbuf = np.ones_like(loss.data)
    for rec in reversed(records[: loss._index + 1]):
        g = rec.output._gbuf
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in rec.inputs)
        in_grads = rec.backward(g, needs)
        rec.output._gbuf = None
        for inp, gi, need in zip(rec.inputs, in_grads, needs):
            if not need or gi is None:
                continue
            if gi.shape != inp.shape:
                raise TapeError(
                    f"internal gradient shape {gi.shape} does not match input {inp.shape}"
                )
            gi = gi.astype(inp.dtype, copy=False)
            if inp._tape is tape:
                inp._gbuf = gi.copy() if inp._gbuf is None else inp._gbuf + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    tape.clear()
