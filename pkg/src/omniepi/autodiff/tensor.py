"""Dense tensor with a reverse-mode tape.

A ``Tensor`` wraps a numpy array. Operations in :mod:`omniepi.autodiff.ops`
produce new tensors and, when any operand requires a gradient, record the
parents and a closure mapping the output gradient to parent gradients.
``backward`` walks that record in reverse topological order.

Precision is a process-wide mode: ``"f64"`` (test mode: float64 plus
finite-input checks) or ``"f32"`` (train/infer). A graph never mixes the two.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, NumericError

_DTYPES = {"f32": np.float32, "f64": np.float64}


class _State:
    dtype = np.float32
    check_finite = False
    grad_enabled = True


_state = _State()


def get_dtype():
    return _state.dtype


def set_precision(mode: str) -> None:
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}, expected 'f32' or 'f64'")
    _state.dtype = _DTYPES[mode]
    _state.check_finite = mode == "f64"


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the default dtype (and test-mode checks)."""
    saved = (_state.dtype, _state.check_finite)
    set_precision(mode)
    try:
        yield
    finally:
        _state.dtype, _state.check_finite = saved


@contextlib.contextmanager
def no_grad():
    saved = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = saved


class Tensor:
    """Dense row-major array with optional gradient and producing node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state.dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        return _ops().add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __neg__(self):
        return _ops().mul(self, -1.0)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)

    def backward(self, params: Iterable[Tensor] | None = None, retain_graph: bool = False):
        backward(self, params=params, retain_graph=retain_graph)


class Parameter(Tensor):
    """Trainable leaf tensor carrying its hierarchical name."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _ops():
    from . import ops

    return ops


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _state.dtype
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Create an op output and, when needed, attach its node.

    ``backward_fn(grad)`` returns one gradient (or None) per parent.
    """
    dtypes = {p.data.dtype for p in parents}
    if len(dtypes) > 1:
        raise ContractError(f"{op}: mixed precision operands {sorted(str(d) for d in dtypes)}")
    if _state.check_finite:
        for p in parents:
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"{op}: non-finite input of shape {p.shape}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = op
    out.requires_grad = False
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Tensors listed in ``params`` that the loss does not reach get a zero
    gradient. The tape is released afterwards unless ``retain_graph``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params) if params is not None else []
    if loss.requires_grad:
        order = _topo_order(loss)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            else:
                node.grad = g.copy() if node.grad is None else node.grad + g
        if not retain_graph:
            for node in order:
                node._parents = ()
                node._backward = None
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
