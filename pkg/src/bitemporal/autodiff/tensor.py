"""Tape-based reverse-mode autodiff over numpy arrays.

Values are float32 unless a float64 array is passed in explicitly; scalar
losses are accumulated and returned in float64.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float32


class Tensor:
    """A value buffer with an optional gradient and a backward closure."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[Callable] = None):
        arr = np.asarray(value)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(DTYPE)
        self.value = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this tensor through the recorded graph."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.value)
        order = _topological(self)
        grads: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.value.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.accumulate(g)
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                pg = np.asarray(pg, dtype=parent.value.dtype)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    __radd__ = __add__
    __rmul__ = __mul__


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def tensor(value, requires_grad: bool = False) -> Tensor:
    return Tensor(value, requires_grad=requires_grad)


def make_node(value: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Create an op output; the closure is dropped when no parent needs grad."""
    if any(_needs_grad(p) for p in parents):
        return Tensor(value, _parents=tuple(parents), _backward=backward)
    return Tensor(value)


class ParamSet:
    """Named parameters, always iterated in lexicographic name order."""

    def __init__(self, params: Optional[Dict[str, Tensor]] = None):
        self._params: Dict[str, Tensor] = {}
        for name, t in (params or {}).items():
            self[name] = t

    def __setitem__(self, name: str, t: Tensor) -> None:
        if not isinstance(t, Tensor):
            t = Tensor(t)
        t.requires_grad = True
        t.name = name
        self._params[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return sorted(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def __iter__(self):
        return iter(self.names())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.value.size for t in self._params.values()))

    def copy(self) -> "ParamSet":
        return ParamSet({n: Tensor(t.value.copy()) for n, t in self.items()})

    def frozen(self) -> "ParamSet":
        """Same buffers, but excluded from gradient tracking."""
        out = ParamSet()
        for n, t in self.items():
            out._params[n] = Tensor(t.value, requires_grad=False, name=n)
        return out

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for n, t in self.items():
            h.update(n.encode())
            h.update(str(t.shape).encode())
            h.update(np.ascontiguousarray(t.value).tobytes())
        return h.hexdigest()
