"""Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays and record the operations that produced them.
Calling ``backward`` on a scalar result walks the recorded graph in reverse
topological order and accumulates gradients into every leaf that requested
them.  Gradients are summed across uses; callers zero them between steps.

64-bit floats are the default so that finite-difference checks have enough
headroom; 32-bit can be selected per tensor for speed.
"""

from __future__ import annotations

import itertools
import struct
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_id_counter = itertools.count()


class Tensor:
    """A dense n-dimensional value with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._id = next(_id_counter)

    # -- construction -------------------------------------------------

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"],
                grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> "Tensor":
        """Create a non-leaf tensor produced by a differentiable op."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
        out._id = next(_id_counter)
        return out

    # -- basic properties ---------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, where: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {where}")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    # -- elementwise ops ----------------------------------------------

    @staticmethod
    def _coerce(other, like: "Tensor") -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=like.data.dtype))

    @staticmethod
    def _check_broadcast(a: "Tensor", b: "Tensor"):
        # equal shapes, scalar operand, or plain numpy-compatible broadcast
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError as exc:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from exc

    @staticmethod
    def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
        """Sum a broadcast gradient back down to the original shape."""
        if grad.shape == shape:
            return grad
        extra = grad.ndim - len(shape)
        if extra > 0:
            grad = grad.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
        if axes:
            grad = grad.sum(axis=axes, keepdims=True)
        return grad

    def __add__(self, other):
        other = Tensor._coerce(other, self)
        Tensor._check_broadcast(self, other)
        data = self.data + other.data
        return Tensor.from_op(data, (self, other), lambda g: (
            Tensor._unbroadcast(g, self.shape),
            Tensor._unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._coerce(other, self)
        Tensor._check_broadcast(self, other)
        data = self.data - other.data
        return Tensor.from_op(data, (self, other), lambda g: (
            Tensor._unbroadcast(g, self.shape),
            Tensor._unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return Tensor._coerce(other, self) - self

    def __mul__(self, other):
        other = Tensor._coerce(other, self)
        Tensor._check_broadcast(self, other)
        data = self.data * other.data
        return Tensor.from_op(data, (self, other), lambda g: (
            Tensor._unbroadcast(g * other.data, self.shape),
            Tensor._unbroadcast(g * self.data, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other, self)
        Tensor._check_broadcast(self, other)
        if np.any(other.data == 0):
            raise ZeroDivisionError("division by zero in tensor div")
        inv = 1.0 / other.data
        data = self.data * inv
        return Tensor.from_op(data, (self, other), lambda g: (
            Tensor._unbroadcast(g * inv, self.shape),
            Tensor._unbroadcast(-g * data * inv, other.shape)))

    def __rtruediv__(self, other):
        return Tensor._coerce(other, self) / self

    def __neg__(self):
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if isinstance(p, Tensor):
            return tpow(self, p)
        p = float(p)
        data = self.data ** p
        return Tensor.from_op(data, (self,), lambda g: (g * p * self.data ** (p - 1.0),))

    def exp(self):
        data = np.exp(self.data)
        return Tensor.from_op(data, (self,), lambda g: (g * data,))

    def log(self):
        if np.any(self.data <= 0):
            raise ValueError("log of non-positive value")
        return Tensor.from_op(np.log(self.data), (self,), lambda g: (g / self.data,))

    def abs(self):
        # subgradient at 0 is 0
        return Tensor.from_op(np.abs(self.data), (self,),
                              lambda g: (g * np.sign(self.data),))

    def clamp_min(self, lo: float):
        # subgradient at the kink is 0
        data = np.maximum(self.data, lo)
        mask = (self.data > lo).astype(self.data.dtype)
        return Tensor.from_op(data, (self,), lambda g: (g * mask,))

    def sqrt(self):
        if np.any(self.data < 0):
            raise ValueError("sqrt of negative value")
        data = np.sqrt(self.data)
        return Tensor.from_op(data, (self,), lambda g: (g * 0.5 / np.maximum(data, 1e-300),))

    # -- reductions ---------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).astype(self.data.dtype),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, self.shape).astype(self.data.dtype),)

        return Tensor.from_op(np.asarray(data), (self,), grad_fn)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- linear algebra -----------------------------------------------

    def __matmul__(self, other):
        return matmul(self, other)

    # -- structural ops -----------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        if int(np.prod(shape)) != self.size and -1 not in shape:
            raise ValueError(f"cannot reshape {self.shape} into {shape}")
        old = self.shape
        return Tensor.from_op(self.data.reshape(shape), (self,),
                              lambda g: (g.reshape(old),))

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor.from_op(np.ascontiguousarray(self.data.transpose(axes)), (self,),
                              lambda g: (g.transpose(tuple(inv)),))

    @property
    def T(self):
        if self.ndim != 2:
            raise ValueError("T expects a 2-D tensor")
        return self.permute(1, 0)

    def __getitem__(self, key):
        data = self.data[key]

        def grad_fn(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            return (full,)

        return Tensor.from_op(np.ascontiguousarray(data), (self,), grad_fn)

    # -- backward -----------------------------------------------------

    def backward(self, seed: Optional[np.ndarray] = None):
        backward(Tape.from_root(self), self, seed)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors with inner extents equal."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extent mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    return Tensor.from_op(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; other extents must agree."""
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref):
            raise ValueError("concat rank mismatch")
        for ax, (s, r) in enumerate(zip(t.shape, ref)):
            if ax != axis and s != r:
                raise ValueError(f"concat extent mismatch on axis {ax}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor.from_op(data, tuple(tensors), grad_fn)


def tpow(a: Tensor, b: Tensor) -> Tensor:
    """a ** b with gradients for both operands; requires a > 0."""
    if np.any(a.data <= 0):
        raise ValueError("tpow base must be positive")
    Tensor._check_broadcast(a, b)
    data = a.data ** b.data
    return Tensor.from_op(data, (a, b), lambda g: (
        Tensor._unbroadcast(g * b.data * a.data ** (b.data - 1.0), a.shape),
        Tensor._unbroadcast(g * data * np.log(a.data), b.shape)))


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch table for the primitive elementwise operations."""
    unary = {"neg": Tensor.__neg__, "exp": Tensor.exp, "log": Tensor.log,
             "abs": Tensor.abs}
    binary = {"add": Tensor.__add__, "sub": Tensor.__sub__,
              "mul": Tensor.__mul__, "div": Tensor.__truediv__}
    if op in unary:
        return unary[op](a)
    if op == "clamp_min":
        return a.clamp_min(float(b.data) if isinstance(b, Tensor) else float(b))
    if op in binary:
        return binary[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


class Tape:
    """Ordered record of the graph below a root, parents before children."""

    def __init__(self, nodes: Sequence[Tensor], root: Tensor):
        self.nodes = list(nodes)
        self.outputs = [root._id]

    @staticmethod
    def from_root(root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if node._id in seen:
                continue
            seen.add(node._id)
            stack.append((node, True))
            for p in node._parents:
                if p._id not in seen:
                    stack.append((p, False))
        return Tape(order, root)


def backward(tape: Tape, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
    """Reverse accumulation over a tape; leaves receive summed gradients."""
    if not any(n is root for n in tape.nodes):
        raise ValueError("root is not on the tape")
    if seed is None:
        if root.size != 1:
            raise ValueError("backward on a non-scalar root requires a seed gradient")
        seed = np.ones_like(root.data)
    seed = np.asarray(seed, dtype=root.data.dtype)
    if seed.shape != root.data.shape:
        seed = seed.reshape(root.data.shape)

    adjoint: dict[int, np.ndarray] = {root._id: seed}
    for node in reversed(tape.nodes):
        g = adjoint.pop(node._id, None)
        if g is None:
            continue
        if node.requires_grad and node._grad_fn is None:
            # leaf: accumulate
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._grad_fn is not None:
            parent_grads = node._grad_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._id in adjoint:
                    adjoint[p._id] = adjoint[p._id] + pg
                else:
                    adjoint[p._id] = pg


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must build a scalar graph from ``x`` deterministically.  The error
    is ``|analytic - numeric| / max(1, |numeric|)`` maximised over coordinates.
    With ``max_coords`` set, a random subset of coordinates is differenced
    (the analytic gradient is still computed in full).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite forward value in grad_check")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    idx = np.arange(x.size)
    if max_coords is not None and max_coords < x.size:
        idx = np.random.default_rng(seed).choice(x.size, size=max_coords, replace=False)

    flat = x.data.ravel()
    aflat = analytic.ravel()
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(x.data, dtype=np.float64)).item()
        flat[i] = orig - eps
        lo = f(Tensor(x.data, dtype=np.float64)).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError("non-finite value in finite differencing")
        num = (hi - lo) / (2.0 * eps)
        worst = max(worst, abs(aflat[i] - num) / max(1.0, abs(num)))
    return float(worst)


# -- TNSR/1 persistence ----------------------------------------------

_TNSR_MAGIC = b"TNSR"
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_FOR = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def save_tensor(path, t) -> None:
    """Write an array in the TNSR/1 binary format (little-endian)."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in _CODE_FOR:
        arr = arr.astype(np.float64)
    code = _CODE_FOR[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(_TNSR_MAGIC)
        fh.write(struct.pack("<BB", 1, code))
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a TNSR/1 file back into a numpy array."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _TNSR_MAGIC:
            raise ValueError(f"not a TNSR file: {path}")
        version, code = struct.unpack("<BB", fh.read(2))
        if version != 1:
            raise ValueError(f"unsupported TNSR version {version}")
        if code not in _DTYPE_CODES:
            raise ValueError(f"unknown dtype code {code}")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        payload = fh.read()
    arr = np.frombuffer(payload, dtype=_DTYPE_CODES[code]).reshape(shape)
    return arr.copy()
