"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation used by the encoder-decoder model and the
PEFT methods lives here. Tensors wrap a NumPy array; operations record a
backward closure on their output whenever at least one input needs a
gradient. ``backward`` walks the recorded graph once in reverse
topological order and accumulates into ``.grad`` of *trainable* leaves
only, so freezing a parameter is just ``trainable=False``.

Storage is 32-bit by default. ``precision("float64")`` switches newly
created tensors to 64-bit, which is what ``grad_check`` relies on.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "ComputationGraph",
    "precision",
    "get_dtype",
    "no_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "kron",
    "row_scale",
    "softmax_rows",
    "relu",
    "sigmoid",
    "rms_norm",
    "embedding_lookup",
    "concat_rows",
    "concat",
    "cross_entropy_from_logits",
    "reshape",
    "transpose",
    "expand",
    "sum",
    "mean",
    "backward",
    "grad_check",
]


class _Mode(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True


_mode = _Mode()


def get_dtype():
    return _mode.dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily set the dtype of newly created tensors ("float32"/"float64")."""
    dtype = {"float32": np.float32, "float64": np.float64}[name]
    prev = _mode.dtype
    _mode.dtype = dtype
    try:
        yield
    finally:
        _mode.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (used for decoding and evaluation)."""
    prev = _mode.grad_enabled
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = prev


class Tensor:
    """N-d array with an optional gradient buffer.

    Parameters
    ----------
    data : array-like
        Values; copied into a C-contiguous array of the active dtype.
    trainable : bool
        Whether ``backward`` should accumulate into ``grad``.
    name : str, optional
        Hierarchical parameter name, e.g. ``enc.0.ffn.w1``.
    """

    __slots__ = ("data", "grad", "trainable", "name", "_parents", "_backward", "_needs_grad", "__weakref__")

    def __init__(self, data, trainable: bool = False, name: str | None = None, dtype=None):
        self.data = np.array(data, dtype=dtype or _mode.dtype, copy=True, order="C")
        self.grad = None
        self.trainable = bool(trainable)
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._needs_grad = self.trainable

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.trainable = False
        out.name = None
        out._parents = ()
        out._backward = None
        out._needs_grad = False
        if _mode.grad_enabled and any(p._needs_grad for p in parents):
            out._parents = parents
            out._backward = backward_fn
            out._needs_grad = True
        return out

    # -- conveniences -------------------------------------------------
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
    def requires_grad(self) -> bool:
        return self._needs_grad

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, trainable=False, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, trainable={self.trainable}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _mode.dtype
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undoing NumPy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    y = y.astype(x.data.dtype, copy=False)
    return Tensor._result(y, (x,), lambda g: (g * y * (1.0 - y),))


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product (batched over leading axes like ``np.matmul``).

    Backward accumulates ``g @ b^T`` into ``a`` and ``a^T @ g`` into ``b``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(out, (a, b), bw)


def kron(a: Tensor, b: Tensor) -> Tensor:
    """Kronecker product of two matrices, ``out[i*p + r, j*q + c] = a[i, j] * b[r, c]``."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"kron: expected two rank-2 tensors, got {a.shape} and {b.shape}")
    m, n = a.shape
    p, q = b.shape

    def bw(g):
        g4 = g.reshape(m, p, n, q)
        return np.einsum("irjc,rc->ij", g4, b.data), np.einsum("irjc,ij->rc", g4, a.data)

    return Tensor._result(np.kron(a.data, b.data), (a, b), bw)


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale row ``i`` of ``x`` (``[..., k, n]``) by ``s[i]`` (``s`` is ``[k, 1]``)."""
    if s.ndim != 2 or s.shape[1] != 1 or x.ndim < 2 or x.shape[-2] != s.shape[0]:
        raise ShapeError(f"row_scale: rows of {x.shape} do not match scale {s.shape}")

    def bw(g):
        gs = (g * x.data).sum(axis=-1, keepdims=True)
        return g * s.data, _unbroadcast(gs, s.shape)

    return Tensor._result(x.data * s.data, (x, s), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return Tensor._result(out, (x,), lambda g: (g.reshape(src),))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``shape`` (gradient is summed back)."""
    src = x.shape
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, tuple(shape)))
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {src} to {tuple(shape)}") from None
    return Tensor._result(out, (x,), lambda g: (_unbroadcast(g, src),))


def _getitem(x: Tensor, index) -> Tensor:
    src_shape = x.shape

    def bw(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(x.data[index], copy=True), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Vertical stack ``[a; b]`` along the row axis (second to last)."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"concat_rows: widths of {a.shape} and {b.shape} disagree")
    return concat([a, b], axis=-2)


# -- reductions and normalisation --------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(x.data.dtype),)

    return Tensor._result(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (x,), bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each row by its reciprocal root-mean-square, then by ``gain``."""
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rms_norm: gain {gain.shape} does not match width {x.shape[-1]}")
    n = x.shape[-1]
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    normed = x.data * r

    def bw(g):
        u = g * gain.data
        gx = r * u - (r**3) * x.data * (u * x.data).sum(axis=-1, keepdims=True) / n
        gg = (g * normed).reshape(-1, n).sum(axis=0)
        return gx, gg

    return Tensor._result(normed * gain.data, (x, gain), bw)


# -- lookups and losses ---------------------------------------------------------


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"embedding_lookup: ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)].reshape(-1)[0]
        raise IndexError(f"embedding_lookup: token id {int(bad)} outside [0, {vocab})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return Tensor._result(table.data[ids], (table,), bw)


def cross_entropy_from_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true.

    ``logits`` is ``[..., V]``; ``targets`` and ``mask`` have the leading shape.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    vocab = logits.shape[-1]
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != targets.shape:
        raise ShapeError(f"cross_entropy: mask {mask.shape} vs targets {targets.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("cross_entropy: every target position is padding")
    safe = np.where(mask, targets, 0)
    if safe.min() < 0 or safe.max() >= vocab:
        raise IndexError(f"cross_entropy: target id outside [0, {vocab})")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=-1, keepdims=True)
    lse = (np.log(s) + zmax)[..., 0]
    picked = np.take_along_axis(z, safe[..., None], axis=-1)[..., 0]
    per_tok = np.where(mask, lse - picked, 0.0)
    loss = np.asarray(per_tok.sum() / count, dtype=z.dtype)

    def bw(g):
        p = e / s
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (mask[..., None] * (g / count)),)

    return Tensor._result(loss, (logits,), bw)


# -- graph traversal -------------------------------------------------------------


class ComputationGraph:
    """Topologically ordered view of the nodes reachable from an output.

    ``nodes`` lists every tensor that needs a gradient, parents first.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list:
        order: list = []
        seen: set = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node._needs_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p._needs_grad:
                    stack.append((p, False))
        return order

    def backward(self, seed: np.ndarray | None = None) -> None:
        out = self.output
        grads = {id(out): np.ones_like(out.data) if seed is None else seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.trainable:
                    node.grad = g.astype(node.data.dtype, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent._needs_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every trainable ancestor of the scalar ``loss``.

    Gradients accumulate across calls; call ``zero_grad`` on the
    parameters between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    ComputationGraph(loss).backward()


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    For each parameter tensor the error is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`` with ``|.|``
    the Euclidean norm over the tensor's entries; the maximum over
    parameters is returned. ``f`` re-evaluates the loss from scratch.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: non-finite function value")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.astype(np.float64)
        numeric = np.zeros(p.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("grad_check: non-finite function value")
                num_flat[i] = (fp - fm) / (2 * eps)
        diff = np.linalg.norm(analytic - numeric)
        denom = np.linalg.norm(analytic) + np.linalg.norm(numeric) + 1e-12
        worst = max(worst, float(diff / denom))
        p.grad = None
    return worst
