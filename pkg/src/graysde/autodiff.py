"""Reverse-mode automatic differentiation over dense float64 arrays.

The recording model is an explicit tape: while a :class:`Tape` is active,
every operation whose inputs carry gradients appends its output node (with a
backward closure) to the tape, in construction order.  ``Tape.backward``
walks the list in reverse, so accumulation order is fixed and gradients are
bit-reproducible on a platform for a fixed thread configuration.

All operations also accept plain numpy arrays (and Python scalars) and then
compute without recording, so model code written against these ops runs in
both training (tape) and inference (numpy) mode from a single code path.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

# Jitter ladder for nearly-singular symmetric solves: start tiny, escalate
# tenfold, give up past 1e-6.
_JITTERS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Cholesky factorization failed even after jitter escalation."""


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of operations for one reverse-mode pass.

    Use as a context manager around the forward computation::

        with Tape() as tape:
            loss = ...          # ops on Tensors are recorded
        tape.backward(loss)     # fills .grad on leaf Tensors
    """

    def __init__(self):
        self._nodes = []
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf tensor.

        ``loss`` must be a scalar recorded on this tape.  Interior node
        gradients are freed as soon as they have been propagated; leaves
        (tensors created with ``requires_grad=True``) keep theirs.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ShapeError("backward requires a scalar Tensor loss, got "
                             f"{getattr(loss, 'data', loss)!r}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
            node.grad = None  # interior grads are not needed past this point

    def clear(self):
        self._nodes.clear()


class Tensor:
    """Dense float64 array with optional gradient recording."""

    # Keep numpy from broadcasting elementwise over Tensor operands; binary
    # ops must dispatch to the reflected Tensor methods instead.
    __array_ufunc__ = None
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, powr(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(powr(self, -1.0), other)

    def __pow__(self, exponent):
        return powr(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def col(self, j):
        return slice_cols(self, j, j + 1)


def astensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(data, parents, backward):
    out = Tensor(data)
    if _ACTIVE_TAPE is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        _ACTIVE_TAPE._nodes.append(out)
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape`` by summing."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and broadcasting ops
# ---------------------------------------------------------------------------


def add(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.add(a, b)
    a, b = astensor(a), astensor(b)
    out = _record(a.data + b.data, (a, b), None)
    if out.requires_grad:
        def backward(g):
            _accumulate(a, g)
            _accumulate(b, g)
        out._backward = backward
    return out


def mul(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.multiply(a, b)
    a, b = astensor(a), astensor(b)
    out = _record(a.data * b.data, (a, b), None)
    if out.requires_grad:
        def backward(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)
        out._backward = backward
    return out


def powr(a, exponent):
    """Elementwise power with a constant exponent."""
    if not isinstance(a, Tensor):
        return np.power(a, exponent)
    e = float(exponent)
    out = _record(np.power(a.data, e), (a,), None)
    if out.requires_grad:
        def backward(g):
            _accumulate(a, g * e * np.power(a.data, e - 1.0))
        out._backward = backward
    return out


def exp(a):
    if not isinstance(a, Tensor):
        return np.exp(a)
    out = _record(np.exp(a.data), (a,), None)
    if out.requires_grad:
        def backward(g):
            _accumulate(a, g * out.data)
        out._backward = backward
    return out


def log(a):
    if not isinstance(a, Tensor):
        return np.log(a)
    out = _record(np.log(a.data), (a,), None)
    if out.requires_grad:
        def backward(g):
            _accumulate(a, g / a.data)
        out._backward = backward
    return out


def absval(a):
    """Elementwise absolute value; subgradient 0 at the kink."""
    if not isinstance(a, Tensor):
        return np.abs(a)
    out = _record(np.abs(a.data), (a,), None)
    if out.requires_grad:
        def backward(g):
            _accumulate(a, g * np.sign(a.data))
        out._backward = backward
    return out


def elu(a):
    """Exponential linear unit with unit saturation scale."""
    if not isinstance(a, Tensor):
        return np.where(a > 0.0, a, np.expm1(a))
    x = a.data
    out = _record(np.where(x > 0.0, x, np.expm1(x)), (a,), None)
    if out.requires_grad:
        def backward(g):
            # For x <= 0 the derivative is exp(x) = output + 1.
            _accumulate(a, g * np.where(x > 0.0, 1.0, out.data + 1.0))
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        return np.sum(a, axis=axis, keepdims=keepdims)
    out = _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), None)
    if out.requires_grad:
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        out._backward = backward
    return out


def tmean(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        return np.mean(a, axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def transpose(a):
    if not isinstance(a, Tensor):
        return np.asarray(a).T
    out = _record(a.data.T.copy(), (a,), None)
    if out.requires_grad:
        def backward(g):
            _accumulate(a, g.T)
        out._backward = backward
    return out


def concat(parts, axis=1):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    parts = [astensor(p) for p in parts]
    out = _record(np.concatenate([p.data for p in parts], axis=axis),
                  tuple(parts), None)
    if out.requires_grad:
        widths = [p.data.shape[axis] for p in parts]
        def backward(g):
            offset = 0
            for p, w in zip(parts, widths):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + w)
                _accumulate(p, g[tuple(sl)])
                offset += w
        out._backward = backward
    return out


def slice_cols(a, j0, j1):
    if not isinstance(a, Tensor):
        return np.asarray(a)[:, j0:j1]
    out = _record(a.data[:, j0:j1].copy(), (a,), None)
    if out.requires_grad:
        def backward(g):
            full = np.zeros_like(a.data)
            full[:, j0:j1] = g
            _accumulate(a, full)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.asarray(a) @ np.asarray(b)
    a, b = astensor(a), astensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = _record(a.data @ b.data, (a, b), None)
    if out.requires_grad:
        def backward(g):
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)
        out._backward = backward
    return out


def linear(x, w, b):
    """Affine map ``x @ w + b`` fused into a single node."""
    xs = x.data.shape if isinstance(x, Tensor) else np.shape(x)
    ws = w.data.shape if isinstance(w, Tensor) else np.shape(w)
    if len(xs) != 2 or xs[1] != ws[0]:
        raise ShapeError(f"linear input {xs} vs weight {ws}")
    if not (isinstance(x, Tensor) or isinstance(w, Tensor) or isinstance(b, Tensor)):
        return np.asarray(x) @ np.asarray(w) + np.asarray(b)
    x, w, b = astensor(x), astensor(w), astensor(b)
    out = _record(x.data @ w.data + b.data, (x, w, b), None)
    if out.requires_grad:
        def backward(g):
            _accumulate(x, g @ w.data.T)
            _accumulate(w, x.data.T @ g)
            _accumulate(b, g.sum(axis=0))
        out._backward = backward
    return out


def pairwise_sqdist(a, b):
    """All-pairs squared Euclidean distances between rows of ``a`` and ``b``."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return _sqdist_data(np.asarray(a, dtype=np.float64),
                            np.asarray(b, dtype=np.float64))
    a, b = astensor(a), astensor(b)
    if a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"pairwise_sqdist features {a.data.shape} vs {b.data.shape}")
    out = _record(_sqdist_data(a.data, b.data), (a, b), None)
    if out.requires_grad:
        def backward(g):
            # d/da_i sum_j g_ij * |a_i - b_j|^2 = 2 (a_i * sum_j g_ij - g_i. @ B)
            _accumulate(a, 2.0 * (a.data * g.sum(axis=1, keepdims=True) - g @ b.data))
            _accumulate(b, 2.0 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data))
        out._backward = backward
    return out


def _sqdist_data(a, b):
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(sq, 0.0)


def _cholesky_with_jitter(a):
    try:
        return scipy.linalg.cho_factor(a, lower=True), 0.0
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(a.shape[0])
    for jitter in _JITTERS:
        try:
            factor = scipy.linalg.cho_factor(a + jitter * eye, lower=True)
            logger.warning("cholesky needed jitter %.0e", jitter)
            return factor, jitter
        except np.linalg.LinAlgError:
            continue
    raise SingularMatrixError(
        f"cholesky failed after jitter escalation up to {_JITTERS[-1]:.0e}")


def chol_solve(a, b):
    """Solve ``a @ x = b`` for symmetric positive definite ``a``.

    Factorization failures escalate through the jitter ladder (each level
    logged) before raising :class:`SingularMatrixError`.
    """
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        factor, _ = _cholesky_with_jitter(np.asarray(a, dtype=np.float64))
        return scipy.linalg.cho_solve(factor, np.asarray(b, dtype=np.float64))
    a, b = astensor(a), astensor(b)
    factor, _ = _cholesky_with_jitter(a.data)
    x = scipy.linalg.cho_solve(factor, b.data)
    out = _record(x, (a, b), None)
    if out.requires_grad:
        def backward(g):
            gb = scipy.linalg.cho_solve(factor, g)
            _accumulate(b, gb)
            _accumulate(a, -gb @ x.T)
        out._backward = backward
    return out


def trace_product(a, b):
    """trace(a @ b) without forming the product."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return float(np.einsum("ij,ji->", a, b))
    a, b = astensor(a), astensor(b)
    if a.data.shape[::-1] != b.data.shape:
        raise ShapeError(f"trace_product shapes {a.data.shape} x {b.data.shape}")
    out = _record(np.einsum("ij,ji->", a.data, b.data), (a, b), None)
    if out.requires_grad:
        def backward(g):
            _accumulate(a, g * b.data.T)
            _accumulate(b, g * a.data.T)
        out._backward = backward
    return out
