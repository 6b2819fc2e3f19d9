"""Dense matrix kernels with deterministic accumulation.

All kernels reject non-finite inputs/outputs and accumulate reductions in a
fixed order, so repeated runs at the same precision are bit-identical.  The
matrix product in particular sums its contraction axis strictly left to
right, matching a naive triple loop bit for bit.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError

PRECISIONS = {"f32": np.float32, "f64": np.float64}
ACTIVATIONS = ("relu", "gelu", "identity")

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def dtype_of(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(PRECISIONS)}")


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite entries")
    return arr


class Matrix:
    """A 2-D float array with validated shape, finiteness, and precision."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray | Sequence[Sequence[float]], precision: str | None = None):
        arr = np.asarray(data)
        if precision is not None:
            arr = arr.astype(dtype_of(precision), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"Matrix must be 2-D, got shape {arr.shape}")
        _check_finite(arr, "Matrix data")
        self.data = arr

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def precision(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    @classmethod
    def zeros(cls, rows: int, cols: int, precision: str = "f32") -> "Matrix":
        return cls(np.zeros((rows, cols), dtype=dtype_of(precision)))

    def copy(self) -> "Matrix":
        return Matrix(self.data.copy())

    def astype(self, precision: str) -> "Matrix":
        return Matrix(self.data.astype(dtype_of(precision)))

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols}, {self.precision})"


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with strict left-to-right accumulation over the contraction axis."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=a.dtype)
    if k == 0:
        return out
    tmp = np.empty((m, n), dtype=a.dtype)
    for i in range(k):
        np.multiply(a[:, i, None], b[i, None, :], out=tmp)
        np.add(out, tmp, out=out)
    return _check_finite(out, "matmul output")


def _gram(h: np.ndarray) -> np.ndarray:
    """h @ h.T accumulated left-to-right over columns; exactly symmetric by construction."""
    if h.ndim != 2:
        raise DimensionError(f"gram expects a 2-D array, got shape {h.shape}")
    n, d = h.shape
    out = np.zeros((n, n), dtype=h.dtype)
    if d == 0:
        return out
    tmp = np.empty((n, n), dtype=h.dtype)
    for k in range(d):
        col = h[:, k]
        np.multiply(col[:, None], col[None, :], out=tmp)
        np.add(out, tmp, out=out)
    return _check_finite(out, "gram output")


def _broadcastable(sa: tuple[int, int], sb: tuple[int, int]) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb))


def _ew(op, a: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or not _broadcastable(a.shape, b.shape):
        raise DimensionError(f"{what} shape mismatch: {a.shape} vs {b.shape}")
    return _check_finite(op(a, b), f"{what} output")


def _add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _ew(np.add, a, b, "add")


def _mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _ew(np.multiply, a, b, "mul")


def _scale(a: np.ndarray, s: float) -> np.ndarray:
    return _check_finite(a * a.dtype.type(s), "scale output")


def _concat(parts: Sequence[np.ndarray], axis: int) -> np.ndarray:
    if not parts:
        raise DimensionError("concat of zero parts")
    other = 1 - axis
    ref = parts[0].shape[other]
    for p in parts:
        if p.ndim != 2 or p.shape[other] != ref:
            raise DimensionError(
                f"concat shape mismatch along axis {other}: "
                f"{[tuple(p.shape) for p in parts]}"
            )
    return np.concatenate(parts, axis=axis)


def _activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        out = np.maximum(x, 0)
    elif kind == "gelu":
        out = 0.5 * x * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))
        out = out.astype(x.dtype, copy=False)
    elif kind == "identity":
        out = x
    else:
        raise ValueError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")
    return _check_finite(out, f"{kind} output")


def _activation_grad(x: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the activation wrt its pre-activation, evaluated at x."""
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (cdf + x * pdf).astype(x.dtype, copy=False)
    if kind == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")


# Public Matrix-typed kernels.

def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product with deterministic left-to-right accumulation."""
    return Matrix(_mm(a.data, b.data))


def gram(h: Matrix) -> Matrix:
    """Pairwise inner products of the rows of h; exactly symmetric."""
    return Matrix(_gram(h.data))


def activation(x: Matrix, kind: str) -> Matrix:
    """Elementwise activation; kind is one of relu, gelu, identity."""
    return Matrix(_activation(x.data, kind))


def concat(parts: Iterable[Matrix], axis: str = "rows") -> Matrix:
    """Concatenate matrices along rows or cols, in argument order."""
    if axis not in ("rows", "cols"):
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    return Matrix(_concat([p.data for p in parts], 0 if axis == "rows" else 1))
