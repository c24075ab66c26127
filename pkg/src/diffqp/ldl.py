"""LDL^T factors of quasidefinite matrices with row/column modification.

Rows keep their natural order (no fill-reducing permutation). Rows that are
currently excluded from the factored matrix are *placeholders*: identity
rows with ``D = 1`` and an empty column and row of ``L``. Adding or deleting
a constraint row therefore never renumbers anything.
"""
from __future__ import annotations

import numpy as np

from . import _kernels as kern
from .csc import SparseCSC
from .errors import (
    AlreadyPlaceholder,
    DimensionMismatch,
    NotPlaceholder,
    PositivePivot,
    WrongBlock,
    ZeroPivot,
)

PIVOT_TOL = 1e-14


class LDLFactors:
    """Mutable factor workspace ``L diag(D) L^T``.

    ``flops`` accumulates the floating-point operations of every kernel run
    on this instance, which is how update and refactorization costs are
    compared.
    """

    def __init__(self, dim, start, nnz, cap, idx, val, used, D, sign, placeholder, flops=0):
        self.dim = dim
        self._start = start
        self._nnz = nnz
        self._cap = cap
        self._idx = idx
        self._val = val
        self._used = used
        self.D = D
        self.sign = sign
        self.placeholder = placeholder
        self.flops = flops

    def copy(self) -> "LDLFactors":
        return LDLFactors(
            self.dim,
            self._start.copy(),
            self._nnz.copy(),
            self._cap.copy(),
            self._idx.copy(),
            self._val.copy(),
            self._used.copy(),
            self.D.copy(),
            self.sign.copy(),
            self.placeholder.copy(),
            self.flops,
        )

    @property
    def nnz_L(self) -> int:
        return int(self._nnz.sum())

    def column(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Row indices and values of the strictly lower part of column j."""
        s, k = self._start[j], self._nnz[j]
        return self._idx[s : s + k].copy(), self._val[s : s + k].copy()

    def capacity(self, j: int) -> int:
        return int(self._cap[j])

    def L_dense(self) -> np.ndarray:
        L = np.eye(self.dim)
        for j in range(self.dim):
            rows, vals = self.column(j)
            L[rows, j] = vals
        return L

    def reconstruct(self) -> np.ndarray:
        """Dense ``L D L^T`` with placeholder rows and columns zeroed."""
        L = self.L_dense()
        M = (L * self.D) @ L.T
        M[self.placeholder, :] = 0.0
        M[:, self.placeholder] = 0.0
        return M

    def _apply(self, idx, val):
        self._idx, self._val = idx, val

    def __repr__(self):
        active = int((~self.placeholder).sum())
        return f"LDLFactors(dim={self.dim}, active={active}, nnz_L={self.nnz_L})"


def _as_sign(sign, n):
    sign = np.asarray(sign, dtype=np.float64)
    if sign.shape != (n,):
        raise DimensionMismatch(f"sign has shape {sign.shape}, expected ({n},)")
    if not np.all(np.abs(sign) == 1.0):
        raise ValueError("sign entries must be +1 or -1")
    return sign


def ldl_factorize(K: SparseCSC, sign, eps: float = 0.0, placeholder=None) -> LDLFactors:
    """Factor ``K + eps*diag(sign)`` restricted to the non-placeholder rows.

    K must be stored with both triangles; only the upper triangle is read.
    """
    n = K.nrows
    if K.ncols != n:
        raise DimensionMismatch("K must be square")
    sign = _as_sign(sign, n)
    if placeholder is None:
        placeholder = np.zeros(n, dtype=bool)
    placeholder = np.array(placeholder, dtype=bool)
    if placeholder.shape != (n,):
        raise DimensionMismatch("placeholder mask has wrong length")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    start, nnz, cap, idx, val, used, D, status, col, flops = kern.factorize(
        K.col_ptr, K.row_idx, K.values, n, sign, float(eps), placeholder, PIVOT_TOL
    )
    if status != kern.OK:
        raise ZeroPivot(f"pivot {col} is {D[col]:.3e}")
    return LDLFactors(n, start, nnz, cap, idx, val, used, D, sign.astype(np.int8), placeholder, flops)


def ldl_solve(F: LDLFactors, rhs) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != (F.dim,):
        raise DimensionMismatch(f"rhs has shape {rhs.shape}, expected ({F.dim},)")
    x, flops = kern.solve(F._start, F._nnz, F._idx, F._val, F.D, F.placeholder, rhs)
    F.flops += flops
    return x


def rank1_modify(F: LDLFactors, w, sigma: int) -> LDLFactors:
    """In-place ``L D L^T <- L D L^T + sigma w w^T``; returns F."""
    if sigma not in (1, -1):
        raise ValueError("sigma must be +1 or -1")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (F.dim,):
        raise DimensionMismatch(f"w has shape {w.shape}, expected ({F.dim},)")
    if np.any(w[F.placeholder] != 0.0):
        raise ValueError("w must vanish on placeholder rows")
    idx, val, status, flops = kern.rank1(
        F._start, F._nnz, F._cap, F._idx, F._val, F._used, F.D, w, int(sigma), PIVOT_TOL
    )
    F._apply(idx, val)
    F.flops += flops
    if status != kern.OK:
        raise ZeroPivot("pivot crossed zero during rank-1 modification")
    return F


def rowcol_add(F: LDLFactors, K_eps: SparseCSC, i: int) -> LDLFactors:
    """Activate placeholder row i using column i of the regularized matrix."""
    if K_eps.shape != (F.dim, F.dim):
        raise DimensionMismatch("K_eps does not match factor dimension")
    if not F.placeholder[i]:
        raise NotPlaceholder(f"row {i} is already part of the factorization")
    idx, val, status, flops, d22 = kern.rowcol_add(
        F._start, F._nnz, F._cap, F._idx, F._val, F._used, F.D, F.placeholder,
        K_eps.col_ptr, K_eps.row_idx, K_eps.values, int(i), PIVOT_TOL,
    )
    F._apply(idx, val)
    F.flops += flops
    if status == kern.POSITIVE_PIVOT:
        raise PositivePivot(f"row {i}: pivot {d22:.3e} is not negative")
    if status == kern.ZERO_PIVOT:
        raise ZeroPivot(f"pivot crossed zero while adding row {i}")
    return F


def rowcol_delete(F: LDLFactors, i: int) -> LDLFactors:
    """Turn row i of the constraint block back into a placeholder."""
    if F.placeholder[i]:
        raise AlreadyPlaceholder(f"row {i} is already a placeholder")
    if F.sign[i] != -1:
        raise WrongBlock(f"row {i} belongs to the positive block")
    idx, val, status, flops = kern.rowcol_delete(
        F._start, F._nnz, F._cap, F._idx, F._val, F._used, F.D, F.placeholder, int(i), PIVOT_TOL
    )
    F._apply(idx, val)
    F.flops += flops
    if status == kern.POSITIVE_PIVOT:
        raise PositivePivot(f"row {i} has a nonnegative pivot")
    if status != kern.OK:
        raise ZeroPivot(f"pivot crossed zero while deleting row {i}")
    return F
