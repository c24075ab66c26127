"""Adjoint differentiation of a QP solution through its KKT system.

The workspace factors the full bordered matrix

    [[P + eps I, A'], [A, -eps I]]

once, with inactive constraint rows parked as placeholders. When only the
active set changes between calls, rows are added or deleted in the factors
instead of refactoring.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .csc import SparseCSC, sym_from_upper
from .errors import DimensionMismatch, StaleWorkspace
from .ldl import LDLFactors, ldl_factorize, ldl_solve, rowcol_add, rowcol_delete
from .qp_solver import QPData, QPSolution

INACTIVE, LOWER, UPPER, EQUALITY = 0, 1, 2, 3

_versions = itertools.count(1)


@dataclass
class ActiveSet:
    active: np.ndarray  # bool (m,)
    side: np.ndarray  # int8 (m,), INACTIVE/LOWER/UPPER/EQUALITY

    @classmethod
    def from_side(cls, side) -> "ActiveSet":
        side = np.asarray(side, dtype=np.int8)
        return cls(side != INACTIVE, side)

    def __eq__(self, other):
        return isinstance(other, ActiveSet) and np.array_equal(self.side, other.side)

    @property
    def count(self) -> int:
        return int(self.active.sum())


def detect_active(sol: QPSolution, data: QPData, tol_y: float = 1e-8) -> ActiveSet:
    y = sol.y
    side = np.zeros(data.m, dtype=np.int8)
    side[y > tol_y] = UPPER
    side[y < -tol_y] = LOWER
    side[data.l == data.u] = EQUALITY
    return ActiveSet.from_side(side)


def kkt_matrix(data: QPData, eps: float = 0.0) -> SparseCSC:
    """Bordered KKT matrix over all n+m rows, both triangles stored."""
    n, m = data.n, data.m
    Pf = sym_from_upper(data.P)
    rows = [Pf.row_idx, data.A.row_idx + n, data.A.col_indices(), np.arange(n), np.arange(n, n + m)]
    cols = [Pf.col_indices(), data.A.col_indices(), data.A.row_idx + n, np.arange(n), np.arange(n, n + m)]
    vals = [Pf.values, data.A.values, data.A.values, np.full(n, eps), np.full(m, -eps)]
    return SparseCSC.from_triplets(n + m, n + m, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


class DiffWorkspace:
    """Single-owner factor cache for repeated differentiation of one QP structure."""

    def __init__(self, data: QPData, active: ActiveSet, eps: float = 1e-6, n_refine: int = 3):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = float(eps)
        self.n_refine = int(n_refine)
        self.n = data.n
        self.m = data.m
        self._refactor(data, active)

    def _refactor(self, data: QPData, active: ActiveSet):
        self.K = kkt_matrix(data, 0.0)
        self.K_eps = kkt_matrix(data, self.eps)
        self._K_sp = self.K.to_scipy()
        self._K_active = None
        self.sign = np.r_[np.ones(self.n), -np.ones(self.m)]
        self.factors: LDLFactors = ldl_factorize(self.K, self.sign, self.eps, self._placeholder(active))
        self.cached_active = ActiveSet(active.active.copy(), active.side.copy())
        self.cached_data_version = next(_versions)
        self._P_values = data.P.values.copy()
        self._A_values = data.A.values.copy()
        self._P_pattern = (data.P.col_ptr, data.P.row_idx)
        self._A_pattern = (data.A.col_ptr, data.A.row_idx)

    def _placeholder(self, active: ActiveSet) -> np.ndarray:
        if active.active.shape != (self.m,):
            raise DimensionMismatch("active set has wrong length")
        return np.r_[np.zeros(self.n, dtype=bool), ~active.active]

    def matches(self, data: QPData) -> bool:
        """True when P and A (pattern and values) equal the factored ones."""
        return (
            data.n == self.n
            and data.m == self.m
            and np.array_equal(data.P.col_ptr, self._P_pattern[0])
            and np.array_equal(data.P.row_idx, self._P_pattern[1])
            and np.array_equal(data.A.col_ptr, self._A_pattern[0])
            and np.array_equal(data.A.row_idx, self._A_pattern[1])
            and np.array_equal(data.P.values, self._P_values)
            and np.array_equal(data.A.values, self._A_values)
        )

    def sync(self, data: QPData, active: ActiveSet) -> "DiffWorkspace":
        """Bring the factors in line with (data, active): update if possible, else refactor."""
        if self.matches(data):
            update_factors(self, active, self.K_eps)
        else:
            self._refactor(data, active)
        return self

    def active_kkt(self) -> sp.csc_matrix:
        """Unregularized K_C embedded in full size, zero on placeholder rows/columns."""
        key = self.factors.placeholder.tobytes()
        if self._K_active is None or self._K_active[0] != key:
            keep = sp.diags((~self.factors.placeholder).astype(np.float64))
            self._K_active = (key, (keep @ self._K_sp @ keep).tocsc())
        return self._K_active[1]


def refine_solve(ws: DiffWorkspace, rhs, K=None, residuals: list | None = None) -> np.ndarray:
    """Solve K_C z = rhs through the regularized factors plus iterative refinement.

    The refinement residual is taken against the unregularized K_C. Entries at
    placeholder rows of ``rhs`` are ignored and returned as zero.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != (ws.n + ws.m,):
        raise DimensionMismatch(f"rhs has shape {rhs.shape}, expected ({ws.n + ws.m},)")
    ph = ws.factors.placeholder
    r = np.where(ph, 0.0, rhs)
    if K is None:
        K = ws.active_kkt()
    elif isinstance(K, SparseCSC):
        K = K.to_scipy()
    z = ldl_solve(ws.factors, r)
    for _ in range(ws.n_refine):
        dr = r - K @ z
        dr[ph] = 0.0
        if residuals is not None:
            residuals.append(float(np.abs(dr).max(initial=0.0)))
        z = z + ldl_solve(ws.factors, dr)
    if residuals is not None:
        dr = r - K @ z
        dr[ph] = 0.0
        residuals.append(float(np.abs(dr).max(initial=0.0)))
    return z


@dataclass
class QPGradients:
    """Adjoints of the canonical data.

    ``dP`` and ``dA`` are restricted to the stored sparsity patterns of P
    (upper triangle) and A.
    """

    dP: SparseCSC
    dq: np.ndarray
    dA: SparseCSC
    dl: np.ndarray
    du: np.ndarray

    def dP_dense(self) -> np.ndarray:
        U = self.dP.to_dense()
        return U + np.triu(U, 1).T


def qp_gradients(dx_tilde, sol: QPSolution, data: QPData, ws: DiffWorkspace) -> QPGradients:
    dx_tilde = np.asarray(dx_tilde, dtype=np.float64)
    n, m = data.n, data.m
    if dx_tilde.shape != (n,):
        raise DimensionMismatch(f"dx_tilde has shape {dx_tilde.shape}, expected ({n},)")
    if not ws.matches(data):
        raise StaleWorkspace("workspace was factored for different P or A")
    active = ws.cached_active
    x, y = sol.x, sol.y

    z = refine_solve(ws, np.r_[dx_tilde, np.zeros(m)])
    d_x = z[:n]
    d_y = np.where(active.active, z[n:], 0.0)

    pr, pc = data.P.row_idx, data.P.col_indices()
    dP = -0.5 * (d_x[pr] * x[pc] + x[pr] * d_x[pc])
    ar, ac = data.A.row_idx, data.A.col_indices()
    y_act = np.where(active.active, y, 0.0)
    dA = -(d_y[ar] * x[ac] + y_act[ar] * d_x[ac])

    side = active.side
    dl = np.zeros(m)
    du = np.zeros(m)
    lo = side == LOWER
    up = side == UPPER
    dl[lo] = d_y[lo]
    du[up] = d_y[up]
    # equality rows: the bound on the side the multiplier pushes against
    eq = side == EQUALITY
    du[eq & (y > 0)] = d_y[eq & (y > 0)]
    dl[eq & (y < 0)] = d_y[eq & (y < 0)]
    tie = eq & (y == 0)
    dl[tie] = 0.5 * d_y[tie]
    du[tie] = 0.5 * d_y[tie]

    return QPGradients(data.P.with_values(dP), -d_x, data.A.with_values(dA), dl, du)


def update_factors(ws: DiffWorkspace, new_active: ActiveSet, K_eps: SparseCSC | None = None) -> DiffWorkspace:
    """Delete rows leaving the active set, then add rows entering it."""
    if new_active.active.shape != (ws.m,):
        raise DimensionMismatch("active set has wrong length")
    K_eps = ws.K_eps if K_eps is None else K_eps
    old = ws.cached_active.active
    new = new_active.active
    n = ws.n
    for i in np.flatnonzero(old & ~new):
        rowcol_delete(ws.factors, n + int(i))
    for i in np.flatnonzero(new & ~old):
        rowcol_add(ws.factors, K_eps, n + int(i))
    ws.cached_active = ActiveSet(new_active.active.copy(), new_active.side.copy())
    return ws
