"""Compressed sparse column storage."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch


@dataclass(frozen=True, eq=False)
class SparseCSC:
    """Immutable CSC matrix.

    Row indices are strictly increasing within each column and explicit
    duplicates are not allowed. Explicit zeros are kept, so a matrix can
    carry a sparsity pattern whose values vary later.
    """

    nrows: int
    ncols: int
    col_ptr: np.ndarray
    row_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        col_ptr = np.ascontiguousarray(self.col_ptr, dtype=np.int64)
        row_idx = np.ascontiguousarray(self.row_idx, dtype=np.int64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        for arr in (col_ptr, row_idx, values):
            arr.setflags(write=False)
        object.__setattr__(self, "col_ptr", col_ptr)
        object.__setattr__(self, "row_idx", row_idx)
        object.__setattr__(self, "values", values)
        self._validate()

    def _validate(self):
        if self.nrows < 0 or self.ncols < 0:
            raise ValueError("negative dimension")
        if len(self.col_ptr) != self.ncols + 1 or self.col_ptr[0] != 0:
            raise ValueError("col_ptr must have length ncols+1 and start at 0")
        if np.any(np.diff(self.col_ptr) < 0):
            raise ValueError("col_ptr must be nondecreasing")
        nnz = int(self.col_ptr[-1])
        if len(self.row_idx) != nnz or len(self.values) != nnz:
            raise ValueError("col_ptr[ncols] must equal len(values) and len(row_idx)")
        if nnz:
            if self.row_idx.min() < 0 or self.row_idx.max() >= self.nrows:
                raise ValueError("row index out of range")
            # strictly increasing within columns: a non-increase may only
            # happen across a column boundary
            steps = np.diff(self.row_idx) <= 0
            starts = np.zeros(nnz - 1, dtype=bool)
            bounds = self.col_ptr[1:-1]
            bounds = bounds[(bounds > 0) & (bounds < nnz)]
            starts[bounds - 1] = True
            if np.any(steps & ~starts):
                raise ValueError("row indices must be strictly increasing within each column")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def nnz(self) -> int:
        return int(self.col_ptr[-1])

    @classmethod
    def from_scipy(cls, M) -> "SparseCSC":
        M = sp.csc_matrix(M, dtype=np.float64)
        M.sum_duplicates()
        M.sort_indices()
        return cls(M.shape[0], M.shape[1], M.indptr, M.indices, M.data)

    @classmethod
    def from_dense(cls, M, keep_zeros: bool = False) -> "SparseCSC":
        M = np.atleast_2d(np.asarray(M, dtype=np.float64))
        mask = np.ones(M.shape, dtype=bool) if keep_zeros else M != 0
        rows, cols = np.nonzero(mask)
        return cls.from_triplets(M.shape[0], M.shape[1], rows, cols, M[rows, cols])

    @classmethod
    def from_triplets(cls, nrows, ncols, rows, cols, vals) -> "SparseCSC":
        """Build from coordinates; duplicates are summed, zeros are kept."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (len(rows) == len(cols) == len(vals)):
            raise DimensionMismatch("triplet arrays differ in length")
        order = np.lexsort((rows, cols))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows):
            new = np.ones(len(rows), dtype=bool)
            new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            group = np.cumsum(new) - 1
            summed = np.zeros(group[-1] + 1)
            np.add.at(summed, group, vals)
            rows, cols, vals = rows[new], cols[new], summed
        col_ptr = np.zeros(ncols + 1, dtype=np.int64)
        np.add.at(col_ptr, cols + 1, 1)
        return cls(nrows, ncols, np.cumsum(col_ptr), rows, vals)

    @classmethod
    def zeros(cls, nrows: int, ncols: int) -> "SparseCSC":
        return cls(nrows, ncols, np.zeros(ncols + 1, dtype=np.int64), [], [])

    def to_scipy(self) -> sp.csc_matrix:
        return sp.csc_matrix(
            (np.array(self.values), np.array(self.row_idx), np.array(self.col_ptr)),
            shape=self.shape,
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        cols = np.repeat(np.arange(self.ncols), np.diff(self.col_ptr))
        out[self.row_idx, cols] = self.values
        return out

    def with_values(self, values) -> "SparseCSC":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.nnz,):
            raise DimensionMismatch(f"expected {self.nnz} values, got {values.shape}")
        return SparseCSC(self.nrows, self.ncols, self.col_ptr, self.row_idx, values)

    def col_indices(self) -> np.ndarray:
        """Column index of every stored entry."""
        return np.repeat(np.arange(self.ncols, dtype=np.int64), np.diff(self.col_ptr))

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.ncols,):
            raise DimensionMismatch(f"matvec with shape {self.shape} and vector {x.shape}")
        return self.to_scipy() @ x

    def rmatvec(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.nrows,):
            raise DimensionMismatch(f"rmatvec with shape {self.shape} and vector {y.shape}")
        return self.to_scipy().T @ y

    def transpose(self) -> "SparseCSC":
        return SparseCSC.from_scipy(self.to_scipy().T.tocsc())

    def to_json(self) -> dict:
        return {
            "nrows": int(self.nrows),
            "ncols": int(self.ncols),
            "col_ptr": [int(v) for v in self.col_ptr],
            "row_idx": [int(v) for v in self.row_idx],
            "values": [float(v) for v in self.values],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SparseCSC":
        return cls(
            int(obj["nrows"]),
            int(obj["ncols"]),
            np.asarray(obj["col_ptr"], dtype=np.int64),
            np.asarray(obj["row_idx"], dtype=np.int64),
            np.asarray(obj["values"], dtype=np.float64),
        )

    def __repr__(self):
        return f"SparseCSC({self.nrows}x{self.ncols}, nnz={self.nnz})"


def sym_from_upper(U: SparseCSC) -> SparseCSC:
    """Full symmetric matrix from its stored upper triangle (pattern preserved)."""
    rows = U.row_idx
    cols = U.col_indices()
    if np.any(rows > cols):
        raise ValueError("matrix has entries below the diagonal")
    off = rows != cols
    return SparseCSC.from_triplets(
        U.nrows,
        U.ncols,
        np.concatenate([rows, cols[off]]),
        np.concatenate([cols, rows[off]]),
        np.concatenate([U.values, U.values[off]]),
    )
