"""Compressed sparse row matrices and the sparse-dense product kernel.

The kernel touches each stored nonzero exactly once per output column, so
its multiply-accumulate count is nnz * cols by construction; no dense
rows x cols intermediate is ever materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .instrument import MACS


@dataclass
class SparseMatrix:
    """CSR matrix over float64 values.

    Invariants: ``indptr`` is nondecreasing with ``indptr[0] == 0`` and
    ``indptr[rows] == nnz``; column indices are strictly increasing within
    each row; no explicit zeros are stored.
    """

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    _transposed: "SparseMatrix | None" = field(default=None, repr=False, compare=False)

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    @classmethod
    def from_pairs(cls, rows, cols, row_ids, col_ids, values=1.0) -> "SparseMatrix":
        """Build from coordinate pairs; duplicates collapse to one entry."""
        row_ids = np.asarray(row_ids, dtype=np.int64)
        col_ids = np.asarray(col_ids, dtype=np.int64)
        if row_ids.size and (row_ids.min() < 0 or row_ids.max() >= rows):
            raise DimensionError("row index out of range")
        if col_ids.size and (col_ids.min() < 0 or col_ids.max() >= cols):
            raise DimensionError("column index out of range")
        vals = np.broadcast_to(np.asarray(values, dtype=np.float64), row_ids.shape)
        keys = row_ids * np.int64(cols) + col_ids
        keys, first = np.unique(keys, return_index=True)
        vals = vals[first]
        keep = vals != 0.0
        keys, vals = keys[keep], vals[keep]
        r = keys // cols
        c = keys % cols
        indptr = np.zeros(rows + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(rows, cols, indptr, c.astype(np.int64), vals.astype(np.float64))

    @classmethod
    def from_dense(cls, arr) -> "SparseMatrix":
        arr = np.asarray(arr, dtype=np.float64)
        r, c = np.nonzero(arr)
        return cls.from_pairs(arr.shape[0], arr.shape[1], r, c, arr[r, c])

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        r = np.repeat(np.arange(self.rows), np.diff(self.indptr))
        out[r, self.indices] = self.data
        return out

    def to_pairs(self) -> np.ndarray:
        """Stored coordinates as an (nnz, 2) array in row-major order."""
        r = np.repeat(np.arange(self.rows, dtype=np.int64), np.diff(self.indptr))
        return np.column_stack([r, self.indices])

    def row_items(self, r: int) -> np.ndarray:
        return self.indices[self.indptr[r]:self.indptr[r + 1]]

    def row_sums(self) -> np.ndarray:
        out = np.zeros(self.rows)
        np.add.at(out, np.repeat(np.arange(self.rows), np.diff(self.indptr)), self.data)
        return out

    def col_sums(self) -> np.ndarray:
        return np.bincount(self.indices, weights=self.data, minlength=self.cols).astype(np.float64)

    def transpose(self) -> "SparseMatrix":
        if self._transposed is None:
            r = np.repeat(np.arange(self.rows, dtype=np.int64), np.diff(self.indptr))
            self._transposed = SparseMatrix.from_pairs(
                self.cols, self.rows, self.indices, r, self.data
            )
        return self._transposed

    def matmul_dense(self, dense: np.ndarray) -> np.ndarray:
        """Sparse-dense product; counts exactly nnz * dense.shape[1] MACs."""
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2 or dense.shape[0] != self.cols:
            raise DimensionError(
                f"spmm shape mismatch: ({self.rows}x{self.cols}) @ {dense.shape}"
            )
        MACS.sparse_macs += self.nnz * int(dense.shape[1])
        out = np.zeros((self.rows, dense.shape[1]))
        if self.nnz == 0:
            return out
        contrib = self.data[:, None] * dense[self.indices, :]
        counts = np.diff(self.indptr)
        nonempty = counts > 0
        out[nonempty] = np.add.reduceat(contrib, self.indptr[:-1][nonempty], axis=0)
        return out

    def validate(self) -> None:
        assert self.indptr.shape == (self.rows + 1,)
        assert self.indptr[0] == 0 and self.indptr[-1] == len(self.indices) == len(self.data)
        assert np.all(np.diff(self.indptr) >= 0), "indptr must be nondecreasing"
        for r in range(self.rows):
            cols_r = self.indices[self.indptr[r]:self.indptr[r + 1]]
            assert np.all(np.diff(cols_r) > 0), "column indices must increase within a row"
        assert np.all(self.data != 0.0), "explicit zeros are not stored"
        assert np.all(self.indices >= 0) and np.all(self.indices < self.cols)


def identity(n: int) -> SparseMatrix:
    idx = np.arange(n)
    return SparseMatrix.from_pairs(n, n, idx, idx, 1.0)
