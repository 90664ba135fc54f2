"""CSR sparse matrices and the sparse-dense kernels the propagation code runs on.

Storage is canonical CSR (sorted, de-duplicated column indices per row) in
float64.  Products delegate to ``scipy.sparse``, whose CSR kernels walk rows in
order and columns in stored order, so results are bitwise reproducible.
Dense matrices are plain 2-D ``float64`` numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, IndexOutOfRange, NonFiniteValue


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.row_offsets, self.col_indices, self.values):
            arr.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    def to_scipy(self) -> sp.csr_matrix:
        if self._csr is None:
            csr = sp.csr_matrix(
                (self.values, self.col_indices, self.row_offsets), shape=self.shape
            )
            csr.has_sorted_indices = True
            object.__setattr__(self, "_csr", csr)
        return self._csr

    def row_indices(self) -> np.ndarray:
        """Row index of every stored entry, aligned with ``col_indices``."""
        return np.repeat(np.arange(self.n_rows), np.diff(self.row_offsets))

    def triples(self) -> list[tuple[int, int, float]]:
        rows = self.row_indices()
        return [
            (int(r), int(c), float(v))
            for r, c, v in zip(rows, self.col_indices, self.values)
        ]

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def transpose(self) -> SparseMatrix:
        return from_scipy(self.to_scipy().T)

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def scale(self, c: float) -> SparseMatrix:
        return SparseMatrix(
            self.n_rows, self.n_cols, self.row_offsets.copy(),
            self.col_indices.copy(), self.values * float(c),
        )

    def is_symmetric(self, atol: float = 0.0) -> bool:
        if self.n_rows != self.n_cols:
            return False
        diff = self.to_scipy() - self.to_scipy().T
        return diff.nnz == 0 or float(abs(diff).max()) <= atol


def from_scipy(m) -> SparseMatrix:
    """Canonicalize any scipy sparse matrix into a SparseMatrix."""
    csr = sp.csr_matrix(m, dtype=np.float64, copy=True)
    csr.sum_duplicates()
    csr.sort_indices()
    if not np.all(np.isfinite(csr.data)):
        raise NonFiniteValue("sparse matrix holds non-finite values")
    return SparseMatrix(
        int(csr.shape[0]), int(csr.shape[1]),
        csr.indptr.astype(np.int64), csr.indices.astype(np.int64),
        csr.data.astype(np.float64),
    )


def csr_from_coo(triples, n_rows: int, n_cols: int) -> SparseMatrix:
    """Build canonical CSR from ``(row, col, value)`` triples; duplicates are summed."""
    if len(triples) == 0:
        return SparseMatrix(
            n_rows, n_cols, np.zeros(n_rows + 1, dtype=np.int64),
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64),
        )
    arr = np.asarray(triples, dtype=np.float64)
    rows = arr[:, 0].astype(np.int64)
    cols = arr[:, 1].astype(np.int64)
    vals = arr[:, 2]
    if np.any(rows != arr[:, 0]) or np.any(cols != arr[:, 1]):
        raise IndexOutOfRange("non-integer index in COO triples")
    return coo_arrays(rows, cols, vals, n_rows, n_cols)


def coo_arrays(rows, cols, vals, n_rows: int, n_cols: int) -> SparseMatrix:
    """Array form of :func:`csr_from_coo`."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    if rows.size and (rows.min() < 0 or rows.max() >= n_rows
                      or cols.min() < 0 or cols.max() >= n_cols):
        raise IndexOutOfRange(f"COO index outside a {n_rows}x{n_cols} matrix")
    if not np.all(np.isfinite(vals)):
        raise NonFiniteValue("COO values must be finite")
    m = sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols))
    return from_scipy(m)


def identity(n: int) -> SparseMatrix:
    idx = np.arange(n, dtype=np.int64)
    return SparseMatrix(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))


def spmm(a: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """Sparse-dense product ``A @ X``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or a.n_cols != x.shape[0]:
        raise DimensionMismatch(f"cannot multiply {a.shape} by {x.shape}")
    return a.to_scipy() @ x


def row_sums(a: SparseMatrix) -> np.ndarray:
    return np.bincount(a.row_indices(), weights=a.values, minlength=a.n_rows).astype(
        np.float64
    )


def add(*mats: SparseMatrix) -> SparseMatrix:
    """Entry-wise sum of equally shaped matrices."""
    shape = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape:
            raise DimensionMismatch(f"cannot add {shape} and {m.shape}")
    total = mats[0].to_scipy()
    for m in mats[1:]:
        total = total + m.to_scipy()
    return from_scipy(total)


def matmul(a: SparseMatrix, b: SparseMatrix) -> SparseMatrix:
    """Sparse-sparse product, used only to square the adjacency."""
    if a.n_cols != b.n_rows:
        raise DimensionMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return from_scipy(a.to_scipy() @ b.to_scipy())


def diag_scale(a: SparseMatrix, left: np.ndarray | None = None,
               right: np.ndarray | None = None) -> SparseMatrix:
    """Return ``diag(left) @ A @ diag(right)`` without changing the pattern."""
    vals = a.values.copy()
    if left is not None:
        vals *= np.asarray(left, dtype=np.float64)[a.row_indices()]
    if right is not None:
        vals *= np.asarray(right, dtype=np.float64)[a.col_indices]
    return SparseMatrix(a.n_rows, a.n_cols, a.row_offsets.copy(),
                        a.col_indices.copy(), vals)


def keep_entries(a: SparseMatrix, mask: np.ndarray) -> SparseMatrix:
    """Drop stored entries where ``mask`` is False."""
    mask = np.asarray(mask, dtype=bool)
    counts = np.bincount(a.row_indices()[mask], minlength=a.n_rows)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return SparseMatrix(a.n_rows, a.n_cols, offsets,
                        a.col_indices[mask].copy(), a.values[mask].copy())
