"""Global sparse matrices, ingestion, and the serial SDDMM/SpMM oracles.

Dense tall-and-skinny operands are plain 2-D ``float64`` ndarrays; only the
sparse side gets its own type.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RMAT_PROBS = (0.57, 0.19, 0.19, 0.05)


class MatrixMarketError(ValueError):
    """Raised when a Matrix Market file cannot be parsed."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass
class SparseMatrix:
    """Coordinate-form sparse matrix with unique (row, col) pairs.

    Entries live in three parallel arrays. ``is_sorted`` is set when the
    entries are in row-major (row, col) order, which every constructor in
    this package guarantees.
    """

    nrows: int
    ncols: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    is_sorted: bool = field(default=False)

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.int64)
        self.cols = np.ascontiguousarray(self.cols, dtype=np.int64)
        self.vals = np.ascontiguousarray(self.vals, dtype=np.float64)
        if not (len(self.rows) == len(self.cols) == len(self.vals)):
            raise ValueError("rows, cols and vals must have equal length")
        if self.nrows < 0 or self.ncols < 0:
            raise ValueError("negative dimension")
        if len(self.rows):
            if self.rows.min() < 0 or self.rows.max() >= self.nrows:
                raise ValueError("row index out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.ncols:
                raise ValueError("column index out of range")
            key = self.rows * self.ncols + self.cols
            if len(np.unique(key)) != len(key):
                raise ValueError("duplicate (row, col) entries")
            if self.is_sorted and np.any(np.diff(key) <= 0):
                raise ValueError("entries flagged sorted are not in row-major order")

    @classmethod
    def from_coo(cls, nrows, ncols, rows, cols, vals, sum_duplicates=False):
        """Build a sorted matrix from unordered triplets."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        key = rows * ncols + cols
        if sum_duplicates:
            uniq, inv = np.unique(key, return_inverse=True)
            summed = np.zeros(len(uniq))
            np.add.at(summed, inv, vals)
            key, vals = uniq, summed
        else:
            order = np.argsort(key, kind="stable")
            key, vals = key[order], vals[order]
        if ncols:
            rows, cols = np.divmod(key, ncols)
        else:
            rows = cols = key
        return cls(nrows, ncols, rows, cols, vals, is_sorted=True)

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(dense)
        return cls(dense.shape[0], dense.shape[1], rows, cols, dense[rows, cols], is_sorted=True)

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nnz(self):
        return len(self.vals)

    def entries(self):
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.vals.tolist()))

    def sorted(self):
        if self.is_sorted:
            return self
        return SparseMatrix.from_coo(self.nrows, self.ncols, self.rows, self.cols, self.vals)

    def with_values(self, vals):
        return SparseMatrix(self.nrows, self.ncols, self.rows, self.cols, vals, self.is_sorted)

    def to_dense(self):
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.vals
        return out

    def __eq__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.vals, other.vals)
        )


def load_matrix_market(path) -> SparseMatrix:
    """Read a coordinate Matrix Market file.

    Indices are converted to 0-based, symmetric storage is expanded into
    both triangles, duplicates are summed and pattern entries get 1.0.
    """
    path = Path(path)
    with path.open() as fh:
        header = fh.readline()
        lineno = 1
        tokens = header.split()
        if len(tokens) != 5 or tokens[0] != "%%MatrixMarket":
            raise MatrixMarketError("missing %%MatrixMarket banner", lineno)
        obj, fmt, kind, symmetry = (t.lower() for t in tokens[1:])
        if obj != "matrix" or fmt != "coordinate":
            raise MatrixMarketError(f"unsupported format {obj} {fmt}", lineno)
        if kind not in ("real", "integer", "pattern"):
            raise MatrixMarketError(f"unsupported value kind {kind!r}", lineno)
        if symmetry not in ("general", "symmetric"):
            raise MatrixMarketError(f"unsupported symmetry {symmetry!r}", lineno)

        size = None
        for line in fh:
            lineno += 1
            stripped = line.strip()
            if not stripped or stripped.startswith("%"):
                continue
            size = stripped.split()
            break
        if size is None or len(size) != 3:
            raise MatrixMarketError("missing size line", lineno)
        try:
            nrows, ncols, nnz = (int(t) for t in size)
        except ValueError:
            raise MatrixMarketError(f"bad size line {stripped!r}", lineno) from None

        rows, cols, vals = [], [], []
        want = 2 if kind == "pattern" else 3
        for line in fh:
            lineno += 1
            stripped = line.strip()
            if not stripped or stripped.startswith("%"):
                continue
            parts = stripped.split()
            if len(parts) != want:
                raise MatrixMarketError(f"expected {want} fields, got {len(parts)}", lineno)
            try:
                i, j = int(parts[0]) - 1, int(parts[1]) - 1
                v = 1.0 if kind == "pattern" else float(parts[2])
            except ValueError:
                raise MatrixMarketError(f"cannot parse entry {stripped!r}", lineno) from None
            if not (0 <= i < nrows and 0 <= j < ncols):
                raise MatrixMarketError(f"index ({i + 1}, {j + 1}) out of bounds", lineno)
            rows.append(i)
            cols.append(j)
            vals.append(v)
            if symmetry == "symmetric" and i != j:
                rows.append(j)
                cols.append(i)
                vals.append(v)
    declared = len(rows) if symmetry == "general" else None
    if declared is not None and declared != nnz:
        raise MatrixMarketError(f"size line declares {nnz} entries, found {declared}", lineno)
    return SparseMatrix.from_coo(nrows, ncols, rows, cols, vals, sum_duplicates=True)


def gen_rmat(scale: int, nnz_target: int, seed: int, probs=RMAT_PROBS) -> SparseMatrix:
    """Recursive-matrix generator over a ``2**scale`` square matrix.

    Edges are drawn in batches until ``nnz_target`` distinct positions exist
    (or sampling stalls); the first ``nnz_target`` distinct positions in
    draw order are kept. Values are uniform in [0.5, 1.5).
    """
    if scale < 2:
        raise ValueError("scale must be >= 2")
    n = 1 << scale
    if nnz_target > n * n:
        raise ValueError(f"nnz_target {nnz_target} exceeds capacity {n * n}")
    rng = np.random.default_rng(seed)
    a, b, c, _ = probs
    keys = np.empty(0, dtype=np.int64)
    stalled = 0
    while len(keys) < nnz_target and stalled < 64:
        batch = max(nnz_target - len(keys), 16) * 2
        row = np.zeros(batch, dtype=np.int64)
        col = np.zeros(batch, dtype=np.int64)
        for _ in range(scale):
            r = rng.random(batch)
            down = r >= a + b
            right = ((r >= a) & (r < a + b)) | (r >= a + b + c)
            row = (row << 1) | down
            col = (col << 1) | right
        merged = np.concatenate([keys, row * n + col])
        _, first = np.unique(merged, return_index=True)
        grown = merged[np.sort(first)]
        stalled = stalled + 1 if len(grown) == len(keys) else 0
        keys = grown
    keys = keys[:nnz_target]
    vals = rng.uniform(0.5, 1.5, size=len(keys))
    return SparseMatrix.from_coo(n, n, keys // n, keys % n, vals)


def gen_uniform(nrows: int, ncols: int, nnz: int, seed: int, low=-1.0, high=1.0) -> SparseMatrix:
    """Uniformly random pattern with exactly ``nnz`` entries, values in [low, high)."""
    if nnz > nrows * ncols:
        raise ValueError(f"nnz {nnz} exceeds capacity {nrows * ncols}")
    rng = np.random.default_rng(seed)
    keys = rng.choice(nrows * ncols, size=nnz, replace=False)
    vals = rng.uniform(low, high, size=nnz)
    return SparseMatrix.from_coo(nrows, ncols, keys // ncols, keys % ncols, vals)


def _check_dense(name, mat, nrows):
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != nrows:
        raise ValueError(f"{name} must have {nrows} rows, got shape {mat.shape}")
    return mat


def sddmm_ref(S: SparseMatrix, A, B) -> SparseMatrix:
    """c_ij = s_ij * <a_i, b_j> on the pattern of S, k accumulated ascending."""
    A = _check_dense("A", A, S.nrows)
    B = _check_dense("B", B, S.ncols)
    if A.shape[1] != B.shape[1] or A.shape[1] < 1:
        raise ValueError(f"inner dimensions disagree: {A.shape[1]} vs {B.shape[1]}")
    acc = np.zeros(S.nnz)
    a, b = A[S.rows], B[S.cols]
    for k in range(A.shape[1]):
        acc += a[:, k] * b[:, k]
    return S.with_values(S.vals * acc)


def spmm_ref(S: SparseMatrix, B) -> np.ndarray:
    """a_i = sum_j s_ij * b_j, columns visited in ascending order."""
    B = _check_dense("B", B, S.ncols)
    S = S.sorted()
    out = np.zeros((S.nrows, B.shape[1]))
    np.add.at(out, S.rows, S.vals[:, None] * B[S.cols])
    return out
