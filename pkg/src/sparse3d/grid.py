"""Processor grid, 2D/3D distribution of S, and block localization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .matrix import SparseMatrix


@dataclass(frozen=True)
class ProcGrid:
    """X*Y*Z logical grid; rank r = x*(Y*Z) + y*Z + z (z fastest)."""

    X: int
    Y: int
    Z: int

    def __post_init__(self):
        if min(self.X, self.Y, self.Z) < 1:
            raise ValueError(f"grid dimensions must be >= 1, got {self}")

    @property
    def P(self):
        return self.X * self.Y * self.Z

    def rank(self, x, y, z):
        return x * (self.Y * self.Z) + y * self.Z + z

    def coords(self, r):
        x, rem = divmod(r, self.Y * self.Z)
        y, z = divmod(rem, self.Z)
        return x, y, z

    def row_fiber(self, x, z):
        """P_{x,:,z}, ordered by y."""
        return [self.rank(x, y, z) for y in range(self.Y)]

    def col_fiber(self, y, z):
        """P_{:,y,z}, ordered by x."""
        return [self.rank(x, y, z) for x in range(self.X)]

    def depth_fiber(self, x, y):
        """P_{x,y,:}, ordered by z."""
        return [self.rank(x, y, z) for z in range(self.Z)]

    def __str__(self):
        return f"{self.X}x{self.Y}x{self.Z}"

    @classmethod
    def parse(cls, text):
        try:
            X, Y, Z = (int(t) for t in text.lower().split("x"))
        except ValueError:
            raise ValueError(f"grid must look like XxYxZ, got {text!r}") from None
        return cls(X, Y, Z)


def make_grid(P: int, Z: int) -> ProcGrid:
    """Most-square X*Y = P/Z factorization with X >= Y."""
    if P < 1 or Z < 1 or P % Z:
        raise ValueError(f"Z={Z} does not divide P={P}")
    q = P // Z
    Y = max(d for d in range(1, math.isqrt(q) + 1) if q % d == 0)
    return ProcGrid(q // Y, Y, Z)


def split_bounds(n: int, parts: int) -> np.ndarray:
    """Boundaries of a contiguous near-equal split; leading parts take the remainder."""
    base, extra = divmod(n, parts)
    sizes = np.full(parts, base, dtype=np.int64)
    sizes[:extra] += 1
    return np.concatenate([[0], np.cumsum(sizes)])


def dist2d(S: SparseMatrix, grid: ProcGrid):
    """X x Y nested list of blocks in global coordinates."""
    S = S.sorted()
    rb = split_bounds(S.nrows, grid.X)
    cb = split_bounds(S.ncols, grid.Y)
    bx = np.searchsorted(rb, S.rows, side="right") - 1
    by = np.searchsorted(cb, S.cols, side="right") - 1
    blocks = []
    for x in range(grid.X):
        row = []
        for y in range(grid.Y):
            sel = (bx == x) & (by == y)
            row.append(SparseMatrix(S.nrows, S.ncols, S.rows[sel], S.cols[sel], S.vals[sel], True))
        blocks.append(row)
    return blocks


def split_z(block: SparseMatrix, Z: int):
    """Contiguous near-equal chunks of the row-major entry list."""
    b = split_bounds(block.nnz, Z)
    return [
        SparseMatrix(block.nrows, block.ncols, block.rows[lo:hi], block.cols[lo:hi],
                     block.vals[lo:hi], True)
        for lo, hi in zip(b[:-1], b[1:])
    ]


def dist3d(S: SparseMatrix, grid: ProcGrid):
    """Per-rank initial parts S^z_{x,y}, indexed by rank."""
    blocks = dist2d(S, grid)
    parts = [None] * grid.P
    for x in range(grid.X):
        for y in range(grid.Y):
            for z, part in enumerate(split_z(blocks[x][y], grid.Z)):
                parts[grid.rank(x, y, z)] = part
    return parts


@dataclass
class LocalBlock:
    """Localized sparse block; empty rows/columns are dropped.

    ``row_global``/``col_global`` map local -> global (strictly increasing).
    ``row_local``/``col_local`` are the partial inverse maps.
    """

    nrows_global: int
    ncols_global: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    row_global: np.ndarray
    col_global: np.ndarray
    coords: tuple | None = None

    @property
    def nnz(self):
        return len(self.vals)

    @property
    def shape(self):
        return (len(self.row_global), len(self.col_global))

    @property
    def row_local(self):
        return dict(zip(self.row_global.tolist(), range(len(self.row_global))))

    @property
    def col_local(self):
        return dict(zip(self.col_global.tolist(), range(len(self.col_global))))

    def global_rows(self):
        return self.row_global[self.rows]

    def global_cols(self):
        return self.col_global[self.cols]

    def delocalize(self) -> SparseMatrix:
        return SparseMatrix(self.nrows_global, self.ncols_global, self.global_rows(),
                            self.global_cols(), self.vals, True)


def localize(part: SparseMatrix, coords=None) -> LocalBlock:
    row_global, rows = np.unique(part.rows, return_inverse=True)
    col_global, cols = np.unique(part.cols, return_inverse=True)
    return LocalBlock(part.nrows, part.ncols, rows.astype(np.int64), cols.astype(np.int64),
                      part.vals.copy(), row_global, col_global, coords)


def relocalize(block: LocalBlock) -> LocalBlock:
    return localize(block.delocalize(), block.coords)
