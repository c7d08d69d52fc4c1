"""Lambda sets, need sets, and communication/memory volume formulas.

All sparsity-aware quantities are exact integer word counts (one 64-bit
value per word, K/Z words per dense-row chunk). The sparsity-agnostic
1D/2D/3D formulas are evaluated in exact rational arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .grid import ProcGrid, dist2d, split_bounds, split_z
from .ownership import assign_owners_serial


@dataclass
class FiberLambda:
    """Membership of global ids ``[lo, hi)`` in one fiber: ``mask[i - lo, r]``."""

    lo: int
    hi: int
    mask: np.ndarray

    @property
    def lam(self):
        return self.mask.sum(axis=1)

    def members(self, gid):
        return np.flatnonzero(self.mask[gid - self.lo])

    def need_lists(self):
        return [self.lo + np.flatnonzero(self.mask[:, r]) for r in range(self.mask.shape[1])]


@dataclass
class LambdaInfo:
    """Per row fiber x (ranks indexed by y) and per column fiber y (ranks indexed by x).

    Every z-slice holds the same gathered blocks, so one slice describes all.
    """

    rows: list
    cols: list

    def row_lambda(self):
        return np.concatenate([f.lam for f in self.rows]) if self.rows else np.zeros(0, int)

    def col_lambda(self):
        return np.concatenate([f.lam for f in self.cols]) if self.cols else np.zeros(0, int)


def compute_lambda(blocks, grid: ProcGrid, z: int = 0) -> LambdaInfo:
    """Lambda sets of slice ``z`` from the X x Y blocks it holds."""
    if not 0 <= z < grid.Z:
        raise ValueError(f"slice {z} outside grid {grid}")
    M, N = blocks[0][0].nrows, blocks[0][0].ncols
    rb, cb = split_bounds(M, grid.X), split_bounds(N, grid.Y)
    rows = []
    for x in range(grid.X):
        lo, hi = int(rb[x]), int(rb[x + 1])
        mask = np.zeros((hi - lo, grid.Y), dtype=bool)
        for y in range(grid.Y):
            mask[blocks[x][y].rows - lo, y] = True
        rows.append(FiberLambda(lo, hi, mask))
    cols = []
    for y in range(grid.Y):
        lo, hi = int(cb[y]), int(cb[y + 1])
        mask = np.zeros((hi - lo, grid.X), dtype=bool)
        for x in range(grid.X):
            mask[blocks[x][y].cols - lo, x] = True
        cols.append(FiberLambda(lo, hi, mask))
    return LambdaInfo(rows, cols)


@dataclass
class NeedSets:
    """Per world rank: ids needed but not owned, plus owned-row counts."""

    I: list
    J: list
    owned_rows: np.ndarray
    owned_cols: np.ndarray


def compute_needs(lam: LambdaInfo, row_owners, col_owners, grid: ProcGrid) -> NeedSets:
    I, J = [None] * grid.P, [None] * grid.P
    owned_rows = np.zeros(grid.P, dtype=np.int64)
    owned_cols = np.zeros(grid.P, dtype=np.int64)
    for x in range(grid.X):
        for y in range(grid.Y):
            rf, cf = lam.rows[x], lam.cols[y]
            rused = rf.lo + np.flatnonzero(rf.mask[:, y])
            cused = cf.lo + np.flatnonzero(cf.mask[:, x])
            i_set = rused[row_owners[x].owner_of(rused) != y]
            j_set = cused[col_owners[y].owner_of(cused) != x]
            for z in range(grid.Z):
                r = grid.rank(x, y, z)
                I[r], J[r] = i_set, j_set
                owned_rows[r] = np.count_nonzero(row_owners[x].owner == y)
                owned_cols[r] = np.count_nonzero(col_owners[y].owner == x)
    return NeedSets(I, J, owned_rows, owned_cols)


def _width(K, Z):
    if K % Z:
        raise ValueError(f"Z={Z} does not divide K={K}")
    return K // Z


def total_sparse_volume(lam: LambdaInfo, K: int, Z: int, which: str = "both") -> int:
    """Words exchanged in one z-slice: (sum(lambda_i - 1) + sum(lambda_j - 1)) * K/Z."""
    w = _width(K, Z)
    total = 0
    if which in ("both", "rows"):
        lr = lam.row_lambda()
        total += int(np.sum(lr[lr > 0] - 1))
    if which in ("both", "cols"):
        lc = lam.col_lambda()
        total += int(np.sum(lc[lc > 0] - 1))
    return total * w


def per_rank_recv_volume(need: NeedSets, K: int, Z: int, which: str = "both") -> np.ndarray:
    """(K/Z)(|I_a| + |J_a|) per rank."""
    w = _width(K, Z)
    out = np.zeros(len(need.I), dtype=np.int64)
    for r in range(len(out)):
        if which in ("both", "rows"):
            out[r] += len(need.I[r])
        if which in ("both", "cols"):
            out[r] += len(need.J[r])
    return out * w


def sparse_memory(need: NeedSets, K: int, Z: int) -> np.ndarray:
    """A rank's whole dense footprint: (K/Z)(|I| + |J| + owned rows of A and B)."""
    w = _width(K, Z)
    sizes = np.array([len(i) + len(j) for i, j in zip(need.I, need.J)], dtype=np.int64)
    return (sizes + need.owned_rows + need.owned_cols) * w


def _isqrt_exact(n, what):
    root = math.isqrt(n)
    if root * root != n:
        raise ValueError(f"{what}={n} is not a perfect square")
    return root


def _agnostic(model, P, Z):
    if P < 1:
        raise ValueError("P must be >= 1")
    model = model.upper()
    if model == "1D":
        return model, None
    if model == "2D":
        return model, _isqrt_exact(P, "P")
    if model == "3D":
        if Z < 1 or P % Z:
            raise ValueError(f"Z={Z} does not divide P={P}")
        return model, _isqrt_exact(P // Z, "P/Z")
    raise ValueError(f"unknown model {model!r}")


def _finish(value: Fraction, exact: bool):
    return value if exact else round(value)


def agnostic_volume(model: str, Asize: int, Bsize: int, P: int, Z: int = 1, exact: bool = False):
    """Per-rank received words of the bulk (sparsity-agnostic) 1D/2D/3D algorithms."""
    model, root = _agnostic(model, P, Z)
    if model == "1D":
        v = Fraction(Bsize * (P - 1), P)
    else:
        v = Fraction((Asize + Bsize) * (root - 1), P)
    return _finish(v, exact)


def agnostic_memory(model: str, Asize: int, Bsize: int, P: int, Z: int = 1, exact: bool = False):
    """Per-rank dense storage words of the bulk 1D/2D/3D algorithms."""
    model, root = _agnostic(model, P, Z)
    if model == "1D":
        v = Fraction(Asize, P) + Bsize
    elif model == "2D":
        v = Fraction(Asize + Bsize, root)
    else:
        v = Fraction(Asize + Bsize, Z * root)
    return _finish(v, exact)


@dataclass
class Prediction:
    """Everything the analysis can say about a configuration without running it."""

    grid: ProcGrid
    K: int
    blocks: list
    lam: LambdaInfo
    row_owners: list
    col_owners: list
    need: NeedSets
    part_nnz: np.ndarray
    row_bounds: np.ndarray
    col_bounds: np.ndarray

    @property
    def width(self):
        return self.K // self.grid.Z

    def sddmm_precomm(self):
        return per_rank_recv_volume(self.need, self.K, self.grid.Z)

    def sddmm_postcomm(self):
        return (self.grid.Z - 1) * self.part_nnz

    def spmm_precomm(self):
        return per_rank_recv_volume(self.need, self.K, self.grid.Z, "cols")

    def spmm_postcomm(self):
        """Partial rows received by each owner: sum over owned used ids of (lambda - 1)."""
        g, w = self.grid, self.width
        out = np.zeros(g.P, dtype=np.int64)
        for x in range(g.X):
            f = self.lam.rows[x]
            extra = np.maximum(f.lam - 1, 0)
            own = self.row_owners[x].owner
            for y in range(g.Y):
                v = int(extra[own == y].sum()) * w
                for z in range(g.Z):
                    out[g.rank(x, y, z)] = v
        return out

    def sparse_memory(self):
        return sparse_memory(self.need, self.K, self.grid.Z)

    def dense3d_precomm(self, which="both"):
        """Bulk volume with the same owner layout: every fiber row not owned by the rank."""
        g, w = self.grid, self.width
        out = np.zeros(g.P, dtype=np.int64)
        for r in range(g.P):
            x, y, _ = g.coords(r)
            nr = int(self.row_bounds[x + 1] - self.row_bounds[x])
            nc = int(self.col_bounds[y + 1] - self.col_bounds[y])
            if which in ("both", "rows"):
                out[r] += nr - self.need.owned_rows[r]
            if which in ("both", "cols"):
                out[r] += nc - self.need.owned_cols[r]
        return out * w

    def dense3d_memory(self):
        g, w = self.grid, self.width
        out = np.zeros(g.P, dtype=np.int64)
        for r in range(g.P):
            x, y, _ = g.coords(r)
            out[r] = (self.row_bounds[x + 1] - self.row_bounds[x]
                      + self.col_bounds[y + 1] - self.col_bounds[y]) * w
        return out


def predict(S, grid: ProcGrid, K: int, seed: int = 0) -> Prediction:
    """Analyze a configuration in one address space (serial owner oracle)."""
    _width(K, grid.Z)
    blocks = dist2d(S, grid)
    lam = compute_lambda(blocks, grid)
    row_owners = [assign_owners_serial(f.need_lists(), seed, (f.lo, f.hi)) for f in lam.rows]
    col_owners = [assign_owners_serial(f.need_lists(), seed, (f.lo, f.hi)) for f in lam.cols]
    need = compute_needs(lam, row_owners, col_owners, grid)
    part_nnz = np.zeros(grid.P, dtype=np.int64)
    for x in range(grid.X):
        for y in range(grid.Y):
            for z, part in enumerate(split_z(blocks[x][y], grid.Z)):
                part_nnz[grid.rank(x, y, z)] = part.nnz
    return Prediction(grid, K, blocks, lam, row_owners, col_owners, need, part_nnz,
                      split_bounds(S.nrows, grid.X), split_bounds(S.ncols, grid.Y))
