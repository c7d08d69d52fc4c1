"""Sparsity-aware 3D SDDMM and SpMM over a deterministic simulated transport."""

from .engine import (
    KernelConfig,
    apply_update,
    assemble_inputs,
    iterate_update,
    run_dense3d_baseline,
    run_sddmm,
    run_spmm,
    setup,
)
from .grid import ProcGrid, make_grid
from .kernels import BACKEND
from .matrix import SparseMatrix, gen_rmat, gen_uniform, load_matrix_market, sddmm_ref, spmm_ref

__all__ = [
    "BACKEND", "KernelConfig", "ProcGrid", "SparseMatrix", "apply_update", "assemble_inputs",
    "gen_rmat", "gen_uniform", "iterate_update", "load_matrix_market", "make_grid",
    "run_dense3d_baseline", "run_sddmm", "run_spmm", "sddmm_ref", "setup", "spmm_ref",
]
