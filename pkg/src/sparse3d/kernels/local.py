"""Per-rank Compute phase on localized blocks."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class LocalDense(NamedTuple):
    """Dense rows resolved to a block's local indices: row ``l`` is ``words[slots[l]]``."""

    words: np.ndarray
    slots: np.ndarray


def resolve(store, global_ids) -> LocalDense:
    """Map local indices to store slots; raises KeyError for non-resident ids."""
    return LocalDense(store.words, store.slots(global_ids))


def _impl(backend):
    from . import BACKENDS, _impl as default

    return default if backend is None else BACKENDS[backend]


def local_sddmm(block, a_loc: LocalDense, b_loc: LocalDense, backend=None) -> np.ndarray:
    """Partial s * <a-chunk, b-chunk> for every block entry, in entry order."""
    if block.nnz == 0:
        return np.zeros(0)
    if a_loc.words.shape[1] != b_loc.words.shape[1]:
        raise ValueError("A and B chunks have different widths")
    return _impl(backend).sddmm(block.rows, block.cols, block.vals,
                                a_loc.words, a_loc.slots, b_loc.words, b_loc.slots)


def local_spmm(block, b_loc: LocalDense, a_out: LocalDense, backend=None) -> None:
    """Accumulate partial a_i chunks into ``a_out`` (columns ascending per row)."""
    if block.nnz == 0:
        return
    _impl(backend).spmm(block.rows, block.cols, block.vals,
                        b_loc.words, b_loc.slots, a_out.words, a_out.slots)
