# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled local kernels and region copy loops.

Built with -ffp-contract=off so the results are bitwise identical to the
NumPy fallback.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t idx_t


def sddmm(const idx_t[::1] rows, const idx_t[::1] cols, const double[::1] vals,
          const double[:, ::1] a_words, const idx_t[::1] a_slots,
          const double[:, ::1] b_words, const idx_t[::1] b_slots):
    cdef Py_ssize_t n = vals.shape[0], width = a_words.shape[1]
    cdef Py_ssize_t e, k, ia, ib
    cdef double acc
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for e in range(n):
            ia = a_slots[rows[e]]
            ib = b_slots[cols[e]]
            acc = 0.0
            for k in range(width):
                acc = acc + a_words[ia, k] * b_words[ib, k]
            o[e] = vals[e] * acc
    return out


def spmm(const idx_t[::1] rows, const idx_t[::1] cols, const double[::1] vals,
         const double[:, ::1] b_words, const idx_t[::1] b_slots,
         double[:, ::1] out_words, const idx_t[::1] out_slots):
    cdef Py_ssize_t n = vals.shape[0], width = b_words.shape[1]
    cdef Py_ssize_t e, k, io, ib
    cdef double s
    with nogil:
        for e in range(n):
            io = out_slots[rows[e]]
            ib = b_slots[cols[e]]
            s = vals[e]
            for k in range(width):
                out_words[io, k] = out_words[io, k] + s * b_words[ib, k]


def gather_regions(const double[::1] flat, descriptors):
    cdef const idx_t[:, ::1] d = np.ascontiguousarray(np.asarray(descriptors, dtype=np.int64).reshape(-1, 2))
    cdef Py_ssize_t i, j, pos = 0, total = 0
    for i in range(d.shape[0]):
        total += d[i, 1]
    out = np.empty(total, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(d.shape[0]):
            for j in range(d[i, 1]):
                o[pos + j] = flat[d[i, 0] + j]
            pos += d[i, 1]
    return out


def scatter_regions(double[::1] flat, descriptors, const double[::1] payload, bint accumulate=False):
    cdef const idx_t[:, ::1] d = np.ascontiguousarray(np.asarray(descriptors, dtype=np.int64).reshape(-1, 2))
    cdef Py_ssize_t i, j, pos = 0
    with nogil:
        for i in range(d.shape[0]):
            if accumulate:
                for j in range(d[i, 1]):
                    flat[d[i, 0] + j] = flat[d[i, 0] + j] + payload[pos + j]
            else:
                for j in range(d[i, 1]):
                    flat[d[i, 0] + j] = payload[pos + j]
            pos += d[i, 1]


def pack_rows(const double[:, ::1] words, const idx_t[::1] slots):
    cdef Py_ssize_t n = slots.shape[0], width = words.shape[1], i, k
    out = np.empty((n, width), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for k in range(width):
                o[i, k] = words[slots[i], k]
    return out


def unpack_rows(const double[:, ::1] buf, double[:, ::1] words, const idx_t[::1] slots,
                bint accumulate=False):
    cdef Py_ssize_t n = slots.shape[0], width = words.shape[1], i, k
    with nogil:
        for i in range(n):
            if accumulate:
                for k in range(width):
                    words[slots[i], k] = words[slots[i], k] + buf[i, k]
            else:
                for k in range(width):
                    words[slots[i], k] = buf[i, k]
