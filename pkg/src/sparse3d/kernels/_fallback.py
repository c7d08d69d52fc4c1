"""Pure NumPy kernels.

Accumulation order matches the compiled core exactly: the inner product
runs k ascending per nonzero, and SpMM adds contributions in entry order.
"""

import numpy as np


def sddmm(rows, cols, vals, a_words, a_slots, b_words, b_slots):
    a = a_words[a_slots[rows]]
    b = b_words[b_slots[cols]]
    acc = np.zeros(len(vals))
    for k in range(a_words.shape[1]):
        acc += a[:, k] * b[:, k]
    return vals * acc


def spmm(rows, cols, vals, b_words, b_slots, out_words, out_slots):
    # ufunc.at is unbuffered, so repeated targets accumulate in entry order.
    np.add.at(out_words, out_slots[rows], vals[:, None] * b_words[b_slots[cols]])


def gather_regions(flat, descriptors):
    if len(descriptors) == 0:
        return np.empty(0, dtype=flat.dtype)
    return np.concatenate([flat[off:off + n] for off, n in descriptors])


def scatter_regions(flat, descriptors, payload, accumulate=False):
    pos = 0
    for off, n in descriptors:
        if accumulate:
            flat[off:off + n] += payload[pos:pos + n]
        else:
            flat[off:off + n] = payload[pos:pos + n]
        pos += n


def pack_rows(words, slots):
    return words[slots]


def unpack_rows(buf, words, slots, accumulate=False):
    if accumulate:
        np.add.at(words, slots, buf)
    else:
        words[slots] = buf
