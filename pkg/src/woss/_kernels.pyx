# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Must stay bit-identical to ``_kernels_py``."""

from libc.stdint cimport uint64_t

cdef uint64_t OFFSET = 0xcbf29ce484222325ULL
cdef uint64_t PRIME = 0x100000001b3ULL


def chunk_digest(const unsigned char[::1] data not None):
    cdef uint64_t h = OFFSET
    cdef Py_ssize_t i, n = data.shape[0]
    with nogil:
        for i in range(n):
            h = h * PRIME + data[i] + 1
    return h


def scatter_slots(Py_ssize_t first, Py_ssize_t count, Py_ssize_t k, Py_ssize_t n):
    cdef Py_ssize_t j
    if k < 1 or n < 1:
        raise ValueError("k and n must be >= 1")
    return [((first + j) // k) % n for j in range(count)]
