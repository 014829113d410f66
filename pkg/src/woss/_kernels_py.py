"""numpy fallback for the compiled kernels in ``_kernels.pyx``.

The digest is a polynomial hash, ``h = h * PRIME + (byte + 1)`` modulo 2**64
starting from ``OFFSET``. Its closed form vectorizes::

    h = OFFSET * PRIME**n + sum((b[i] + 1) * PRIME**(n - 1 - i))
"""

import threading

import numpy as np

OFFSET = 0xCBF29CE484222325
PRIME = 0x100000001B3
MASK = (1 << 64) - 1

_powers = np.ones(1, dtype=np.uint64)
_lock = threading.Lock()


def _reversed_powers(n: int) -> np.ndarray:
    global _powers
    if len(_powers) < n:
        with _lock:
            if len(_powers) < n:
                size = max(n, 2 * len(_powers))
                steps = np.full(size, PRIME, dtype=np.uint64)
                steps[0] = 1
                _powers = np.multiply.accumulate(steps, dtype=np.uint64)
    return _powers[:n][::-1]


def chunk_digest(data) -> int:
    buf = np.frombuffer(data, dtype=np.uint8)
    n = len(buf)
    head = (OFFSET * pow(PRIME, n, 1 << 64)) & MASK
    if n == 0:
        return head
    terms = (buf.astype(np.uint64) + np.uint64(1)) * _reversed_powers(n)
    return (head + int(terms.sum(dtype=np.uint64))) & MASK


def scatter_slots(first: int, count: int, k: int, n: int) -> list[int]:
    if k < 1 or n < 1:
        raise ValueError("k and n must be >= 1")
    idx = np.arange(first, first + count, dtype=np.int64)
    return ((idx // k) % n).tolist()
