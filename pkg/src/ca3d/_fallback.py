"""Pure-NumPy fallback for the compiled binary16 kernels.

Bit-identical to the compiled module: numpy's float64 -> float16 cast performs
the same round-to-nearest-even conversion as the C header, and the reduction
loops accumulate in the same sequential order. Only the speed differs.
"""

import numpy as np


def round_half(x):
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float64).astype(np.float16).astype(np.float64)


def matmul_half(a, b, num_threads=1):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, k = a.shape
    kb, m = b.shape
    if kb != k:
        raise ValueError("inner dimensions differ")
    acc = np.zeros((n, m), dtype=np.float64)
    with np.errstate(invalid="ignore"):
        for p in range(k):
            prod = round_half(np.multiply.outer(a[:, p], b[p, :]))
            acc = round_half(acc + prod)
    return acc


def sum_half_rows(x):
    x = np.asarray(x, dtype=np.float64)
    r, c = x.shape
    acc = np.zeros(r, dtype=np.float64)
    for j in range(c):
        acc = round_half(acc + x[:, j])
    return acc
