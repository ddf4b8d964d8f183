"""Shape-independent float32 matrix products.

OpenBLAS picks different sgemm kernels (gemv for a single row, a small-matrix
kernel for tiny problems) whose accumulation order differs from the blocked
kernel. A row of ``A @ B`` would then depend on how many rows were multiplied
together, which breaks block-size invariance and exact agreement with a
full-matrix reference. Padding the row dimension keeps every call on the
large-kernel path.
"""

import numpy as np

_MIN_WORK = 4_000_000


def matmul_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``a @ b`` (float32), with rows independent of ``a.shape[0]``."""
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    m, k = a.shape
    n = b.shape[1]
    need = max(2, -(-_MIN_WORK // max(1, k * n)))
    if m >= need:
        return a @ b
    padded = np.zeros((need, k), dtype=np.float32)
    padded[:m] = a
    return (padded @ b)[:m]
