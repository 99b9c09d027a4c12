"""Small dense linear-algebra helpers (float64, no external solver)."""

from __future__ import annotations

import numpy as np


class SingularMatrixError(ValueError):
    pass


def solve(a, b, tol: float = 1e-12) -> np.ndarray:
    """Solve a x = b by Gaussian elimination with partial (row) pivoting.

    a: (n, n), b: (n,).  Raises SingularMatrixError when a pivot falls
    below `tol` after row exchange.
    """
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n = b.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"solve: a has shape {a.shape}, b has length {n}")

    for k in range(n - 1):
        p = int(np.argmax(np.abs(a[k:, k]))) + k
        if abs(a[p, k]) < tol:
            raise SingularMatrixError(f"pivot {a[p, k]:.3e} below {tol} in column {k}")
        if p != k:
            a[[k, p]] = a[[p, k]]
            b[[k, p]] = b[[p, k]]
        for i in range(k + 1, n):
            m = a[i, k] / a[k, k]
            if m != 0.0:
                a[i, k + 1:] -= m * a[k, k + 1:]
                b[i] -= m * b[k]
            a[i, k] = 0.0

    if abs(a[n - 1, n - 1]) < tol:
        raise SingularMatrixError(f"pivot {a[n - 1, n - 1]:.3e} below {tol} in column {n - 1}")

    x = np.zeros(n)
    for k in range(n - 1, -1, -1):
        x[k] = (b[k] - a[k, k + 1:] @ x[k + 1:]) / a[k, k]
    return x
