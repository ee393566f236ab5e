"""Symmetric 3x3 eigendecomposition via cyclic Jacobi rotations.

A 3x3 scatter matrix does not justify a general SVD routine; a few
Jacobi sweeps drive the off-diagonal mass to machine precision and the
accumulated rotations are the eigenvectors.
"""

import numpy as np

_PAIRS = ((0, 1), (0, 2), (1, 2))


def eig3_symmetric(matrix, max_sweeps=30):
    """Eigenvalues (descending) and matching unit eigenvector columns.

    Returns ``(w, v)`` with ``w[0] >= w[1] >= w[2]`` and
    ``matrix @ v[:, k] == w[k] * v[:, k]`` up to float64 round-off.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    v = np.eye(3)
    scale = max(np.abs(a).max(), 1e-300)

    for _ in range(max_sweeps):
        off = np.sqrt(a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2)
        if off <= 1e-15 * scale:
            break
        for p, q in _PAIRS:
            apq = a[p, q]
            if abs(apq) <= 1e-18 * scale:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            # smaller-root tangent keeps rotations below 45 degrees
            t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
            if theta == 0.0:
                t = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = c
            rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            a = 0.5 * (a + a.T)
            v = v @ rot

    w = np.diag(a).copy()
    order = np.argsort(w)[::-1]
    return w[order], v[:, order]
