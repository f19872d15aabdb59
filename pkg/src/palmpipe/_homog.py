"""Small projective-geometry helpers shared by imaging, geometry and synth."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateConfiguration

RANK_TOL = 1e-9


def to_h(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    return np.hstack([points, np.ones((len(points), 1))])


def apply_h(H: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Map an (n, 2) array of points through a 3x3 homography."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    p = to_h(points) @ np.asarray(H, dtype=float).T
    return p[:, :2] / p[:, 2:3]


def hartley_normalizer(points: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with RMS distance sqrt(2)."""
    points = np.asarray(points, dtype=float)
    centroid = points.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((points - centroid) ** 2, axis=1)))
    if rms < 1e-15:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / rms
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def design_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """The 2n x 9 DLT system A h = 0 for dst ~ H src."""
    n = len(src)
    A = np.zeros((2 * n, 9))
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    A[0::2, 0] = x
    A[0::2, 1] = y
    A[0::2, 2] = 1.0
    A[0::2, 6] = -u * x
    A[0::2, 7] = -u * y
    A[0::2, 8] = -u
    A[1::2, 3] = x
    A[1::2, 4] = y
    A[1::2, 5] = 1.0
    A[1::2, 6] = -v * x
    A[1::2, 7] = -v * y
    A[1::2, 8] = -v
    return A


def dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares homography with dst ~ H src, normalized so H[2, 2] = 1.

    The normalized system is solved through its normal equations
    (eigenvector of AᵀA with the smallest eigenvalue); if that matrix is
    numerically indefinite the SVD of A is used instead.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2 or len(src) < 4:
        raise DegenerateConfiguration("need at least 4 paired 2-D points")
    Ts = hartley_normalizer(src)
    Td = hartley_normalizer(dst)
    A = design_matrix(apply_h(Ts, src), apply_h(Td, dst))

    sv = np.linalg.svd(A, compute_uv=False)
    # A rank-8 design matrix has a one-dimensional null space; anything lower is degenerate.
    if sv[7] <= RANK_TOL * sv[0]:
        raise DegenerateConfiguration("design matrix is rank deficient")

    evals, evecs = np.linalg.eigh(A.T @ A)
    h = evecs[:, 0]
    if evals[0] < -1e-10 * evals[-1] or evals[1] - evals[0] <= 1e-12 * evals[-1]:
        h = np.linalg.svd(A)[2][-1]

    Hn = h.reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-15:
        raise DegenerateConfiguration("homography maps the origin to infinity")
    return H / H[2, 2]
