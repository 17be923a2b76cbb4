"""Symmetric eigendecomposition by cyclic Jacobi rotations (round-robin ordering)."""

from __future__ import annotations

import numpy as np

# Jacobi above this size is too slow; LAPACK takes over
JACOBI_MAX_DIM = 256


def jacobi_eigh(a, tol: float = 1e-13, max_sweeps: int = 60):
    """Eigenvalues (descending) and orthonormal eigenvector columns of symmetric ``a``."""
    A = np.array(a, dtype=np.float64, copy=True)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {A.shape}")
    if not np.allclose(A, A.T, atol=1e-10 * max(1.0, np.abs(A).max())):
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    scale = np.linalg.norm(A)
    rounds = _tournament(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * scale or scale == 0.0:
            break
        for P, Q in rounds:
            # pairs within a round are disjoint, so their rotations commute
            apq = A[P, Q]
            live = np.abs(apq) > 1e-300
            if not live.any():
                continue
            P, Q, apq = P[live], Q[live], apq[live]
            theta = (A[Q, Q] - A[P, P]) / (2.0 * apq)
            big = np.abs(theta) > 1e150
            safe = np.where(big, 1.0, theta)
            t = np.where(big, 0.5 / np.where(big, theta, 1.0),
                         np.where(safe >= 0, 1.0, -1.0) / (np.abs(safe) + np.sqrt(safe * safe + 1.0)))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            cp, cq = A[:, P], A[:, Q]
            A[:, P], A[:, Q] = c * cp - s * cq, s * cp + c * cq
            rp, rq = A[P, :], A[Q, :]
            A[P, :], A[Q, :] = c[:, None] * rp - s[:, None] * rq, s[:, None] * rp + c[:, None] * rq
            A[P, Q] = A[Q, P] = 0.0
            vp, vq = V[:, P], V[:, Q]
            V[:, P], V[:, Q] = c * vp - s * vq, s * vp + c * vq
    else:
        raise RuntimeError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    return _sorted(np.diag(A).copy(), V)


def _tournament(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Round-robin schedule covering every (p, q) pair once per sweep."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if max(a, b) < n]
        if pairs:
            arr = np.array(pairs)
            rounds.append((arr[:, 0], arr[:, 1]))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def symmetric_eigh(a):
    """Jacobi for small matrices, LAPACK beyond :data:`JACOBI_MAX_DIM`."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[0] <= JACOBI_MAX_DIM:
        return jacobi_eigh(a)
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return _sorted(w, v)


def _sorted(w, v):
    order = np.argsort(-w, kind="stable")
    return w[order], fix_signs(v[:, order])


def fix_signs(v: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.abs(v).argmax(axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs
