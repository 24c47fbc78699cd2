"""Dense least-squares kernels for the EDMD fits."""

from __future__ import annotations

import warnings

import numpy as np

RANK_RTOL = 1e-10
COND_LIMIT = 1e12


class IllConditionedWarning(RuntimeWarning):
    pass


def kron_feature(u, z) -> np.ndarray:
    """Return ``(1; u) kron z``, i.e. ``[z; u_1 z; ...; u_m z]``.

    Works row-wise on batches: ``u`` of shape ``(B, m)`` and ``z`` of shape
    ``(B, N)`` give ``(B, (m + 1) N)``.
    """
    u = np.asarray(u, dtype=float)
    z = np.asarray(z, dtype=float)
    coeffs = np.concatenate([np.ones(u.shape[:-1] + (1,)), u], axis=-1)
    return (coeffs[..., :, None] * z[..., None, :]).reshape(z.shape[:-1] + (-1,))


def solve_least_squares(A, B, *, pinv: bool = False, ridge: float = 0.0):
    """Solve ``min_X ||X A - B||_F``.

    Uses the normal equations ``X = B A^T (A A^T)^{-1}`` when ``A A^T`` is well
    conditioned, otherwise the minimum-norm SVD solution with singular values
    below ``1e-10 * s_max`` discarded.

    Returns
    -------
    X : ndarray
    flagged : bool
        True when the pseudo-inverse path was taken because of conditioning.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"A has {A.shape[1]} columns but B has {B.shape[1]}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("non-finite entries in least-squares data")
    flagged = False
    if not pinv:
        G = A @ A.T
        if ridge > 0.0:
            G = G + ridge * np.eye(G.shape[0])
        cond = np.linalg.cond(G) if G.size else np.inf
        if np.isfinite(cond) and cond <= COND_LIMIT:
            return np.linalg.solve(G, A @ B.T).T, False
        flagged = True
        warnings.warn(f"Gram matrix condition {cond:.3g} exceeds {COND_LIMIT:g}; "
                      "using pseudo-inverse", IllConditionedWarning, stacklevel=2)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > RANK_RTOL * (s[0] if s.size else 0.0)
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    X = ((B @ Vt.T) * s_inv) @ U.T
    return X, flagged
