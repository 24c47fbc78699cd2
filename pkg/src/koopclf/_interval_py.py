"""Numpy implementation of the batched interval MLP kernel.

Mirrors ``_interval_ext.pyx`` operation for operation so both backends give
the same enclosures up to summation order.
"""

from __future__ import annotations

import numpy as np

SLACK = 1e-14
TINY = 1e-300


def interval_mlp(lo, hi, weights, biases, final_linear, with_jac):
    """Enclose a tanh MLP and its input Jacobian over a batch of boxes.

    ``lo, hi``: ``(B, n)``. Returns ``(ylo, yhi, Jlo, Jhi)`` with ``J`` of
    shape ``(B, out, n)``, or ``None`` for both when ``with_jac`` is false.
    """
    lo = np.ascontiguousarray(lo, dtype=float)
    hi = np.ascontiguousarray(hi, dtype=float)
    c = 0.5 * (lo + hi)
    r = 0.5 * (hi - lo)
    B, n = lo.shape
    if with_jac:
        Jc = np.broadcast_to(np.eye(n), (B, n, n)).copy()
        Jr = np.zeros((B, n, n))
    L = len(weights)
    for k in range(L):
        W = np.asarray(weights[k], dtype=float)
        b = np.asarray(biases[k], dtype=float)
        aW = np.abs(W)
        sc = c @ W.T + b
        sr = r @ aW.T
        pad = SLACK * (np.abs(c) @ aW.T + np.abs(b) + sr) + TINY
        slo = sc - sr - pad
        shi = sc + sr + pad
        if with_jac:
            Sc = np.matmul(W, Jc)
            Sr = np.matmul(aW, Jr)
            Spad = SLACK * (np.matmul(aW, np.abs(Jc)) + Sr) + TINY
            Slo = Sc - Sr - Spad
            Shi = Sc + Sr + Spad
        if k == L - 1 and final_linear:
            ylo, yhi = slo, shi
            if with_jac:
                Jlo, Jhi = Slo, Shi
        else:
            tlo, thi = np.tanh(slo), np.tanh(shi)
            ylo = tlo - (SLACK * np.abs(tlo) + TINY)
            yhi = thi + (SLACK * np.abs(thi) + TINY)
            if with_jac:
                al, ah = np.abs(tlo), np.abs(thi)
                straddle = (slo <= 0.0) & (shi >= 0.0)
                near = np.where(straddle, 0.0, np.minimum(al, ah))
                far = np.maximum(al, ah)
                dlo = np.maximum(1.0 - far * far - SLACK, 0.0)[..., None]
                dhi = np.minimum(1.0 - near * near + SLACK, 1.0)[..., None]
                Jlo = np.where(Slo >= 0.0, dlo * Slo, dhi * Slo)
                Jhi = np.where(Shi >= 0.0, dhi * Shi, dlo * Shi)
        c = 0.5 * (ylo + yhi)
        r = 0.5 * (yhi - ylo)
        if with_jac:
            Jc = 0.5 * (Jlo + Jhi)
            Jr = 0.5 * (Jhi - Jlo)
    if with_jac:
        return ylo, yhi, Jlo, Jhi
    return ylo, yhi, None, None
