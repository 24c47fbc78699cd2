# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched interval MLP kernel (same contract as ``_interval_py``)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, fabs

cnp.import_array()

cdef double SLACK = 1e-14
cdef double TINY = 1e-300


cdef void _layer(Py_ssize_t B, Py_ssize_t n, Py_ssize_t n_in, Py_ssize_t n_out,
                 const double* W, const double* aW, const double* bias,
                 const double* c, const double* rr, const double* Jc, const double* Jr,
                 const double* aJc, bint last_linear, bint with_jac,
                 double* ylo, double* yhi, double* Jlo, double* Jhi,
                 double* acc) noexcept nogil:
    cdef Py_ssize_t b, r, j, q
    cdef double s, rad, mag, w, aw, tl, th, al, ah, near, far, dlo = 0.0, dhi = 0.0
    cdef double lo_s, hi_s, Sr, Sm, Slo, Shi
    cdef const double* cb
    cdef const double* rb
    cdef Py_ssize_t idx
    cdef double sc, sr, sm
    cdef double* acc_c = acc
    cdef double* acc_r = acc + n
    cdef double* acc_m = acc + 2 * n
    for b in range(B):
        cb = c + b * n_in
        rb = rr + b * n_in
        for r in range(n_out):
            s = bias[r]
            rad = 0.0
            mag = fabs(bias[r])
            for j in range(n_in):
                w = W[r * n_in + j]
                aw = aW[r * n_in + j]
                s += w * cb[j]
                rad += aw * rb[j]
                mag += aw * fabs(cb[j])
            mag = SLACK * (mag + rad) + TINY
            lo_s = s - rad - mag
            hi_s = s + rad + mag
            if last_linear:
                ylo[b * n_out + r] = lo_s
                yhi[b * n_out + r] = hi_s
            else:
                tl = tanh(lo_s)
                th = tanh(hi_s)
                ylo[b * n_out + r] = tl - (SLACK * fabs(tl) + TINY)
                yhi[b * n_out + r] = th + (SLACK * fabs(th) + TINY)
                al = fabs(tl)
                ah = fabs(th)
                if lo_s <= 0.0 and hi_s >= 0.0:
                    near = 0.0
                else:
                    near = al if al < ah else ah
                far = al if al > ah else ah
                dlo = 1.0 - far * far - SLACK
                if dlo < 0.0:
                    dlo = 0.0
                dhi = 1.0 - near * near + SLACK
                if dhi > 1.0:
                    dhi = 1.0
            if not with_jac:
                continue
            for q in range(n):
                sc = 0.0
                sr = 0.0
                sm = 0.0
                for j in range(n_in):
                    w = W[r * n_in + j]
                    aw = aW[r * n_in + j]
                    idx = (b * n_in + j) * n + q
                    sc += w * Jc[idx]
                    sr += aw * Jr[idx]
                    sm += aw * aJc[idx]
                acc_c[q] = sc
                acc_r[q] = sr
                acc_m[q] = sm
            for q in range(n):
                Sr = acc_r[q]
                Sm = SLACK * (acc_m[q] + Sr) + TINY
                Slo = acc_c[q] - Sr - Sm
                Shi = acc_c[q] + Sr + Sm
                if last_linear:
                    Jlo[(b * n_out + r) * n + q] = Slo
                    Jhi[(b * n_out + r) * n + q] = Shi
                else:
                    Jlo[(b * n_out + r) * n + q] = dlo * Slo if Slo >= 0.0 else dhi * Slo
                    Jhi[(b * n_out + r) * n + q] = dhi * Shi if Shi >= 0.0 else dlo * Shi


cdef inline double* _ptr(cnp.ndarray a) noexcept nogil:
    return <double*> cnp.PyArray_DATA(a)


def interval_mlp(lo, hi, list weights, list biases, bint final_linear, bint with_jac):
    cdef cnp.ndarray lo_a = np.ascontiguousarray(lo, dtype=np.float64)
    cdef cnp.ndarray hi_a = np.ascontiguousarray(hi, dtype=np.float64)
    cdef Py_ssize_t B = lo_a.shape[0], n = lo_a.shape[1]
    cdef Py_ssize_t L = len(weights), k, n_in = n, n_out
    cdef cnp.ndarray W, aW
    cdef cnp.ndarray bias
    cdef cnp.ndarray c = 0.5 * (lo_a + hi_a)
    cdef cnp.ndarray rr = 0.5 * (hi_a - lo_a)
    cdef cnp.ndarray Jc, Jr, aJc, Jlo, Jhi
    cdef cnp.ndarray ylo, yhi
    cdef cnp.ndarray acc = np.empty(3 * max(n, 1))
    cdef bint last_linear
    if with_jac:
        Jc = np.ascontiguousarray(np.broadcast_to(np.eye(n), (B, n, n)))
        Jr = np.zeros((B, n, n))
    else:
        Jc = Jr = np.zeros((1, 1, 1))
    Jlo = Jhi = np.zeros((1, 1, 1))
    ylo = yhi = None
    for k in range(L):
        W = np.ascontiguousarray(weights[k], dtype=np.float64)
        aW = np.abs(W)
        bias = np.ascontiguousarray(biases[k], dtype=np.float64)
        n_out = W.shape[0]
        last_linear = final_linear and k == L - 1
        ylo = np.empty((B, n_out))
        yhi = np.empty((B, n_out))
        if with_jac:
            aJc = np.abs(Jc)
            Jlo = np.empty((B, n_out, n))
            Jhi = np.empty((B, n_out, n))
        else:
            aJc = Jc
        with nogil:
            _layer(B, n, n_in, n_out, _ptr(W), _ptr(aW), _ptr(bias), _ptr(c), _ptr(rr),
                   _ptr(Jc), _ptr(Jr), _ptr(aJc), last_linear, with_jac,
                   _ptr(ylo), _ptr(yhi), _ptr(Jlo), _ptr(Jhi), _ptr(acc))
        c = 0.5 * (ylo + yhi)
        rr = 0.5 * (yhi - ylo)
        if with_jac:
            Jc = 0.5 * (Jlo + Jhi)
            Jr = 0.5 * (Jhi - Jlo)
        n_in = n_out
    if with_jac:
        return ylo, yhi, Jlo, Jhi
    return ylo, yhi, None, None
