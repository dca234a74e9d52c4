# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM and dynamic-routing kernels.

Mirrors ``fatrec._kernels_py`` exactly (same shapes, same masking rules).
Matrix products go through BLAS; the gate nonlinearities, routing softmax and
squash are fused loops.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh, sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void _gemm(char ta, char tb, int m, int n, int k, double alpha,
                       double* A, int lda, double* B, int ldb,
                       double beta, double* C, int ldc) noexcept nogil:
    # row-major C = alpha op(A) op(B) + beta C, via column-major C^T = op(B)^T op(A)^T
    dgemm(&tb, &ta, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


cdef inline double _sigmoid(double x) noexcept nogil:
    return 0.5 * (1.0 + tanh(0.5 * x))


def lstm_forward(double[:, :, ::1] X, const unsigned char[:, ::1] mask,
                 double[:, ::1] W, double[::1] bW, double[:, ::1] V, double[::1] bV):
    cdef Py_ssize_t B = X.shape[0], L = X.shape[1], d = X.shape[2]
    cdef Py_ssize_t b, t, j
    H_ = np.zeros((B, L, d))
    C_ = np.zeros((B, L, d))
    G_ = np.zeros((B, L, 3 * d))
    I_ = np.zeros((B, L, d))
    TC_ = np.zeros((B, L, d))
    cdef double[:, :, ::1] H = H_, C = C_, G = G_, I = I_, TC = TC_
    cdef double[:, ::1] Z = np.zeros((B, 2 * d))
    cdef double[:, ::1] PG = np.zeros((B, 3 * d))
    cdef double[:, ::1] PC = np.zeros((B, d))
    cdef double[:, ::1] h = np.zeros((B, d))
    cdef double[:, ::1] c = np.zeros((B, d))
    cdef double f, ig, o, cand, cn, tcn
    if B == 0 or L == 0:
        return H_, C_, G_, I_, TC_
    with nogil:
        for t in range(L):
            for b in range(B):
                for j in range(d):
                    Z[b, j] = h[b, j]
                    Z[b, d + j] = X[b, t, j]
            _gemm(b'N', b'N', <int>B, <int>(3 * d), <int>(2 * d), 1.0,
                  &Z[0, 0], <int>(2 * d), &W[0, 0], <int>(3 * d), 0.0, &PG[0, 0], <int>(3 * d))
            _gemm(b'N', b'N', <int>B, <int>d, <int>(2 * d), 1.0,
                  &Z[0, 0], <int>(2 * d), &V[0, 0], <int>d, 0.0, &PC[0, 0], <int>d)
            for b in range(B):
                if mask[b, t]:
                    for j in range(d):
                        f = _sigmoid(PG[b, j] + bW[j])
                        ig = _sigmoid(PG[b, d + j] + bW[d + j])
                        o = _sigmoid(PG[b, 2 * d + j] + bW[2 * d + j])
                        cand = tanh(PC[b, j] + bV[j])
                        cn = f * c[b, j] + ig * cand
                        tcn = tanh(cn)
                        G[b, t, j] = f
                        G[b, t, d + j] = ig
                        G[b, t, 2 * d + j] = o
                        I[b, t, j] = cand
                        TC[b, t, j] = tcn
                        c[b, j] = cn
                        h[b, j] = o * tcn
                for j in range(d):
                    H[b, t, j] = h[b, j]
                    C[b, t, j] = c[b, j]
    return H_, C_, G_, I_, TC_


def lstm_backward(double[:, :, ::1] X, const unsigned char[:, ::1] mask,
                  double[:, ::1] W, double[:, ::1] V,
                  double[:, :, ::1] H, double[:, :, ::1] C, double[:, :, ::1] G,
                  double[:, :, ::1] I, double[:, :, ::1] TC, double[:, :, ::1] dH):
    cdef Py_ssize_t B = X.shape[0], L = X.shape[1], d = X.shape[2]
    cdef Py_ssize_t b, t, j
    dX_ = np.zeros((B, L, d))
    dW_ = np.zeros((2 * d, 3 * d))
    dV_ = np.zeros((2 * d, d))
    dbW_ = np.zeros(3 * d)
    dbV_ = np.zeros(d)
    cdef double[:, :, ::1] dX = dX_
    cdef double[:, ::1] dW = dW_, dV = dV_
    cdef double[::1] dbW = dbW_, dbV = dbV_
    cdef double[:, ::1] Z = np.zeros((B, 2 * d))
    cdef double[:, ::1] dZ = np.zeros((B, 2 * d))
    cdef double[:, ::1] dgate = np.zeros((B, 3 * d))
    cdef double[:, ::1] dcand = np.zeros((B, d))
    cdef double[:, ::1] dh = np.zeros((B, d))
    cdef double[:, ::1] dc = np.zeros((B, d))
    cdef double f, ig, o, cand, tcn, cp, dhv, dcv, gf, gi, go
    if B == 0 or L == 0:
        return dX_, dW_, dbW_, dV_, dbV_
    with nogil:
        for t in range(L - 1, -1, -1):
            for b in range(B):
                for j in range(d):
                    dh[b, j] += dH[b, t, j]
                    if t > 0:
                        Z[b, j] = H[b, t - 1, j]
                    else:
                        Z[b, j] = 0.0
                    Z[b, d + j] = X[b, t, j]
                if mask[b, t]:
                    for j in range(d):
                        f = G[b, t, j]
                        ig = G[b, t, d + j]
                        o = G[b, t, 2 * d + j]
                        cand = I[b, t, j]
                        tcn = TC[b, t, j]
                        cp = C[b, t - 1, j] if t > 0 else 0.0
                        dhv = dh[b, j]
                        dcv = dc[b, j] + dhv * o * (1.0 - tcn * tcn)
                        gf = dcv * cp * f * (1.0 - f)
                        gi = dcv * cand * ig * (1.0 - ig)
                        go = dhv * tcn * o * (1.0 - o)
                        dgate[b, j] = gf
                        dgate[b, d + j] = gi
                        dgate[b, 2 * d + j] = go
                        dcand[b, j] = dcv * ig * (1.0 - cand * cand)
                        dbW[j] += gf
                        dbW[d + j] += gi
                        dbW[2 * d + j] += go
                        dbV[j] += dcand[b, j]
                        dc[b, j] = dcv * f
                else:
                    for j in range(3 * d):
                        dgate[b, j] = 0.0
                    for j in range(d):
                        dcand[b, j] = 0.0
            _gemm(b'T', b'N', <int>(2 * d), <int>(3 * d), <int>B, 1.0,
                  &Z[0, 0], <int>(2 * d), &dgate[0, 0], <int>(3 * d), 1.0, &dW[0, 0], <int>(3 * d))
            _gemm(b'T', b'N', <int>(2 * d), <int>d, <int>B, 1.0,
                  &Z[0, 0], <int>(2 * d), &dcand[0, 0], <int>d, 1.0, &dV[0, 0], <int>d)
            _gemm(b'N', b'T', <int>B, <int>(2 * d), <int>(3 * d), 1.0,
                  &dgate[0, 0], <int>(3 * d), &W[0, 0], <int>(3 * d), 0.0, &dZ[0, 0], <int>(2 * d))
            _gemm(b'N', b'T', <int>B, <int>(2 * d), <int>d, 1.0,
                  &dcand[0, 0], <int>d, &V[0, 0], <int>d, 1.0, &dZ[0, 0], <int>(2 * d))
            for b in range(B):
                if mask[b, t]:
                    for j in range(d):
                        dX[b, t, j] = dZ[b, d + j]
                        dh[b, j] = dZ[b, j]
                # masked rows: dh and dc carry through unchanged
    return dX_, dW_, dbW_, dV_, dbV_


cdef inline void _squash_into(double* s, double* v, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t k
    cdef double sq = 0.0, n, scale
    for k in range(d):
        sq += s[k] * s[k]
    n = sqrt(sq)
    scale = n / (1.0 + sq)
    for k in range(d):
        v[k] = scale * s[k]


def squash(s):
    s = np.ascontiguousarray(s, dtype=np.float64)
    flat = s.reshape(-1, s.shape[s.ndim - 1])
    out = np.empty_like(flat)
    cdef double[:, ::1] sv = flat, ov = out
    cdef Py_ssize_t r
    with nogil:
        for r in range(sv.shape[0]):
            _squash_into(&sv[r, 0], &ov[r, 0], sv.shape[1])
    return out.reshape(s.shape)


def route_forward(double[:, :, :, ::1] uhat, const unsigned char[:, ::1] mask,
                  int iterations, b0=None):
    cdef Py_ssize_t U = uhat.shape[0], n = uhat.shape[1], T = uhat.shape[2], d = uhat.shape[3]
    cdef Py_ssize_t u, i, j, k, r
    C_all_ = np.zeros((iterations, U, n, T))
    S_all_ = np.zeros((iterations, U, T, d))
    V_all_ = np.zeros((iterations, U, T, d))
    b_ = np.zeros((n, T))
    cdef double[:, :, :, ::1] C_all = C_all_, S_all = S_all_, V_all = V_all_
    cdef double[:, ::1] b = b_
    cdef double[:, :, ::1] b0v
    cdef bint has_b0 = b0 is not None
    if has_b0:
        b0v = np.ascontiguousarray(b0, dtype=np.float64)
    cdef double mx, z, dot
    with nogil:
        for u in range(U):
            for i in range(n):
                for j in range(T):
                    b[i, j] = b0v[u, i, j] if has_b0 else 0.0
            for r in range(iterations):
                for i in range(n):
                    if not mask[u, i]:
                        continue
                    mx = b[i, 0]
                    for j in range(1, T):
                        if b[i, j] > mx:
                            mx = b[i, j]
                    z = 0.0
                    for j in range(T):
                        C_all[r, u, i, j] = exp(b[i, j] - mx)
                        z += C_all[r, u, i, j]
                    for j in range(T):
                        C_all[r, u, i, j] /= z
                for j in range(T):
                    for i in range(n):
                        if not mask[u, i]:
                            continue
                        for k in range(d):
                            S_all[r, u, j, k] += C_all[r, u, i, j] * uhat[u, i, j, k]
                    _squash_into(&S_all[r, u, j, 0], &V_all[r, u, j, 0], d)
                if r < iterations - 1:
                    for i in range(n):
                        if not mask[u, i]:
                            continue
                        for j in range(T):
                            dot = 0.0
                            for k in range(d):
                                dot += uhat[u, i, j, k] * V_all[r, u, j, k]
                            b[i, j] += dot
    return V_all_[iterations - 1].copy(), C_all_[iterations - 1].copy(), C_all_, S_all_, V_all_


def route_backward(double[:, :, :, ::1] uhat, const unsigned char[:, ::1] mask,
                   double[:, :, :, ::1] C_all, double[:, :, :, ::1] S_all,
                   double[:, :, :, ::1] V_all, double[:, :, ::1] dv, double[:, :, ::1] dc_final):
    cdef Py_ssize_t iterations = C_all.shape[0]
    cdef Py_ssize_t U = uhat.shape[0], n = uhat.shape[1], T = uhat.shape[2], d = uhat.shape[3]
    cdef Py_ssize_t u, i, j, k, r
    duhat_ = np.zeros((U, n, T, d))
    cdef double[:, :, :, ::1] duhat = duhat_
    cdef double[:, ::1] gb = np.zeros((n, T))
    cdef double[:, ::1] gv = np.zeros((T, d))
    cdef double[:, ::1] gs = np.zeros((T, d))
    cdef double[::1] gc = np.zeros(T)
    cdef double sq, nrm, scale, dk, sdot, acc, cg, c
    with nogil:
        for u in range(U):
            for i in range(n):
                for j in range(T):
                    gb[i, j] = 0.0
            for r in range(iterations - 1, -1, -1):
                # gradient reaching v_r
                for j in range(T):
                    for k in range(d):
                        gv[j, k] = dv[u, j, k] if r == iterations - 1 else 0.0
                if r < iterations - 1:
                    for i in range(n):
                        if not mask[u, i]:
                            continue
                        for j in range(T):
                            for k in range(d):
                                gv[j, k] += gb[i, j] * uhat[u, i, j, k]
                                duhat[u, i, j, k] += gb[i, j] * V_all[r, u, j, k]
                # squash backward
                for j in range(T):
                    sq = 0.0
                    sdot = 0.0
                    for k in range(d):
                        sq += S_all[r, u, j, k] * S_all[r, u, j, k]
                        sdot += S_all[r, u, j, k] * gv[j, k]
                    nrm = sqrt(sq)
                    scale = nrm / (1.0 + sq)
                    if nrm > 0:
                        dk = (1.0 - sq) / ((1.0 + sq) * (1.0 + sq) * nrm)
                    else:
                        dk = 0.0
                    for k in range(d):
                        gs[j, k] = scale * gv[j, k] + dk * sdot * S_all[r, u, j, k]
                # couplings and logits
                for i in range(n):
                    if not mask[u, i]:
                        continue
                    acc = 0.0
                    for j in range(T):
                        c = C_all[r, u, i, j]
                        cg = 0.0
                        for k in range(d):
                            cg += gs[j, k] * uhat[u, i, j, k]
                            duhat[u, i, j, k] += c * gs[j, k]
                        if r == iterations - 1:
                            cg += dc_final[u, i, j]
                        gc[j] = cg
                        acc += c * cg
                    for j in range(T):
                        gb[i, j] += C_all[r, u, i, j] * (gc[j] - acc)
    return duhat_
