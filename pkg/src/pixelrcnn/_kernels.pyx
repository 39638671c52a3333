# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: peephole LSTM (forward + BPTT) and valid conv2d.

Array layouts match ``_kernels_py``.  Dense products go through the BLAS
that scipy links against; gate activations use the vectorised loops of
``_vecmath.h``; convolutions are im2col followed by one GEMM.  float32 and
float64 are both supported through
fused types; all array arguments of one call must share a dtype.
"""
from cython cimport floating
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport sgemm, dgemm

import numpy as np

BACKEND = "cython"


cdef inline void _gemm(char ta, char tb, int M, int N, int K, floating alpha,
                       floating* A, int lda, floating* B, int ldb, floating beta,
                       floating* C, int ldc) noexcept nogil:
    # Row-major C = op(A) op(B): column-major BLAS sees every matrix
    # transposed, so swap the operands and the M/N extents.
    if floating is float:
        sgemm(&tb, &ta, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)
    else:
        dgemm(&tb, &ta, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


cdef extern from "_vecmath.h" nogil:
    void vm_sigmoid_f(const float* x, float* y, long n)
    void vm_sigmoid_d(const double* x, double* y, long n)
    void vm_tanh_f(const float* x, float* y, long n)
    void vm_tanh_d(const double* x, double* y, long n)


cdef inline void _sigmoid_v(floating* x, floating* y, Py_ssize_t n) noexcept nogil:
    if floating is float:
        vm_sigmoid_f(x, y, n)
    else:
        vm_sigmoid_d(x, y, n)


cdef inline void _tanh_v(floating* x, floating* y, Py_ssize_t n) noexcept nogil:
    if floating is float:
        vm_tanh_f(x, y, n)
    else:
        vm_tanh_d(x, y, n)


def lstm_forward(floating[:, :, ::1] X, floating[:, ::1] Wx, floating[:, ::1] Wh,
                 floating[::1] b, floating[:, ::1] wc, bint peephole):
    cdef Py_ssize_t N = X.shape[0], T = X.shape[1], B = X.shape[2]
    cdef Py_ssize_t U = Wh.shape[0], G = 4 * Wh.shape[0]
    if N == 0 or T == 0:
        raise ValueError("empty batch or sequence")
    dtype = np.float32 if floating is float else np.float64
    gates_a = np.empty((T, N, G), dtype=dtype)
    C_a = np.zeros((T + 1, N, U), dtype=dtype)
    H_a = np.zeros((T + 1, N, U), dtype=dtype)
    cdef floating[:, :, ::1] gates = gates_a
    cdef floating[:, :, ::1] C = C_a
    cdef floating[:, :, ::1] H = H_a
    cdef Py_ssize_t t, n, j
    cdef floating* z
    cdef floating* zr
    cdef floating* cp
    cdef floating* cn
    cdef floating* hn
    with nogil:
        for t in range(T):
            z = &gates[t, 0, 0]
            for n in range(N):
                for j in range(G):
                    z[n * G + j] = b[j]
            _gemm(c'N', c'N', <int>N, <int>G, <int>B, <floating>1.0,
                  &X[0, t, 0], <int>(T * B), &Wx[0, 0], <int>G, <floating>1.0, z, <int>G)
            if t > 0:
                _gemm(c'N', c'N', <int>N, <int>G, <int>U, <floating>1.0,
                      &H[t, 0, 0], <int>U, &Wh[0, 0], <int>G, <floating>1.0, z, <int>G)
            # per row: i, f and g from the pre-activations, then c_t, then o
            # (which reads the new cell state), then h_t
            for n in range(N):
                zr = z + n * G
                cp = &C[t, n, 0]
                cn = &C[t + 1, n, 0]
                hn = &H[t + 1, n, 0]
                if peephole:
                    for j in range(U):
                        zr[j] += cp[j] * wc[0, j]
                        zr[U + j] += cp[j] * wc[1, j]
                _sigmoid_v(zr, zr, 2 * U)
                _tanh_v(zr + 2 * U, zr + 2 * U, U)
                for j in range(U):
                    cn[j] = zr[U + j] * cp[j] + zr[j] * zr[2 * U + j]
                if peephole:
                    for j in range(U):
                        zr[3 * U + j] += cn[j] * wc[2, j]
                _sigmoid_v(zr + 3 * U, zr + 3 * U, U)
                _tanh_v(cn, hn, U)
                for j in range(U):
                    hn[j] *= zr[3 * U + j]
    return gates_a, C_a, H_a


def lstm_backward(floating[:, :, ::1] dY, floating[:, :, ::1] X, floating[:, ::1] Wx,
                  floating[:, ::1] Wh, floating[:, ::1] wc, bint peephole,
                  floating[:, :, ::1] gates, floating[:, :, ::1] C, floating[:, :, ::1] H):
    cdef Py_ssize_t N = X.shape[0], T = X.shape[1], B = X.shape[2]
    cdef Py_ssize_t U = Wh.shape[0], G = 4 * Wh.shape[0]
    dtype = np.float32 if floating is float else np.float64
    dX_a = np.zeros((N, T, B), dtype=dtype)
    dWx_a = np.zeros((B, G), dtype=dtype)
    dWh_a = np.zeros((U, G), dtype=dtype)
    db_a = np.zeros(G, dtype=dtype)
    dwc_a = np.zeros((3, U), dtype=dtype)
    dh_a = np.zeros((N, U), dtype=dtype)
    dcn_a = np.zeros((N, U), dtype=dtype)
    dz_a = np.empty((N, G), dtype=dtype)
    tc_a = np.empty(U, dtype=dtype)
    cdef floating[:, :, ::1] dX = dX_a
    cdef floating[:, ::1] dWx = dWx_a
    cdef floating[:, ::1] dWh = dWh_a
    cdef floating[::1] db = db_a
    cdef floating[:, ::1] dwc = dwc_a
    cdef floating[:, ::1] dh_next = dh_a
    cdef floating[:, ::1] dc_next = dcn_a
    cdef floating[:, ::1] dz = dz_a
    cdef floating[::1] tcrow = tc_a
    cdef Py_ssize_t t, n, j
    cdef floating i, f, g, o, cp, c, tc, dh, dc, dzi, dzf, dzg, dzo, dcp
    with nogil:
        for t in range(T - 1, -1, -1):
            for n in range(N):
                _tanh_v(&C[t + 1, n, 0], &tcrow[0], U)
                for j in range(U):
                    i = gates[t, n, j]
                    f = gates[t, n, U + j]
                    g = gates[t, n, 2 * U + j]
                    o = gates[t, n, 3 * U + j]
                    cp = C[t, n, j]
                    c = C[t + 1, n, j]
                    tc = tcrow[j]
                    dh = dY[n, t, j] + dh_next[n, j]
                    dzo = dh * tc * o * (1 - o)
                    dc = dc_next[n, j] + dh * o * (1 - tc * tc)
                    if peephole:
                        dc = dc + dzo * wc[2, j]
                    dzi = dc * g * i * (1 - i)
                    dzf = dc * cp * f * (1 - f)
                    dzg = dc * i * (1 - g * g)
                    dcp = dc * f
                    if peephole:
                        dcp = dcp + dzi * wc[0, j] + dzf * wc[1, j]
                        dwc[0, j] += dzi * cp
                        dwc[1, j] += dzf * cp
                        dwc[2, j] += dzo * c
                    dc_next[n, j] = dcp
                    dz[n, j] = dzi
                    dz[n, U + j] = dzf
                    dz[n, 2 * U + j] = dzg
                    dz[n, 3 * U + j] = dzo
            for n in range(N):
                for j in range(G):
                    db[j] += dz[n, j]
            _gemm(c'T', c'N', <int>B, <int>G, <int>N, <floating>1.0,
                  &X[0, t, 0], <int>(T * B), &dz[0, 0], <int>G, <floating>1.0, &dWx[0, 0], <int>G)
            if t > 0:
                _gemm(c'T', c'N', <int>U, <int>G, <int>N, <floating>1.0,
                      &H[t, 0, 0], <int>U, &dz[0, 0], <int>G, <floating>1.0, &dWh[0, 0], <int>G)
            _gemm(c'N', c'T', <int>N, <int>U, <int>G, <floating>1.0,
                  &dz[0, 0], <int>G, &Wh[0, 0], <int>G, <floating>0.0, &dh_next[0, 0], <int>U)
            _gemm(c'N', c'T', <int>N, <int>B, <int>G, <floating>1.0,
                  &dz[0, 0], <int>G, &Wx[0, 0], <int>G, <floating>0.0, &dX[0, t, 0], <int>(T * B))
    return dX_a, dWx_a, dWh_a, db_a, dwc_a


cdef void _im2col(floating[:, :, :, ::1] x, Py_ssize_t f, floating* cols) noexcept nogil:
    # one row per output cell; row layout (p, q, c) matches w.reshape(f*f*Cin, K)
    cdef Py_ssize_t N = x.shape[0], Hin = x.shape[1], Win = x.shape[2], Cin = x.shape[3]
    cdef Py_ssize_t Ho = Hin - f + 1, Wo = Win - f + 1, span = f * Cin, D = f * span
    cdef Py_ssize_t n, i, j, p
    cdef floating* row
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                row = cols + ((n * Ho + i) * Wo + j) * D
                for p in range(f):
                    memcpy(row + p * span, &x[n, i + p, j, 0], span * sizeof(floating))


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, floating[::1] b):
    cdef Py_ssize_t N = x.shape[0], Hin = x.shape[1], Win = x.shape[2], Cin = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], K = w.shape[3]
    cdef Py_ssize_t Ho = Hin - f + 1, Wo = Win - f + 1
    cdef Py_ssize_t M = N * Ho * Wo, D = f * f * Cin
    dtype = np.float32 if floating is float else np.float64
    out_a = np.empty((N, Ho, Wo, K), dtype=dtype)
    cols_a = np.empty((M, D), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_a
    cdef floating[:, ::1] cols = cols_a
    cdef Py_ssize_t m, k
    cdef floating* op = &out[0, 0, 0, 0]
    with nogil:
        _im2col(x, f, &cols[0, 0])
        for m in range(M):
            for k in range(K):
                op[m * K + k] = b[k]
        _gemm(c'N', c'N', <int>M, <int>K, <int>D, <floating>1.0,
              &cols[0, 0], <int>D, &w[0, 0, 0, 0], <int>K, <floating>1.0, op, <int>K)
    return out_a


def conv2d_backward(floating[:, :, :, ::1] dout, floating[:, :, :, ::1] x,
                    floating[:, :, :, ::1] w):
    cdef Py_ssize_t N = x.shape[0], Hin = x.shape[1], Win = x.shape[2], Cin = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], K = w.shape[3]
    cdef Py_ssize_t Ho = Hin - f + 1, Wo = Win - f + 1
    cdef Py_ssize_t M = N * Ho * Wo, D = f * f * Cin, span = f * Cin
    dtype = np.float32 if floating is float else np.float64
    dx_a = np.zeros((N, Hin, Win, Cin), dtype=dtype)
    dw_a = np.empty((f, f, Cin, K), dtype=dtype)
    db_a = np.zeros(K, dtype=dtype)
    cols_a = np.empty((M, D), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_a
    cdef floating[:, :, :, ::1] dw = dw_a
    cdef floating[::1] db = db_a
    cdef floating[:, ::1] cols = cols_a
    cdef Py_ssize_t n, i, j, p, m, k, e
    cdef floating* dp = &dout[0, 0, 0, 0]
    cdef floating* row
    cdef floating* dst
    with nogil:
        for m in range(M):
            for k in range(K):
                db[k] += dp[m * K + k]
        _im2col(x, f, &cols[0, 0])
        _gemm(c'T', c'N', <int>D, <int>K, <int>M, <floating>1.0,
              &cols[0, 0], <int>D, dp, <int>K, <floating>0.0, &dw[0, 0, 0, 0], <int>K)
        # reuse the patch buffer for d(patches) = dout @ w^T, then scatter back
        _gemm(c'N', c'T', <int>M, <int>D, <int>K, <floating>1.0,
              dp, <int>K, &w[0, 0, 0, 0], <int>K, <floating>0.0, &cols[0, 0], <int>D)
        for n in range(N):
            for i in range(Ho):
                for j in range(Wo):
                    row = &cols[(n * Ho + i) * Wo + j, 0]
                    for p in range(f):
                        dst = &dx[n, i + p, j, 0]
                        for e in range(span):
                            dst[e] += row[p * span + e]
    return dx_a, dw_a, db_a
