# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv2d kernels: im2col/col2im loops around BLAS dgemm.

All arrays are C-contiguous float64. Inputs are already padded; padding and
cropping are handled by the caller.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _gemm_rm(bint ta, bint tb, int m, int n, int k,
                   double *a, int lda, double *b, int ldb,
                   double beta, double *c, int ldc) noexcept nogil:
    # Row-major C = op(A) @ op(B), via column-major C^T = op(B)^T @ op(A)^T.
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    cdef double alpha = 1.0
    dgemm(&cb, &ca, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef void _im2col(const double[:, :, :, ::1] x, double[:, ::1] cols,
                  int kh, int kw, int stride, int ho, int wo) noexcept nogil:
    cdef Py_ssize_t n, c, a, b, i, j, row, col
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    for n in range(N):
        for i in range(ho):
            for j in range(wo):
                row = (n * ho + i) * wo + j
                col = 0
                for c in range(C):
                    for a in range(kh):
                        for b in range(kw):
                            cols[row, col] = x[n, c, i * stride + a, j * stride + b]
                            col += 1


cdef void _col2im(const double[:, ::1] cols, double[:, :, :, ::1] x,
                  int kh, int kw, int stride, int ho, int wo) noexcept nogil:
    cdef Py_ssize_t n, c, a, b, i, j, row, col
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    for n in range(N):
        for i in range(ho):
            for j in range(wo):
                row = (n * ho + i) * wo + j
                col = 0
                for c in range(C):
                    for a in range(kh):
                        for b in range(kw):
                            x[n, c, i * stride + a, j * stride + b] += cols[row, col]
                            col += 1


def _out_size(int size, int k, int stride):
    if size < k:
        raise ValueError(f"padded input {size} smaller than kernel {k}")
    return (size - k) // stride + 1


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, int stride):
    """Valid cross-correlation of padded ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw)."""
    cdef int N = x.shape[0], C = x.shape[1], O = w.shape[0]
    cdef int kh = w.shape[2], kw = w.shape[3]
    if w.shape[1] != C:
        raise ValueError("channel mismatch between input and weight")
    cdef int ho = _out_size(x.shape[2], kh, stride)
    cdef int wo = _out_size(x.shape[3], kw, stride)
    cdef int P = ho * wo, K = C * kh * kw
    cols = np.empty((N * P, K), dtype=np.float64)
    y2 = np.empty((N * P, O), dtype=np.float64)
    cdef double[:, ::1] cv = cols
    cdef double[:, ::1] yv = y2
    cdef const double[:, :, :, ::1] wv = w
    with nogil:
        _im2col(x, cv, kh, kw, stride, ho, wo)
        # y2 = cols @ w2^T, w2 = w.reshape(O, K)
        _gemm_rm(False, True, N * P, O, K, &cv[0, 0], K,
                 <double *>&wv[0, 0, 0, 0], K, 0.0, &yv[0, 0], O)
    return np.ascontiguousarray(y2.reshape(N, ho, wo, O).transpose(0, 3, 1, 2))


def conv2d_backward_input(const double[:, :, :, ::1] gy, const double[:, :, :, ::1] w,
                          int stride, int hp, int wp):
    """Adjoint of :func:`conv2d_forward` with respect to its (padded) input."""
    cdef int N = gy.shape[0], O = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef int C = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    if w.shape[0] != O:
        raise ValueError("channel mismatch between gradient and weight")
    if _out_size(hp, kh, stride) != ho or _out_size(wp, kw, stride) != wo:
        raise ValueError("padded input size incompatible with gradient size")
    cdef int P = ho * wo, K = C * kh * kw
    gy2 = np.ascontiguousarray(np.asarray(gy).transpose(0, 2, 3, 1)).reshape(N * P, O)
    gcols = np.empty((N * P, K), dtype=np.float64)
    gx = np.zeros((N, C, hp, wp), dtype=np.float64)
    cdef double[:, ::1] gyv = gy2
    cdef double[:, ::1] gcv = gcols
    cdef double[:, :, :, ::1] gxv = gx
    cdef const double[:, :, :, ::1] wv = w
    with nogil:
        _gemm_rm(False, False, N * P, K, O, &gyv[0, 0], O,
                 <double *>&wv[0, 0, 0, 0], K, 0.0, &gcv[0, 0], K)
        _col2im(gcv, gxv, kh, kw, stride, ho, wo)
    return gx


def conv2d_backward_weight(const double[:, :, :, ::1] x, const double[:, :, :, ::1] gy,
                           int stride, int kh, int kw):
    """Gradient of :func:`conv2d_forward` with respect to the weight."""
    cdef int N = x.shape[0], C = x.shape[1], O = gy.shape[1]
    cdef int ho = gy.shape[2], wo = gy.shape[3]
    if _out_size(x.shape[2], kh, stride) != ho or _out_size(x.shape[3], kw, stride) != wo:
        raise ValueError("input size incompatible with gradient size")
    cdef int P = ho * wo, K = C * kh * kw
    cols = np.empty((N * P, K), dtype=np.float64)
    gy2 = np.ascontiguousarray(np.asarray(gy).transpose(0, 2, 3, 1)).reshape(N * P, O)
    gw = np.empty((O, C, kh, kw), dtype=np.float64)
    cdef double[:, ::1] cv = cols
    cdef double[:, ::1] gyv = gy2
    cdef double[:, :, :, ::1] gwv = gw
    with nogil:
        _im2col(x, cv, kh, kw, stride, ho, wo)
        # gw2 = gy2^T @ cols
        _gemm_rm(True, False, O, K, N * P, &gyv[0, 0], O,
                 &cv[0, 0], K, 0.0, &gwv[0, 0, 0, 0], K)
    return gw
