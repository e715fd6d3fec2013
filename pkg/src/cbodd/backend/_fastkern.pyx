# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core for the convolution hot path.

Patch extraction (im2col) and its scatter inverse run as C loops; the
contractions go straight to BLAS dgemm, skipping the Python-level view
and copy machinery of the reference backend.  Single-threaded packing
with one BLAS call per contraction keeps results bit-reproducible run to
run.  Inputs arrive already padded and C-contiguous; signatures mirror
cbodd.backend.reference.
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND_NAME = "compiled"


cdef void _im2col(double[:, :, :, ::1] xp, double[:, ::1] cols,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                  Py_ssize_t h_out, Py_ssize_t w_out) noexcept nogil:
    cdef Py_ssize_t batch = xp.shape[0], c_in = xp.shape[1]
    cdef Py_ssize_t b, ci, u, v, oh, ow, n, k
    for b in range(batch):
        for oh in range(h_out):
            for ow in range(w_out):
                n = (b * h_out + oh) * w_out + ow
                k = 0
                for ci in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            cols[n, k] = xp[b, ci, oh * stride + u, ow * stride + v]
                            k += 1


cdef void _col2im(double[:, ::1] cols, double[:, :, :, ::1] gxp,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                  Py_ssize_t h_out, Py_ssize_t w_out) noexcept nogil:
    cdef Py_ssize_t batch = gxp.shape[0], c_in = gxp.shape[1]
    cdef Py_ssize_t b, ci, u, v, oh, ow, n, k
    for b in range(batch):
        for oh in range(h_out):
            for ow in range(w_out):
                n = (b * h_out + oh) * w_out + ow
                k = 0
                for ci in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            gxp[b, ci, oh * stride + u, ow * stride + v] += cols[n, k]
                            k += 1


cdef void _gemm_ct(char ta, char tb, int m, int n, int k, double* a, int lda,
                   double* b, int ldb, double* c, int ldc) noexcept nogil:
    # column-major dgemm wrapper: C := op(A) @ op(B)
    cdef double one = 1.0, zero = 0.0
    dgemm(&ta, &tb, &m, &n, &k, &one, a, &lda, b, &ldb, &zero, c, &ldc)


def conv2d_forward(double[:, :, :, ::1] xp, double[:, :, :, ::1] w, int stride):
    cdef Py_ssize_t batch = xp.shape[0], c_in = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t h_out = (hp - kh) // stride + 1
    cdef Py_ssize_t w_out = (wp - kw) // stride + 1
    cdef Py_ssize_t n_rows = batch * h_out * w_out
    cdef Py_ssize_t k_dim = c_in * kh * kw

    cols_arr = np.empty((n_rows, k_dim))
    cdef double[:, ::1] cols = cols_arr
    _im2col(xp, cols, kh, kw, stride, h_out, w_out)

    ym_arr = np.empty((n_rows, c_out))
    cdef double[:, ::1] ym = ym_arr
    cdef double[:, :, :, ::1] wv = w
    # Y (N, Co) = cols (N, K) @ W^T: column-major C (Co, N) = op(A=W^T) op(B=cols^T)
    _gemm_ct(b'T', b'N', <int>c_out, <int>n_rows, <int>k_dim,
             &wv[0, 0, 0, 0], <int>k_dim, &cols[0, 0], <int>k_dim,
             &ym[0, 0], <int>c_out)

    out_arr = np.empty((batch, c_out, h_out, w_out))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, co, oh, ow, n
    for b in range(batch):
        for co in range(c_out):
            for oh in range(h_out):
                n = (b * h_out + oh) * w_out
                for ow in range(w_out):
                    out[b, co, oh, ow] = ym[n + ow, co]
    return out_arr


def conv2d_grad_input(double[:, :, :, ::1] gy, double[:, :, :, ::1] w,
                      int stride, int hp, int wp):
    cdef Py_ssize_t batch = gy.shape[0], c_out = gy.shape[1]
    cdef Py_ssize_t h_out = gy.shape[2], w_out = gy.shape[3]
    cdef Py_ssize_t c_in = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t n_rows = batch * h_out * w_out
    cdef Py_ssize_t k_dim = c_in * kh * kw

    gym_arr = np.empty((n_rows, c_out))
    cdef double[:, ::1] gym = gym_arr
    cdef Py_ssize_t b, co, oh, ow, n
    for b in range(batch):
        for co in range(c_out):
            for oh in range(h_out):
                n = (b * h_out + oh) * w_out
                for ow in range(w_out):
                    gym[n + ow, co] = gy[b, co, oh, ow]

    gcols_arr = np.empty((n_rows, k_dim))
    cdef double[:, ::1] gcols = gcols_arr
    cdef double[:, :, :, ::1] wv = w
    # gcols (N, K) = gy_m (N, Co) @ W: column-major C (K, N) = A=W^T(K,Co) B=gy_m^T(Co,N)
    _gemm_ct(b'N', b'N', <int>k_dim, <int>n_rows, <int>c_out,
             &wv[0, 0, 0, 0], <int>k_dim, &gym[0, 0], <int>c_out,
             &gcols[0, 0], <int>k_dim)

    gx_arr = np.zeros((batch, c_in, hp, wp))
    cdef double[:, :, :, ::1] gx = gx_arr
    _col2im(gcols, gx, kh, kw, stride, h_out, w_out)
    return gx_arr


def conv2d_grad_weight(double[:, :, :, ::1] gy, double[:, :, :, ::1] xp,
                       int kh, int kw, int stride):
    cdef Py_ssize_t batch = gy.shape[0], c_out = gy.shape[1]
    cdef Py_ssize_t h_out = gy.shape[2], w_out = gy.shape[3]
    cdef Py_ssize_t c_in = xp.shape[1]
    cdef Py_ssize_t n_rows = batch * h_out * w_out
    cdef Py_ssize_t k_dim = c_in * kh * kw

    cols_arr = np.empty((n_rows, k_dim))
    cdef double[:, ::1] cols = cols_arr
    _im2col(xp, cols, kh, kw, stride, h_out, w_out)

    gym_arr = np.empty((n_rows, c_out))
    cdef double[:, ::1] gym = gym_arr
    cdef Py_ssize_t b, co, oh, ow, n
    for b in range(batch):
        for co in range(c_out):
            for oh in range(h_out):
                n = (b * h_out + oh) * w_out
                for ow in range(w_out):
                    gym[n + ow, co] = gy[b, co, oh, ow]

    gw_arr = np.empty((c_out, c_in, kh, kw))
    cdef double[:, :, :, ::1] gw = gw_arr
    # gw_m (Co, K) = gy_m^T (Co, N) @ cols (N, K):
    # column-major C (K, Co) = A=cols^T(K,N) B=gy_m(N,Co)
    _gemm_ct(b'N', b'T', <int>k_dim, <int>c_out, <int>n_rows,
             &cols[0, 0], <int>k_dim, &gym[0, 0], <int>c_out,
             &gw[0, 0, 0, 0], <int>k_dim)
    return gw_arr
