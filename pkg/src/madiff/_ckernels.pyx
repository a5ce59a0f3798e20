# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: same-padded 2-D convolution and pixel substitution."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b):
    cdef Py_ssize_t n_img = x.shape[0], c_in = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], k = w.shape[2], pad = w.shape[2] // 2
    cdef Py_ssize_t n, o, c, i, j, di, dj, i0, i1, j0, j1
    cdef double acc, wv
    cdef double *po
    cdef const double *px
    out_arr = np.empty((n_img, c_out, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    with nogil:
        for n in range(n_img):
            for o in range(c_out):
                for i in range(h):
                    for j in range(wd):
                        out[n, o, i, j] = b[o]
                for c in range(c_in):
                    for di in range(k):
                        i0 = pad - di if di < pad else 0
                        i1 = h + pad - di if di > pad else h
                        for dj in range(k):
                            j0 = pad - dj if dj < pad else 0
                            j1 = wd + pad - dj if dj > pad else wd
                            wv = w[o, c, di, dj]
                            for i in range(i0, i1):
                                po = &out[n, o, i, 0]
                                px = &x[n, c, i + di - pad, dj - pad]
                                for j in range(j0, j1):
                                    po[j] += wv * px[j]
    return out_arr


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] g):
    cdef Py_ssize_t n_img = x.shape[0], c_in = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], k = w.shape[2], pad = w.shape[2] // 2
    cdef Py_ssize_t n, o, c, i, j, di, dj, i0, i1, j0, j1
    cdef double acc, wv
    cdef const double *pg
    cdef const double *px
    cdef double *pgx
    gx_arr = np.zeros((n_img, c_in, h, wd), dtype=np.float64)
    gw_arr = np.zeros((c_out, c_in, k, k), dtype=np.float64)
    gb_arr = np.zeros(c_out, dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    with nogil:
        for n in range(n_img):
            for o in range(c_out):
                acc = 0.0
                for i in range(h):
                    for j in range(wd):
                        acc = acc + g[n, o, i, j]
                gb[o] += acc
                for c in range(c_in):
                    for di in range(k):
                        i0 = pad - di if di < pad else 0
                        i1 = h + pad - di if di > pad else h
                        for dj in range(k):
                            j0 = pad - dj if dj < pad else 0
                            j1 = wd + pad - dj if dj > pad else wd
                            wv = w[o, c, di, dj]
                            acc = 0.0
                            for i in range(i0, i1):
                                pg = &g[n, o, i, 0]
                                px = &x[n, c, i + di - pad, dj - pad]
                                pgx = &gx[n, c, i + di - pad, dj - pad]
                                for j in range(j0, j1):
                                    acc = acc + pg[j] * px[j]
                                    pgx[j] += wv * pg[j]
                            gw[o, c, di, dj] += acc
    return gx_arr, gw_arr, gb_arr


def substitute_pixels(double[:, :, ::1] out, const double[:, :, ::1] src,
                      const Py_ssize_t[::1] dst_rows, const Py_ssize_t[::1] dst_cols,
                      const Py_ssize_t[::1] src_rows, const Py_ssize_t[::1] src_cols):
    cdef Py_ssize_t n = dst_rows.shape[0], ch = out.shape[0], i, c
    with nogil:
        for i in range(n):
            for c in range(ch):
                out[c, dst_rows[i], dst_cols[i]] = src[c, src_rows[i], src_cols[i]]
