# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: direct-loop twins of ``numpy_backend``.

Same boundary handling (one-ring zero padding), same max-pool tie rule
(first maximum wins) and the same centred coordinate-gradient convention
at exactly-integer sampling coordinates.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

NAME = "cython"


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                   b, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * pad - kw) // stride + 1
    y_arr = np.zeros((n, co, oh, ow))
    cdef double[:, :, :, ::1] y = y_arr
    cdef double[::1] bv
    cdef bint has_b = b is not None
    cdef Py_ssize_t ni, oc, ic, i, j, ki, kj, iy, ix
    cdef double acc, bias
    if has_b:
        bv = b
    for ni in range(n):
        for oc in range(co):
            bias = bv[oc] if has_b else 0.0
            for i in range(oh):
                for j in range(ow):
                    acc = bias
                    for ic in range(c):
                        for ki in range(kh):
                            iy = i * stride + ki - pad
                            if iy < 0 or iy >= h:
                                continue
                            for kj in range(kw):
                                ix = j * stride + kj - pad
                                if ix < 0 or ix >= wd:
                                    continue
                                acc += x[ni, ic, iy, ix] * w[oc, ic, ki, kj]
                    y[ni, oc, i, j] = acc
    return y_arr


def conv2d_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                    double[:, :, :, ::1] gy, int stride, int pad, bint need_gx=True):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    gw_arr = np.zeros((co, c, kh, kw))
    gb_arr = np.zeros(co)
    gx_arr = np.zeros((n, c, h, wd)) if need_gx else None
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double[:, :, :, ::1] gx
    if need_gx:
        gx = gx_arr
    cdef Py_ssize_t ni, oc, ic, i, j, ki, kj, iy, ix
    cdef double g
    for ni in range(n):
        for oc in range(co):
            for i in range(oh):
                for j in range(ow):
                    g = gy[ni, oc, i, j]
                    gb[oc] += g
                    for ic in range(c):
                        for ki in range(kh):
                            iy = i * stride + ki - pad
                            if iy < 0 or iy >= h:
                                continue
                            for kj in range(kw):
                                ix = j * stride + kj - pad
                                if ix < 0 or ix >= wd:
                                    continue
                                gw[oc, ic, ki, kj] += g * x[ni, ic, iy, ix]
                                if need_gx:
                                    gx[ni, ic, iy, ix] += g * w[oc, ic, ki, kj]
    return gx_arr, gw_arr, gb_arr


def maxpool2_forward(double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = h // 2, ow = w // 2
    y_arr = np.zeros((n, c, oh, ow))
    s_arr = np.zeros((n, c, oh, ow), dtype=np.int8)
    cdef double[:, :, :, ::1] y = y_arr
    cdef signed char[:, :, :, ::1] s = s_arr
    cdef Py_ssize_t ni, ic, i, j, k, iy, ix
    cdef double best, v
    cdef signed char arg
    for ni in range(n):
        for ic in range(c):
            for i in range(oh):
                for j in range(ow):
                    best = x[ni, ic, 2 * i, 2 * j]
                    arg = 0
                    for k in range(1, 4):
                        iy = 2 * i + (k >> 1)
                        ix = 2 * j + (k & 1)
                        v = x[ni, ic, iy, ix]
                        if v > best:
                            best = v
                            arg = <signed char> k
                    y[ni, ic, i, j] = best
                    s[ni, ic, i, j] = arg
    return y_arr, s_arr


def maxpool2_backward(signed char[:, :, :, ::1] switches, double[:, :, :, ::1] gy,
                      Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], oh = gy.shape[2], ow = gy.shape[3]
    gx_arr = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t ni, ic, i, j
    cdef signed char k
    for ni in range(n):
        for ic in range(c):
            for i in range(oh):
                for j in range(ow):
                    k = switches[ni, ic, i, j]
                    gx[ni, ic, 2 * i + (k >> 1), 2 * j + (k & 1)] += gy[ni, ic, i, j]
    return gx_arr


cdef inline double _at(double[:, :, :, ::1] v, Py_ssize_t n, Py_ssize_t c,
                       Py_ssize_t iy, Py_ssize_t ix, Py_ssize_t h, Py_ssize_t w) noexcept:
    if iy < 0 or iy >= h or ix < 0 or ix >= w:
        return 0.0
    return v[n, c, iy, ix]


def bilinear_forward(double[:, :, :, ::1] v, double[:, :, ::1] px, double[:, :, ::1] py):
    cdef Py_ssize_t n = v.shape[0], c = v.shape[1], h = v.shape[2], w = v.shape[3]
    cdef Py_ssize_t oh = px.shape[1], ow = px.shape[2]
    out_arr = np.zeros((n, c, oh, ow))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ni, ic, i, j, x0, y0
    cdef double xf, yf, fx, fy
    for ni in range(n):
        for i in range(oh):
            for j in range(ow):
                xf = px[ni, i, j]
                yf = py[ni, i, j]
                x0 = _ifloor(xf)
                y0 = _ifloor(yf)
                fx = xf - x0
                fy = yf - y0
                for ic in range(c):
                    out[ni, ic, i, j] = (
                        _at(v, ni, ic, y0, x0, h, w) * (1 - fx) * (1 - fy)
                        + _at(v, ni, ic, y0, x0 + 1, h, w) * fx * (1 - fy)
                        + _at(v, ni, ic, y0 + 1, x0, h, w) * (1 - fx) * fy
                        + _at(v, ni, ic, y0 + 1, x0 + 1, h, w) * fx * fy
                    )
    return out_arr


cdef inline Py_ssize_t _ifloor(double x) noexcept:
    cdef Py_ssize_t i = <Py_ssize_t> x
    if x < 0 and x != i:
        i -= 1
    return i


def bilinear_backward(double[:, :, :, ::1] v, double[:, :, ::1] px,
                      double[:, :, ::1] py, double[:, :, :, ::1] gy):
    cdef Py_ssize_t n = v.shape[0], c = v.shape[1], h = v.shape[2], w = v.shape[3]
    cdef Py_ssize_t oh = px.shape[1], ow = px.shape[2]
    gv_arr = np.zeros((n, c, h, w))
    gpx_arr = np.zeros((n, oh, ow))
    gpy_arr = np.zeros((n, oh, ow))
    cdef double[:, :, :, ::1] gv = gv_arr
    cdef double[:, :, ::1] gpx = gpx_arr
    cdef double[:, :, ::1] gpy = gpy_arr
    cdef Py_ssize_t ni, ic, i, j, x0, y0
    cdef double xf, yf, fx, fy, g, v00, v10, v01, v11, dpx, dpy
    for ni in range(n):
        for i in range(oh):
            for j in range(ow):
                xf = px[ni, i, j]
                yf = py[ni, i, j]
                x0 = _ifloor(xf)
                y0 = _ifloor(yf)
                fx = xf - x0
                fy = yf - y0
                dpx = 0.0
                dpy = 0.0
                for ic in range(c):
                    g = gy[ni, ic, i, j]
                    v00 = _at(v, ni, ic, y0, x0, h, w)
                    v10 = _at(v, ni, ic, y0, x0 + 1, h, w)
                    v01 = _at(v, ni, ic, y0 + 1, x0, h, w)
                    v11 = _at(v, ni, ic, y0 + 1, x0 + 1, h, w)
                    if 0 <= y0 < h and 0 <= x0 < w:
                        gv[ni, ic, y0, x0] += g * (1 - fx) * (1 - fy)
                    if 0 <= y0 < h and 0 <= x0 + 1 < w:
                        gv[ni, ic, y0, x0 + 1] += g * fx * (1 - fy)
                    if 0 <= y0 + 1 < h and 0 <= x0 < w:
                        gv[ni, ic, y0 + 1, x0] += g * (1 - fx) * fy
                    if 0 <= y0 + 1 < h and 0 <= x0 + 1 < w:
                        gv[ni, ic, y0 + 1, x0 + 1] += g * fx * fy
                    if fx == 0.0:
                        dpx += g * ((v10 - _at(v, ni, ic, y0, x0 - 1, h, w)) * (1 - fy)
                                    + (v11 - _at(v, ni, ic, y0 + 1, x0 - 1, h, w)) * fy)
                    else:
                        dpx += g * ((v10 - v00) * (1 - fy) + (v11 - v01) * fy)
                    if fy == 0.0:
                        dpy += g * ((v01 - _at(v, ni, ic, y0 - 1, x0, h, w)) * (1 - fx)
                                    + (v11 - _at(v, ni, ic, y0 - 1, x0 + 1, h, w)) * fx)
                    else:
                        dpy += g * ((v01 - v00) * (1 - fx) + (v11 - v10) * fx)
                gpx[ni, i, j] = dpx
                gpy[ni, i, j] = dpy
    return gv_arr, gpx_arr, gpy_arr
