"""Pure-numpy implementations of the hot kernels.

These are the reference semantics; the Cython extension in ``_fastkern``
follows the same boundary and tie conventions and must agree to ~1e-12
(accumulation order differs). All arrays are float64 and C-contiguous.
"""

import numpy as np

NAME = "numpy"


def _im2col(x, kh, kw, stride, pad):
    """Return a strided view [N, C, kh, kw, OH, OW] of the padded input."""
    n, c, h, w = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return x, view, oh, ow


def conv2d_forward(x, w, b, stride, pad):
    _, cols, oh, ow = _im2col(x, w.shape[2], w.shape[3], stride, pad)
    y = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    if b is not None:
        y += b[None, :, None, None]
    return y


def conv2d_backward(x, w, gy, stride, pad, need_gx=True):
    n, c, h, wdim = x.shape
    kh, kw = w.shape[2], w.shape[3]
    _, cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    gw = np.tensordot(gy, cols, axes=([0, 2, 3], [0, 4, 5]))
    gb = gy.sum(axis=(0, 2, 3))
    gx = None
    if need_gx:
        # gcols[C, kh, kw, N, OH, OW]
        gcols = np.tensordot(w, gy, axes=([0], [1]))
        gxp = np.zeros((n, c, h + 2 * pad, wdim + 2 * pad))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                    gcols[:, i, j].transpose(1, 0, 2, 3)
                )
        gx = gxp[:, :, pad : pad + h, pad : pad + wdim]
        gx = np.ascontiguousarray(gx)
    return gx, gw, gb


def maxpool2_forward(x):
    """2x2/stride-2 max pooling; odd trailing rows/cols are dropped.

    Returns the pooled map and an int8 switch index in 0..3 per output
    cell (first maximum wins ties, row-major within the window).
    """
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    win = x[:, :, : 2 * oh, : 2 * ow].reshape(n, c, oh, 2, ow, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    switches = win.argmax(axis=-1).astype(np.int8)
    y = np.take_along_axis(win, switches[..., None].astype(np.int64), axis=-1)[..., 0]
    return np.ascontiguousarray(y), switches


def maxpool2_backward(switches, gy, h, w):
    n, c, oh, ow = gy.shape
    gwin = np.zeros((n, c, oh, ow, 4))
    np.put_along_axis(gwin, switches[..., None].astype(np.int64), gy[..., None], axis=-1)
    gwin = gwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    gx = np.zeros((n, c, h, w))
    gx[:, :, : 2 * oh, : 2 * ow] = gwin.reshape(n, c, 2 * oh, 2 * ow)
    return gx


def _gather(vf, ix, iy, h, w):
    """Zero-padded gather: vf is [N, C, H*W]; ix/iy are int [N, P]."""
    valid = (ix >= 0) & (ix <= w - 1) & (iy >= 0) & (iy <= h - 1)
    idx = np.clip(iy, 0, h - 1) * w + np.clip(ix, 0, w - 1)
    vals = np.take_along_axis(vf, idx[:, None, :], axis=2)
    return vals * valid[:, None, :]


def bilinear_forward(v, px, py):
    """Bilinear sampling at pixel coordinates px/py [N, oh, ow].

    Out-of-range neighbours contribute zero (one-ring zero padding).
    """
    n, c, h, w = v.shape
    oh, ow = px.shape[1], px.shape[2]
    pxf = px.reshape(n, -1)
    pyf = py.reshape(n, -1)
    x0 = np.floor(pxf).astype(np.int64)
    y0 = np.floor(pyf).astype(np.int64)
    fx = pxf - x0
    fy = pyf - y0
    vf = v.reshape(n, c, h * w)
    g00 = _gather(vf, x0, y0, h, w)
    g10 = _gather(vf, x0 + 1, y0, h, w)
    g01 = _gather(vf, x0, y0 + 1, h, w)
    g11 = _gather(vf, x0 + 1, y0 + 1, h, w)
    wx1 = fx[:, None, :]
    wy1 = fy[:, None, :]
    out = (
        g00 * (1 - wx1) * (1 - wy1)
        + g10 * wx1 * (1 - wy1)
        + g01 * (1 - wx1) * wy1
        + g11 * wx1 * wy1
    )
    return np.ascontiguousarray(out.reshape(n, c, oh, ow))


def bilinear_backward(v, px, py, gy):
    """Gradients of bilinear sampling w.r.t. input and pixel coordinates.

    At exactly-integer coordinates the coordinate gradient uses the
    centred convention: the weight of the hit pixel has derivative 0 and
    the two flanking pixels contribute -/+1 (interior subgradients).
    """
    n, c, h, w = v.shape
    oh, ow = px.shape[1], px.shape[2]
    pxf = px.reshape(n, -1)
    pyf = py.reshape(n, -1)
    x0 = np.floor(pxf).astype(np.int64)
    y0 = np.floor(pyf).astype(np.int64)
    fx = (pxf - x0)[:, None, :]
    fy = (pyf - y0)[:, None, :]
    vf = v.reshape(n, c, h * w)
    g00 = _gather(vf, x0, y0, h, w)
    g10 = _gather(vf, x0 + 1, y0, h, w)
    g01 = _gather(vf, x0, y0 + 1, h, w)
    g11 = _gather(vf, x0 + 1, y0 + 1, h, w)
    gyf = gy.reshape(n, c, -1)

    # input gradient: scatter-add the four weighted taps
    gvf = np.zeros_like(vf)
    ni = np.arange(n)[:, None, None]
    ci = np.arange(c)[None, :, None]

    def _scatter(ix, iy, weight):
        valid = (ix >= 0) & (ix <= w - 1) & (iy >= 0) & (iy <= h - 1)
        idx = np.clip(iy, 0, h - 1) * w + np.clip(ix, 0, w - 1)
        np.add.at(gvf, (ni, ci, idx[:, None, :]), gyf * weight * valid[:, None, :])

    _scatter(x0, y0, (1 - fx) * (1 - fy))
    _scatter(x0 + 1, y0, fx * (1 - fy))
    _scatter(x0, y0 + 1, (1 - fx) * fy)
    _scatter(x0 + 1, y0 + 1, fx * fy)

    # coordinate gradients
    dpx = (g10 - g00) * (1 - fy) + (g11 - g01) * fy
    dpy = (g01 - g00) * (1 - fx) + (g11 - g10) * fx
    int_x = fx == 0.0
    if int_x.any():
        gm1_0 = _gather(vf, x0 - 1, y0, h, w)
        gm1_1 = _gather(vf, x0 - 1, y0 + 1, h, w)
        dpx = np.where(int_x, (g10 - gm1_0) * (1 - fy) + (g11 - gm1_1) * fy, dpx)
    int_y = fy == 0.0
    if int_y.any():
        g0_m1 = _gather(vf, x0, y0 - 1, h, w)
        g1_m1 = _gather(vf, x0 + 1, y0 - 1, h, w)
        dpy = np.where(int_y, (g01 - g0_m1) * (1 - fx) + (g11 - g1_m1) * fx, dpy)
    gpx = (gyf * dpx).sum(axis=1).reshape(n, oh, ow)
    gpy = (gyf * dpy).sum(axis=1).reshape(n, oh, ow)
    return gvf.reshape(v.shape), gpx, gpy
