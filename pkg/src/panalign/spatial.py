"""Affine grid generation and differentiable bilinear sampling.

Coordinate convention: normalized (-1, -1) is the top-left pixel center,
(1, 1) the bottom-right; normalized x maps to pixel index (x+1)/2*(W-1).
Source locations outside the input contribute zero (one-ring zero pad).
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Tensor, _make
from .errors import InvalidArgumentError, InvalidShapeError

IDENTITY_THETA = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))


@dataclass(frozen=True)
class AffineParams:
    """The six parameters of a 2-D affine map in normalized coordinates."""

    theta: tuple

    def __post_init__(self):
        arr = np.asarray(self.theta, dtype=np.float64)
        if arr.shape != (2, 3):
            raise InvalidArgumentError(f"theta must be 2x3, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError(f"theta must be finite, got {arr.tolist()}")
        object.__setattr__(self, "theta", tuple(tuple(row) for row in arr))

    @classmethod
    def identity(cls):
        return cls(IDENTITY_THETA)

    @classmethod
    def scale_offset(cls, sx, sy, tx=0.0, ty=0.0):
        return cls(((sx, 0.0, tx), (0.0, sy, ty)))

    def as_array(self):
        return np.asarray(self.theta, dtype=np.float64)

    def inverse(self):
        """Analytic inverse of the affine map (requires invertible 2x2 part)."""
        a = self.as_array()
        m = a[:, :2]
        t = a[:, 2]
        minv = np.linalg.inv(m)
        return AffineParams(tuple(map(tuple, np.column_stack([minv, -minv @ t]))))


@dataclass
class SamplingGrid:
    """Per-target-pixel normalized source coordinates, shape [out_h, out_w]."""

    out_h: int
    out_w: int
    xs: np.ndarray
    ys: np.ndarray


def target_coords(out_h, out_w):
    """Evenly spaced normalized target coordinates; a 1-pixel axis maps to 0."""
    if out_h < 1 or out_w < 1:
        raise InvalidArgumentError(f"grid dims must be positive, got {out_h}x{out_w}")
    xt = np.linspace(-1.0, 1.0, out_w) if out_w > 1 else np.zeros(1)
    yt = np.linspace(-1.0, 1.0, out_h) if out_h > 1 else np.zeros(1)
    return np.meshgrid(xt, yt)


def make_grid(theta, out_h, out_w):
    """Source grid: (xs, ys) = theta . (xt, yt, 1); no clamping."""
    a = theta.as_array() if isinstance(theta, AffineParams) else np.asarray(theta, float)
    xt, yt = target_coords(out_h, out_w)
    xs = a[0, 0] * xt + a[0, 1] * yt + a[0, 2]
    ys = a[1, 0] * xt + a[1, 1] * yt + a[1, 2]
    return SamplingGrid(out_h, out_w, xs, ys)


def _snap(p):
    """Snap pixel coordinates within 1e-9 of an integer onto it.

    Keeps analytically-integer grids (e.g. the identity) exact despite
    float rounding in the normalized-to-pixel conversion.
    """
    r = np.round(p)
    return np.where(np.abs(p - r) < 1e-9, r, p)


def _to_pixel(grid, h, w):
    px = _snap((grid.xs + 1.0) * 0.5 * (w - 1))
    py = _snap((grid.ys + 1.0) * 0.5 * (h - 1))
    return px, py


def bilinear_sample(image, grid):
    """Sample a [C, H, W] array at the grid's source coordinates."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise InvalidShapeError(f"bilinear_sample expects [C, H, W], got {image.shape}")
    _, h, w = image.shape
    px, py = _to_pixel(grid, h, w)
    out = kernels.bilinear_forward(
        np.ascontiguousarray(image[None]),
        np.ascontiguousarray(px[None]),
        np.ascontiguousarray(py[None]),
    )
    return out[0]


def sample_backward(image, grid, upstream_grad):
    """Analytic gradients of bilinear sampling w.r.t. image and grid coords.

    Returns (grad_image, (grad_xs, grad_ys)) with coordinate gradients in
    normalized units.
    """
    image = np.asarray(image, dtype=np.float64)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    c, h, w = image.shape
    if upstream_grad.shape != (c, grid.out_h, grid.out_w):
        raise InvalidShapeError(
            f"upstream grad {upstream_grad.shape} vs output "
            f"{(c, grid.out_h, grid.out_w)}"
        )
    px, py = _to_pixel(grid, h, w)
    gv, gpx, gpy = kernels.bilinear_backward(
        np.ascontiguousarray(image[None]),
        np.ascontiguousarray(px[None]),
        np.ascontiguousarray(py[None]),
        np.ascontiguousarray(upstream_grad[None]),
    )
    gxs = gpx[0] * 0.5 * (w - 1)
    gys = gpy[0] * 0.5 * (h - 1)
    return gv[0], (gxs, gys)


def apply_affine_to_image(image, theta, out_h, out_w):
    """Render a resampled image from theta (no gradient recording)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.size == 0:
        raise InvalidShapeError(f"expected non-empty [C, H, W] image, got {image.shape}")
    return bilinear_sample(image, make_grid(theta, out_h, out_w))


def affine_sample(x, theta, out_h, out_w):
    """Autodiff op: sample batched feature maps with per-sample theta.

    ``x`` is a Tensor [N, C, H, W]; ``theta`` a Tensor [N, 6] laid out as
    (t11, t12, t13, t21, t22, t23). Differentiable w.r.t. both.
    """
    if x.data.ndim != 4:
        raise InvalidShapeError(f"affine_sample expects [N, C, H, W], got {x.data.shape}")
    n, c, h, w = x.data.shape
    if theta.data.shape != (n, 6):
        raise InvalidShapeError(
            f"theta must be [N, 6] = [{n}, 6], got {theta.data.shape}"
        )
    xt, yt = target_coords(out_h, out_w)
    th = theta.data
    xs = th[:, 0, None, None] * xt + th[:, 1, None, None] * yt + th[:, 2, None, None]
    ys = th[:, 3, None, None] * xt + th[:, 4, None, None] * yt + th[:, 5, None, None]
    px = np.ascontiguousarray(_snap((xs + 1.0) * 0.5 * (w - 1)))
    py = np.ascontiguousarray(_snap((ys + 1.0) * 0.5 * (h - 1)))
    data = kernels.bilinear_forward(x.data, px, py)

    def bw(g):
        gv, gpx, gpy = kernels.bilinear_backward(
            x.data, px, py, np.ascontiguousarray(g)
        )
        if x.requires_grad or x._parents:
            x._accumulate(gv)
        gxs = gpx * (0.5 * (w - 1))
        gys = gpy * (0.5 * (h - 1))
        gtheta = np.stack(
            [
                (gxs * xt).sum(axis=(1, 2)),
                (gxs * yt).sum(axis=(1, 2)),
                gxs.sum(axis=(1, 2)),
                (gys * xt).sum(axis=(1, 2)),
                (gys * yt).sum(axis=(1, 2)),
                gys.sum(axis=(1, 2)),
            ],
            axis=1,
        )
        theta._accumulate(gtheta)

    return _make(data, (x, theta), bw)
