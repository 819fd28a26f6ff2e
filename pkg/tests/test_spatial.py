import numpy as np
import pytest

from panalign import autodiff as ad
from panalign.autodiff import Tensor
from panalign.errors import InvalidArgumentError, InvalidShapeError
from panalign.spatial import (
    AffineParams,
    affine_sample,
    apply_affine_to_image,
    bilinear_sample,
    make_grid,
    sample_backward,
)

from helpers import max_rel_error, numeric_grad


class TestMakeGrid:
    def test_identity_2x2_corners(self):
        g = make_grid(AffineParams.identity(), 2, 2)
        np.testing.assert_array_equal(g.xs, [[-1, 1], [-1, 1]])
        np.testing.assert_array_equal(g.ys, [[-1, -1], [1, 1]])

    def test_worked_example(self):
        g = make_grid(AffineParams(((0.8, 0, -0.1), (0, 0.7, 0))), 2, 2)
        assert g.xs[0, 0] == pytest.approx(-0.9, abs=1e-12)
        assert g.ys[0, 0] == pytest.approx(-0.7, abs=1e-12)

    def test_pure_scaling(self):
        g = make_grid(AffineParams.scale_offset(0.5, 0.5), 2, 2)
        assert (g.xs[1, 1], g.ys[1, 1]) == (0.5, 0.5)

    def test_single_pixel_axis_maps_to_zero(self):
        g = make_grid(AffineParams.identity(), 1, 3)
        np.testing.assert_array_equal(g.ys, np.zeros((1, 3)))
        np.testing.assert_array_equal(g.xs, [[-1, 0, 1]])

    def test_affine_exactness_no_clamping(self):
        rng = np.random.default_rng(0)
        th = rng.normal(size=(2, 3)) * 3
        g = make_grid(th, 4, 5)
        xt = np.linspace(-1, 1, 5)[None, :].repeat(4, 0)
        yt = np.linspace(-1, 1, 4)[:, None].repeat(5, 1)
        np.testing.assert_allclose(g.xs, th[0, 0] * xt + th[0, 1] * yt + th[0, 2],
                                   atol=1e-15)
        np.testing.assert_allclose(g.ys, th[1, 0] * xt + th[1, 1] * yt + th[1, 2],
                                   atol=1e-15)

    def test_rejects_bad_dims(self):
        with pytest.raises(InvalidArgumentError):
            make_grid(AffineParams.identity(), 0, 2)


class TestAffineParams:
    def test_needs_six_finite_values(self):
        with pytest.raises(InvalidArgumentError):
            AffineParams(((1, 0), (0, 1)))
        with pytest.raises(InvalidArgumentError):
            AffineParams(((np.nan, 0, 0), (0, 1, 0)))

    def test_identity_element(self):
        assert AffineParams.identity().theta == ((1, 0, 0), (0, 1, 0))

    def test_inverse_roundtrip(self):
        p = AffineParams(((0.8, 0.1, -0.2), (0.0, 1.2, 0.3)))
        a = p.as_array()
        inv = p.inverse().as_array()
        comp = inv[:, :2] @ a[:, :2]
        np.testing.assert_allclose(comp, np.eye(2), atol=1e-12)


class TestBilinearSample:
    def test_identity_grid_is_exact_identity(self):
        rng = np.random.default_rng(1)
        img = rng.normal(size=(3, 6, 5))
        out = bilinear_sample(img, make_grid(AffineParams.identity(), 6, 5))
        np.testing.assert_array_equal(out, img)

    def test_fully_out_of_range_is_zero(self):
        img = np.ones((2, 4, 4))
        out = bilinear_sample(img, make_grid(AffineParams.scale_offset(1, 1, 5, 5), 4, 4))
        np.testing.assert_array_equal(out, 0.0)

    def test_center_of_four_pixels(self):
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = bilinear_sample(img, make_grid(AffineParams.scale_offset(0.0, 0.0), 1, 1))
        assert out[0, 0, 0] == pytest.approx(2.5, abs=1e-12)

    def test_linearity_in_input(self):
        rng = np.random.default_rng(2)
        v1, v2 = rng.normal(size=(2, 2, 5, 5))
        grid = make_grid(AffineParams(((0.7, 0.1, 0.05), (-0.1, 0.9, -0.2))), 4, 6)
        a, b = 1.7, -0.3
        combined = bilinear_sample(a * v1 + b * v2, grid)
        separate = a * bilinear_sample(v1, grid) + b * bilinear_sample(v2, grid)
        np.testing.assert_allclose(combined, separate, atol=1e-12)

    def test_zero_weight_pixels_never_matter(self):
        # grid confined to the image centre: corner pixels carry no weight
        rng = np.random.default_rng(3)
        img = rng.normal(size=(1, 5, 5))
        grid = make_grid(AffineParams.scale_offset(0.2, 0.2), 3, 3)
        base = bilinear_sample(img, grid)
        img2 = img.copy()
        img2[:, 0, 0] += 100.0
        img2[:, -1, -1] -= 50.0
        np.testing.assert_array_equal(bilinear_sample(img2, grid), base)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShapeError):
            bilinear_sample(np.zeros((4, 4)), make_grid(AffineParams.identity(), 2, 2))


class TestSampleBackward:
    def test_identity_grid_passes_upstream_through(self):
        rng = np.random.default_rng(4)
        img = rng.normal(size=(2, 4, 4))
        up = rng.normal(size=(2, 4, 4))
        grid = make_grid(AffineParams.identity(), 4, 4)
        gi, _ = sample_backward(img, grid, up)
        np.testing.assert_array_equal(gi, up)

    def test_zero_upstream_zero_grads(self):
        img = np.ones((1, 3, 3))
        grid = make_grid(AffineParams.scale_offset(0.5, 0.5), 3, 3)
        gi, (gx, gy) = sample_backward(img, grid, np.zeros((1, 3, 3)))
        assert not gi.any() and not gx.any() and not gy.any()

    def test_upstream_shape_checked(self):
        grid = make_grid(AffineParams.identity(), 3, 3)
        with pytest.raises(InvalidShapeError):
            sample_backward(np.zeros((1, 3, 3)), grid, np.zeros((1, 2, 2)))

    @pytest.mark.parametrize("seed", range(50))
    def test_gradients_vs_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.uniform(-1, 1, size=(2, 6, 6))
        for _ in range(100):
            th = rng.uniform(-1, 1, size=(2, 3)) * np.array([1, 0.3, 0.4])
            grid = make_grid(th, 5, 5)
            px = (grid.xs + 1) / 2 * 5
            py = (grid.ys + 1) / 2 * 5
            frac = np.concatenate([px, py]) % 1.0
            if np.all((frac > 0.01) & (frac < 0.99)):
                break
        up = rng.normal(size=(2, 5, 5))

        gi, (gxs, gys) = sample_backward(img, grid, up)
        num_gi = numeric_grad(
            lambda a: float((bilinear_sample(a, grid) * up).sum()), img
        )
        assert max_rel_error(gi, num_gi) < 1e-4

        def loss_theta(th_flat):
            g = make_grid(th_flat.reshape(2, 3), 5, 5)
            return float((bilinear_sample(img, g) * up).sum())

        gth = np.array([
            (gxs * np.linspace(-1, 1, 5)[None, :]).sum(),
            (gxs * np.linspace(-1, 1, 5)[:, None]).sum(),
            gxs.sum(),
            (gys * np.linspace(-1, 1, 5)[None, :]).sum(),
            (gys * np.linspace(-1, 1, 5)[:, None]).sum(),
            gys.sum(),
        ])
        num_gth = numeric_grad(loss_theta, th.ravel().copy())
        assert max_rel_error(gth, num_gth) < 1e-4


class TestApplyAffine:
    def test_identity_unchanged(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(size=(3, 8, 6))
        np.testing.assert_array_equal(
            apply_affine_to_image(img, AffineParams.identity(), 8, 6), img
        )

    def test_zoom_in_samples_central_half(self):
        # bright centred square on black: 0.5-scale output corners land in
        # the source's central half, so the square fills more of the frame
        img = np.zeros((1, 16, 16))
        img[:, 4:12, 4:12] = 1.0
        out = apply_affine_to_image(img, AffineParams.scale_offset(0.5, 0.5), 16, 16)
        assert out.mean() > img.mean() * 2
        # output corner = source at normalized (-0.5, -0.5) -> pixel 3.75,
        # weighted sum of the 3/4 neighbours; only (4,4) is lit
        expected = 0.75 * 0.75 * img[0, 4, 4]
        assert out[0, 0, 0] == pytest.approx(expected, abs=1e-12)

    def test_zoom_out_black_frame(self):
        img = np.ones((1, 8, 8))
        out = apply_affine_to_image(img, AffineParams.scale_offset(1.5, 1.5), 8, 8)
        assert out[0, 0, 0] == 0.0
        assert out[0, -1, -1] == 0.0
        assert out[0, 4, 4] > 0.9

    def test_rejects_empty(self):
        with pytest.raises(InvalidShapeError):
            apply_affine_to_image(np.zeros((0, 4, 4)), AffineParams.identity(), 4, 4)


class TestAffineSampleOp:
    def test_batched_theta_gradcheck(self):
        rng = np.random.default_rng(6)
        x0 = rng.uniform(-1, 1, size=(2, 2, 5, 4))
        th0 = np.array([[0.83, 0.02, 0.11, -0.03, 0.77, 0.04],
                        [0.65, -0.04, -0.13, 0.02, 0.91, 0.06]])
        up = rng.normal(size=(2, 2, 5, 4))

        def run(tha, xa):
            x = Tensor(xa, requires_grad=True)
            th = Tensor(tha, requires_grad=True)
            out = affine_sample(x, th, 5, 4)
            return ad.tsum(ad.mul(out, Tensor(up))), x, th

        loss, x, th = run(th0, x0)
        ad.backward(loss)
        num_th = numeric_grad(lambda a: float(run(a, x0)[0].data), th0)
        num_x = numeric_grad(lambda a: float(run(th0, a)[0].data), x0)
        assert max_rel_error(th.grad, num_th) < 1e-5
        assert max_rel_error(x.grad, num_x) < 1e-5

    def test_shape_validation(self):
        x = Tensor(np.zeros((2, 1, 4, 4)))
        with pytest.raises(InvalidShapeError):
            affine_sample(x, Tensor(np.zeros((3, 6))), 4, 4)
