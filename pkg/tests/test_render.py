import numpy as np
import pytest

from kgas.gaussians import Gaussian3D, GaussianCloud
from kgas.render import LOWPASS, Camera, Splat2D, composite, project, render
from oracles import composite_pixel, haar_rotations

RED, BLUE = (1.0, 0.0, 0.0), (0.0, 0.0, 1.0)


def axis_camera(f=100.0, size=64, z_back=0.0):
    """Camera at the origin (moved back by ``z_back``) looking down +z."""
    return Camera(np.eye(3), [0, 0, z_back], f, f, (size - 1) / 2, (size - 1) / 2, size, size)


def iso(pos, s, color=(0.5, 0.5, 0.5), opacity=1.0):
    return Gaussian3D(pos, np.eye(3), (s, s, s), opacity, color)


def cloud_of(gs):
    return GaussianCloud.from_gaussians(gs, np.ones((len(gs), 1)))


class TestProject:
    def test_on_axis_closed_form(self):
        sp = project(iso((0, 0, 5), 0.1), axis_camera())
        expected = (100 * 0.1 / 5) ** 2 + LOWPASS
        np.testing.assert_allclose(sp.cov2d, np.diag([expected, expected]), rtol=1e-14)
        np.testing.assert_allclose(sp.mean, [31.5, 31.5])
        assert sp.depth == 5.0

    def test_off_axis_jacobian(self):
        cam = axis_camera()
        g = Gaussian3D((1, -0.5, 4), haar_rotations(1, seed=3)[0], (0.1, 0.2, 0.05), 1.0, (0, 0, 0))
        x, y, z = g.position
        j = np.array([[100 / z, 0, -100 * x / z**2], [0, 100 / z, -100 * y / z**2]])
        m = g.rotation * g.scale
        np.testing.assert_allclose(project(g, cam).cov2d, j @ m @ m.T @ j.T + LOWPASS * np.eye(2), rtol=1e-12)

    def test_doubling_depth_quarters_covariance(self):
        cam = axis_camera()
        a = project(iso((0, 0, 3), 0.05), cam).cov2d - LOWPASS * np.eye(2)
        b = project(iso((0, 0, 6), 0.05), cam).cov2d - LOWPASS * np.eye(2)
        np.testing.assert_allclose(b, a / 4, rtol=1e-12)

    def test_culling(self):
        cam = axis_camera()
        assert project(iso((0, 0, -2), 0.1), cam) is None
        assert project(iso((0, 0, 0.005), 0.001), cam) is None
        assert project(iso((50, 0, 2), 0.01), cam) is None
        # mean at u = 66.5 with 4 sigma ~ 3 px: just past the right edge of a 64 px image
        assert project(iso((0.7, 0, 2), 0.01), cam) is None
        assert project(iso((0.6, 0, 2), 0.01), cam) is not None


class TestComposite:
    def test_empty(self):
        img = composite([], 8, 6)
        assert img.rgb.shape == (6, 8, 3)
        assert np.all(img.alpha == 0) and np.all(img.rgb == 0) and np.all(np.isinf(img.depth))
        assert np.all(np.isinf(render(GaussianCloud.empty(1), axis_camera(size=8)).depth))

    def test_single_splat_center(self):
        sp = Splat2D(np.array([4.0, 3.0]), np.eye(2) * 2.0, 2.5, np.array([0.2, 0.6, 1.0]), 0.7)
        img = composite([sp], 9, 7)
        np.testing.assert_allclose(img.rgb[3, 4], 0.7 * np.array([0.2, 0.6, 1.0]), rtol=1e-15)
        assert img.alpha[3, 4] == pytest.approx(0.7)
        assert img.depth[3, 4] == pytest.approx(2.5)

    def test_occlusion_red_over_blue(self):
        cam = axis_camera(size=33)
        red, blue = iso((0, 0, 1), 0.05, RED, 1.0), iso((0.02, 0, 2), 0.1, BLUE, 1.0)
        for order in ([red, blue], [blue, red]):
            img = render(cloud_of(order), cam)
            # the red mean sits on pixel (16, 16), where its alpha is exactly 1
            np.testing.assert_array_equal(img.rgb[16, 16], RED)
            assert img.depth[16, 16] == 1.0
            c = img.rgb[14:19, 14:19]
            assert np.all(c[..., 0] > 5 * c[..., 2])

    def test_transmittance_oracle(self, rng):
        for trial in range(20):
            n = int(rng.integers(1, 9))
            means = rng.uniform(4, 8, size=(n, 2))
            covs = []
            for _ in range(n):
                a = rng.normal(size=(2, 2))
                covs.append(a @ a.T + 3 * np.eye(2))
            depths = rng.uniform(1, 5, n)
            colors = rng.uniform(0, 1, (n, 3))
            ops = rng.uniform(0.05, 0.6, n)
            splats = [Splat2D(m, c, d, col, o) for m, c, d, col, o in zip(means, covs, depths, colors, ops)]
            img = composite(splats, 12, 12)
            order = np.argsort(depths, kind="stable")
            for y, x in [(6, 6), (5, 7), (4, 8), (7, 5)]:
                alphas, cols, ds = [], [], []
                for i in order:
                    d = np.array([x, y]) - means[i]
                    a = ops[i] * np.exp(-0.5 * d @ np.linalg.inv(covs[i]) @ d)
                    # splats only touch pixels inside their 4-sigma box
                    if abs(d[0]) <= 4 * np.sqrt(covs[i][0, 0]) and abs(d[1]) <= 4 * np.sqrt(covs[i][1, 1]):
                        alphas.append(a)
                        cols.append(colors[i])
                        ds.append(depths[i])
                col, alpha, dsum = composite_pixel(alphas, cols, ds)
                assert abs(img.alpha[y, x] - (1 - np.prod(1 - np.array(alphas)))) <= 1e-9
                assert abs(img.alpha[y, x] - alpha) <= 1e-9
                np.testing.assert_allclose(img.rgb[y, x], col, atol=1e-9)
                assert abs(img.depth[y, x] - dsum / alpha) <= 1e-9

    def test_early_termination(self):
        sp = [Splat2D(np.array([2.0, 2.0]), np.eye(2) * 4, d, np.array(c), 1.0)
              for d, c in [(1.0, RED), (2.0, BLUE)]]
        img = composite(sp, 5, 5)
        np.testing.assert_array_equal(img.rgb[2, 2], RED)
        assert img.depth[2, 2] == 1.0


class TestRender:
    def test_permutation_invariance(self, rng):
        n = 60
        cloud = GaussianCloud(rng.uniform([-0.5, -0.5, 2], [0.5, 0.5, 4], size=(n, 3)),
                              haar_rotations(n, seed=8), rng.uniform(0.02, 0.1, (n, 3)),
                              rng.uniform(0.2, 1, n), rng.uniform(0, 1, (n, 3)), np.ones((n, 1)))
        cam = axis_camera(size=48)
        base = render(cloud, cam)
        for _ in range(5):
            p = rng.permutation(n)
            img = render(cloud.take(p), cam)
            assert np.array_equal(img.rgb, base.rgb) and np.array_equal(img.alpha, base.alpha)
            assert np.array_equal(img.depth, base.depth)

    def test_bounds_and_determinism(self, rng):
        n = 200
        cloud = GaussianCloud(rng.uniform([-0.3, -0.3, 1], [0.3, 0.3, 2], size=(n, 3)),
                              haar_rotations(n, seed=2), rng.uniform(0.01, 0.2, (n, 3)),
                              np.ones(n), np.ones((n, 3)), np.ones((n, 1)))
        img = render(cloud, axis_camera(size=32))
        assert img.rgb.max() <= 1.0 and img.alpha.max() <= 1.0 and img.alpha.min() >= 0.0
        again = render(cloud, axis_camera(size=32))
        assert np.array_equal(img.rgb, again.rgb)

    def test_footprint_halves_when_camera_moves_back(self):
        g = cloud_of([iso((0, 0, 0), 0.05, (1, 1, 1), 1.0)])
        near = render(g, axis_camera(f=200, size=128, z_back=2.0))
        far = render(g, axis_camera(f=200, size=128, z_back=4.0))
        area_near = np.count_nonzero(near.alpha > 0.5)
        area_far = np.count_nonzero(far.alpha > 0.5)
        # thresholded area scales with sigma^2
        assert np.sqrt(area_near / area_far) == pytest.approx(2.0, rel=0.1)

    def test_look_at(self):
        cam = Camera.look_at([0, 0, -5], [0, 0, 0], [0, -1, 0], 50, 50, 33, 33)
        sp = project(iso((0, 0, 0), 0.1), cam)
        np.testing.assert_allclose(sp.mean, [16, 16], atol=1e-12)
        assert sp.depth == pytest.approx(5.0)

    def test_camera_validation(self):
        with pytest.raises(ValueError):
            Camera(np.eye(3), np.zeros(3), 0, 1, 0, 0, 4, 4)
        with pytest.raises(ValueError):
            Camera(np.eye(3), np.zeros(3), 1, 1, 0, 0, 0, 4)
