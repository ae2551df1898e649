import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from kgas import metrics
from kgas.metrics import LossWeights, color_loss, mask_loss, psnr, s3im, ssim, total_loss
from kgas.render import ImageRGBA


def skimage_ssim(a, b):
    return structural_similarity(a, b, channel_axis=-1, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False)


def loop_ssim(x, y, size=11, sigma=1.5):
    """Window-by-window SSIM on a single channel."""
    g = np.exp(-0.5 * ((np.arange(size) - (size - 1) / 2) / sigma) ** 2)
    w = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = (w * px).sum(), (w * py).sum()
            vx, vy = (w * (px - mx) ** 2).sum(), (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + 1e-4) * (2 * cxy + 9e-4) / ((mx**2 + my**2 + 1e-4) * (vx + vy + 9e-4)))
    return np.mean(vals)


@pytest.fixture
def pair(rng):
    a = rng.uniform(size=(32, 40, 3))
    return a, np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)


class TestPixelLosses:
    def test_color_extremes(self):
        black, white = np.zeros((4, 5, 3)), np.ones((4, 5, 3))
        assert color_loss(black, black) == 0.0
        assert color_loss(black, white) == 1.0

    def test_color_oracle(self, pair):
        a, b = pair
        direct = math.sqrt(sum((x - y) ** 2 for x, y in zip(a.ravel().tolist(), b.ravel().tolist())) / a.size)
        assert abs(color_loss(a, b) - direct) <= 1e-9

    def test_color_uses_premultiplied_rgb(self):
        img = ImageRGBA.from_rgb(np.full((3, 3, 3), 0.5), np.full((3, 3), 0.5))
        assert color_loss(img, np.full((3, 3, 3), 0.25)) == 0.25

    def test_mask(self):
        m = np.zeros((4, 4))
        m[:, :2] = 1
        assert mask_loss(m, m) == 0.0
        assert mask_loss(1 - m, m) == 1.0
        assert mask_loss(np.ones((4, 4)), m) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
        with pytest.raises(ValueError):
            mask_loss(m, m * 0.5)

    def test_dimension_mismatch(self):
        for fn in (color_loss, psnr, ssim, s3im):
            with pytest.raises(ValueError):
                fn(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))
        with pytest.raises(ValueError):
            mask_loss(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_psnr(self, pair):
        a = np.full((8, 8, 3), 0.5)
        assert psnr(a, a) == math.inf
        assert abs(psnr(a, a + 0.1) - 20.0) <= 1e-9
        x, y = pair
        assert abs(psnr(x, y) - 10 * math.log10(1 / np.mean((x - y) ** 2))) <= 1e-9

    @given(st.floats(1e-4, 0.5), st.floats(1e-4, 0.5))
    def test_psnr_monotone(self, e1, e2):
        a = np.zeros((4, 4, 3))
        if e1 < e2:
            assert psnr(a, a + e1) > psnr(a, a + e2)


class TestSsim:
    def test_identity(self, pair):
        assert ssim(pair[0], pair[0]) == 1.0

    def test_against_skimage(self, pair):
        a, b = pair
        assert ssim(a, b) == pytest.approx(skimage_ssim(a, b), abs=1e-12)

    def test_against_window_loop(self, rng):
        x, y = rng.uniform(size=(16, 14)), rng.uniform(size=(16, 14))
        assert ssim(x, y) == pytest.approx(loop_ssim(x, y), abs=1e-12)

    def test_constants(self):
        for a, b in [(0.2, 0.7), (0.0, 1.0), (0.5, 0.5)]:
            x, y = np.full((12, 12), a), np.full((12, 12), b)
            assert ssim(x, y) == pytest.approx((2 * a * b + 1e-4) / (a * a + b * b + 1e-4), abs=1e-12)

    def test_symmetry(self, pair):
        a, b = pair
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12

    def test_symmetric_pixel_permutations(self, pair):
        # flips and transposes map every window onto a window with the same weights
        a, b = pair
        base = ssim(a, b)
        for f in (lambda x: x[::-1], lambda x: x[:, ::-1], lambda x: np.swapaxes(x, 0, 1)):
            assert ssim(f(a), f(b)) == pytest.approx(base, abs=1e-12)

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 20)), np.zeros((10, 20)))

    def test_range(self, rng):
        for _ in range(10):
            v = ssim(rng.uniform(size=(20, 20, 3)), rng.uniform(size=(20, 20, 3)))
            assert -1.0 <= v <= 1.0


class TestS3im:
    @pytest.mark.parametrize("seed", [0, 1, 7, 12345])
    def test_identity(self, pair, seed):
        assert s3im(pair[0], pair[0], rng_seed=seed) == 1.0

    def test_seed_determinism(self, pair):
        a, b = pair
        assert s3im(a, b, rng_seed=3) == s3im(a, b, rng_seed=3)
        assert s3im(a, b, rng_seed=3) != s3im(a, b, rng_seed=4)

    def test_single_draw_is_plain_ssim(self, pair):
        a, b = pair
        assert s3im(a, b, m=1) == metrics._ssim(a, b, 4, 1.5, 4)

    def test_seed_variance(self, pair):
        a, b = pair
        vals = [s3im(a, b, rng_seed=s) for s in range(20)]
        assert np.var(vals) <= 0.01

    def test_errors(self):
        with pytest.raises(ValueError):
            s3im(np.zeros((3, 3)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            s3im(np.zeros((8, 8)), np.zeros((8, 8)), m=0)


class TestTotalLoss:
    def test_published_weights(self):
        w = LossWeights()
        assert (w.lambda_image, w.lambda_percep, w.lambda_joint) == (1.0, 1.0, 1.0)
        assert (w.alpha_mask, w.alpha_ssim, w.alpha_s3im, w.alpha_lpips, w.alpha_joint) == (0.5, 0.2, 0.5, 0.3, 0.06)

    def test_zero(self):
        assert total_loss().total == 0.0

    def test_image_term_example(self):
        assert total_loss(color=0.2, mask=0.4).image == pytest.approx(0.4, abs=1e-15)

    def test_stated_combination(self):
        r = total_loss(0.3, 0.2, 0.1, 0.4, [1.5, -0.5, 2.0], lpips=0.25)
        image = 0.3 + 0.5 * 0.2
        percep = 0.2 * 0.1 + 0.5 * 0.4 + 0.3 * 0.25
        joint = 0.06 * 3.0
        assert abs(r.total - (image + percep + joint)) <= 1e-12
        assert abs(r.recompute_total() - r.total) <= 1e-12
        assert (r.image, r.joint_nll) == (pytest.approx(image), 3.0)

    @settings(max_examples=100)
    @given(st.lists(st.floats(0, 10), min_size=6, max_size=6), st.lists(st.floats(0, 10), min_size=6, max_size=6),
           st.floats(-3, 3), st.lists(st.floats(0, 3), min_size=8, max_size=8))
    def test_linearity(self, p, q, t, wv):
        w = LossWeights(*wv)
        f = lambda v: total_loss(*v, weights=w).total  # noqa: E731
        mixed = [(1 - t) * x + t * y for x, y in zip(p, q)]
        scale = 1.0 + sum(abs(v) for v in p + q) * (1 + abs(t)) * max(wv + [1.0])
        assert abs(f(mixed) - ((1 - t) * f(p) + t * f(q))) <= 1e-12 * scale

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(alpha_mask=-0.1)

    def test_evaluate_report(self, pair):
        a, b = pair
        gt_mask = np.ones(a.shape[:2])
        rep = metrics.evaluate(ImageRGBA.from_rgb(a), ImageRGBA.from_rgb(b), gt_mask, joint_nll=[1.0, 2.0])
        assert rep.color == color_loss(a, b) and rep.mask == 0.0
        assert rep.ssim == pytest.approx(ssim(a, b), abs=1e-15)
        assert abs(rep.recompute_total() - rep.total) <= 1e-12

    def test_dump_round_trip(self, pair):
        rep = metrics.evaluate(*pair)
        table = metrics.metric_table(rep)
        text = metrics.format_metrics(table)
        assert list(metrics.parse_metrics(text)) == list(metrics.METRIC_KEYS)
        for k, v in metrics.parse_metrics(text).items():
            assert v == pytest.approx(table[k], rel=1e-8)
        assert "psnr = inf" in metrics.format_metrics({"psnr": psnr(pair[0], pair[0])})
