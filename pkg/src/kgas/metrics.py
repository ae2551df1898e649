"""Image-quality metrics and the weighted training loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .render import ImageRGBA

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
S3IM_KERNEL = 4
S3IM_STRIDE = 4
S3IM_PATCHES = 10


def _pixels(img) -> np.ndarray:
    if isinstance(img, ImageRGBA):
        return img.rgb
    return np.asarray(img, dtype=float)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")


def color_loss(pred, gt) -> float:
    """RMS difference over all pixels and RGB channels (premultiplied colors)."""
    a, b = _pixels(pred), _pixels(gt)
    _same_shape(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def mask_loss(pred_alpha, gt_mask) -> float:
    a = pred_alpha.alpha if isinstance(pred_alpha, ImageRGBA) else np.asarray(pred_alpha, dtype=float)
    m = np.asarray(gt_mask, dtype=float)
    _same_shape(a, m)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("ground-truth mask must be binary")
    return float(np.sqrt(np.mean((a - m) ** 2)))


def psnr(pred, gt) -> float:
    """Peak signal-to-noise ratio for unit-range channels; ``inf`` for identical images."""
    a, b = _pixels(pred), _pixels(gt)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter(img: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Valid-region separable filtering of an (H, W) image, sampled every ``stride`` pixels."""
    k = w.size
    rows = sliding_window_view(img, k, axis=0)[::stride] @ w
    return sliding_window_view(rows, k, axis=1)[:, ::stride] @ w


def _ssim_channel(x: np.ndarray, y: np.ndarray, w: np.ndarray, stride: int) -> float:
    mx = _filter(x, w, stride)
    my = _filter(y, w, stride)
    sxx = _filter(x * x, w, stride) - mx * mx
    syy = _filter(y * y, w, stride) - my * my
    sxy = _filter(x * y, w, stride) - mx * my
    num = (2 * mx * my + C1) * (2 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return float(np.mean(num / den))


def _ssim(a: np.ndarray, b: np.ndarray, size: int, sigma: float, stride: int) -> float:
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < size or a.shape[1] < size:
        raise ValueError(f"image {a.shape[1]}x{a.shape[0]} is smaller than the {size}x{size} window")
    w = gaussian_window(size, sigma)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], w, stride) for c in range(a.shape[2])]))


def ssim(pred, gt) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a, b = _pixels(pred), _pixels(gt)
    _same_shape(a, b)
    return _ssim(a, b, SSIM_WINDOW, SSIM_SIGMA, 1)


def s3im(pred, gt, m: int = S3IM_PATCHES, kernel: int = S3IM_KERNEL, stride: int = S3IM_STRIDE,
         rng_seed: int = 0) -> float:
    """Stochastic structural similarity.

    Pixels of both images are shuffled by a shared permutation (the first
    draw is the identity), put back into an image of the original shape and
    scored with a ``kernel`` x ``kernel`` SSIM at the given stride. The score
    is the mean over ``m`` draws.
    """
    a, b = _pixels(pred), _pixels(gt)
    _same_shape(a, b)
    if m < 1:
        raise ValueError("need at least one patch")
    h, w_ = a.shape[:2]
    if h < kernel or w_ < kernel:
        raise ValueError(f"need at least {kernel}x{kernel} pixels, got {w_}x{h}")
    flat_a = a.reshape(h * w_, -1)
    flat_b = b.reshape(h * w_, -1)
    rng = np.random.Generator(np.random.Philox(rng_seed))
    scores = []
    for i in range(m):
        perm = np.arange(h * w_) if i == 0 else rng.permutation(h * w_)
        pa = flat_a[perm].reshape(a.shape)
        pb = flat_b[perm].reshape(b.shape)
        scores.append(_ssim(pa, pb, kernel, SSIM_SIGMA, stride))
    return float(np.mean(scores))


@dataclass(frozen=True)
class LossWeights:
    lambda_image: float = 1.0
    lambda_percep: float = 1.0
    lambda_joint: float = 1.0
    alpha_mask: float = 0.5
    alpha_ssim: float = 0.2
    alpha_s3im: float = 0.5
    alpha_lpips: float = 0.3
    alpha_joint: float = 0.06

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (v >= 0.0 and math.isfinite(v)):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossReport:
    color: float
    mask: float
    ssim: float
    s3im: float
    psnr: float
    joint_nll: float
    lpips: float
    image: float
    percep: float
    joint: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)

    def recompute_total(self) -> float:
        return _combine(self.color, self.mask, 1.0 - self.ssim, 1.0 - self.s3im, self.lpips,
                        self.joint_nll, self.weights)[3]


def _combine(color, mask, ssim_loss, s3im_loss, lpips, joint_nll, w: LossWeights):
    image = color + w.alpha_mask * mask
    percep = w.alpha_ssim * ssim_loss + w.alpha_s3im * s3im_loss + w.alpha_lpips * lpips
    joint = w.alpha_joint * joint_nll
    total = w.lambda_image * image + w.lambda_percep * percep + w.lambda_joint * joint
    return image, percep, joint, total


def total_loss(color: float = 0.0, mask: float = 0.0, ssim_loss: float = 0.0, s3im_loss: float = 0.0,
               joint_nll=0.0, lpips: float = 0.0, weights: LossWeights | None = None,
               psnr_db: float = math.nan) -> LossReport:
    """Weighted sum of image, perceptual and joint terms.

    ``ssim_loss`` and ``s3im_loss`` are ``1 - similarity``; ``joint_nll`` may be
    a per-joint sequence and is summed. ``lpips`` is an externally supplied
    value (zero when no perceptual network is available).
    """
    w = weights or LossWeights()
    nll = float(np.sum(joint_nll))
    image, percep, joint, total = _combine(color, mask, ssim_loss, s3im_loss, lpips, nll, w)
    return LossReport(color=float(color), mask=float(mask), ssim=1.0 - ssim_loss, s3im=1.0 - s3im_loss,
                      psnr=float(psnr_db), joint_nll=nll, lpips=float(lpips), image=image,
                      percep=percep, joint=joint, total=total, weights=w)


def evaluate(pred, gt, gt_mask=None, pred_alpha=None, joint_nll=0.0, weights: LossWeights | None = None,
             s3im_seed: int = 0) -> LossReport:
    """Score a render against a reference. Without masks the mask term is zero."""
    mask = 0.0
    if gt_mask is not None:
        alpha = pred.alpha if pred_alpha is None and isinstance(pred, ImageRGBA) else pred_alpha
        mask = mask_loss(alpha, gt_mask)
    return total_loss(color=color_loss(pred, gt), mask=mask, ssim_loss=1.0 - ssim(pred, gt),
                      s3im_loss=1.0 - s3im(pred, gt, rng_seed=s3im_seed), joint_nll=joint_nll,
                      weights=weights, psnr_db=psnr(pred, gt))


METRIC_KEYS = ("color_loss", "mask_loss", "ssim", "s3im", "psnr", "joint_nll",
               "l_image", "l_percep", "l_joint", "total")


def metric_table(report: LossReport) -> dict[str, float]:
    return dict(zip(METRIC_KEYS, (report.color, report.mask, report.ssim, report.s3im, report.psnr,
                                  report.joint_nll, report.image, report.percep, report.joint,
                                  report.total)))


def format_value(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.9g}"


def format_metrics(values: dict[str, float]) -> str:
    """``name = value`` lines, 9 significant digits, in the given key order."""
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def parse_metrics(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = float(v)
    return out
