"""Training objectives: Sobel gradient maps, the self-weighted gradient
discrepancy loss, L1, D-SSIM, scale-volume regularisation, and their
weighted total.

Everything is built from tape ops so the same code serves plain evaluation
(constants in, floats out) and training (tensors in, gradients out).  The
gradient-discrepancy weight maps are detached: they select *where* to focus
but are constants with respect to differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .errors import InputError

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

# separable factors: SOBEL_X == outer(_SMOOTH, _DIFF)
_DIFF = np.array([-1.0, 0.0, 1.0])
_SMOOTH = np.array([1.0, 2.0, 1.0])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

PSNR_CAP = 100.0

SGL_VARIANTS = ("per_pixel", "scalar")


def _require_same_shape(a, b):
    if a.shape != b.shape:
        raise InputError(f"image shapes differ: {a.shape} vs {b.shape}")


def _require_image(a):
    if a.ndim != 3 or a.shape[2] != 3:
        raise InputError(f"expected an (H, W, 3) image, got {a.shape}")


@dataclass(frozen=True)
class GradientMaps:
    gx: np.ndarray  # (H, W, 3)
    gy: np.ndarray  # (H, W, 3)


def _sobel_t(img: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    """Per-channel Sobel maps with replicate border padding, on the tape."""
    padded = ad.pad_replicate2d(img, 1)
    gx = ad.correlate1d_valid(ad.correlate1d_valid(padded, _DIFF, axis=1), _SMOOTH, axis=0)
    gy = ad.correlate1d_valid(ad.correlate1d_valid(padded, _SMOOTH, axis=1), _DIFF, axis=0)
    return gx, gy


def sobel_gradients(image: np.ndarray) -> GradientMaps:
    image = np.asarray(image, dtype=np.float64)
    _require_image(image)
    gx, gy = _sobel_t(ad.constant(image))
    return GradientMaps(gx=gx.value, gy=gy.value)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


_SSIM_KERNEL = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)


def _window_mean(img: ad.Tensor) -> ad.Tensor:
    pad = SSIM_WINDOW // 2
    padded = ad.pad_replicate2d(img, pad)
    return ad.correlate1d_valid(ad.correlate1d_valid(padded, _SSIM_KERNEL, axis=0),
                                _SSIM_KERNEL, axis=1)


def _ssim_t(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    mu1 = _window_mean(a)
    mu2 = _window_mean(b)
    mu1_sq = mu1 * mu1
    mu2_sq = mu2 * mu2
    mu12 = mu1 * mu2
    sigma1_sq = _window_mean(a * a) - mu1_sq
    sigma2_sq = _window_mean(b * b) - mu2_sq
    sigma12 = _window_mean(a * b) - mu12
    num = (2.0 * mu12 + SSIM_C1) * (2.0 * sigma12 + SSIM_C2)
    den = (mu1_sq + mu2_sq + SSIM_C1) * (sigma1_sq + sigma2_sq + SSIM_C2)
    return ad.tmean(num / den)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _require_image(a)
    _require_same_shape(a, b)
    return float(_ssim_t(ad.constant(a), ad.constant(b)).value)


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio for [0, 1] images; ``cap`` dB when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _require_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return float(-10.0 * np.log10(mse))


@dataclass(frozen=True)
class SelectiveParts:
    """Intermediates of the gradient-discrepancy loss for one image pair."""

    value: float
    wx: np.ndarray  # (H, W) horizontal weight map (detached discrepancy)
    wy: np.ndarray  # (H, W)
    lx: float       # plain horizontal discrepancy, 1/sqrt(HW)-normalised
    ly: float


def _selective_t(rendered: ad.Tensor, truth: ad.Tensor, variant: str,
                 weights: tuple[np.ndarray, np.ndarray] | None = None):
    """Tape core of the selective gradient loss.

    Discrepancy maps are channel-averaged Sobel-difference magnitudes; the
    weight maps are those same magnitudes, detached (or explicitly supplied,
    which is how the finite-difference tests hold them constant).
    """
    if variant not in SGL_VARIANTS:
        raise InputError(f"unknown variant {variant!r}; pick one of {SGL_VARIANTS}")
    h, w = rendered.shape[0], rendered.shape[1]
    norm = 1.0 / np.sqrt(h * w)

    gx_r, gy_r = _sobel_t(rendered)
    gx_t, gy_t = _sobel_t(truth)
    disc_x = ad.tmean(ad.absolute(gx_r - gx_t), axis=2)
    disc_y = ad.tmean(ad.absolute(gy_r - gy_t), axis=2)

    if weights is None:
        wx = ad.constant(disc_x.value.copy())
        wy = ad.constant(disc_y.value.copy())
    else:
        wx, wy = ad.constant(weights[0]), ad.constant(weights[1])

    lx = norm * ad.tsum(disc_x)
    ly = norm * ad.tsum(disc_y)
    if variant == "per_pixel":
        value = norm * (ad.tsum(wx * disc_x) + ad.tsum(wy * disc_y))
    else:
        value = ad.tmean(wx) * lx + ad.tmean(wy) * ly
    return value, wx, wy, lx, ly


def selective_gradient_loss(rendered: np.ndarray, truth: np.ndarray,
                            variant: str = "per_pixel",
                            weights: tuple[np.ndarray, np.ndarray] | None = None
                            ) -> SelectiveParts:
    rendered = np.asarray(rendered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _require_image(rendered)
    _require_same_shape(rendered, truth)
    value, wx, wy, lx, ly = _selective_t(ad.constant(rendered), ad.constant(truth),
                                         variant, weights)
    return SelectiveParts(value=float(value.value), wx=wx.value, wy=wy.value,
                          lx=float(lx.value), ly=float(ly.value))


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.8
    ssim: float = 0.2
    vol: float = 0.01
    selective: float = 0.01

    def __post_init__(self):
        for name in ("l1", "ssim", "vol", "selective"):
            if getattr(self, name) < 0.0:
                raise InputError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class LossReport:
    l1_term: float
    ssim_term: float
    vol_term: float
    selective_term: float
    total: float
    weights: LossWeights
    lx: float = 0.0
    ly: float = 0.0
    wx: np.ndarray | None = None
    wy: np.ndarray | None = None


def _volume_t(scales: ad.Tensor) -> ad.Tensor:
    # sum over Gaussians of the product of the three scale components
    return ad.tsum(scales[:, 0] * scales[:, 1] * scales[:, 2])


def total_loss_t(rendered: ad.Tensor, truth: ad.Tensor, scales: ad.Tensor | None,
                 weights: LossWeights, sgl_variant: str = "per_pixel",
                 sgl_weights=None, compute_selective: bool | None = None):
    """Tape core of the weighted objective; returns (total, parts dict).

    With a zero selective weight the discrepancy subgraph is not built at
    all, so runs with the term disabled are bitwise identical to a build
    that lacks it.
    """
    l1 = ad.tmean(ad.absolute(rendered - truth))
    ssim_term = 1.0 - _ssim_t(rendered, truth)
    if scales is None:
        vol = ad.constant(0.0)
    else:
        vol = _volume_t(scales)

    if compute_selective is None:
        compute_selective = weights.selective != 0.0
    if compute_selective:
        sel, wx, wy, lx, ly = _selective_t(rendered, truth, sgl_variant, sgl_weights)
        total = weights.l1 * l1 + weights.ssim * ssim_term + weights.vol * vol \
            + weights.selective * sel
    else:
        sel = ad.constant(0.0)
        wx = wy = lx = ly = None
        total = weights.l1 * l1 + weights.ssim * ssim_term + weights.vol * vol

    parts = {"l1": l1, "ssim_term": ssim_term, "vol": vol, "selective": sel,
             "wx": wx, "wy": wy, "lx": lx, "ly": ly}
    return total, parts


def total_loss(rendered: np.ndarray, truth: np.ndarray, gaussians,
               weights: LossWeights = LossWeights(),
               sgl_variant: str = "per_pixel", sgl_weights=None) -> LossReport:
    """Evaluate all four terms and their weighted total for one image pair."""
    rendered = np.asarray(rendered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _require_image(rendered)
    _require_same_shape(rendered, truth)
    scales = None
    if gaussians:
        scales = ad.constant(np.stack([g.scale for g in gaussians]))
    total, parts = total_loss_t(ad.constant(rendered), ad.constant(truth), scales,
                                weights, sgl_variant, sgl_weights,
                                compute_selective=True)
    return LossReport(
        l1_term=float(parts["l1"].value),
        ssim_term=float(parts["ssim_term"].value),
        vol_term=float(parts["vol"].value),
        selective_term=float(parts["selective"].value),
        total=float(total.value),
        weights=weights,
        lx=float(parts["lx"].value),
        ly=float(parts["ly"].value),
        wx=parts["wx"].value,
        wy=parts["wy"].value,
    )
