"""Training objective: L1, SSIM and Harris-corner terms and their weighted sum.

The Harris term compares corner maps of the prediction and the clean target.
The hard indicator ``R > tau * max(R)`` has zero gradient almost everywhere,
so training uses ``sigmoid(soft_beta * (R - tau * max(R)))`` with the per-image
max held constant for differentiation. The hard map stays available for
evaluation and visualisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, ShapeError

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalised 2-D Gaussian, outer product of a 1-D kernel."""
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


@dataclass(frozen=True)
class HarrisParams:
    k: float = 0.08
    tau: float = 0.01
    gauss_size: int = 5
    gauss_sigma: float = 1.0
    soft_beta: float = 50.0

    def __post_init__(self):
        if not 0 < self.k < 0.25:
            raise ConfigError(f"k must be in (0, 0.25), got {self.k}")
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must be in (0, 1), got {self.tau}")
        if self.soft_beta <= 0:
            raise ConfigError(f"soft_beta must be positive, got {self.soft_beta}")
        if self.gauss_sigma <= 0:
            raise ConfigError(f"gauss_sigma must be positive, got {self.gauss_sigma}")
        if self.gauss_size % 2 == 0:
            raise ConfigError(f"gauss_size must be odd, got {self.gauss_size}")


@dataclass(frozen=True)
class SSIMParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 5.0
    lambda3: float = 5.0
    use_ssim: bool = True
    use_harris: bool = True

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")


def _check_same(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def _kernel(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr.reshape(1, 1, *arr.shape).astype(dtype))


def _depthwise(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Filter every channel independently with reflection padding."""
    n, c, h, w = x.shape
    flat = ad.reshape(x, (n * c, 1, h, w))
    pad = kernel.shape[0] // 2
    out = ad.conv2d(ad.reflect_pad(flat, pad), _kernel(kernel, x.dtype), padding=0)
    return ad.reshape(out, (n, c, h, w))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_same(pred, target)
    return ad.abs(pred - target).mean()


def ssim_map(a: Tensor, b: Tensor, p: SSIMParams = SSIMParams()) -> Tensor:
    """Per-pixel SSIM averaged over channels, shape ``(n, 1, h, w)``."""
    _check_same(a, b)
    if min(a.shape[2:]) <= p.window // 2:
        raise ShapeError(f"images must be larger than {p.window // 2} pixels per side for SSIM")
    g = gaussian_kernel(p.window, p.sigma)
    mu_a, mu_b = _depthwise(a, g), _depthwise(b, g)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = _depthwise(a * a, g) - mu_aa
    var_b = _depthwise(b * b, g) - mu_bb
    cov = _depthwise(a * b, g) - mu_ab
    num = (2 * mu_ab + p.c1) * (2 * cov + p.c2)
    den = (mu_aa + mu_bb + p.c1) * (var_a + var_b + p.c2)
    return ad.channel_mean(num / den)


def ssim_loss(pred: Tensor, target: Tensor, p: SSIMParams = SSIMParams()) -> Tensor:
    return 1 - ssim_map(pred, target, p).mean()


def sobel_gradients(img: Tensor) -> tuple[Tensor, Tensor]:
    return _depthwise(img, SOBEL_X), _depthwise(img, SOBEL_Y)


def harris_response(img: Tensor, p: HarrisParams = HarrisParams()) -> Tensor:
    """Corner response ``det(M) - k * trace(M)^2``, shape ``(n, 1, h, w)``.

    Gradient products are summed over colour channels before smoothing.
    """
    ix, iy = sobel_gradients(img)
    g = gaussian_kernel(p.gauss_size, p.gauss_sigma)
    ixx = _depthwise(ad.channel_sum(ix * ix), g)
    iyy = _depthwise(ad.channel_sum(iy * iy), g)
    ixy = _depthwise(ad.channel_sum(ix * iy), g)
    trace = ixx + iyy
    return ixx * iyy - ixy * ixy - p.k * (trace * trace)


def corner_threshold(response: Tensor, p: HarrisParams = HarrisParams()) -> np.ndarray:
    """Per-image threshold ``tau * max(R)`` as an ``(n, 1, 1, 1)`` array."""
    n = response.shape[0]
    return p.tau * response.data.reshape(n, -1).max(axis=1).reshape(n, 1, 1, 1)


def corner_map_hard(response: Tensor, p: HarrisParams = HarrisParams()) -> np.ndarray:
    """Binary map ``R > tau * max(R)``; not differentiable."""
    return (response.data > corner_threshold(response, p)).astype(response.dtype)


def corner_map_soft(response: Tensor, p: HarrisParams = HarrisParams(), threshold: np.ndarray | None = None) -> Tensor:
    """``sigmoid(soft_beta * (R - threshold))``; the threshold carries no gradient.

    ``threshold`` defaults to :func:`corner_threshold` of ``response``.
    """
    if threshold is None:
        threshold = corner_threshold(response, p)
    shifted = response - Tensor(np.asarray(threshold, dtype=response.dtype))
    return ad.sigmoid(p.soft_beta * shifted)


def harris_loss(
    pred: Tensor, target: Tensor, p: HarrisParams = HarrisParams(), threshold: np.ndarray | None = None
) -> Tensor:
    """Mean absolute difference of soft corner maps; the target map is a constant.

    ``threshold`` overrides the prediction's detached threshold, which lets
    finite-difference checks hold it fixed.
    """
    _check_same(pred, target)
    with ad.no_grad():
        target_map = corner_map_soft(harris_response(target.detach(), p), p)
    pred_map = corner_map_soft(harris_response(pred, p), p, threshold)
    return ad.abs(pred_map - target_map).mean()


@dataclass
class LossBreakdown:
    total: Tensor
    l1: float
    ssim: float
    harris: float

    def as_row(self) -> dict[str, float]:
        return {"l1": self.l1, "ssim_loss": self.ssim, "harris_loss": self.harris, "total": self.total.item()}


def total_loss(
    pred: Tensor,
    target: Tensor,
    weights: LossWeights = LossWeights(),
    harris_p: HarrisParams = HarrisParams(),
    ssim_p: SSIMParams = SSIMParams(),
    harris_threshold: np.ndarray | None = None,
) -> LossBreakdown:
    """Weighted sum of the enabled terms plus every raw component for logging.

    Disabled terms are still evaluated (without a graph) so their values can
    be logged, but they contribute nothing to ``total``.
    """
    _check_same(pred, target)
    l1 = l1_loss(pred, target)
    total = weights.lambda1 * l1

    if weights.use_ssim:
        ls = ssim_loss(pred, target, ssim_p)
        total = total + weights.lambda2 * ls
    else:
        with ad.no_grad():
            ls = ssim_loss(pred, target, ssim_p)

    if weights.use_harris:
        lh = harris_loss(pred, target, harris_p, harris_threshold)
        total = total + weights.lambda3 * lh
    else:
        with ad.no_grad():
            lh = harris_loss(pred, target, harris_p, harris_threshold)

    return LossBreakdown(total=total, l1=l1.item(), ssim=ls.item(), harris=lh.item())
