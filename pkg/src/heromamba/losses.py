"""Composite training objective: L1 + SSIM + feature-space contrastive ratio."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor


@dataclass
class LossWeights:
    alpha: float = 0.3
    beta_w: float = 0.8
    gamma: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta_w", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def l1_loss(pred, target) -> Tensor:
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    _check_same(pred, target, "l1_loss")
    return T.abs_(pred - target).mean()


@lru_cache(maxsize=8)
def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x, y, window_size: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> Tensor:
    """Mean SSIM over every valid Gaussian window and every channel.

    Inputs are N x C x H x W (or C x H x W / H x W, promoted). Local moments
    come from a depthwise Gaussian convolution without padding, so only
    windows lying fully inside the image are scored.
    """
    x, y = T.as_tensor(x), T.as_tensor(y)
    _check_same(x, y, "ssim")
    while x.ndim < 4:
        x, y = x.reshape(1, *x.shape), y.reshape(1, *y.shape)
    n, c, h, w = x.shape
    if h < window_size or w < window_size:
        raise ValueError(f"image {h}x{w} is smaller than the {window_size}x{window_size} SSIM window")
    win = np.broadcast_to(gaussian_window(window_size, sigma), (c, 1, window_size, window_size))
    kernel = Tensor(np.ascontiguousarray(win, dtype=np.result_type(x.dtype, y.dtype)))

    def blur(z):
        return T.conv2d(z, kernel, groups=c)

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = blur(x * x) - mu_xx
    var_y = blur(y * y) - mu_yy
    cov = blur(x * y) - mu_xy
    num = (2.0 * mu_xy + c1) * (2.0 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return (num / den).mean()


def ssim_loss(x, y, **kw) -> Tensor:
    return 1.0 - ssim(x, y, **kw)


class FeatureExtractor(Module):
    """Frozen random conv stack standing in for a pretrained feature network.

    Three stride-2 3x3 conv + SiLU stages (3 -> 8 -> 16 -> 32 channels) with
    He-normal weights drawn from ``seed``. Weights are plain constants, so
    nothing upstream of the anchor receives gradients from them.
    """

    def __init__(self, seed: int = 0, widths=(8, 16, 32)):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.weights = []
        cin = 3
        for cout in widths:
            std = np.sqrt(2.0 / (cin * 9))
            self.weights.append(rng.normal(0.0, std, size=(cout, cin, 3, 3)))
            cin = cout

    def features(self, x) -> list[Tensor]:
        x = T.as_tensor(x)
        out = []
        for w in self.weights:
            x = T.silu(T.conv2d(x, Tensor(w.astype(x.dtype)), stride=2, padding=1))
            out.append(x)
        return out

    forward = features


def contrastive_loss(anchor, positive, negative, fx: FeatureExtractor, eps: float = 1e-7) -> Tensor:
    """Mean over stages of L1(a, p) / (L1(a, n) + eps) in feature space."""
    anchor = T.as_tensor(anchor)
    positive = Tensor(T.as_tensor(positive).data)
    negative = Tensor(T.as_tensor(negative).data)
    _check_same(anchor, positive, "contrastive_loss positive")
    _check_same(anchor, negative, "contrastive_loss negative")
    fa = fx.features(anchor)
    with T.no_grad():
        fp = fx.features(positive)
        fn = fx.features(negative)
    total = None
    for a, p, n in zip(fa, fp, fn):
        ratio = l1_loss(a, p) / (l1_loss(a, n) + eps)
        total = ratio if total is None else total + ratio
    return total * (1.0 / len(fa))


def composite_terms(pred, target, degraded, w: LossWeights, fx: FeatureExtractor) -> dict[str, Tensor]:
    """Weighted composite loss plus its unweighted terms.

    Terms with zero weight are skipped entirely and do not appear in the
    returned dict. The combined value is under ``"total"``.
    """
    pred = T.as_tensor(pred)
    target = Tensor(T.as_tensor(target).data)
    degraded = Tensor(T.as_tensor(degraded).data)
    terms: dict[str, Tensor] = {}
    total = None
    for key, weight, fn in (
        ("l1", w.alpha, lambda: l1_loss(pred, target)),
        ("ssim", w.beta_w, lambda: ssim_loss(pred, target)),
        ("contrastive", w.gamma, lambda: contrastive_loss(pred, target, degraded, fx)),
    ):
        if weight == 0:
            continue
        term = fn()
        terms[key] = term
        contrib = term if weight == 1 else term * weight
        total = contrib if total is None else total + contrib
    if total is None:
        total = (pred * 0.0).sum()
    terms["total"] = total
    return terms


def composite_loss(pred, target, degraded, w: LossWeights = None, fx: FeatureExtractor = None) -> Tensor:
    w = w or LossWeights()
    fx = fx or FeatureExtractor()
    return composite_terms(pred, target, degraded, w, fx)["total"]
