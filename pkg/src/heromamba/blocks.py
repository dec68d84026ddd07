"""Composite blocks: MS-Fusion, ColorFusion and the encoder/decoder stages."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module, Parameter
from .spectral import luminance
from .ssm import SS2D
from .tensor import Tensor

log = logging.getLogger(__name__)


class MSBranch(Module):
    """pointwise -> depthwise(k) -> SiLU -> pointwise -> depthwise(k)."""

    def __init__(self, channels: int, kernel: int, rng, std: float = 0.02):
        super().__init__()
        c = channels
        self.pw1 = Conv2d(c, c, 1, rng, std=std)
        self.dw1 = Conv2d(c, c, kernel, rng, groups=c, std=std)
        self.pw2 = Conv2d(c, c, 1, rng, std=std)
        self.dw2 = Conv2d(c, c, kernel, rng, groups=c, std=std)

    def forward(self, x: Tensor) -> Tensor:
        return self.dw2(self.pw2(T.silu(self.dw1(self.pw1(x)))))


class MSFusion(Module):
    """Three parallel branches (kernels 1, 3, 5), 1x1 merge, residual add.

    The merge conv starts at zero so the block is the identity at init.
    """

    KERNELS = (1, 3, 5)

    def __init__(self, channels: int, rng, std: float = 0.02):
        super().__init__()
        self.channels = channels
        self.branches = [MSBranch(channels, k, rng, std) for k in self.KERNELS]
        self.merge = Conv2d(3 * channels, channels, 1, rng, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"MS-Fusion expects {self.channels} channels, got {x.shape[1]}")
        feats = T.concat([b(x) for b in self.branches], axis=1)
        return x + self.merge(feats)


def ms_fusion(x: Tensor, p: MSFusion) -> Tensor:
    return p(x)


def estimate_background_light(img: np.ndarray, fraction: float = 1e-3, min_pixels: int = 10) -> np.ndarray:
    """Bright-pixel background light estimate.

    Averages each channel over the pixels whose luminance is in the top
    ``fraction`` of the image (at least ``min_pixels``). Accepts 3 x H x W
    (returns a 3-vector) or N x 3 x H x W (returns N x 3). Images with fewer
    than ``min_pixels`` pixels fall back to the global channel mean.
    """
    arr = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    n, c, h, w = batch.shape
    if c != 3:
        raise ValueError(f"expected 3 colour channels, got {c}")
    pixels = batch.reshape(n, 3, h * w)
    k = max(min_pixels, int(np.ceil(fraction * h * w)))
    out = np.empty((n, 3))
    for i in range(n):
        if h * w < k:
            out[i] = pixels[i].mean(axis=1)
            continue
        lum = luminance(batch[i]).reshape(-1)
        top = np.argsort(-lum, kind="stable")[:k]
        out[i] = pixels[i][:, top].mean(axis=1)
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


class ColorFusion(Module):
    """Background-light guided skip block.

    b_p = Conv1x1(b_e + b_l) broadcast over H x W
    b_f = sigmoid(Conv(f)),  t = sigmoid(Conv(f)),  w = sigmoid(w_raw)
    B'  = w * b_f + (1 - w) * b_p
    c   = f * t + B' * (1 - t)
    """

    def __init__(self, channels: int, rng, std: float = 0.02):
        super().__init__()
        self.channels = channels
        self.b_l = Parameter(np.zeros(3))
        self.prior = Conv2d(3, channels, 1, rng, std=std)
        self.bf_head = Conv2d(channels, channels, 3, rng, std=std)
        self.t_head = Conv2d(channels, channels, 3, rng, std=std)
        self.omega_raw = Parameter(np.zeros(1))

    @property
    def omega(self) -> float:
        # float64 so that the logged value does not round to 0 or 1
        return float(T._sigmoid(self.omega_raw.data.astype(np.float64))[0])

    def components(self, f: Tensor, b_e) -> dict[str, Tensor]:
        if f.shape[1] != self.channels:
            raise ValueError(f"ColorFusion expects {self.channels} channels, got {f.shape[1]}")
        b_e = np.asarray(b_e, dtype=np.float64).reshape(-1, 3)
        if b_e.shape[0] not in (1, f.shape[0]):
            raise ValueError(f"b_e has {b_e.shape[0]} rows for a batch of {f.shape[0]}")
        if (b_e < 0).any() or (b_e > 1).any():
            log.warning("background light %s outside [0, 1]; clamping", b_e.tolist())
            b_e = np.clip(b_e, 0.0, 1.0)
        be = Tensor(b_e.reshape(-1, 3, 1, 1).astype(f.dtype))
        b_p = self.prior(be + self.b_l.reshape(1, 3, 1, 1))
        b_f = T.sigmoid(self.bf_head(f))
        omega = T.sigmoid(self.omega_raw).reshape(1, 1, 1, 1)
        B = omega * b_f + (1.0 - omega) * b_p
        t = T.sigmoid(self.t_head(f))
        c = f * t + B * (1.0 - t)
        return {"b_p": b_p, "b_f": b_f, "omega": omega, "B": B, "t": t, "c": c}

    def forward(self, f: Tensor, b_e) -> Tensor:
        return self.components(f, b_e)["c"]


def color_fusion(f: Tensor, b_e, p: ColorFusion) -> Tensor:
    return p(f, b_e)


class EncoderStage(Module):
    """Stride-2 3x3 conv downsampler, then SS2D, then MS-Fusion.

    Either of the last two can be switched off (identity) for ablations.
    """

    def __init__(self, in_ch: int, out_ch: int, rng, d_state: int = 4, expand: int = 2,
                 use_ss2d: bool = True, use_ms_fusion: bool = True, std: float = 0.02,
                 tie_directions: bool = False):
        super().__init__()
        self.down = Conv2d(in_ch, out_ch, 3, rng, stride=2, padding=1, std=std)
        self.ss2d = SS2D(out_ch, rng, d_state, expand, tie_directions, std) if use_ss2d else None
        self.msf = MSFusion(out_ch, rng, std) if use_ms_fusion else None

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"encoder stage needs even spatial dims, got {h}x{w}")
        x = self.down(x)
        if self.ss2d is not None:
            x = self.ss2d(x)
        if self.msf is not None:
            x = self.msf(x)
        return x


def encoder_stage(x: Tensor, p: EncoderStage) -> Tensor:
    return p(x)


class DecoderStage(Module):
    """concat(d, c) -> nearest 2x upsample -> conv -> BN -> conv -> SiLU."""

    def __init__(self, in_ch: int, out_ch: int, rng, std: float = 0.02, momentum: float = 0.1):
        super().__init__()
        self.in_ch = in_ch
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, std=std)
        self.bn = BatchNorm2d(out_ch, momentum=momentum)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, std=std)

    def forward(self, d: Tensor, skip: Optional[Tensor] = None) -> Tensor:
        if skip is not None:
            if d.shape[2:] != skip.shape[2:]:
                raise ValueError(
                    f"decoder feature {d.shape[2:]} and skip {skip.shape[2:]} differ spatially"
                )
            d = T.concat_channels(d, skip)
        if d.shape[1] != self.in_ch:
            raise ValueError(f"decoder stage expects {self.in_ch} input channels, got {d.shape[1]}")
        x = T.upsample_nearest2x(d)
        return T.silu(self.conv2(self.bn(self.conv1(x))))


def decoder_stage(d: Tensor, skip: Tensor, p: DecoderStage) -> Tensor:
    return p(d, skip)
