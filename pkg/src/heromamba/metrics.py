"""Full-reference image quality metrics: PSNR, SSIM and FSIM."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .spectral import fft2, ifft2, ComplexSpectrum, luminance
from .tensor import Tensor, no_grad


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(x, y, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _arr(x), _arr(y)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim_index(x, y, data_range: float = 1.0) -> float:
    """SSIM as a plain float (64-bit, no graph)."""
    with no_grad():
        return float(losses.ssim(_arr(x), _arr(y), data_range=data_range).data)


# ---------------------------------------------------------------------------
# FSIM
# ---------------------------------------------------------------------------

SCHARR_X = np.array([[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]]) / 16.0


def _conv_same(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' 2-D convolution (kernel flipped)."""
    kh, kw = k.shape
    p = np.pad(img, ((kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = np.lib.stride_tricks.sliding_window_view(p, (kh, kw))
    return np.einsum("hwij,ij->hw", win, k[::-1, ::-1])


def _freq_grid(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    def axis(n):
        if n % 2:
            return np.arange(-(n - 1) / 2, (n - 1) / 2 + 1) / (n - 1)
        return np.arange(-n / 2, n / 2) / n

    x, y = np.meshgrid(axis(cols), axis(rows))
    return x, y


def _ifftshift(a: np.ndarray) -> np.ndarray:
    h, w = a.shape
    return np.roll(a, (-(h // 2), -(w // 2)), axis=(0, 1))


def _ifft2c(z: np.ndarray) -> np.ndarray:
    return ifft2(ComplexSpectrum.from_complex(z)) + 1j * ifft2(ComplexSpectrum.from_complex(-1j * z))


def phase_congruency(img: np.ndarray, nscale: int = 4, norient: int = 4, min_wavelength: float = 6.0,
                     mult: float = 2.0, sigma_onf: float = 0.55, d_theta_on_sigma: float = 1.2,
                     k: float = 2.0, epsilon: float = 1e-4) -> np.ndarray:
    """Kovesi phase congruency from a log-Gabor filter bank (FSIM variant)."""
    rows, cols = img.shape
    spec = fft2(img).complex
    x, y = _freq_grid(rows, cols)
    radius = _ifftshift(np.sqrt(x ** 2 + y ** 2))
    theta = _ifftshift(np.arctan2(-y, x))
    radius[0, 0] = 1.0
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    lowpass = 1.0 / (1.0 + (radius / 0.45) ** (2 * 15))
    theta_sigma = np.pi / norient / d_theta_on_sigma

    log_gabor = []
    for s in range(nscale):
        fo = 1.0 / (min_wavelength * mult ** s)
        lg = np.exp(-(np.log(radius / fo)) ** 2 / (2 * np.log(sigma_onf) ** 2)) * lowpass
        lg[0, 0] = 0.0
        log_gabor.append(lg)

    energy_all = np.zeros((rows, cols))
    an_all = np.zeros((rows, cols))
    for o in range(norient):
        angle = o * np.pi / norient
        ds = sin_t * np.cos(angle) - cos_t * np.sin(angle)
        dc = cos_t * np.cos(angle) + sin_t * np.sin(angle)
        spread = np.exp(-np.arctan2(ds, dc) ** 2 / (2 * theta_sigma ** 2))
        sum_e = np.zeros((rows, cols))
        sum_o = np.zeros((rows, cols))
        sum_an = np.zeros((rows, cols))
        eo = []
        ifft_filters = []
        em_n = 0.0
        for s in range(nscale):
            filt = log_gabor[s] * spread
            ifft_filters.append(_ifft2c(filt).real * np.sqrt(rows * cols))
            resp = _ifft2c(spec * filt)
            eo.append(resp)
            sum_an += np.abs(resp)
            sum_e += resp.real
            sum_o += resp.imag
            if s == 0:
                em_n = float(np.sum(filt ** 2))
        x_energy = np.sqrt(sum_e ** 2 + sum_o ** 2) + epsilon
        mean_e, mean_o = sum_e / x_energy, sum_o / x_energy
        energy = np.zeros((rows, cols))
        for resp in eo:
            e, od = resp.real, resp.imag
            energy += e * mean_e + od * mean_o - np.abs(e * mean_o - od * mean_e)

        # noise threshold from the smallest-scale response
        median_e2n = np.median(np.abs(eo[0]) ** 2)
        mean_e2n = -median_e2n / np.log(0.5)
        noise_power = mean_e2n / em_n
        est_sum_an2 = sum(f ** 2 for f in ifft_filters)
        est_sum_aiaj = np.zeros((rows, cols))
        for si in range(nscale - 1):
            for sj in range(si + 1, nscale):
                est_sum_aiaj += ifft_filters[si] * ifft_filters[sj]
        est_noise_energy2 = 2 * noise_power * est_sum_an2.sum() + 4 * noise_power * est_sum_aiaj.sum()
        tau = np.sqrt(est_noise_energy2 / 2)
        est_noise_energy = tau * np.sqrt(np.pi / 2)
        est_noise_sigma = np.sqrt((2 - np.pi / 2) * tau ** 2)
        thresh = (est_noise_energy + k * est_noise_sigma) / 1.7
        energy_all += np.maximum(energy - thresh, 0.0)
        an_all += sum_an
    return energy_all / np.maximum(an_all, 1e-300)


def _gray255(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    while img.ndim > 3:
        if img.shape[0] != 1:
            raise ValueError("fsim compares one image pair at a time")
        img = img[0]
    if img.ndim == 3:
        img = luminance(img) if img.shape[0] == 3 else img.mean(axis=0)
    return img * 255.0


def fsim(x, y, t1: float = 0.85, t2: float = 160.0) -> float:
    """Feature similarity index on the luminance plane, in [0, 1].

    Inputs are [0, 1] images (3 x H x W RGB or H x W gray), internally scaled
    to [0, 255] where the gradient constant ``t2`` is calibrated. Both sides
    must be at least 32 x 32 with power-of-two sides (radix-2 FFT).
    """
    a, b = _gray255(_arr(x)), _gray255(_arr(y))
    if a.shape != b.shape:
        raise ValueError(f"fsim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < 32:
        raise ValueError(f"fsim needs images of at least 32x32, got {a.shape}")
    pc1, pc2 = phase_congruency(a), phase_congruency(b)
    g1 = np.hypot(_conv_same(a, SCHARR_X), _conv_same(a, SCHARR_X.T))
    g2 = np.hypot(_conv_same(b, SCHARR_X), _conv_same(b, SCHARR_X.T))
    s_pc = (2 * pc1 * pc2 + t1) / (pc1 ** 2 + pc2 ** 2 + t1)
    s_g = (2 * g1 * g2 + t2) / (g1 ** 2 + g2 ** 2 + t2)
    pc_m = np.maximum(pc1, pc2)
    denom = pc_m.sum()
    if denom <= 0:
        # no phase structure anywhere: fall back to the unweighted similarity
        return float(np.mean(s_g * s_pc))
    return float(np.sum(s_g * s_pc * pc_m) / denom)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsRow:
    image_id: str
    psnr_db: float
    ssim: float
    fsim: float


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def add(self, image_id: str, pred, ref, with_fsim: bool = True) -> MetricsRow:
        row = MetricsRow(
            image_id, psnr(pred, ref), ssim_index(pred, ref),
            fsim(pred, ref) if with_fsim else math.nan,
        )
        self.rows.append(row)
        return row

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        for key in ("psnr_db", "ssim", "fsim"):
            vals = np.array([getattr(r, key) for r in self.rows], dtype=np.float64)
            if np.isinf(vals).any():
                out[key] = (float(vals.mean()), math.nan)
            else:
                out[key] = (float(vals.mean()), float(vals.std()))
        return out

    def aggregate_row(self) -> MetricsRow:
        agg = self.aggregate()
        return MetricsRow("mean", agg["psnr_db"][0], agg["ssim"][0], agg["fsim"][0])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "psnr_db", "ssim", "fsim"])
        for r in self.rows + [self.aggregate_row()]:
            w.writerow([r.image_id, _fmt(r.psnr_db), _fmt(r.ssim), _fmt(r.fsim)])
        return buf.getvalue()


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return f"{v:.6f}"
