"""Frequency-domain input path: radix-2 FFT and amplitude/phase channels.

The spectral channels are a fixed feature extractor: they are computed in
numpy and enter the graph as constants, so no gradient flows back through
the FFT.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class ComplexSpectrum:
    real: np.ndarray
    imag: np.ndarray

    @property
    def complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "ComplexSpectrum":
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey DFT along the last axis (unnormalised).

    The inverse direction only flips the twiddle sign; callers divide by n.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    a = x[..., _bit_reverse(n)].astype(np.complex128)
    lead = a.shape[:-1]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        a = a.reshape(lead + (n // size, size))
        even = a[..., :half]
        odd = a[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return a.reshape(lead + (n,))


def fft2(plane: np.ndarray) -> ComplexSpectrum:
    """2-D DFT over the last two axes of a real (or complex) array."""
    plane = np.asarray(plane)
    if plane.ndim < 2:
        raise ValueError(f"fft2 expects at least 2 dimensions, got shape {plane.shape}")
    if not np.isfinite(plane).all():
        raise T.NonFiniteError("fft2 input contains non-finite values")
    rows = fft(plane)
    full = np.swapaxes(fft(np.swapaxes(rows, -1, -2)), -1, -2)
    return ComplexSpectrum.from_complex(full)


def ifft2(spec: ComplexSpectrum) -> np.ndarray:
    """Inverse of :func:`fft2`; returns the real part."""
    z = spec.complex
    if not np.isfinite(z).all():
        raise T.NonFiniteError("ifft2 input contains non-finite values")
    h, w = z.shape[-2:]
    rows = fft(z, inverse=True)
    full = np.swapaxes(fft(np.swapaxes(rows, -1, -2), inverse=True), -1, -2)
    return (full / (h * w)).real


def center_shift(a: np.ndarray) -> np.ndarray:
    """Move the DC bin to (H//2, W//2)."""
    h, w = a.shape[-2:]
    return np.roll(a, (h // 2, w // 2), axis=(-2, -1))


def luminance(img: np.ndarray) -> np.ndarray:
    """(..., 3, H, W) RGB -> (..., H, W) Rec.601 luma."""
    return np.tensordot(LUMA, img, axes=([0], [-3]))


def spectral_channels(img, phase_floor: float = 1e-12) -> np.ndarray:
    """Centred log-amplitude and phase of the luminance plane.

    ``img`` is 3 x H x W (or N x 3 x H x W) in [0, 1]; returns 2 x H x W (or
    N x 2 x H x W). Channel 0 is ``log1p|F| / log1p(max|F|)`` in [0, 1];
    channel 1 is ``angle(F) / pi`` in [-1, 1]. Bins whose magnitude is below
    ``phase_floor * max|F|`` carry no meaningful phase and are set to 0; an
    all-zero image yields two all-zero channels.
    """
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.shape[-3] != 3:
        raise ValueError(f"expected 3 colour channels, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise T.NonFiniteError("image contains non-finite values")
    y = luminance(np.clip(arr.astype(np.float64), 0.0, 1.0))
    spec = fft2(y)
    mag = spec.magnitude
    peak = mag.max(axis=(-2, -1), keepdims=True)
    safe_peak = np.where(peak > 0, peak, 1.0)
    amp = np.where(peak > 0, np.log1p(mag) / np.log1p(safe_peak), 0.0)
    phase = np.arctan2(spec.imag, spec.real) / np.pi
    phase = np.where(mag > phase_floor * peak, phase, 0.0)
    out = np.stack([center_shift(amp), center_shift(phase)], axis=-3)
    return out.astype(arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64)


def build_initial_features(img: Tensor, spatial, spectral: Optional[object] = None) -> Tensor:
    """Dual-domain initial feature: ``spatial(I) (+) spectral(I_S)``.

    ``spatial`` and ``spectral`` are SS2D blocks (or identity callables);
    pass ``spectral=None`` to drop the frequency branch entirely.
    """
    img = T.as_tensor(img)
    if img.ndim != 4:
        raise ValueError(f"expected N x 3 x H x W, got {img.shape}")
    feats = spatial(img)
    if spectral is None:
        return feats
    spec = Tensor(spectral_channels(img.data))
    return T.concat_channels(feats, spectral(spec))
