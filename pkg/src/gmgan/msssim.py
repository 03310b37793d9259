"""Multi-scale structural similarity (Wang, Simoncelli & Bovik 2003).

Per scale the contrast-structure term is averaged over the valid-filtered
map; the luminance term enters only at the coarsest scale. Scales are
dropped from the top until the Gaussian window fits, and the remaining
weights are renormalized. Terms are combined with a sign-preserving power
so that anti-correlated inputs give a negative raw value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParameterError

REFERENCE_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class MsSsimParams:
    weights: tuple = REFERENCE_WEIGHTS
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 2.0   # [-1, 1] inputs

    def kernel(self):
        r = np.arange(self.window) - (self.window - 1) / 2.0
        g = np.exp(-(r * r) / (2.0 * self.sigma ** 2))
        return g / g.sum()

    def n_scales(self, height, width):
        """How many scales keep the window inside the image."""
        n = 0
        h, w = height, width
        while n < len(self.weights) and min(h, w) >= self.window:
            n += 1
            h, w = h // 2, w // 2
        if n == 0:
            raise ParameterError(f"{height}x{width} image is smaller than the {self.window}-tap window")
        return n

    def scale_weights(self, height, width):
        w = np.asarray(self.weights[: self.n_scales(height, width)], dtype=np.float64)
        return w / w.sum()


def _filter(x, kernel):
    """Separable valid-mode Gaussian filter over the last two axes."""
    x = sliding_window_view(x, len(kernel), axis=-1) @ kernel
    x = sliding_window_view(x, len(kernel), axis=-2) @ kernel
    return x


def _downsample(x):
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def _signpow(v, w):
    return np.sign(v) * np.abs(v) ** w


class _Pyramid:
    """Per-scale images and their filtered first/second moments for a batch [n, H, W]."""

    def __init__(self, images, params):
        self.kernel = params.kernel()
        self.weights = params.scale_weights(*images.shape[-2:])
        self.levels = []
        x = images
        for j in range(len(self.weights)):
            if j:
                x = _downsample(x)
            mu = _filter(x, self.kernel)
            self.levels.append((x, mu, _filter(x * x, self.kernel) - mu * mu))
        C = params.data_range
        self.c1 = (params.k1 * C) ** 2
        self.c2 = (params.k2 * C) ** 2

    def pair_values(self, i, js):
        """Raw MS-SSIM between image i and each image in ``js``."""
        total = np.ones(len(js))
        last = len(self.levels) - 1
        for j, (x, mu, var) in enumerate(self.levels):
            mu_a, mu_b = mu[i], mu[js]
            cov = _filter(x[i] * x[js], self.kernel) - mu_a * mu_b
            cs = (2.0 * cov + self.c2) / (var[i] + var[js] + self.c2)
            if j == last:
                lum = (2.0 * mu_a * mu_b + self.c1) / (mu_a * mu_a + mu_b * mu_b + self.c1)
                cs = lum * cs
            total *= _signpow(cs.mean(axis=(-2, -1)), self.weights[j])
        return total


def _channels(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None]
    if img.ndim == 3:
        return np.moveaxis(img, -1, 0)
    raise DimensionError(f"expected an [H, W] or [H, W, C] image, got shape {img.shape}")


def ms_ssim_raw(img_a, img_b, params=MsSsimParams()):
    """Unclamped MS-SSIM, averaged over channels."""
    a, b = _channels(img_a), _channels(img_b)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {np.shape(img_a)} vs {np.shape(img_b)}")
    vals = []
    for ca, cb in zip(a, b):
        pyr = _Pyramid(np.stack([ca, cb]), params)
        vals.append(pyr.pair_values(0, np.array([1]))[0])
    return float(np.mean(vals))


def ms_ssim(img_a, img_b, params=MsSsimParams()):
    return min(1.0, max(0.0, ms_ssim_raw(img_a, img_b, params)))


def pairwise_ms_ssim(images, params=MsSsimParams(), clamp=True):
    """Symmetric [n, n] matrix of MS-SSIM over a batch [n, H, W] or [n, H, W, C]."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise DimensionError(f"expected [n, H, W(, C)] images, got shape {images.shape}")
    n, C = images.shape[0], images.shape[-1]
    out = np.zeros((n, n))
    for c in range(C):
        pyr = _Pyramid(images[..., c], params)
        for i in range(n):
            js = np.arange(i, n)
            vals = pyr.pair_values(i, js)
            out[i, i:] += vals
            out[i + 1:, i] += vals[1:]
    out /= C
    return np.clip(out, 0.0, 1.0) if clamp else out
