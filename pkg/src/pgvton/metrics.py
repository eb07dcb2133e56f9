"""Loss primitives, the frozen perceptual encoder, and image-quality metrics."""

from __future__ import annotations

import functools
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.signal import fftconvolve

from .errors import ValidationError

ENCODER_SEED = 20_230_517
PSNR_IDENTICAL = math.inf  # reported when the images are equal


class PerceptualEncoder(nn.Module):
    """Four-stage conv feature extractor at strides 1, 2, 4, 8.

    Stand-in for the relu1_1..relu4_1 taps of VGG-19: channel widths
    ``(d, 2d, 4d, 8d)``, weights drawn once from a fixed seed and frozen.
    Weights are cast to the input dtype on the fly so float64 gradient
    checks run through the same network.
    """

    def __init__(self, width: int = 16, in_channels: int = 3, seed: int = ENCODER_SEED):
        super().__init__()
        self.width = width
        self.channels = (width, 2 * width, 4 * width, 8 * width)
        gen = torch.Generator().manual_seed(seed)
        cin = in_channels
        for i, cout in enumerate(self.channels):
            std = math.sqrt(2.0 / (cin * 9))
            w = torch.randn(cout, cin, 3, 3, generator=gen) * std
            b = torch.randn(cout, generator=gen) * 0.05
            self.register_buffer(f"weight{i}", w)
            self.register_buffer(f"bias{i}", b)
            cin = cout
        self.requires_grad_(False)

    @classmethod
    def from_state(cls, state: dict, width: int = 16) -> "PerceptualEncoder":
        """Build from user-supplied weights (``weight0..3``, ``bias0..3``)."""
        enc = cls(width)
        enc.load_state_dict({k: torch.as_tensor(v) for k, v in state.items()})
        return enc

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for i in range(4):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            w = getattr(self, f"weight{i}").to(x.dtype)
            b = getattr(self, f"bias{i}").to(x.dtype)
            x = F.relu(F.conv2d(x, w, b, padding=1))
            feats.append(x)
        return feats


@functools.lru_cache(maxsize=8)
def default_encoder(width: int = 16) -> PerceptualEncoder:
    return PerceptualEncoder(width).eval()


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1(a, b):
    _check_shapes(a, b)
    if isinstance(a, torch.Tensor):
        return (a - b).abs().mean()
    return float(np.mean(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def l2(a, b):
    _check_shapes(a, b)
    if isinstance(a, torch.Tensor):
        return ((a - b) ** 2).mean()
    return float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, encoder: PerceptualEncoder | None = None) -> torch.Tensor:
    """Sum over the four encoder stages of the mean absolute feature difference."""
    _check_shapes(a, b)
    encoder = encoder or default_encoder()
    fa = encoder(a)
    fb = encoder(b)
    return sum((x - y).abs().mean() for x, y in zip(fa, fb))


# image quality, numpy H x W (x C) arrays in [0, 1] -----------------------


def mse_image(a, b) -> float:
    """Mean squared error on the 0-255 scale."""
    _check_shapes(a, b)
    d = (np.asarray(a, np.float64) - np.asarray(b, np.float64)) * 255.0
    return float(np.mean(d * d))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with peak 255; ``inf`` for equal images."""
    m = mse_image(a, b)
    if m == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(255.0 ** 2 / m)


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Statistics use the valid region only; colour images average the
    per-channel SSIM maps.
    """
    _check_shapes(a, b)
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = _gaussian_window()
    if a.shape[0] < win.shape[0] or a.shape[1] < win.shape[1]:
        raise ValidationError("image smaller than the 11x11 SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    maps = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]

        def filt(z):
            return fftconvolve(z, win, mode="valid")

        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        maps.append(num / den)
    return float(np.mean(maps))


def selection_proportions(samples, model, tau_values, encoder=None) -> list[tuple]:
    """Fraction of samples choosing each warp scale, one row per tau.

    Runs the coarse warper on each sample's paired garment against its
    dressed-garment mask (the setting where a ground-truth target exists).
    Rows are ``(tau, p3, p4, p5, p6)``.
    """
    from . import geometry
    from .synthdata import to_tensors

    samples = list(samples)
    if not samples:
        raise ValidationError("selection_proportions needs a non-empty dataset")
    batch = to_tensors(samples)
    model.eval()
    with torch.no_grad():
        grids, _ = model.warp(batch["garment_mask"], batch["pg_mask"])
        cands = geometry.warp_candidates(batch["garment"], batch["garment_mask"], grids)
    rows = []
    for tau in tau_values:
        sel = geometry.select_optimal(cands, batch["pg_mask"], batch["garment_mask"], float(tau))
        counts = [(sel == s).sum().item() for s in geometry.SCALES]
        rows.append((float(tau), *[c / len(samples) for c in counts]))
    return rows
