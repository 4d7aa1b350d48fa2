"""Stochastic view generation for self-supervised pretraining.

All transforms are batched: one ``grid_sample`` call performs the random
resized crop and flip for the whole batch, and the blur is a grouped
separable convolution with per-sample kernels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale: tuple[float, float] = (0.6, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    brightness: float = 0.4
    contrast: float = 0.4
    # colour distortion, only drawn for 3-channel input (grayscale data is untouched)
    saturation: float = 0.8
    grayscale_p: float = 0.2

    @classmethod
    def identity(cls) -> AugmentPolicy:
        return cls((1.0, 1.0), (1.0, 1.0), 0.0, 0.0, (0.1, 2.0), 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def crop_only(cls, scale=(0.6, 1.0)) -> AugmentPolicy:
        return cls(tuple(scale), (3 / 4, 4 / 3), 0.0, 0.0, (0.1, 2.0), 0.0, 0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(gen: torch.Generator, n: int, lo: float, hi: float) -> torch.Tensor:
    return lo + (hi - lo) * torch.rand(n, generator=gen, dtype=torch.float64)


def _crop_flip(x: torch.Tensor, policy: AugmentPolicy, gen: torch.Generator) -> torch.Tensor:
    b = x.shape[0]
    area = _uniform(gen, b, *policy.crop_scale)
    log_r = _uniform(gen, b, math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1]))
    ratio = torch.exp(log_r)
    w = torch.sqrt(area * ratio).clamp(max=1.0)
    h = torch.sqrt(area / ratio).clamp(max=1.0)
    cx = (1.0 - w) * (2.0 * torch.rand(b, generator=gen, dtype=torch.float64) - 1.0)
    cy = (1.0 - h) * (2.0 * torch.rand(b, generator=gen, dtype=torch.float64) - 1.0)
    flip = torch.rand(b, generator=gen, dtype=torch.float64) < policy.flip_p
    sx = torch.where(flip, -w, w)
    theta = torch.zeros(b, 2, 3, dtype=torch.float64)
    theta[:, 0, 0] = sx
    theta[:, 0, 2] = cx
    theta[:, 1, 1] = h
    theta[:, 1, 2] = cy
    grid = F.affine_grid(theta.to(x.dtype), list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)


def _blur(x: torch.Tensor, policy: AugmentPolicy, gen: torch.Generator) -> torch.Tensor:
    b, c, hgt, wid = x.shape
    apply = torch.rand(b, generator=gen, dtype=torch.float64) < policy.blur_p
    sigma = _uniform(gen, b, *policy.blur_sigma)
    if not bool(apply.any()):
        return x
    radius = int(math.ceil(3.0 * policy.blur_sigma[1]))
    taps = torch.arange(-radius, radius + 1, dtype=torch.float64)
    kern = torch.exp(-0.5 * (taps[None, :] / sigma[:, None]) ** 2)
    kern = kern / kern.sum(dim=1, keepdim=True)
    delta = (taps == 0).to(torch.float64).expand(b, -1)
    kern = torch.where(apply[:, None], kern, delta).to(x.dtype)
    kern = kern.repeat_interleave(c, dim=0)  # (b*c, taps)
    flat = x.reshape(1, b * c, hgt, wid)
    flat = F.pad(flat, (radius, radius, radius, radius), mode="replicate")
    flat = F.conv2d(flat, kern[:, None, None, :], groups=b * c)
    flat = F.conv2d(flat, kern[:, None, :, None], groups=b * c)
    return flat.reshape(b, c, hgt, wid)


def _jitter(x: torch.Tensor, policy: AugmentPolicy, gen: torch.Generator) -> torch.Tensor:
    b = x.shape[0]
    contrast = _uniform(gen, b, 1.0 - policy.contrast, 1.0 + policy.contrast).to(x.dtype)
    shift = _uniform(gen, b, -policy.brightness, policy.brightness).to(x.dtype)
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    sd = x.std(dim=(1, 2, 3), keepdim=True)
    return (x - mean) * contrast.view(b, 1, 1, 1) + mean + shift.view(b, 1, 1, 1) * sd


def _colour(x: torch.Tensor, policy: AugmentPolicy, gen: torch.Generator) -> torch.Tensor:
    """Saturation jitter then random grayscale; without it colour histograms alone
    identify a view pair, and such features are worthless on grayscale scans."""
    b = x.shape[0]
    gray = (x * torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype).view(1, 3, 1, 1)).sum(1, keepdim=True)
    sat = _uniform(gen, b, max(0.0, 1.0 - policy.saturation), 1.0 + policy.saturation).to(x.dtype).view(b, 1, 1, 1)
    x = gray + sat * (x - gray)
    to_gray = (torch.rand(b, generator=gen, dtype=torch.float64) < policy.grayscale_p).view(b, 1, 1, 1)
    return torch.where(to_gray, gray.expand_as(x), x)


def augment_batch(x: torch.Tensor, policy: AugmentPolicy, gen: torch.Generator) -> torch.Tensor:
    """One random view of every image in ``x`` (shape ``B x C x H x W``)."""
    if policy.crop_scale != (1.0, 1.0) or policy.crop_ratio != (1.0, 1.0) or policy.flip_p > 0:
        x = _crop_flip(x, policy, gen)
    if policy.blur_p > 0:
        x = _blur(x, policy, gen)
    if policy.brightness > 0 or policy.contrast > 0:
        x = _jitter(x, policy, gen)
    if x.shape[1] == 3 and (policy.saturation > 0 or policy.grayscale_p > 0):
        x = _colour(x, policy, gen)
    return x


def make_view_pairs(x: torch.Tensor, policy: AugmentPolicy, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    gen = torch.Generator().manual_seed(int(seed))
    return augment_batch(x, policy, gen), augment_batch(x, policy, gen)


@dataclass
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    policy_seed: int


def make_view_pair(img, policy: AugmentPolicy, seed: int) -> ViewPair:
    """Two independent views of a single image (2D ``H x W`` or ``C x H x W``)."""
    arr = np.asarray(getattr(img, "data", img), dtype=np.float32)
    squeeze = arr.ndim == 2
    t = torch.from_numpy(arr[None, None] if squeeze else arr[None])
    a, b = make_view_pairs(t, policy, seed)
    a, b = a[0].numpy(), b[0].numpy()
    if squeeze:
        a, b = a[0], b[0]
    return ViewPair(a, b, int(seed))
