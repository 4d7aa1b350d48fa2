"""GradCAM for the scalar regression output, plus overlay rendering."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import slice_to_uint8
from .models import RegressionNet


class SaliencyError(ValueError):
    pass


@dataclass
class Heatmap:
    data: np.ndarray
    layer_tag: str


def cam_from_activations(acts: torch.Tensor, grads: torch.Tensor) -> torch.Tensor:
    """``ReLU(sum_k w_k A_k)`` with ``w_k`` the spatial mean of ``dY/dA_k``.

    ``acts`` and ``grads`` are ``(C, h, w)``; returns the ``(h, w)`` map
    before upsampling and normalization.
    """
    weights = grads.mean(dim=(1, 2))
    return F.relu((weights[:, None, None] * acts).sum(dim=0))


def _net_of(model) -> RegressionNet:
    return getattr(model, "net", model)


def grad_cam(model, img, layer: str | None = None) -> Heatmap:
    """Heatmap in [0, 1] with the spatial shape of ``img``.

    ``layer`` defaults to the encoder's last spatial block. An all-zero
    gradient produces an all-zero map.
    """
    net = _net_of(model)
    enc = net.encoder
    layers = enc.spatial_layers
    if not layers:
        raise SaliencyError(f"encoder {enc.spec.arch!r} has no spatial layers")
    layer = layer or layers[-1]
    if layer not in layers:
        raise SaliencyError(f"layer {layer!r} is not a spatial layer; choose from {layers}")

    arr = np.asarray(getattr(img, "data", img), dtype=np.float32)
    x = torch.from_numpy(arr[None, None] if arr.ndim == 2 else arr[None])
    out_shape = x.shape[-2:]

    was_training = net.training
    net.eval()
    captured = {}
    h = enc.pool(enc.adapt_channels(x))
    for name, block in enc.blocks.items():
        h = block(h)
        if name == layer:
            h = h.detach().requires_grad_(True)
            captured["act"] = h
    y = net.head(enc.readout(h)).sum()
    (grad,) = torch.autograd.grad(y, captured["act"], allow_unused=True)
    net.train(was_training)

    act = captured["act"][0].detach().double()
    grad = torch.zeros_like(act) if grad is None else grad[0].double()
    cam = cam_from_activations(act, grad)
    up = F.interpolate(cam[None, None], size=tuple(out_shape), mode="bilinear", align_corners=False)[0, 0]
    peak = float(up.max())
    data = (up / peak).numpy() if peak > 0 else np.zeros(tuple(out_shape))
    return Heatmap(np.clip(data, 0.0, 1.0), layer)


def blue_red(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to RGB along blue -> cyan -> yellow -> red (jet-like)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def render_overlay(img, heatmap: Heatmap, alpha: float = 0.5) -> np.ndarray:
    """Blend the colour-mapped heatmap over the grayscale slice (8-bit RGB)."""
    arr = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=0)
    if arr.shape != heatmap.data.shape:
        raise SaliencyError(f"shape mismatch: image {arr.shape} vs heatmap {heatmap.data.shape}")
    gray = slice_to_uint8(arr).astype(np.float64) / 255.0
    base = np.repeat(gray[..., None], 3, axis=-1)
    rgb = (1.0 - alpha) * base + alpha * blue_red(heatmap.data)
    return np.round(255.0 * rgb).astype(np.uint8)


def save_overlay(rgb: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
