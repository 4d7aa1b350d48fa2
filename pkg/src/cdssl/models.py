"""Encoder backbones and the heads placed on top of them."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture description; two encoders with equal specs share weight shapes.

    ``arch`` is ``small_cnn`` (default), ``flat`` (pixels average-pooled to a
    ``width x width`` grid, no convolutions), ``resnet18`` or ``resnet50``. ``input_pool`` average-pools the input
    before the first layer so 224 x 224 slices stay cheap on a CPU.
    """

    arch: str = "small_cnn"
    in_channels: int = 1
    width: int = 16
    depth: int = 4
    input_pool: int = 4

    def to_dict(self) -> dict:
        return asdict(self)

    def with_channels(self, c: int) -> EncoderSpec:
        return EncoderSpec(self.arch, c, self.width, self.depth, self.input_pool)


class _ConvBlock(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, pool: bool):
        layers = [
            nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        ]
        if pool:
            layers.append(nn.MaxPool2d(2))
        super().__init__(*layers)


class Encoder(nn.Module):
    """Backbone mapping ``(B, C, H, W)`` images to ``(B, feature_dim)`` vectors.

    Single-channel inputs are replicated when the stem expects three
    channels. ``spatial_layers`` names the modules whose outputs are
    spatial feature maps (usable as GradCAM targets).
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.pool = nn.AvgPool2d(spec.input_pool) if spec.input_pool > 1 else nn.Identity()
        if spec.arch == "small_cnn":
            chans = [spec.in_channels] + [spec.width * 2 ** min(i, 2) for i in range(spec.depth)]
            self.blocks = nn.ModuleDict(
                {
                    f"block{i + 1}": _ConvBlock(chans[i], chans[i + 1], pool=i < spec.depth - 1)
                    for i in range(spec.depth)
                }
            )
            self.feature_dim = chans[-1]
        elif spec.arch == "flat":
            self.blocks = nn.ModuleDict()
            self.feature_dim = spec.in_channels * spec.width**2
        elif spec.arch in ("resnet18", "resnet50"):
            import torchvision

            net = getattr(torchvision.models, spec.arch)(weights=None)
            if spec.in_channels != 3:
                net.conv1 = nn.Conv2d(spec.in_channels, 64, 7, 2, 3, bias=False)
            stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
            self.blocks = nn.ModuleDict(
                {"stem": stem, "layer1": net.layer1, "layer2": net.layer2, "layer3": net.layer3, "layer4": net.layer4}
            )
            self.feature_dim = net.fc.in_features
        else:
            raise ValueError(f"unknown encoder arch {spec.arch!r}")

    @property
    def spatial_layers(self) -> list[str]:
        return list(self.blocks.keys())

    def adapt_channels(self, x: torch.Tensor) -> torch.Tensor:
        c = self.spec.in_channels
        if x.shape[1] == c:
            return x
        if x.shape[1] == 1 and c == 3:
            return x.expand(-1, 3, -1, -1)
        raise ValueError(f"encoder expects {c} channel(s), got {x.shape[1]}")

    def readout(self, h: torch.Tensor) -> torch.Tensor:
        """Global pooling applied after the last spatial block."""
        size = self.spec.width if self.spec.arch == "flat" else 1
        return F.adaptive_avg_pool2d(h, size).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.pool(self.adapt_channels(x))
        for block in self.blocks.values():
            h = block(h)
        return self.readout(h)


class ProjectionHead(nn.Sequential):
    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__(
            nn.Linear(in_dim, hidden),
            nn.BatchNorm1d(hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, out_dim),
        )


class RegressionNet(nn.Module):
    """Encoder followed by a single linear unit."""

    def __init__(self, encoder: Encoder, feature_dim: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(feature_dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x)).squeeze(1)


def to_float_batch(x: torch.Tensor) -> torch.Tensor:
    """Decode stored image batches: uint8 in [0, 255] maps to roughly unit scale, float16 widens."""
    if x.dtype == torch.uint8:
        return (x.float() / 255.0 - 0.5) / 0.25
    if x.dtype != torch.float32 and x.dtype != torch.float64:
        return x.float()
    return x


def state_to_numpy(state: dict[str, torch.Tensor]) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in state.items()}


def state_from_numpy(arrays: dict) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}


def grayscale_stem(spec: EncoderSpec, state: dict[str, torch.Tensor]) -> tuple[EncoderSpec, dict[str, torch.Tensor]]:
    """Fold a colour stem into a single-channel one by summing the first conv over input channels.

    On grayscale input this computes exactly what the colour encoder computes on
    the image replicated into every channel, but the optimizer then updates one
    kernel instead of three identical copies, so later training steps match a
    native single-channel encoder.
    """
    if spec.in_channels == 1:
        return spec, state
    out = dict(state)
    for name, tensor in state.items():
        if tensor.dim() == 4 and tensor.shape[1] == spec.in_channels:
            out[name] = tensor.sum(dim=1, keepdim=True)
            return spec.with_channels(1), out
    raise ValueError("no input convolution found to fold into a single channel")


def load_encoder_state(encoder: Encoder, state: dict[str, torch.Tensor]) -> None:
    """Strict load that names the first mismatching tensor on failure."""
    own = encoder.state_dict()
    for name, tensor in own.items():
        if name not in state:
            raise ValueError(f"checkpoint is missing encoder tensor {name!r}")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise ValueError(
                f"shape mismatch at layer {name!r}: checkpoint {tuple(state[name].shape)} "
                f"vs encoder {tuple(tensor.shape)}"
            )
    extra = sorted(set(state) - set(own))
    if extra:
        raise ValueError(f"checkpoint has unexpected encoder tensor {extra[0]!r}")
    encoder.load_state_dict(state, strict=True)
