"""Self-supervised (and supervised generic) pretraining with checkpoint chaining."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..models import Encoder, EncoderSpec, ProjectionHead, grayscale_stem, load_encoder_state, to_float_batch
from .augment import AugmentPolicy, augment_batch
from .checkpoint import Checkpoint
from .losses import barlow_twins_loss, nt_xent_loss, swav_loss

log = logging.getLogger(__name__)

METHODS = ("simclr", "barlow_twins", "swav", "supervised")
METHOD_SHORT = {"simclr": "simclr", "barlow_twins": "blt", "swav": "swav", "supervised": "sup"}
DEFAULT_TEMPERATURE = {"simclr": 0.5, "swav": 0.1}


class PretrainError(RuntimeError):
    pass


@dataclass
class SslConfig:
    method: str = "simclr"
    temperature: float | None = None
    lambd: float = 5e-3
    prototypes: int = 32
    epsilon: float = 0.05
    sinkhorn_iters: int = 3
    projection_dim: int = 64
    hidden_dim: int = 128
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 64
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.augment.items()})
        if self.temperature is None and self.method in DEFAULT_TEMPERATURE:
            self.temperature = DEFAULT_TEMPERATURE[self.method]
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lambd <= 0:
            raise ValueError("lambd must be positive")
        if self.prototypes < 2:
            raise ValueError("swav needs at least 2 prototypes")
        if self.epsilon <= 0 or self.sinkhorn_iters < 1:
            raise ValueError("sinkhorn epsilon must be > 0 and iters >= 1")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 2 or self.projection_dim < 1:
            raise ValueError("epochs >= 0, batch_size >= 2 and projection_dim >= 1 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d


def stage_name(dataset_tag: str, method: str) -> str:
    return f"{dataset_tag}-{METHOD_SHORT[method]}"


class _SslModel(nn.Module):
    def __init__(self, encoder: Encoder, cfg: SslConfig, n_classes: int = 0):
        super().__init__()
        self.encoder = encoder
        if cfg.method == "supervised":
            self.projection = nn.Linear(encoder.feature_dim, n_classes)
        else:
            self.projection = ProjectionHead(encoder.feature_dim, cfg.hidden_dim, cfg.projection_dim)
        if cfg.method == "swav":
            self.prototypes = nn.Linear(cfg.projection_dim, cfg.prototypes, bias=False)

    def forward(self, x):
        return self.projection(self.encoder(x))

    @torch.no_grad()
    def normalize_prototypes(self):
        if hasattr(self, "prototypes"):
            self.prototypes.weight.copy_(F.normalize(self.prototypes.weight, dim=1))


def _loss(model: _SslModel, cfg: SslConfig, x: torch.Tensor, y, gen: torch.Generator):
    x = to_float_batch(x)
    if cfg.method == "supervised":
        logits = model(augment_batch(x, cfg.augment, gen))
        return F.cross_entropy(logits, y), logits
    va = augment_batch(x, cfg.augment, gen)
    vb = augment_batch(x, cfg.augment, gen)
    za, zb = model(va), model(vb)
    if cfg.method == "simclr":
        loss = nt_xent_loss(za, zb, cfg.temperature)
    elif cfg.method == "barlow_twins":
        loss = barlow_twins_loss(za, zb, cfg.lambd)
    else:
        loss = swav_loss(za, zb, model.prototypes.weight, cfg.temperature, cfg.epsilon, cfg.sinkhorn_iters)
    return loss, torch.cat([za, zb])


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if idx.size >= 2:
            yield idx


@torch.no_grad()
def _validate(model, cfg, images, labels, seed) -> float:
    model.eval()
    total, count = 0.0, 0
    order = np.arange(images.shape[0])
    for b, idx in enumerate(_batches(images.shape[0], cfg.batch_size, order)):
        gen = torch.Generator().manual_seed(seed * 100_003 + b)
        y = labels[idx] if labels is not None else None
        loss, _ = _loss(model, cfg, images[idx], y, gen)
        total += float(loss) * idx.size
        count += idx.size
    model.train()
    if count == 0:
        raise PretrainError("validation set needs at least 2 images")
    return total / count


def _resolve_encoder(init: Checkpoint | None, spec: EncoderSpec | None, channels: int, seed: int) -> tuple[Encoder, list]:
    torch.manual_seed(seed)
    if init is None:
        spec = (spec or EncoderSpec()).with_channels(channels)
        return Encoder(spec), []
    if channels not in (init.encoder_spec.in_channels, 1):
        raise PretrainError(
            f"data has {channels} channels but the checkpoint stem expects {init.encoder_spec.in_channels}"
        )
    spec, state = init.encoder_spec, init.encoder_state
    if channels == 1:
        spec, state = grayscale_stem(spec, state)
    enc = Encoder(spec)
    load_encoder_state(enc, state)
    return enc, list(init.provenance)


def pretrain(
    init: Checkpoint | None,
    train_images: torch.Tensor,
    val_images: torch.Tensor,
    cfg: SslConfig,
    seed: int,
    dataset_tag: str,
    encoder_spec: EncoderSpec | None = None,
    train_labels: torch.Tensor | None = None,
    val_labels: torch.Tensor | None = None,
    config_hash: str = "",
) -> Checkpoint:
    """Train encoder + projection with ``cfg.method``, keep the best-validation epoch.

    ``init=None`` means random initialization from ``encoder_spec`` (channel
    count taken from the data). The returned checkpoint's provenance is the
    init chain plus one stage descriptor.
    """
    if train_images.shape[0] == 0:
        raise PretrainError("pretraining dataset is empty")
    if cfg.method == "supervised" and (train_labels is None or val_labels is None):
        raise PretrainError("supervised pretraining needs labels")
    encoder, chain = _resolve_encoder(init, encoder_spec, train_images.shape[1], seed)
    n_classes = int(max(int(train_labels.max()), int(val_labels.max())) + 1) if cfg.method == "supervised" else 0
    model = _SslModel(encoder, cfg, n_classes)
    model.normalize_prototypes()
    opt_cls = torch.optim.AdamW if cfg.optimizer == "adamw" else torch.optim.Adam
    opt = opt_cls(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    rng = np.random.default_rng(seed)
    best_loss = _validate(model, cfg, val_images, val_labels, seed)
    best_state = copy.deepcopy(model.state_dict())
    history = [best_loss]
    best_epoch = 0
    n = train_images.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for b, idx in enumerate(_batches(n, cfg.batch_size, order)):
            gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
            y = train_labels[idx] if train_labels is not None else None
            loss, z = _loss(model, cfg, train_images[idx], y, gen)
            if not torch.isfinite(loss):
                z = z.detach()
                raise PretrainError(
                    f"non-finite {cfg.method} loss at epoch {epoch} batch {b}: "
                    f"embedding mean {float(z.mean()):.4g}, sd {float(z.std()):.4g}, "
                    f"max |z| {float(z.abs().max()):.4g}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            model.normalize_prototypes()
        val = _validate(model, cfg, val_images, val_labels, seed)
        history.append(val)
        log.info("%s epoch %d val loss %.5f", cfg.method, epoch, val)
        if val < best_loss:
            best_loss, best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    descriptor = {
        "stage_name": stage_name(dataset_tag, cfg.method),
        "method": cfg.method,
        "dataset_tag": dataset_tag,
        "seed": int(seed),
        "config_hash": config_hash,
        "optimizer": {"name": cfg.optimizer, "learning_rate": cfg.learning_rate},
        "best_epoch": best_epoch,
        "epochs": cfg.epochs,
    }
    proj_state = {k: v for k, v in best_state.items() if not k.startswith("encoder.")}
    return Checkpoint(
        encoder_spec=encoder.spec,
        encoder_state={k: v.clone() for k, v in model.encoder.state_dict().items()},
        provenance=chain + [descriptor],
        val_loss=float(best_loss),
        projection_state=proj_state,
        val_history=[float(h) for h in history],
        config_hash=config_hash,
    )
