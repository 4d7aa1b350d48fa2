"""Regression fine-tuning of a (pre)trained encoder with a linear head."""

from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .models import Encoder, EncoderSpec, RegressionNet, grayscale_stem, load_encoder_state, to_float_batch
from .ssl.augment import AugmentPolicy, augment_batch
from .ssl.checkpoint import Checkpoint

log = logging.getLogger(__name__)

INIT_KINDS = ("random", "supervised_generic", "ssl_checkpoint")


class FinetuneError(RuntimeError):
    pass


@dataclass
class InitScheme:
    kind: str = "random"
    checkpoint: Checkpoint | None = None

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ValueError(f"unknown init scheme {self.kind!r}")
        if self.kind != "random" and self.checkpoint is None:
            raise ValueError(f"init scheme {self.kind!r} requires a checkpoint")


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    augment: AugmentPolicy | None = None
    encoder_lr_scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.augment.items()})
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("invalid fine-tuning config")
        if self.encoder_lr_scale <= 0:
            raise ValueError("encoder_lr_scale must be positive (every layer stays trainable)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict() if self.augment else None
        return d


@dataclass
class RegressorModel:
    net: RegressionNet
    training_log: list[dict] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)
    trained: bool = False
    best_epoch: int = 0

    def to_checkpoint(self, config_hash: str = "") -> Checkpoint:
        return Checkpoint(
            encoder_spec=self.net.encoder.spec,
            encoder_state={k: v.clone() for k, v in self.net.encoder.state_dict().items()},
            provenance=self.provenance,
            val_loss=float(self.training_log[self.best_epoch]["val_mse"]) if self.training_log else 0.0,
            head_state={k: v.clone() for k, v in self.net.head.state_dict().items()},
            config_hash=config_hash,
            meta={"training_log": self.training_log, "trained": self.trained, "best_epoch": self.best_epoch},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> RegressorModel:
        if ckpt.head_state is None:
            raise FinetuneError("checkpoint carries no regression head")
        enc = Encoder(ckpt.encoder_spec)
        load_encoder_state(enc, ckpt.encoder_state)
        net = RegressionNet(enc, enc.feature_dim)
        net.head.load_state_dict(ckpt.head_state)
        net.eval()
        return cls(
            net,
            training_log=ckpt.meta.get("training_log", []),
            provenance=ckpt.provenance,
            trained=ckpt.meta.get("trained", False),
            best_epoch=ckpt.meta.get("best_epoch", 0),
        )


def init_backbone(scheme: InitScheme, spec: EncoderSpec, data_channels: int, seed: int) -> tuple[Encoder, list[dict]]:
    """Encoder for fine-tuning plus the provenance chain it carries."""
    torch.manual_seed(seed)
    if scheme.kind == "random":
        return Encoder(spec.with_channels(data_channels)), [
            {"stage_name": "random-init", "method": "random", "dataset_tag": "-", "seed": int(seed)}
        ]
    ckpt = scheme.checkpoint
    if data_channels not in (1, ckpt.encoder_spec.in_channels):
        raise FinetuneError(
            f"data has {data_channels} channels, checkpoint stem expects {ckpt.encoder_spec.in_channels}"
        )
    spec_, state = ckpt.encoder_spec, ckpt.encoder_state
    if data_channels == 1:
        spec_, state = grayscale_stem(spec_, state)
    enc = Encoder(spec_)
    load_encoder_state(enc, state)
    return enc, list(ckpt.provenance)


def regression_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the batch, the fine-tuning objective."""
    return F.mse_loss(pred, target)


def train_step(net: RegressionNet, opt: torch.optim.Optimizer, x: torch.Tensor, y: torch.Tensor) -> float:
    pred = net(x)
    loss = regression_loss(pred, y)
    if not torch.isfinite(loss):
        raise FinetuneError(
            f"non-finite MSE: prediction mean {float(pred.detach().mean()):.4g}, "
            f"target mean {float(y.mean()):.4g}, batch size {x.shape[0]}"
        )
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return float(loss.detach())


@torch.no_grad()
def _predict_images(net: RegressionNet, images: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    was_training = net.training
    net.eval()
    out = [net(to_float_batch(images[i : i + batch_size])).double().numpy() for i in range(0, images.shape[0], batch_size)]
    net.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def subject_means(subject_index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Mean of ``values`` per integer subject index (0..S-1)."""
    subject_index = np.asarray(subject_index)
    sums = np.bincount(subject_index, weights=values)
    counts = np.bincount(subject_index)
    return sums / counts


def finetune_regressor(
    encoder: Encoder,
    train_images: torch.Tensor,
    train_labels: torch.Tensor,
    val_images: torch.Tensor,
    val_labels: torch.Tensor,
    cfg: FinetuneConfig,
    seed: int,
    provenance: list[dict] | None = None,
    val_subjects: np.ndarray | None = None,
) -> RegressorModel:
    """Full fine-tuning under MSE; the epoch with the lowest validation MSE is kept.

    ``val_subjects`` maps each validation slice to a subject index; the
    validation MSE is then computed on per-subject mean predictions.
    """
    if train_images.shape[0] == 0:
        raise FinetuneError("fine-tuning set is empty")
    if float(train_labels.min()) < 0 or float(train_labels.max()) > 18:
        raise FinetuneError("labels must lie in [0, 18]")
    torch.manual_seed(seed)
    net = RegressionNet(encoder, encoder.feature_dim)
    with torch.no_grad():
        net.head.bias.fill_(float(train_labels.mean()))
    # all layers train; the encoder may use a smaller step than the fresh head
    groups = [
        {"params": list(net.encoder.parameters()), "lr": cfg.learning_rate * cfg.encoder_lr_scale},
        {"params": list(net.head.parameters()), "lr": cfg.learning_rate},
    ]
    opt = torch.optim.Adam(groups, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed)

    if val_subjects is None:
        val_subjects = np.arange(val_images.shape[0])
    val_y = subject_means(val_subjects, val_labels.double().numpy())

    def val_mse() -> float:
        pred = subject_means(val_subjects, _predict_images(net, val_images))
        return float(np.mean((pred - val_y) ** 2))

    def train_mse() -> float:
        pred = _predict_images(net, train_images)
        return float(np.mean((pred - train_labels.double().numpy()) ** 2))

    training_log = [{"epoch": 0, "train_mse": train_mse(), "val_mse": val_mse()}]
    best, best_epoch = training_log[0]["val_mse"], 0
    best_state = copy.deepcopy(net.state_dict())
    net.train()
    n = train_images.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.size < 2 and n > 1:
                continue
            x = to_float_batch(train_images[idx])
            if cfg.augment is not None:
                x = augment_batch(x, cfg.augment, torch.Generator().manual_seed(int(rng.integers(2**62))))
            train_step(net, opt, x, train_labels[idx])
        entry = {"epoch": epoch, "train_mse": train_mse(), "val_mse": val_mse()}
        training_log.append(entry)
        log.debug("finetune epoch %d train %.4f val %.4f", epoch, entry["train_mse"], entry["val_mse"])
        if entry["val_mse"] < best:
            best, best_epoch = entry["val_mse"], epoch
            best_state = copy.deepcopy(net.state_dict())

    net.load_state_dict(best_state)
    net.eval()
    chain = list(provenance or []) + [
        {"stage_name": "finetune", "method": "mse", "dataset_tag": "labeled", "seed": int(seed)}
    ]
    return RegressorModel(net, training_log, chain, trained=cfg.epochs > 0, best_epoch=best_epoch)


def predict(model: RegressorModel, images, batch_size: int = 64) -> list[float]:
    """One prediction per image; accepts a tensor or a list of slices / arrays."""
    if isinstance(images, torch.Tensor):
        x = images
    else:
        images = list(images)
        if not images:
            return []
        arrs = [np.asarray(getattr(im, "data", im), dtype=np.float32) for im in images]
        arrs = [a[None] if a.ndim == 2 else a for a in arrs]
        if len({a.shape for a in arrs}) != 1:
            raise FinetuneError("all images must share one shape")
        x = torch.from_numpy(np.stack(arrs))
    if x.shape[0] == 0:
        return []
    if x.ndim != 4:
        raise FinetuneError(f"expected images shaped (N, C, H, W), got {tuple(x.shape)}")
    return [float(v) for v in _predict_images(model.net, x, batch_size)]


def aggregate_by_subject(subject_ids: list[str], preds: list[float]) -> dict[str, float]:
    """Subject-level prediction = mean of that subject's slice predictions."""
    acc: dict[str, list[float]] = {}
    for sid, p in zip(subject_ids, preds):
        acc.setdefault(sid, []).append(p)
    return {sid: float(np.mean(v)) for sid, v in acc.items()}


def predictions_csv(rows: list[tuple[str, float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "y_true", "y_pred"])
    for sid, yt, yp in rows:
        w.writerow([sid, repr(float(yt)), repr(float(yp))])
    return buf.getvalue()


def read_predictions_csv(text: str) -> list[tuple[str, float, float]]:
    reader = csv.DictReader(io.StringIO(text))
    return [(r["subject_id"], float(r["y_true"]), float(r["y_pred"])) for r in reader]
