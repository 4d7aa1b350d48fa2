"""Checkpoint container: a zip archive of weight blobs plus JSON metadata.

Archive members are written with a fixed timestamp and sorted names so the
same weights always serialize to the same bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..models import EncoderSpec, state_from_numpy, state_to_numpy

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    encoder_spec: EncoderSpec
    encoder_state: dict[str, torch.Tensor]
    provenance: list[dict]
    val_loss: float
    projection_state: dict[str, torch.Tensor] | None = None
    head_state: dict[str, torch.Tensor] | None = None
    val_history: list[float] = field(default_factory=list)
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.provenance:
            raise CheckpointError("provenance chain must be nonempty")
        if not np.isfinite(self.val_loss):
            raise CheckpointError(f"val_loss must be finite, got {self.val_loss}")

    @property
    def stage_names(self) -> list[str]:
        return [p["stage_name"] for p in self.provenance]

    def metadata(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "encoder_spec": self.encoder_spec.to_dict(),
            "provenance": self.provenance,
            "method": self.provenance[-1].get("method"),
            "seed": self.provenance[-1].get("seed"),
            "config_hash": self.config_hash,
            "val_loss": self.val_loss,
            "val_history": self.val_history,
            "meta": self.meta,
        }


def _npz_bytes(state: dict[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    arrays = state_to_numpy(state)
    np.savez(buf, **{k: arrays[k] for k in sorted(arrays)})
    return buf.getvalue()


def _npz_load(raw: bytes) -> dict[str, torch.Tensor]:
    with np.load(io.BytesIO(raw)) as npz:
        return state_from_numpy({k: npz[k] for k in npz.files})


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    members = {
        "encoder.npz": _npz_bytes(ckpt.encoder_state),
        "metadata.json": (json.dumps(ckpt.metadata(), indent=2, sort_keys=True) + "\n").encode(),
    }
    if ckpt.projection_state is not None:
        members["projection.npz"] = _npz_bytes(ckpt.projection_state)
    if ckpt.head_state is not None:
        members["head.npz"] = _npz_bytes(ckpt.head_state)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        for name in sorted(members):
            _write_member(zf, name, members[name])
    tmp.replace(path)


def read_metadata(path: str | Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("metadata.json"))


def load_checkpoint(path: str | Path, expect_config_hash: str | None = None) -> Checkpoint:
    """Load a checkpoint; refuse it when ``expect_config_hash`` does not match."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        names = set(zf.namelist())
        meta = json.loads(zf.read("metadata.json"))
        if expect_config_hash is not None and meta.get("config_hash") != expect_config_hash:
            raise CheckpointError(
                f"{path}: config hash {meta.get('config_hash')!r} does not match {expect_config_hash!r}"
            )
        enc = _npz_load(zf.read("encoder.npz"))
        proj = _npz_load(zf.read("projection.npz")) if "projection.npz" in names else None
        head = _npz_load(zf.read("head.npz")) if "head.npz" in names else None
    return Checkpoint(
        encoder_spec=EncoderSpec(**meta["encoder_spec"]),
        encoder_state=enc,
        provenance=meta["provenance"],
        val_loss=meta["val_loss"],
        projection_state=proj,
        head_state=head,
        val_history=meta.get("val_history", []),
        config_hash=meta.get("config_hash", ""),
        meta=meta.get("meta", {}),
    )
