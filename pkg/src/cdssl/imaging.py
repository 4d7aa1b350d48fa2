"""Synthetic head phantoms, volume standardization and slice extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

TARGET_SHAPE = (224, 224)
SLICE_OFFSETS = {"center": (0,), "five": (-10, -5, 0, 5, 10)}
_AXIS_OF = {"R": 0, "L": 0, "A": 1, "P": 1, "S": 2, "I": 2}

# Codes stored in the binary container; index 0 is the canonical orientation.
ORIENTATIONS = ("RAS", "LPS", "LAS", "RPS", "RAI", "ASR", "SRA", "OTHER")
RAS_PLUS = "RAS"


class ImagingError(ValueError):
    pass


@dataclass
class VolumeGrid:
    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: str = RAS_PLUS

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ImagingError(f"volume must be 3D with all dims >= 1, got {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ImagingError(f"spacing must be 3 positive values, got {self.spacing_mm}")
        if self.orientation not in ORIENTATIONS:
            raise ImagingError(f"unknown orientation {self.orientation!r}")


@dataclass
class SliceImage:
    data: np.ndarray
    source: tuple[str, int] = ("", -1)

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[0]


@dataclass
class SliceStack:
    slices: list[SliceImage]
    mode: str
    indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.slices) != len(SLICE_OFFSETS[self.mode]):
            raise ImagingError(f"mode {self.mode} expects {len(SLICE_OFFSETS[self.mode])} slices")


# --------------------------------------------------------------------------
# synthetic phantoms


@dataclass
class PhantomParams:
    """Generator settings for one head phantom.

    ``signal_coef`` is the slope linking cavity radius (mm) to the month-12
    score; ``label_noise`` is the sd of additive Gaussian noise on that score.
    """

    shape: tuple[int, int, int] = (48, 48, 36)
    spacing_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    head_radius_mm: tuple[float, float] = (34.0, 42.0)
    cavity_radius_mm: tuple[float, float] = (4.0, 16.0)
    structure_scale_mm: float = 6.0
    texture_amplitude: float = 0.15
    image_noise: float = 0.03
    signal_coef: float = 0.5
    label_offset: float = 0.0
    label_noise: float = 1.0
    orientations: tuple[str, ...] = (RAS_PLUS,)


def _axis_perm(src: str, dst: str) -> list[int]:
    return [next(i for i, c in enumerate(src) if _AXIS_OF[c] == _AXIS_OF[d]) for d in dst]


def _reorient(data: np.ndarray, src: str, dst: str) -> np.ndarray:
    """Transpose/flip axes so that a volume labelled ``src`` reads as ``dst``."""
    perm = _axis_perm(src, dst)
    out = np.transpose(data, perm)
    for ax, d in enumerate(dst):
        if src[perm[ax]] != d:
            out = np.flip(out, axis=ax)
    return np.ascontiguousarray(out)


def synthesize_volume(params: PhantomParams, seed: int) -> tuple[VolumeGrid, float, float]:
    """Draw one head phantom.

    Returns ``(volume, cdr_sb_month12, rho)`` where ``rho`` is the planted
    cavity radius in mm and the label is ``clamp(a * rho + offset + noise, 0, 18)``.
    """
    if min(params.shape) < 1:
        raise ImagingError(f"non-positive phantom shape {params.shape}")
    rng = np.random.default_rng(seed)
    rho = float(rng.uniform(*params.cavity_radius_mm))
    head_r = rng.uniform(*params.head_radius_mm, size=3) * np.array([0.95, 1.1, 0.9])
    shift_mm = rng.normal(0.0, 3.0, size=3)
    orient = params.orientations[int(rng.integers(len(params.orientations)))]
    brightness = rng.uniform(0.7, 1.3)

    sp = np.asarray(params.spacing_mm)
    shape = np.asarray(params.shape)
    axes = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(shape, sp)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    x, y, z = x - shift_mm[0], y - shift_mm[1], z - shift_mm[2]

    head = (x / head_r[0]) ** 2 + (y / head_r[1]) ** 2 + (z / head_r[2]) ** 2
    tissue = 1.0 / (1.0 + np.exp((np.sqrt(head) - 1.0) * 25.0))
    rim = np.exp(-(((np.sqrt(head) - 0.95) / 0.04) ** 2))

    # smooth tissue texture at the configured structure scale
    noise = rng.standard_normal(params.shape)
    sigma_vox = params.structure_scale_mm / sp
    texture = ndimage.gaussian_filter(noise, sigma_vox, mode="wrap")
    texture /= texture.std() + 1e-12

    # paired lateral cavities, elongated along the superior axis
    cav = np.zeros(params.shape)
    for side in (-1.0, 1.0):
        cx = side * (0.45 * rho + 1.5)
        d = ((x - cx) / (0.6 * rho)) ** 2 + (y / rho) ** 2 + (z / (1.2 * rho + 12.0)) ** 2
        cav = np.maximum(cav, 1.0 / (1.0 + np.exp((np.sqrt(d) - 1.0) * 12.0)))

    vol = brightness * (
        tissue * (0.6 + params.texture_amplitude * texture) * (1.0 - 0.85 * cav) + 0.4 * rim
    )
    vol += params.image_noise * rng.standard_normal(params.shape)
    vol = np.clip(vol, 0.0, None) + 0.02
    vol = _reorient(vol, RAS_PLUS, orient)
    spacing = tuple(float(sp[i]) for i in _axis_perm(RAS_PLUS, orient))

    label = params.signal_coef * rho + params.label_offset + params.label_noise * rng.standard_normal()
    label = float(np.clip(label, 0.0, 18.0))
    return VolumeGrid(vol.astype(np.float32), spacing, orient), label, rho


# --------------------------------------------------------------------------
# standardization chain


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def resample_isotropic(v: VolumeGrid, target_mm: float = 1.0) -> VolumeGrid:
    """Trilinear resampling to ``target_mm`` isotropic voxels (centre-aligned grid)."""
    sp = np.asarray(v.spacing_mm)
    out_shape = [max(1, _round_half_up(n * s / target_mm)) for n, s in zip(v.data.shape, sp)]
    if list(v.data.shape) == out_shape and np.all(sp == target_mm):
        return VolumeGrid(v.data.astype(np.float64, copy=True), (target_mm,) * 3, v.orientation)
    coords = [
        (np.arange(m) + 0.5) * target_mm / s - 0.5 for m, s in zip(out_shape, sp)
    ]
    grid = np.meshgrid(*coords, indexing="ij")
    out = ndimage.map_coordinates(
        v.data.astype(np.float64), grid, order=1, mode="nearest", prefilter=False
    )
    return VolumeGrid(out, (target_mm,) * 3, v.orientation)


def to_canonical(v: VolumeGrid) -> VolumeGrid:
    if v.orientation == RAS_PLUS:
        return v
    if v.orientation == "OTHER":
        raise ImagingError("cannot reorient a volume with unknown (OTHER) axis codes")
    data = _reorient(v.data, v.orientation, RAS_PLUS)
    spacing = tuple(v.spacing_mm[i] for i in _axis_perm(v.orientation, RAS_PLUS))
    return VolumeGrid(data, spacing, RAS_PLUS)


def compute_brain_mask(v: VolumeGrid) -> np.ndarray:
    """Largest connected component of ``{voxel > Otsu threshold}`` as a 0/1 array."""
    data = np.asarray(v.data, dtype=np.float64)
    if data.max() == data.min():
        raise ImagingError("empty foreground: constant volume")
    thr = threshold_otsu(data)
    fg = data > thr
    labels, n = ndimage.label(fg)
    if n == 0:
        raise ImagingError("empty foreground above Otsu threshold")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return (labels == int(np.argmax(sizes))).astype(np.uint8)


def preprocess_volume(v: VolumeGrid, return_mask: bool = False):
    """Resample to 1 mm, reorient to RAS+, rescale to [0, 1], z-score within the brain mask."""
    v = to_canonical(resample_isotropic(v))
    data = np.asarray(v.data, dtype=np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi - lo <= 0.0:
        raise ImagingError("degenerate intensity range")
    data = (data - lo) / (hi - lo)
    mask = compute_brain_mask(VolumeGrid(data, v.spacing_mm, v.orientation))
    inside = data[mask.astype(bool)]
    mu = inside.mean()
    sd = inside.std()
    if sd <= 0.0:
        raise ImagingError("degenerate intensity range inside brain mask")
    data = (data - mu) / sd
    out = VolumeGrid(data, (1.0, 1.0, 1.0), RAS_PLUS)
    return (out, mask) if return_mask else out


# --------------------------------------------------------------------------
# slicing


def crop_or_pad(img: np.ndarray, target: tuple[int, int] = TARGET_SHAPE) -> np.ndarray:
    """Centre crop or zero-pad each axis so that input index ``n // 2`` lands on ``target // 2``."""
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ImagingError(f"expected a nonempty 2D array, got shape {img.shape}")
    out = np.zeros(target, dtype=img.dtype)
    src, dst = [], []
    for n, t in zip(img.shape, target):
        offset = t // 2 - n // 2
        s0, d0 = max(0, -offset), max(0, offset)
        length = min(n - s0, t - d0)
        src.append(slice(s0, s0 + length))
        dst.append(slice(d0, d0 + length))
    out[tuple(dst)] = img[tuple(src)]
    return out


def slice_indices(depth: int, mode: str) -> list[int]:
    if mode not in SLICE_OFFSETS:
        raise ImagingError(f"unknown slicing mode {mode!r}")
    if mode == "five" and depth < 21:
        raise ImagingError(f"five-slice mode needs axial depth >= 21, got {depth}")
    c = depth // 2
    return [c + o for o in SLICE_OFFSETS[mode]]


def extract_slices(v: VolumeGrid, mode: str, subject_id: str = "") -> SliceStack:
    """Axial slices (last RAS axis) around the centre, standardized to 224 x 224."""
    idx = slice_indices(v.data.shape[2], mode)
    slices = [
        SliceImage(crop_or_pad(np.asarray(v.data[:, :, k], dtype=np.float32)), (subject_id, k))
        for k in idx
    ]
    return SliceStack(slices, mode, idx)


# --------------------------------------------------------------------------
# binary container:  magic, 3 x uint32 dims, 3 x float64 spacing, uint8 orientation, float32 voxels

_MAGIC = b"VOLG"
_HEADER = struct.Struct("<4s3I3dB")


def save_volume(v: VolumeGrid, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(_MAGIC, *v.data.shape, *v.spacing_mm, ORIENTATIONS.index(v.orientation))
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes(order="C"))


def load_volume(path: str | Path) -> VolumeGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ImagingError(f"{path}: truncated header")
    magic, d0, d1, d2, s0, s1, s2, code = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ImagingError(f"{path}: not a volume container")
    n = d0 * d1 * d2
    body = raw[_HEADER.size:]
    if len(body) != 4 * n:
        raise ImagingError(f"{path}: expected {n} voxels, found {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4").reshape(d0, d1, d2).astype(np.float32)
    return VolumeGrid(data, (s0, s1, s2), ORIENTATIONS[code])


def save_heatmap(arr: np.ndarray, path: str | Path) -> None:
    """2D float32 map in the volume container (depth 1)."""
    save_volume(VolumeGrid(np.asarray(arr, dtype=np.float32)[:, :, None]), path)


def slice_to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round(255.0 * (img - lo) / (hi - lo)).astype(np.uint8)


def export_slice_png(img: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(slice_to_uint8(img), mode="L").save(path)
