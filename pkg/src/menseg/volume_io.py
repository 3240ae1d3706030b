"""Loading, cropping, padding and writing of multi-modal volumes and masks."""

from __future__ import annotations

import dataclasses
import enum
import os
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np

from .errors import (
    BadLabel,
    CroppedMaskNotRestored,
    MissingMeta,
    ShapeMismatch,
    TargetTooLarge,
    UnreadableFile,
)

Shape3 = Tuple[int, int, int]
PathLike = Union[str, os.PathLike]

AFFINE_ATOL = 1e-4
N_LABELS = 4

# NIfTI extension code 6 is "comment"; used to carry the float64 affine.
_AFFINE_ECODE = 6
_AFFINE_TAG = b"menseg-affine-f64:"


class Modality(enum.IntEnum):
    T1 = 0
    T1CE = 1
    T2 = 2
    FLAIR = 3


CHANNEL_ORDER = (Modality.T1, Modality.T1CE, Modality.T2, Modality.FLAIR)

# File suffixes of the challenge subject layout, in channel order.
MODALITY_SUFFIXES = ("t1n", "t1c", "t2w", "t2f")
MASK_SUFFIX = "seg"


@dataclasses.dataclass(frozen=True)
class SpatialMeta:
    original_shape: Shape3
    affine: np.ndarray
    crop_offset: Optional[Shape3] = None

    def __post_init__(self):
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {affine.shape}")
        if not abs(np.linalg.det(affine)) > 0:
            raise ValueError("affine is singular")
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "original_shape", tuple(int(s) for s in self.original_shape))
        if self.crop_offset is not None:
            object.__setattr__(self, "crop_offset", tuple(int(o) for o in self.crop_offset))

    @property
    def spacing(self) -> Tuple[float, float, float]:
        """Voxel size in mm, taken from the affine column norms."""
        return tuple(float(v) for v in np.linalg.norm(self.affine[:3, :3], axis=0))

    def replace(self, **changes) -> "SpatialMeta":
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True)
class MultiModalVolume:
    data: np.ndarray
    meta: SpatialMeta

    channel_order = CHANNEL_ORDER

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[0] != len(CHANNEL_ORDER):
            raise ShapeMismatch(f"expected (4, D, H, W) volume, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape[1:])


@dataclasses.dataclass(frozen=True)
class LabelMask:
    data: np.ndarray
    meta: SpatialMeta

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeMismatch(f"expected (D, H, W) mask, got {data.shape}")
        _check_labels(data)
        object.__setattr__(self, "data", data.astype(np.uint8, copy=False))

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape)


@dataclasses.dataclass(frozen=True)
class RegionMasks:
    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def __iter__(self):
        # ET, TC, WT order matches the report columns
        yield "et", self.et
        yield "tc", self.tc
        yield "wt", self.wt


def _check_labels(data: np.ndarray) -> None:
    if data.dtype.kind == "f" and not np.array_equal(data, np.round(data)):
        raise BadLabel("mask contains non-integer values")
    bad = np.setdiff1d(np.unique(data), np.arange(N_LABELS))
    if bad.size:
        raise BadLabel(f"mask contains labels outside 0..3: {bad.tolist()}")


def identity_meta(shape: Sequence[int]) -> SpatialMeta:
    return SpatialMeta(original_shape=tuple(shape), affine=np.eye(4))


# ---------------------------------------------------------------------------
# NIfTI access
# ---------------------------------------------------------------------------

def read_nifti(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(data, affine)`` for a NIfTI file.

    The affine is the exact float64 matrix stored by :func:`write_nifti` when
    present, else the header sform/qform.
    """
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such file: {path}")
    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj)
        affine = np.asarray(img.affine, dtype=np.float64)
        exact = _stored_affine(img)
    except Exception as exc:  # nibabel raises a zoo of types
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    if exact is not None and np.array_equal(exact.astype(np.float32), affine.astype(np.float32)):
        affine = exact
    return data, affine


def _stored_affine(img) -> Optional[np.ndarray]:
    for ext in img.header.extensions:
        if ext.get_code() != _AFFINE_ECODE:
            continue
        content = ext.get_content()
        if isinstance(content, (bytes, bytearray)) and content.startswith(_AFFINE_TAG):
            raw = bytes(content[len(_AFFINE_TAG):len(_AFFINE_TAG) + 128])
            if len(raw) == 128:
                return np.frombuffer(raw, dtype="<f8").reshape(4, 4).copy()
    return None


def write_nifti(data: np.ndarray, affine: np.ndarray, path: PathLike) -> Path:
    path = Path(path)
    affine = np.asarray(affine, dtype=np.float64)
    img = nib.Nifti1Image(np.asarray(data), affine)
    img.header.set_data_dtype(np.asarray(data).dtype)
    payload = _AFFINE_TAG + affine.astype("<f8").tobytes()
    img.header.extensions.append(nib.nifti1.Nifti1Extension(_AFFINE_ECODE, payload))
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))
    return path


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def subject_paths(subject_dir: PathLike, subject_id: Optional[str] = None, ext: str = ".nii.gz"):
    """Return ``(modality_paths, mask_path_or_None)`` for a subject directory."""
    subject_dir = Path(subject_dir)
    sid = subject_id or subject_dir.name
    modality_paths = []
    for suffix in MODALITY_SUFFIXES:
        candidates = [subject_dir / f"{sid}-{suffix}{e}" for e in (ext, ".nii.gz", ".nii")]
        found = next((c for c in candidates if c.is_file()), candidates[0])
        modality_paths.append(found)
    mask_candidates = [subject_dir / f"{sid}-{MASK_SUFFIX}{e}" for e in (ext, ".nii.gz", ".nii")]
    mask_path = next((c for c in mask_candidates if c.is_file()), None)
    return modality_paths, mask_path


def is_subject_dir(path: PathLike) -> bool:
    """True when ``path`` holds a ``{name}-t1n`` volume."""
    path = Path(path)
    return path.is_dir() and any((path / f"{path.name}-{MODALITY_SUFFIXES[0]}{e}").is_file()
                                 for e in (".nii.gz", ".nii"))


def load_subject(modality_paths: Sequence[PathLike], mask_path: Optional[PathLike] = None):
    """Load four modalities (T1, T1ce, T2, FLAIR order) and an optional mask."""
    if len(modality_paths) != 4:
        raise ValueError(f"need 4 modality paths, got {len(modality_paths)}")
    arrays = []
    ref_affine = None
    ref_shape = None
    for p in modality_paths:
        data, affine = read_nifti(p)
        if data.ndim != 3:
            raise ShapeMismatch(f"{p}: expected a 3D volume, got shape {data.shape}")
        if ref_shape is None:
            ref_shape, ref_affine = data.shape, affine
        elif data.shape != ref_shape:
            raise ShapeMismatch(f"{p}: shape {data.shape} differs from {ref_shape}")
        elif not np.allclose(affine, ref_affine, rtol=0, atol=AFFINE_ATOL):
            raise ShapeMismatch(f"{p}: affine differs from first modality")
        arrays.append(np.asarray(data, dtype=np.float32))

    stacked = np.stack(arrays)
    if not np.isfinite(stacked).all():
        raise UnreadableFile("volume contains NaN or Inf")
    meta = SpatialMeta(original_shape=ref_shape, affine=ref_affine)
    vol = MultiModalVolume(stacked, meta)

    mask = None
    if mask_path is not None:
        mdata, maffine = read_nifti(mask_path)
        if mdata.shape != ref_shape:
            raise ShapeMismatch(f"{mask_path}: mask shape {mdata.shape} differs from {ref_shape}")
        if not np.allclose(maffine, ref_affine, rtol=0, atol=AFFINE_ATOL):
            raise ShapeMismatch(f"{mask_path}: mask affine differs from modalities")
        _check_labels(mdata)
        mask = LabelMask(np.asarray(mdata).astype(np.uint8), meta)
    return vol, mask


def load_subject_dir(subject_dir: PathLike):
    modality_paths, mask_path = subject_paths(subject_dir)
    return load_subject(modality_paths, mask_path)


def load_mask(path: PathLike) -> LabelMask:
    data, affine = read_nifti(path)
    if data.ndim != 3:
        raise ShapeMismatch(f"{path}: expected a 3D mask, got shape {data.shape}")
    _check_labels(data)
    return LabelMask(data.astype(np.uint8), SpatialMeta(data.shape, affine))


def crop_offset(shape: Sequence[int], target: Sequence[int]) -> Shape3:
    return tuple((int(s) - int(t)) // 2 for s, t in zip(shape, target))


def center_crop(vol, target: Sequence[int]):
    """Crop a volume or mask to ``target`` around its center.

    Offsets are ``floor((orig - target) / 2)`` per axis and are recorded in
    the returned meta so :func:`pad_to_original` can undo the crop.
    """
    target = tuple(int(t) for t in target)
    shape = vol.shape
    if len(target) != 3:
        raise ValueError(f"target must have 3 components, got {target}")
    if any(t > s for t, s in zip(target, shape)) or any(t < 1 for t in target):
        raise TargetTooLarge(f"crop target {target} does not fit in {shape}")
    off = crop_offset(shape, target)
    window = tuple(slice(o, o + t) for o, t in zip(off, target))

    # nested crops accumulate offsets relative to the original grid
    prev = vol.meta.crop_offset or (0, 0, 0)
    meta = vol.meta.replace(crop_offset=tuple(p + o for p, o in zip(prev, off)))
    if isinstance(vol, MultiModalVolume):
        return MultiModalVolume(vol.data[(slice(None),) + window].copy(), meta)
    return LabelMask(vol.data[window].copy(), meta)


def pad_to_original(mask: LabelMask) -> LabelMask:
    """Zero-pad a cropped mask back to its original grid."""
    meta = mask.meta
    if meta.crop_offset is None or meta.original_shape is None:
        raise MissingMeta("mask carries no crop offset; nothing to restore")
    out = np.zeros(meta.original_shape, dtype=np.uint8)
    window = tuple(slice(o, o + s) for o, s in zip(meta.crop_offset, mask.shape))
    out[window] = mask.data
    return LabelMask(out, meta.replace(crop_offset=None))


def aggregate_regions(mask: LabelMask) -> RegionMasks:
    labels = mask.data if isinstance(mask, LabelMask) else np.asarray(mask)
    return RegionMasks(
        wt=np.isin(labels, (1, 2, 3)),
        tc=np.isin(labels, (1, 3)),
        et=labels == 3,
    )


def write_mask(mask: LabelMask, path: PathLike) -> Path:
    """Write a restored (uncropped) mask with its source affine."""
    if mask.meta.crop_offset is not None or mask.shape != tuple(mask.meta.original_shape):
        raise CroppedMaskNotRestored(
            f"mask of shape {mask.shape} is still cropped; call pad_to_original first"
        )
    try:
        return write_nifti(mask.data.astype(np.uint8), mask.meta.affine, path)
    except OSError as exc:
        raise UnreadableFile(f"cannot write {path}: {exc}") from exc


def write_volume(vol: MultiModalVolume, subject_dir: PathLike, subject_id: str,
                 mask: Optional[LabelMask] = None, ext: str = ".nii.gz"):
    """Write a subject in the challenge layout: one file per modality (+ seg)."""
    subject_dir = Path(subject_dir)
    for channel, suffix in enumerate(MODALITY_SUFFIXES):
        write_nifti(vol.data[channel].astype(np.float32), vol.meta.affine,
                    subject_dir / f"{subject_id}-{suffix}{ext}")
    if mask is not None:
        write_mask(mask, subject_dir / f"{subject_id}-{MASK_SUFFIX}{ext}")
    return subject_paths(subject_dir, subject_id, ext)
