"""Intensity normalization, one-hot coding and training-time augmentation."""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import ConfigError, DegenerateChannel, NonFinite
from .volume_io import (
    N_LABELS,
    LabelMask,
    MultiModalVolume,
    SpatialMeta,
    center_crop,
    identity_meta,
)


@dataclasses.dataclass(frozen=True)
class OneHotMask:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[0] != N_LABELS:
            raise ValueError(f"expected (4, D, H, W) one-hot array, got {data.shape}")
        if not np.array_equal(data.sum(axis=0), np.ones(data.shape[1:], dtype=data.dtype)):
            raise ValueError("one-hot channels must sum to exactly 1 at every voxel")
        object.__setattr__(self, "data", data)


@dataclasses.dataclass(frozen=True)
class AugmentPolicy:
    """Random augmentation settings.

    All magnitudes are chosen defaults; only the transform family is fixed.
    Rotation is in radians (0.26 is about 15 degrees) and noise is in units of
    the z-scored intensities.
    """

    enabled: bool = True
    scale_range: Tuple[float, float] = (0.9, 1.1)
    rotate_range_rad: float = 0.26
    noise_std: float = 0.01
    blur_sigma_range: Tuple[float, float] = (0.5, 1.0)
    intensity_scale_range: Tuple[float, float] = (0.9, 1.1)
    per_transform_prob: float = 0.3
    active_until_epoch: int = 10

    def __post_init__(self):
        for name in ("scale_range", "blur_sigma_range", "intensity_scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: low {lo} exceeds high {hi}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not 0.0 <= self.per_transform_prob <= 1.0:
            raise ConfigError(f"per_transform_prob must be in [0, 1], got {self.per_transform_prob}")
        if self.rotate_range_rad < 0 or self.noise_std < 0:
            raise ConfigError("rotate_range_rad and noise_std must be non-negative")
        if self.scale_range[0] <= 0:
            raise ConfigError("scale_range must be positive")


def zscore_normalize(vol: MultiModalVolume) -> MultiModalVolume:
    """Standardize each channel over its nonzero voxels; zeros stay zero."""
    out = np.zeros(vol.data.shape, dtype=np.float32)
    for c, channel in enumerate(vol.data):
        fg = channel != 0
        values = channel[fg].astype(np.float64)
        if values.size < 2 or np.ptp(values) == 0:
            raise DegenerateChannel(f"channel {c} has a constant or empty nonzero region")
        mean = values.mean()
        std = values.std()
        out[c][fg] = ((values - mean) / std).astype(np.float32)
    return MultiModalVolume(out, vol.meta)


def one_hot_encode(mask: LabelMask) -> OneHotMask:
    labels = mask.data if isinstance(mask, LabelMask) else np.asarray(mask)
    data = (labels[None] == np.arange(N_LABELS).reshape(-1, 1, 1, 1)).astype(np.uint8)
    return OneHotMask(data)


def one_hot_decode(probs, meta: Optional[SpatialMeta] = None) -> LabelMask:
    """Per-voxel argmax; ties go to the lowest channel index."""
    probs = np.asarray(probs.data if isinstance(probs, OneHotMask) else probs)
    if probs.ndim != 4 or probs.shape[0] != N_LABELS:
        raise ValueError(f"expected (4, D, H, W) array, got {probs.shape}")
    if not np.isfinite(probs).all():
        raise NonFinite("class scores contain NaN or Inf")
    # np.argmax returns the first maximal index
    labels = np.argmax(probs, axis=0).astype(np.uint8)
    return LabelMask(labels, meta if meta is not None else identity_meta(labels.shape))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _affine_matrix(rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    scales = rng.uniform(*policy.scale_range, size=3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis) or 1.0
    angle = rng.uniform(-policy.rotate_range_rad, policy.rotate_range_rad)
    rot = Rotation.from_rotvec(axis * angle).as_matrix()
    return rot @ np.diag(scales)


def _warp(array: np.ndarray, matrix: np.ndarray, order: int) -> np.ndarray:
    # output voxel o samples input at M^-1 (o - c) + c, rotating about the center
    center = (np.asarray(array.shape) - 1) / 2.0
    inv = np.linalg.inv(matrix)
    offset = center - inv @ center
    return ndimage.affine_transform(array, inv, offset=offset, order=order,
                                    mode="constant", cval=0.0)


def augment(sample: Tuple[MultiModalVolume, OneHotMask], policy: AugmentPolicy,
            epoch: int, rng_seed) -> Tuple[MultiModalVolume, OneHotMask]:
    """Apply the random augmentation policy to one training sample.

    Identity when the policy is disabled or ``epoch >= active_until_epoch``.
    Otherwise each transform fires independently with ``per_transform_prob``.
    The spatial transform warps image and mask together (mask by nearest
    neighbour on the label map); intensity transforms touch the image only.
    """
    vol, onehot = sample
    if not policy.enabled or epoch >= policy.active_until_epoch:
        return vol, onehot

    rng = np.random.default_rng(rng_seed)
    # draw every decision up front so the stream layout never depends on outcomes
    fire = rng.random(4) < policy.per_transform_prob
    image = vol.data.astype(np.float32, copy=True)
    labels = np.argmax(onehot.data, axis=0)

    if fire[0]:
        matrix = _affine_matrix(rng, policy)
        image = np.stack([_warp(ch, matrix, order=1) for ch in image]).astype(np.float32)
        labels = _warp(labels.astype(np.float64), matrix, order=0).round().astype(np.int64)
    if fire[1]:
        image = image + rng.normal(0.0, policy.noise_std, size=image.shape).astype(np.float32)
    if fire[2]:
        sigma = rng.uniform(*policy.blur_sigma_range)
        image = np.stack([ndimage.gaussian_filter(ch, sigma) for ch in image]).astype(np.float32)
    if fire[3]:
        factors = rng.uniform(*policy.intensity_scale_range, size=(image.shape[0], 1, 1, 1))
        image = (image * factors).astype(np.float32)

    new_vol = MultiModalVolume(image, vol.meta)
    new_mask = one_hot_encode(np.clip(labels, 0, N_LABELS - 1).astype(np.uint8))
    return new_vol, new_mask


def preprocess_subject(vol: MultiModalVolume, mask: Optional[LabelMask],
                       crop: Optional[Sequence[int]] = None, normalize_first: bool = False):
    """Crop and z-score a subject. Cropping happens before normalization by default."""
    if normalize_first:
        vol = zscore_normalize(vol)
    if crop is not None:
        vol = center_crop(vol, crop)
        mask = center_crop(mask, crop) if mask is not None else None
    if not normalize_first:
        vol = zscore_normalize(vol)
    return vol, mask
