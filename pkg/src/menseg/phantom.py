"""Synthetic multi-modal subjects with known ground truth.

Each lesion is a set of concentric ellipsoids: a core (label 1), an
enhancing rim around it (label 3) and an outer shell (label 2). Lesions do
not overlap and sit in an ellipsoidal "brain" foreground; a lesion reaching
past the brain outline extends it. Tissue intensities per channel:

=========  ====  =====  ====  =====
tissue     T1    T1ce   T2    FLAIR
=========  ====  =====  ====  =====
brain      0.60  0.60   0.50  0.50
core (1)   0.35  0.30   0.85  0.60
shell (2)  0.50  0.55   0.90  1.00
rim (3)    0.55  1.00   0.60  0.70
=========  ====  =====  ====  =====

Outside the brain every channel is exactly 0. Gaussian noise is added to
brain voxels only. The volumes are deliberately easy; they exercise the
machinery, they do not model MRI physics.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, PlacementFailure
from .volume_io import LabelMask, MultiModalVolume, SpatialMeta, is_subject_dir, write_volume

# rows: brain, core, shell, rim; columns: T1, T1ce, T2, FLAIR
CONTRAST = np.array([
    [0.60, 0.60, 0.50, 0.50],
    [0.35, 0.30, 0.85, 0.60],
    [0.50, 0.55, 0.90, 1.00],
    [0.55, 1.00, 0.60, 0.70],
])
_TISSUE_ROW = {1: 1, 2: 2, 3: 3}

MAX_PLACEMENT_TRIES = 200


@dataclasses.dataclass(frozen=True)
class PhantomConfig:
    shape: Tuple[int, int, int] = (64, 64, 64)
    n_lesions: Tuple[int, int] = (1, 3)
    radii: Tuple[float, float] = (4.0, 10.0)
    rim_thickness: float = 2.0
    edema_thickness: float = 3.0
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "n_lesions", tuple(int(n) for n in self.n_lesions))
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        lo, hi = self.n_lesions
        if lo < 1 or hi < lo:
            raise ConfigError(f"n_lesions range must satisfy 1 <= low <= high, got {self.n_lesions}")
        if self.radii[0] <= 0 or self.radii[1] < self.radii[0]:
            raise ConfigError(f"invalid radii range {self.radii}")
        if self.radii[1] + self.rim_thickness + self.edema_thickness >= min(self.shape) / 2:
            raise ConfigError("largest lesion does not fit: radii max + rim + edema must be "
                              "below half the smallest dimension")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")

    @property
    def outer_margin(self) -> float:
        return self.rim_thickness + self.edema_thickness


def _ellipsoid_distance(grid, center, radii):
    """Normalized ellipsoidal radius; 1.0 on the surface."""
    return np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)))


def generate_phantom(cfg: PhantomConfig):
    """Return ``(MultiModalVolume, LabelMask)`` fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    shape = cfg.shape
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    center = (np.asarray(shape) - 1) / 2.0
    brain_radii = np.asarray(shape) / 2.0 - 1.0
    brain = _ellipsoid_distance(grid, center, brain_radii) <= 1.0

    labels = np.zeros(shape, dtype=np.uint8)
    occupied = np.zeros(shape, dtype=bool)
    n = int(rng.integers(cfg.n_lesions[0], cfg.n_lesions[1] + 1))
    margin = cfg.outer_margin
    for _ in range(n):
        for _attempt in range(MAX_PLACEMENT_TRIES):
            core = rng.uniform(cfg.radii[0], cfg.radii[1], size=3)
            outer = core + margin
            lo = np.ceil(outer)
            hi = np.asarray(shape) - 1 - np.ceil(outer)
            if np.any(hi < lo):
                continue
            c = rng.uniform(lo, hi)
            outer_mask = _ellipsoid_distance(grid, c, outer) <= 1.0
            # keep a gap to other lesions so they stay separate components
            grown = _ellipsoid_distance(grid, c, outer + 1.5) <= 1.0
            if np.any(grown & occupied):
                continue
            lesion = np.zeros(shape, dtype=np.uint8)
            lesion[outer_mask] = 2
            lesion[_ellipsoid_distance(grid, c, core + cfg.rim_thickness) <= 1.0] = 3
            lesion[_ellipsoid_distance(grid, c, core) <= 1.0] = 1
            labels = np.where(lesion > 0, lesion, labels)
            occupied |= outer_mask
            break
        else:
            raise PlacementFailure(f"could not place lesion without overlap after "
                                   f"{MAX_PLACEMENT_TRIES} tries")

    # lesions reaching past the brain outline extend the foreground
    brain |= labels > 0
    image = np.zeros((4,) + shape, dtype=np.float64)
    image[:, brain] = CONTRAST[0][:, None]
    for label, row in _TISSUE_ROW.items():
        image[:, labels == label] = CONTRAST[row][:, None]
    if cfg.noise_std > 0:
        noise = rng.normal(0.0, cfg.noise_std, size=image.shape)
        image += noise * brain[None]
    # noise must not push foreground voxels to exactly zero
    image[:, brain] = np.where(image[:, brain] == 0, 1e-6, image[:, brain])

    meta = SpatialMeta(original_shape=shape, affine=np.eye(4))
    return MultiModalVolume(image.astype(np.float32), meta), LabelMask(labels, meta)


def subject_id(index: int) -> str:
    return f"PHANTOM-{index:05d}"


def generate_cohort(n: int, base_seed: int, cfg: PhantomConfig, out_dir) -> List[Path]:
    """Write ``n`` phantoms (seeds ``base_seed + i``) in the subject layout."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dirs, manifest = [], []
    for i in range(n):
        seed = base_seed + i
        vol, mask = generate_phantom(dataclasses.replace(cfg, seed=seed))
        sid = subject_id(i)
        write_volume(vol, out_dir / sid, sid, mask)
        dirs.append(out_dir / sid)
        manifest.append({"id": sid, "seed": seed})
    (out_dir / "manifest.json").write_text(json.dumps({"subjects": manifest}, indent=2) + "\n")
    return dirs


def list_subjects(cohort_dir) -> List[Path]:
    cohort_dir = Path(cohort_dir)
    return sorted(p for p in cohort_dir.iterdir() if is_subject_dir(p))
