"""Lesion-wise Dice and HD95 per tumor region, with cohort mean/median tables.

Conventions (all configurable through :class:`MetricConfig`): 26-connected
lesions, components under 50 voxels dropped from both masks, each ground
truth lesion dilated 3 times to collect overlapping predicted lesions,
unmatched lesions scoring Dice 0 and HD95 374.
"""

from __future__ import annotations

import csv
import dataclasses
import io
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigError, EmptySurface, GridMismatch
from .volume_io import LabelMask, aggregate_regions

REGIONS = ("et", "tc", "wt")
COLUMNS = ("subject", "dice_et", "dice_tc", "dice_wt", "hd95_et", "hd95_tc", "hd95_wt")

_STRUCTURES = {6: 1, 18: 2, 26: 3}


@dataclasses.dataclass(frozen=True)
class MetricConfig:
    connectivity: int = 26
    dilation_iters: int = 3
    hd95_penalty: float = 374.0
    min_lesion_volume: int = 50

    def __post_init__(self):
        if self.connectivity not in _STRUCTURES:
            raise ConfigError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.dilation_iters < 0 or self.min_lesion_volume < 0:
            raise ConfigError("dilation_iters and min_lesion_volume must be non-negative")


def structure(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(3, _STRUCTURES[connectivity])


@dataclasses.dataclass(frozen=True)
class LesionField:
    labels: np.ndarray
    n_lesions: int
    connectivity: int = 26

    def lesion(self, k: int) -> np.ndarray:
        return self.labels == k

    def sizes(self) -> np.ndarray:
        """Voxel count per lesion id, index 0 unused."""
        return np.bincount(self.labels.ravel(), minlength=self.n_lesions + 1)


@dataclasses.dataclass
class Matching:
    assignments: Dict[int, List[int]]
    false_positive_ids: List[int]
    false_negative_ids: List[int]


@dataclasses.dataclass
class LesionScore:
    region: str
    matched_pairs: List[Tuple[int, Tuple[int, ...], float, float]]
    false_positive_ids: List[int]
    false_negative_ids: List[int]
    lesion_wise_dice: float
    lesion_wise_hd95: float


def connected_components(binary: np.ndarray, connectivity: int = 26) -> LesionField:
    """Label connected lesions; ids follow the C-order position of each lesion's first voxel."""
    binary = np.asarray(binary, dtype=bool)
    labels, n = ndimage.label(binary, structure=structure(connectivity))
    if n:
        flat = labels.ravel()
        first = np.flatnonzero(flat)
        # first occurrence of each id in scan order
        ids, idx = np.unique(flat[first], return_index=True)
        order = ids[np.argsort(idx)]
        remap = np.zeros(n + 1, dtype=np.int32)
        remap[order] = np.arange(1, n + 1, dtype=np.int32)
        labels = remap[labels]
    return LesionField(labels.astype(np.int32), int(n), connectivity)


def drop_small(field: LesionField, min_volume: int) -> LesionField:
    """Remove lesions with fewer than ``min_volume`` voxels and renumber the rest."""
    if min_volume <= 0 or field.n_lesions == 0:
        return field
    keep = field.sizes() >= min_volume
    keep[0] = False
    new_ids = np.zeros(field.n_lesions + 1, dtype=np.int32)
    new_ids[keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
    return LesionField(new_ids[field.labels], int(keep.sum()), field.connectivity)


def match_lesions(gt: LesionField, pred: LesionField, dilation_iters: int = 3) -> Matching:
    """Assign predicted lesions to dilated ground-truth lesions.

    A predicted lesion overlapping several dilated ground-truth lesions goes
    to the one with the largest dilated overlap. Ties fall to the largest raw
    (undilated) overlap, then to the lowest id, so identical masks always
    match one to one.
    """
    if gt.labels.shape != pred.labels.shape:
        raise GridMismatch(f"grids differ: {gt.labels.shape} vs {pred.labels.shape}")
    overlap = np.zeros((gt.n_lesions + 1, pred.n_lesions + 1), dtype=np.int64)
    raw = np.zeros_like(overlap)
    full = structure(26)
    for k in range(1, gt.n_lesions + 1):
        lesion = gt.lesion(k)
        region = lesion
        if dilation_iters:
            region = ndimage.binary_dilation(lesion, structure=full, iterations=dilation_iters)
        overlap[k] = np.bincount(pred.labels[region], minlength=pred.n_lesions + 1)
        raw[k] = np.bincount(pred.labels[lesion], minlength=pred.n_lesions + 1)
    overlap[:, 0] = 0
    # lexicographic key: dilated overlap first, raw overlap second
    key = overlap * (raw.max() + 1) + raw

    assignments: Dict[int, List[int]] = {k: [] for k in range(1, gt.n_lesions + 1)}
    false_pos = []
    for j in range(1, pred.n_lesions + 1):
        if overlap[:, j].max() == 0:
            false_pos.append(j)
        else:
            assignments[int(np.argmax(key[:, j]))].append(j)
    false_neg = [k for k, preds in assignments.items() if not preds]
    return Matching({k: v for k, v in assignments.items() if v}, false_pos, false_neg)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it (grid edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=structure(6), border_value=0)


def hd95(a_surface: np.ndarray, b_surface: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of the pooled symmetric nearest-neighbour distances (mm).

    Surfaces are ``(N, 3)`` voxel coordinate arrays.
    """
    a = np.asarray(a_surface, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b_surface, dtype=np.float64).reshape(-1, 3)
    if not len(a) or not len(b):
        raise EmptySurface("hd95 needs two non-empty surfaces")
    spacing = np.asarray(spacing, dtype=np.float64)
    a, b = a * spacing, b * spacing
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def _surface_points(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(boundary(mask))


def score_region(gt_region: np.ndarray, pred_region: np.ndarray, spacing=(1.0, 1.0, 1.0),
                 cfg: MetricConfig = MetricConfig(), region: str = "") -> LesionScore:
    """Lesion-wise Dice and HD95 for one binary region."""
    gt_region = np.asarray(gt_region, dtype=bool)
    pred_region = np.asarray(pred_region, dtype=bool)
    if gt_region.shape != pred_region.shape:
        raise GridMismatch(f"grids differ: {gt_region.shape} vs {pred_region.shape}")
    gt = drop_small(connected_components(gt_region, cfg.connectivity), cfg.min_lesion_volume)
    pred = drop_small(connected_components(pred_region, cfg.connectivity), cfg.min_lesion_volume)
    if gt.n_lesions == 0 and pred.n_lesions == 0:
        return LesionScore(region, [], [], [], 1.0, 0.0)

    matching = match_lesions(gt, pred, cfg.dilation_iters)
    pairs = []
    for k, pred_ids in sorted(matching.assignments.items()):
        g = gt.lesion(k)
        p = np.isin(pred.labels, pred_ids)
        dice = 2.0 * np.count_nonzero(g & p) / (np.count_nonzero(g) + np.count_nonzero(p))
        dist = hd95(_surface_points(g), _surface_points(p), spacing)
        pairs.append((k, tuple(pred_ids), float(dice), dist))

    n_unmatched = len(matching.false_positive_ids) + len(matching.false_negative_ids)
    n_terms = len(pairs) + n_unmatched
    dice = sum(p[2] for p in pairs) / n_terms
    dist = (sum(p[3] for p in pairs) + cfg.hd95_penalty * n_unmatched) / n_terms
    return LesionScore(region, pairs, matching.false_positive_ids, matching.false_negative_ids,
                       float(dice), float(dist))


def lesion_wise_dice(gt_region, pred_region, cfg: MetricConfig = MetricConfig()) -> float:
    return score_region(gt_region, pred_region, cfg=cfg).lesion_wise_dice


def lesion_wise_hd95(gt_region, pred_region, spacing=(1.0, 1.0, 1.0),
                     cfg: MetricConfig = MetricConfig()) -> float:
    return score_region(gt_region, pred_region, spacing, cfg).lesion_wise_hd95


def evaluate_subject(pred: LabelMask, gt: LabelMask, cfg: MetricConfig = MetricConfig()
                     ) -> Dict[str, LesionScore]:
    if pred.shape != gt.shape:
        raise GridMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    spacing = gt.meta.spacing
    gt_regions = dict(aggregate_regions(gt))
    pred_regions = dict(aggregate_regions(pred))
    return {r: score_region(gt_regions[r], pred_regions[r], spacing, cfg, region=r) for r in REGIONS}


@dataclasses.dataclass
class CohortReport:
    rows: List[dict]
    scores: List[Dict[str, LesionScore]]

    @property
    def metric_columns(self) -> Tuple[str, ...]:
        return COLUMNS[1:]

    def mean(self) -> dict:
        return {c: float(np.mean([r[c] for r in self.rows])) for c in self.metric_columns}

    def median(self) -> dict:
        return {c: float(np.median([r[c] for r in self.rows])) for c in self.metric_columns}

    def table(self) -> List[dict]:
        return self.rows + [dict(subject="mean", **self.mean()), dict(subject="median", **self.median())]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.table():
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        text = buf.getvalue()
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text


def evaluate_cohort(pairs: Sequence[Tuple[LabelMask, LabelMask]], subject_ids: Optional[Sequence[str]] = None,
                    cfg: MetricConfig = MetricConfig(), jobs: int = 1) -> CohortReport:
    """Score ``(prediction, ground truth)`` pairs; rows keep the input order."""
    if subject_ids is None:
        subject_ids = [f"{i:04d}" for i in range(len(pairs))]
    if len(subject_ids) != len(pairs):
        raise ValueError("one subject id per pair is required")
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            scores = list(pool.map(lambda pg: evaluate_subject(pg[0], pg[1], cfg), pairs))
    else:
        scores = [evaluate_subject(p, g, cfg) for p, g in pairs]
    rows = []
    for sid, s in zip(subject_ids, scores):
        row = {"subject": sid}
        row.update({f"dice_{r}": s[r].lesion_wise_dice for r in REGIONS})
        row.update({f"hd95_{r}": s[r].lesion_wise_hd95 for r in REGIONS})
        rows.append(row)
    return CohortReport(rows, scores)
