"""Stage functions shared by the CLI subcommands.

Output directory layout::

    <out>/configs/      effective configuration
    <out>/data/         generated phantoms and preprocessed arrays
    <out>/checkpoints/  one checkpoint and training log per model
    <out>/predictions/  one mask per subject, per model and for the ensemble
    <out>/reports/      lesion-wise tables
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig, derive_seed
from .ensemble import EnsembleInput, ensemble_predict, majority_vote, restore
from .errors import DataError, EmptyDataset
from .metrics import COLUMNS, CohortReport, evaluate_cohort
from .nets import NetworkSpec, attn_resunet_spec, ddunet_spec, segresnet_spec
from .phantom import generate_cohort
from .preprocess import preprocess_subject
from .train import TrainConfig, load_checkpoint, predict_subject, save_checkpoint, train_model
from .volume_io import (
    LabelMask,
    is_subject_dir,
    MultiModalVolume,
    SpatialMeta,
    load_mask,
    load_subject_dir,
    write_mask,
)

log = logging.getLogger(__name__)

Subject = Tuple[MultiModalVolume, Optional[LabelMask]]


def _map(fn, items, jobs: int):
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def subject_dirs(root) -> List[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    return sorted(p for p in root.iterdir() if is_subject_dir(p))


def save_preprocessed(vol: MultiModalVolume, mask: Optional[LabelMask], path) -> Path:
    meta = vol.meta
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "image": vol.data.astype(np.float32),
        "affine": meta.affine,
        "original_shape": np.asarray(meta.original_shape, dtype=np.int64),
        "crop_offset": np.asarray(meta.crop_offset if meta.crop_offset is not None else (-1, -1, -1),
                                  dtype=np.int64),
    }
    if mask is not None:
        arrays["mask"] = mask.data
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_preprocessed(path) -> Subject:
    with np.load(path) as npz:
        offset = tuple(int(o) for o in npz["crop_offset"])
        meta = SpatialMeta(tuple(int(s) for s in npz["original_shape"]), npz["affine"],
                           None if offset == (-1, -1, -1) else offset)
        vol = MultiModalVolume(npz["image"], meta)
        mask = LabelMask(npz["mask"], meta) if "mask" in npz else None
    return vol, mask


def preprocess_cohort(data_dir, out_dir, cfg: RunConfig) -> List[Path]:
    out_dir = Path(out_dir)
    written = []
    for sdir in subject_dirs(data_dir):
        vol, mask = load_subject_dir(sdir)
        vol, mask = preprocess_subject(vol, mask, cfg.preprocess.crop, cfg.preprocess.normalize_first)
        written.append(save_preprocessed(vol, mask, out_dir / f"{sdir.name}.npz"))
    if not written:
        raise EmptyDataset(f"no subjects found in {data_dir}")
    return written


def load_dataset(data_dir, cfg: RunConfig) -> Tuple[List[str], List[Subject]]:
    """Load preprocessed ``.npz`` files, or raw subject folders preprocessed on the fly."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    npz = sorted(data_dir.glob("*.npz"))
    if npz:
        return [p.stem for p in npz], [load_preprocessed(p) for p in npz]
    ids, subjects = [], []
    for sdir in subject_dirs(data_dir):
        vol, mask = load_subject_dir(sdir)
        subjects.append(preprocess_subject(vol, mask, cfg.preprocess.crop, cfg.preprocess.normalize_first))
        ids.append(sdir.name)
    if not subjects:
        raise EmptyDataset(f"no subjects found in {data_dir}")
    return ids, subjects


def load_ground_truth(gt_dir, subject_id: str) -> LabelMask:
    gt_dir = Path(gt_dir)
    for cand in (gt_dir / subject_id / f"{subject_id}-seg.nii.gz", gt_dir / f"{subject_id}-seg.nii.gz",
                 gt_dir / f"{subject_id}.nii.gz", gt_dir / subject_id / f"{subject_id}-seg.nii"):
        if cand.is_file():
            return load_mask(cand)
    raise DataError(f"no ground-truth mask for {subject_id} under {gt_dir}")


def mask_files(pred_dir) -> Dict[str, Path]:
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory {pred_dir} does not exist")
    return {p.name[: -len(".nii.gz")]: p for p in sorted(pred_dir.glob("*.nii.gz"))}


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def model_spec(kind: str, cfg: RunConfig, init_filters: Optional[int] = None) -> NetworkSpec:
    m = cfg.model
    filters = init_filters or m.init_filters
    if kind == "segresnet":
        spec = segresnet_spec(filters, 0.2 if m.dropout_p is None else m.dropout_p)
    elif kind == "attn_resunet":
        spec = attn_resunet_spec(filters, 0.2 if m.dropout_p is None else m.dropout_p, m.gated_skips)
    elif kind == "ddunet":
        spec = ddunet_spec(0.1 if m.dropout_p is None else m.dropout_p, filters)
    else:
        raise DataError(f"unknown model {kind!r}")
    return dataclasses.replace(spec, max_norm_groups=m.max_norm_groups, se_reduction=m.se_reduction,
                               gate_per_channel=m.gate_per_channel,
                               aux_heads=m.aux_heads and kind == "ddunet")


def train_config(spec: NetworkSpec, cfg: RunConfig, seed: int, epochs: Optional[int] = None,
                 learning_rate: Optional[float] = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        learning_rate=t.learning_rate if learning_rate is None else learning_rate,
        weight_decay=t.weight_decay, amsgrad=t.amsgrad, betas=t.betas, eps=t.eps,
        epochs=epochs or t.epochs, batch_size=t.batch_size, seed=seed,
        deterministic=t.deterministic, loss=cfg.loss, augment=cfg.augment,
        augment_models=t.augment_models, aux_loss_weight=t.aux_loss_weight, model=spec,
    )


def train_stage(kind: str, data_dir, out_dir, cfg: RunConfig, epochs: Optional[int] = None,
                init_filters: Optional[int] = None, learning_rate: Optional[float] = None) -> Path:
    ids, dataset = load_dataset(data_dir, cfg)
    if any(mask is None for _, mask in dataset):
        raise DataError("every training subject needs a ground-truth mask")
    spec = model_spec(kind, cfg, init_filters)
    tcfg = train_config(spec, cfg, derive_seed(cfg.seed, f"train:{kind}"), epochs,
                        learning_rate)
    log.info("training %s on %d subjects for %d epochs at lr %g", kind, len(dataset), tcfg.epochs,
             tcfg.learning_rate)
    net, train_log = train_model(tcfg, dataset)
    ckpt_dir = Path(out_dir) / "checkpoints"
    path = save_checkpoint(net, tcfg, train_log, ckpt_dir / f"{kind}.pt")
    train_log.write_jsonl(ckpt_dir / f"{kind}.trainlog.jsonl")
    return path


def predict_stage(checkpoint, data_dir, pred_dir, cfg: RunConfig) -> List[Path]:
    net = load_checkpoint(checkpoint)
    ids, dataset = load_dataset(data_dir, cfg)
    pred_dir = Path(pred_dir)

    def run(item):
        sid, (vol, _) = item
        return write_mask(restore(predict_subject(net, vol)), pred_dir / f"{sid}.nii.gz")

    return _map(run, list(zip(ids, dataset)), cfg.jobs)


def ensemble_masks(mask_paths: Sequence, reference: Optional[LabelMask], out_path,
                   reference_index: int = 0) -> Path:
    members = [load_mask(p) for p in mask_paths]
    if reference is not None:
        members = [LabelMask(m.data, reference.meta) if m.shape == reference.shape else m for m in members]
    fused = majority_vote(EnsembleInput(members, reference_index))
    return write_mask(fused, out_path)


def evaluate_stage(pred_dir, gt_dir, out_csv, cfg: RunConfig) -> CohortReport:
    preds = mask_files(pred_dir)
    if not preds:
        raise DataError(f"no predictions found in {pred_dir}")
    ids = sorted(preds)
    pairs = [(load_mask(preds[sid]), load_ground_truth(gt_dir, sid)) for sid in ids]
    report = evaluate_cohort(pairs, ids, cfg.metrics, jobs=cfg.jobs)
    report.to_csv(out_csv)
    return report


def write_summary(reports: Dict[str, CohortReport], out_dir) -> Tuple[Path, Path]:
    """One row per model, mirroring the mean and median result tables."""
    out_dir = Path(out_dir)
    paths = []
    for stat in ("mean", "median"):
        path = out_dir / f"summary_{stat}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("model",) + COLUMNS[1:])
            for name, report in reports.items():
                values = getattr(report, stat)()
                writer.writerow([name] + [f"{values[c]:.6f}" for c in COLUMNS[1:]])
        paths.append(path)
    return tuple(paths)


def run_pipeline(cfg: RunConfig, out_dir) -> Dict[str, CohortReport]:
    """Phantoms -> preprocess -> train each model -> predict -> ensemble -> evaluate."""
    out = Path(out_dir)
    cfg.dump(out / "configs" / "effective.yaml")
    raw = out / "data" / "raw"
    pre = out / "data" / "preprocessed"
    p = cfg.pipeline

    generate_cohort(p.n_subjects, derive_seed(cfg.seed, "phantom"), cfg.phantom, raw)
    preprocess_cohort(raw, pre, cfg)

    checkpoints = {}
    for kind in p.models:
        checkpoints[kind] = train_stage(kind, pre, out, cfg, epochs=p.epochs, init_filters=p.init_filters,
                                       learning_rate=p.learning_rate)

    reports = {}
    for kind, ckpt in checkpoints.items():
        predict_stage(ckpt, pre, out / "predictions" / kind, cfg)
        reports[kind] = evaluate_stage(out / "predictions" / kind, raw, out / "reports" / f"{kind}.csv", cfg)

    if len(p.models) == 3:
        nets = [load_checkpoint(checkpoints[k]) for k in p.models]
        ids, dataset = load_dataset(pre, cfg)
        ens_dir = out / "predictions" / "ensemble"

        def fuse(item):
            sid, (vol, _) = item
            mask = ensemble_predict(nets, vol, cfg.ensemble.reference_index, cfg.ensemble.mode)
            return write_mask(mask, ens_dir / f"{sid}.nii.gz")

        _map(fuse, list(zip(ids, dataset)), cfg.jobs)
        reports["ensemble"] = evaluate_stage(ens_dir, raw, out / "reports" / "ensemble.csv", cfg)

    write_summary(reports, out / "reports")
    return reports

