"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import pipeline
from .config import RunConfig, derive_seed, load_config
from .errors import ConfigError, DataError, NumericError
from .nets import KINDS
from .phantom import generate_cohort
from .volume_io import load_subject_dir

log = logging.getLogger("menseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="top-level seed (overrides config)")
    p.add_argument("--jobs", type=int, help="per-subject parallelism (default 1)")
    p.add_argument("--out", type=Path, required=out_required, help="output location")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="menseg", description="Brain tumor segmentation ensemble toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("phantom-gen", help="write a synthetic phantom cohort")
    _common(p, out_required=True)
    p.add_argument("--n", type=int, default=20, help="number of subjects (default 20)")

    p = sub.add_parser("preprocess", help="crop and normalize a cohort into .npz arrays")
    _common(p, out_required=True)
    p.add_argument("--data", type=Path, required=True, help="cohort directory (subject layout)")
    p.add_argument("--crop", type=int, nargs=3, metavar=("D", "H", "W"), help="center-crop target")

    p = sub.add_parser("train", help="train one model")
    _common(p, out_required=True)
    p.add_argument("--model", choices=KINDS, required=True)
    p.add_argument("--data", type=Path, required=True, help="preprocessed or raw cohort directory")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--init-filters", type=int, help="override model.init_filters")

    p = sub.add_parser("predict", help="predict masks for a cohort with one checkpoint")
    _common(p, out_required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="preprocessed or raw cohort directory")

    p = sub.add_parser("ensemble", help="majority-vote three mask files")
    _common(p, out_required=True)
    p.add_argument("--masks", type=Path, nargs=3, required=True, metavar="MASK")
    p.add_argument("--subject", type=Path, help="reference subject directory (for spatial metadata)")
    p.add_argument("--reference-index", type=int, choices=(0, 1, 2), help="tie-break member")

    p = sub.add_parser("evaluate", help="lesion-wise Dice/HD95 report")
    _common(p)
    p.add_argument("--pred", type=Path, required=True, help="directory of predicted masks")
    p.add_argument("--gt", type=Path, required=True, help="cohort directory with ground truth")

    p = sub.add_parser("pipeline", help="phantoms -> train x3 -> predict -> ensemble -> evaluate")
    _common(p)
    p.add_argument("--n-subjects", type=int, help="override pipeline.n_subjects")
    p.add_argument("--epochs", type=int, help="override pipeline.epochs")
    return parser


def _config(args, **extra) -> RunConfig:
    overrides = {"seed": args.seed, "jobs": args.jobs}
    overrides.update(extra)
    return load_config(args.config, overrides)


def _run(args) -> None:
    cmd = args.command
    if cmd == "phantom-gen":
        cfg = _config(args)
        dirs = generate_cohort(args.n, derive_seed(cfg.seed, "phantom"), cfg.phantom, args.out)
        cfg.dump(args.out / "configs" / "effective.yaml")
        log.info("wrote %d subjects to %s", len(dirs), args.out)
    elif cmd == "preprocess":
        cfg = _config(args, **{"preprocess.crop": args.crop})
        written = pipeline.preprocess_cohort(args.data, args.out, cfg)
        log.info("preprocessed %d subjects into %s", len(written), args.out)
    elif cmd == "train":
        cfg = _config(args, **{"train.epochs": args.epochs, "model.init_filters": args.init_filters})
        cfg.dump(args.out / "configs" / f"{args.model}.yaml")
        path = pipeline.train_stage(args.model, args.data, args.out, cfg)
        log.info("checkpoint written to %s", path)
    elif cmd == "predict":
        cfg = _config(args)
        written = pipeline.predict_stage(args.checkpoint, args.data, args.out, cfg)
        log.info("wrote %d masks to %s", len(written), args.out)
    elif cmd == "ensemble":
        cfg = _config(args, **{"ensemble.reference_index": args.reference_index})
        reference = load_subject_dir(args.subject)[0] if args.subject else None
        path = pipeline.ensemble_masks(args.masks, reference, args.out, cfg.ensemble.reference_index)
        log.info("fused mask written to %s", path)
    elif cmd == "evaluate":
        cfg = _config(args)
        out = args.out or Path(cfg.paths.out) / "reports" / "report.csv"
        report = pipeline.evaluate_stage(args.pred, args.gt, out, cfg)
        sys.stdout.write(report.to_csv())
    elif cmd == "pipeline":
        cfg = _config(args, **{"pipeline.n_subjects": args.n_subjects, "pipeline.epochs": args.epochs})
        out = args.out or Path(cfg.paths.out)
        reports = pipeline.run_pipeline(cfg, out)
        for name, report in reports.items():
            mean = report.mean()
            log.info("%-13s mean dice ET %.3f TC %.3f WT %.3f", name,
                     mean["dice_et"], mean["dice_tc"], mean["dice_wt"])


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        _run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
