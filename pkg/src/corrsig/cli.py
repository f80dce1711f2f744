"""Command-line entry point.

Usage: corrsig <stage> [--config cfg.json] [--seed N] [--out DIR]
                       [--variant hed3|hedbranch3] [--k N] [--split NAME]

Exit codes: 0 success, 2 config/usage error, 3 data error, 4 training
divergence.
"""

import argparse
import sys

import jsonschema

from . import pipeline
from .dataio import SPLITS
from .errors import (
    ConfigError,
    DataError,
    GenerationError,
    MetricError,
    TrainingError,
    UsageError,
)


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON config file (defaults apply otherwise)")
    common.add_argument("--seed", type=int, metavar="INT",
                        help="override the config seed")
    common.add_argument("--out", metavar="DIR",
                        help="override the config workdir")
    common.add_argument("--variant", choices=("hed3", "hedbranch3"),
                        help="predictor variant override")
    common.add_argument("--k", type=int, metavar="INT",
                        help="correlational feature count override")

    parser = argparse.ArgumentParser(
        prog="corrsig",
        description="Two-step cross-modal training pipeline: learn MRI "
                    "features correlated with histopathology, then train a "
                    "deeply supervised CNN on them.")
    sub = parser.add_subparsers(dest="stage", metavar="stage")
    sub.required = True
    helps = {
        "gen-synthetic": "write a seeded synthetic paired-modality dataset",
        "preprocess": "resample, intensity-standardize and z-normalize",
        "train-corrnet": "fit the correlational network on train pixels",
        "extract": "project correlational feature maps for every slice",
        "train-predictor": "train the deeply supervised CNN",
        "predict": "write probability maps for one split (MRI only)",
        "evaluate": "pixel and lesion metrics against ground truth",
        "report": "tabulate all evaluation reports in the workdir",
    }
    for stage in pipeline.STAGES:
        p = sub.add_parser(stage, parents=[common], help=helps[stage])
        if stage in ("predict", "evaluate"):
            p.add_argument("--split", choices=SPLITS, default="test",
                           help="dataset split (default: test)")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "workdir": args.out,
        "predictor.variant": args.variant,
        "corrnet.k": args.k,
    }
    try:
        cfg = pipeline.load_config(args.config, overrides)
        run = pipeline.run_stage(args.stage, cfg,
                                 split=getattr(args, "split", "test"))
    except jsonschema.ValidationError as exc:
        print("corrsig: config error at %s: %s" % (exc.json_path, exc.message),
              file=sys.stderr)
        return 2
    except (ConfigError, UsageError) as exc:
        print("corrsig: %s" % exc, file=sys.stderr)
        return 2
    except (DataError, GenerationError, MetricError, OSError) as exc:
        print("corrsig: %s" % exc, file=sys.stderr)
        return 3
    except TrainingError as exc:
        print("corrsig: %s" % exc, file=sys.stderr)
        return 4
    if "wall_time_s" in run:
        dirs = pipeline.stage_dirs(cfg, getattr(args, "split", "test"))
        print("%s finished in %.1fs (%d outputs) -> %s"
              % (args.stage, run["wall_time_s"], len(run["outputs"]),
                 dirs[args.stage]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
