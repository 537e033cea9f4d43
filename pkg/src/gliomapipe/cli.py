"""Command line entry point: ``gliomapipe <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 any other stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import stages
from .config import PipelineConfig, load_config, parse_config
from .errors import ConfigError, PipelineError, StageDependencyError
from .phantoms import write_phantom_cohort

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 2, 3, 4

COMMANDS = (
    "preprocess", "train", "segment", "evaluate", "features",
    "survival-train", "survival-predict", "survival-eval", "report",
)


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else parse_config({})
    if getattr(args, "work_dir", None):
        cfg = cfg.model_copy(update={"work_dir": Path(args.work_dir)})
    return cfg


def cmd_preprocess(args):
    stages.preprocess_stage(_config(args))


def cmd_train(args):
    stages.train_stage_files(_config(args))


def cmd_segment(args):
    cfg = _config(args)
    if args.case:
        if not args.out:
            raise ConfigError("--out is required with --case", "--out")
        weights_dir = args.weights_dir or stages.Layout(cfg.work_dir).weights
        stages.segment_case(weights_dir, args.case, args.out, cfg.data.naming.convention(), cfg.training.threshold)
    else:
        stages.segment_stage(cfg)


def cmd_evaluate(args):
    cfg = _config(args)
    if args.pred_dir or args.gt_dir:
        if not (args.pred_dir and args.gt_dir and args.out):
            raise ConfigError("--pred-dir, --gt-dir and --out go together", "--pred-dir")
        cases = stages.evaluate_dirs(args.pred_dir, args.gt_dir, naming=cfg.data.naming.convention())
        stages.write_evaluation(cases, args.out, Path(args.out).stem)
    else:
        stages.evaluate_stage(cfg)


def cmd_features(args):
    cfg = _config(args)
    if args.labels:
        if not args.out:
            raise ConfigError("--out is required with --labels", "--out")
        meta = args.meta or cfg.data.survival_csv
        stages.features_from_labels(args.labels, args.out, meta, args.cases_dir or cfg.data.cases_dir,
                                    cfg.data.naming.convention(), cfg.data.columns.columns())
    else:
        stages.features_stage(cfg)


def cmd_survival_train(args):
    cfg = _config(args)
    if args.features:
        if not (args.meta and args.out):
            raise ConfigError("--features, --meta and --out go together", "--features")
        stages.survival_train(args.features, args.meta, args.out, cfg.survival.forest_params(), cfg.seed,
                              cfg.data.columns.columns())
    else:
        stages.survival_stage(cfg, "train")


def cmd_survival_predict(args):
    cfg = _config(args)
    if args.model:
        if not (args.features and args.out):
            raise ConfigError("--model, --features and --out go together", "--model")
        stages.survival_predict(args.model, args.features, args.out, oob=args.oob or cfg.survival.oob,
                                thresholds=cfg.survival.thresholds)
    else:
        stages.survival_stage(cfg, "predict")


def cmd_survival_eval(args):
    cfg = _config(args)
    if args.pred:
        if not (args.meta and args.out):
            raise ConfigError("--pred, --meta and --out go together", "--pred")
        stages.survival_eval(args.pred, args.meta, args.out, cfg.survival.thresholds, cfg.data.columns.columns(),
                             args.dataset)
    else:
        stages.survival_stage(cfg, "eval")


def cmd_report(args):
    cfg = _config(args)
    if args.out:
        stages.render_report(cfg.work_dir, args.out)
    else:
        stages.report_stage(cfg)


def cmd_pipeline(args):
    cfg = _config(args)
    stages.preprocess_stage(cfg)
    stages.train_stage_files(cfg)
    stages.segment_stage(cfg)
    stages.evaluate_stage(cfg)
    if cfg.data.survival_csv is not None:
        stages.features_stage(cfg)
        for which in ("train", "predict", "eval"):
            stages.survival_stage(cfg, which)
    stages.report_stage(cfg)


def cmd_make_phantoms(args):
    write_phantom_cohort(args.out, args.n_cases, tuple(args.shape), args.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gliomapipe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML/JSON pipeline configuration")
        p.add_argument("--work-dir", help="override work_dir from the config")
        p.set_defaults(func=func)
        return p

    add("preprocess", cmd_preprocess, "normalize volumes and cache axial slices")
    add("train", cmd_train, "train the WT -> NCR/ED/ET cascade")
    p = add("segment", cmd_segment, "segment one case (--case) or every configured case")
    p.add_argument("--weights-dir")
    p.add_argument("--case")
    p.add_argument("--out")
    p = add("evaluate", cmd_evaluate, "DSC / sensitivity / Hausdorff95 tables")
    p.add_argument("--pred-dir")
    p.add_argument("--gt-dir")
    p.add_argument("--out", help="report.json or report.csv")
    p = add("features", cmd_features, "survival feature CSV from label maps")
    p.add_argument("--labels")
    p.add_argument("--out")
    p.add_argument("--meta")
    p.add_argument("--cases-dir", help="case directories used for brain masks")
    p = add("survival-train", cmd_survival_train, "fit the survival random forest")
    p.add_argument("--features")
    p.add_argument("--meta")
    p.add_argument("--out")
    p = add("survival-predict", cmd_survival_predict, "predict survival days")
    p.add_argument("--model")
    p.add_argument("--features")
    p.add_argument("--out")
    p.add_argument("--oob", action="store_true", help="out-of-bag predictions for training cases")
    p = add("survival-eval", cmd_survival_eval, "OS report over GTR cases")
    p.add_argument("--pred")
    p.add_argument("--meta")
    p.add_argument("--out")
    p.add_argument("--dataset", default="Training")
    p = add("report", cmd_report, "render tables and figures from stored outputs")
    p.add_argument("--out")
    add("pipeline", cmd_pipeline, "run every stage in order")
    p = sub.add_parser("make-phantoms", help="write a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n-cases", type=int, default=4)
    p.add_argument("--shape", type=int, nargs=3, default=(64, 64, 32))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_phantoms)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageDependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (PipelineError, OSError, ValueError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
