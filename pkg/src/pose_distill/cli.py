"""``pose`` command line.

Exit codes: 0 ok, 1 configuration error, 2 training failure, 3 evaluation
failure. The output root defaults to ``$POSE_OUTPUT_ROOT`` when set, else to
the config's ``output_root``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from .baselines import METHODS, run_baseline
from .metrics import Normalizers
from .nets import load_checkpoint
from .phase1 import run_phase1
from .phase2 import run_phase2
from .runner.config import ConfigError, ExperimentSpec, load_spec
from .runner.pipeline import StageFailed, evaluate_model, run_ablations, run_pipeline
from .runner.report import emit_report
from .runner.teacher import train_teacher
from .synth_data import ClipSet, make_moving_blob
from .train_utils import TrainingDiverged

logger = logging.getLogger("pose_distill")

OUTPUT_ENV = "POSE_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_EVAL = 0, 1, 2, 3


class EvaluationError(RuntimeError):
    pass


def _global(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment JSON (overrides onto a preset)")
    p.add_argument("--seed", type=int, default=None, help="seed (default: first seed of the config)")
    p.add_argument("--out", type=Path, default=None, help="output directory / root")
    p.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True,
                   help="reuse completed stages (default on)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pose", description="Two-phase one-step distillation at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data", help="render the train/val clip sets")
    _global(p)

    p = sub.add_parser("train-teacher", help="fit the flow-matching teacher")
    _global(p)
    p.add_argument("--data", type=Path, help="dataset directory from `pose data` (default: render from config)")

    p = sub.add_parser("phase1", help="stability priming")
    _global(p)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("phase2", help="adversarial equilibrium")
    _global(p)
    p.add_argument("--init", type=Path, required=True, help="phase1 or teacher checkpoint")
    p.add_argument("--teacher", type=Path, help="frozen real model (default: recorded in the init sidecar)")
    p.add_argument("--data", type=Path)

    p = sub.add_parser("baseline", help="train a comparison method")
    _global(p)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("eval", help="score a checkpoint")
    _global(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--dataset", type=Path, help="clip directory (default: validation set from config)")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--normalizers", type=Path, help="normalizers.json for the composite score")

    p = sub.add_parser("pipeline", help="data -> teacher -> phase1 -> phase2 -> eval")
    _global(p)

    p = sub.add_parser("ablate", help="pipeline plus the ablation grid and baselines")
    _global(p)

    p = sub.add_parser("report", help="render the report for an output root")
    _global(p)
    p.add_argument("--report-dir", type=Path)
    return parser


def _output(args, spec: ExperimentSpec) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUTPUT_ENV, spec.output_root))


def _seed(args, spec: ExperimentSpec) -> int:
    return args.seed if args.seed is not None else spec.seeds[0]


def _train_set(args, spec: ExperimentSpec) -> ClipSet:
    if getattr(args, "data", None):
        return ClipSet.load(Path(args.data) / "train" if (Path(args.data) / "train").is_dir() else args.data)
    return make_moving_blob(spec.data.blob, spec.data.n_train, spec.data.train_seed)


def _val_set(path: Optional[Path], spec: ExperimentSpec) -> ClipSet:
    if path:
        return ClipSet.load(Path(path) / "val" if (Path(path) / "val").is_dir() else path)
    return make_moving_blob(spec.data.blob, spec.data.n_val, spec.data.val_seed)


def _run(args) -> int:
    spec = load_spec(args.config)
    if args.seed is not None and args.command in ("pipeline", "ablate"):
        spec = dataclasses.replace(spec, seeds=(args.seed,))
    out = _output(args, spec)
    seed = _seed(args, spec)

    if args.command == "data":
        make_moving_blob(spec.data.blob, spec.data.n_train, spec.data.train_seed).save(out / "train")
        make_moving_blob(spec.data.blob, spec.data.n_val, spec.data.val_seed).save(out / "val")
        print(out)
    elif args.command == "train-teacher":
        data = _train_set(args, spec)
        print(train_teacher(spec.teacher, spec.net_config, data, out, seed, _val_set(args.data, spec)))
    elif args.command == "phase1":
        print(run_phase1(spec.phase1, args.teacher, _train_set(args, spec), out, seed))
    elif args.command == "phase2":
        teacher = args.teacher
        if teacher is None:
            _, meta = load_checkpoint(args.init)
            teacher = args.init if meta.get("role") == "teacher" else meta.get("teacher_path")
            if teacher is None:
                raise ConfigError("--teacher is required when the init checkpoint does not record one")
        print(run_phase2(spec.phase2, args.init, teacher, _train_set(args, spec), out, seed))
    elif args.command == "baseline":
        cfg = dataclasses.replace(spec.baseline, method=args.method)
        print(run_baseline(cfg, args.teacher, _train_set(args, spec), out, seed))
    elif args.command == "eval":
        try:
            model, _ = load_checkpoint(args.ckpt)
            norms = Normalizers(**json.loads(args.normalizers.read_text())) if args.normalizers else None
            report, _ = evaluate_model(model, _val_set(args.dataset, spec), args.steps, spec.eval, norms)
        except (FileNotFoundError, ValueError, RuntimeError) as exc:
            raise EvaluationError(str(exc)) from exc
        target = args.out or Path("report.json")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
        print(target)
    elif args.command == "pipeline":
        run_pipeline(spec, out, args.resume)
        print(emit_report(out))
    elif args.command == "ablate":
        run_ablations(spec, out, args.resume)
        print(emit_report(out))
    elif args.command == "report":
        print(emit_report(out, args.report_dir))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL if exc.kind == "evaluation" else EXIT_TRAIN
    except EvaluationError as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except (TrainingDiverged, FileNotFoundError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
