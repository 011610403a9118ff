"""Stage orchestration with content-addressed caching.

Every stage writes into ``<root>/stages/<name>/<key>/`` where ``key`` hashes
the config sections it reads, its seed and the keys of its upstream stages.
A stage whose ``stage.json`` exists is reused, which makes reruns no-ops and
lets an interrupted pipeline resume where it stopped. Each completion,
reuse or failure is appended to ``<root>/manifest.jsonl``.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from statistics import median
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch

from ..baselines import BaselineConfig, run_baseline
from ..metrics import EvalReport, Normalizers, evaluate_samples, latency_report, sample_model
from ..nets import load_checkpoint
from ..phase1 import run_phase1
from ..phase2 import run_phase2
from ..synth_data import ClipSet, make_moving_blob
from ..train_utils import TrainingDiverged
from .config import ExperimentSpec, canonical_json, digest
from .teacher import train_teacher

logger = logging.getLogger(__name__)

REFERENCE_STEPS = 40
MANIFEST = "manifest.jsonl"


class StageFailed(RuntimeError):
    """A pipeline stage raised; ``kind`` is ``training`` or ``evaluation``."""

    def __init__(self, stage: str, kind: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.kind = kind
        self.cause = cause


def code_version() -> str:
    """Content hash of the package sources, ``src-<12 hex>``."""
    root = Path(__file__).resolve().parent.parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return "src-" + h.hexdigest()[:12]


class RunManifest:
    """Append-only JSON-lines record of stage events under an output root.

    Each entry is written with a single ``O_APPEND`` write, so concurrent
    pipelines sharing a root never interleave partial lines.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.path = self.root / MANIFEST

    def append(self, entry: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        line = (json.dumps(entry, sort_keys=True) + "\n").encode()
        fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            os.write(fd, line)
        finally:
            os.close(fd)

    def entries(self) -> List[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


def _atomic_write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True))
    os.replace(tmp, path)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass(frozen=True)
class Stage:
    name: str
    key: str
    dir: Path
    outputs: dict


class Pipeline:
    """Runs cached stages for one experiment spec under one output root."""

    def __init__(self, spec: ExperimentSpec, root: Optional[Union[str, Path]] = None, resume: bool = True):
        self.spec = spec
        self.root = Path(root if root is not None else spec.output_root)
        self.resume = resume
        self.manifest = RunManifest(self.root)
        self.spec_hash = spec.digest()
        self.version = code_version()
        self._loaded: Dict[str, object] = {}
        # stages finished by this instance; reused even without ``resume``
        self._fresh: set = set()

    # -- generic machinery -------------------------------------------------

    def stage(
        self,
        name: str,
        key_obj: dict,
        fn: Callable[[Path], dict],
        kind: str = "training",
        seed: Optional[int] = None,
        info: Optional[dict] = None,
    ) -> Stage:
        key = digest({"stage": name, **key_obj})[:16]
        d = self.root / "stages" / name / key
        done = d / "stage.json"
        base = {"stage": name, "key": key, "seed": seed, "spec_hash": self.spec_hash, "code_version": self.version}
        base.update(info or {})
        if (self.resume or (name, key) in self._fresh) and done.exists():
            outputs = json.loads(done.read_text())["outputs"]
            self.manifest.append({**base, "status": "cached", "outputs": outputs, "time": _now()})
            return Stage(name, key, d, outputs)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        (d / "key.json").write_text(json.dumps(key_obj, indent=1, sort_keys=True, default=str))
        logger.info("running stage %s/%s", name, key)
        start = time.perf_counter()
        try:
            outputs = fn(d)
        except Exception as exc:
            dump = exc.dump if isinstance(exc, TrainingDiverged) else {}
            self.manifest.append({**base, "status": "failed", "error": str(exc), "dump": dump, "time": _now()})
            raise StageFailed(name, kind, exc) from exc
        outputs = {k: str(v) for k, v in outputs.items()}
        _atomic_write_json(done, {"outputs": outputs, "seconds": time.perf_counter() - start})
        self.manifest.append({**base, "status": "done", "outputs": outputs, "time": _now()})
        self._fresh.add((name, key))
        return Stage(name, key, d, outputs)

    # -- stages --------------------------------------------------------------

    def data(self) -> Stage:
        spec = self.spec.data
        key = {"blob": asdict(spec.blob), "n_train": spec.n_train, "n_val": spec.n_val,
               "train_seed": spec.train_seed, "val_seed": spec.val_seed}

        def build(d: Path) -> dict:
            make_moving_blob(spec.blob, spec.n_train, spec.train_seed).save(d / "train")
            make_moving_blob(spec.blob, spec.n_val, spec.val_seed).save(d / "val")
            return {"train": d / "train", "val": d / "val"}

        return self.stage("data", key, build)

    def clips(self, path: str) -> ClipSet:
        if path not in self._loaded:
            self._loaded[path] = ClipSet.load(path)
        return self._loaded[path]

    def teacher(self) -> Stage:
        data = self.data()
        key = {"data": data.key, "net": asdict(self.spec.net), "teacher": asdict(self.spec.teacher),
               "seed": self.spec.teacher_seed}

        def build(d: Path) -> dict:
            ckpt = train_teacher(
                self.spec.teacher, self.spec.net_config, self.clips(data.outputs["train"]), d,
                self.spec.teacher_seed, self.clips(data.outputs["val"]),
            )
            return {"checkpoint": ckpt, "metrics": d / "metrics.jsonl"}

        return self.stage("teacher", key, build, seed=self.spec.teacher_seed)

    def distill_data(self) -> Stage:
        """Training clips with a fraction replaced by teacher samples.

        Conditioning frames of the replaced clips are kept from the real clip,
        so every clip stays consistent with its own condition.
        """
        data, teacher = self.data(), self.teacher()
        spec = self.spec.data
        key = {"data": data.key, "teacher": teacher.key, "mix_fraction": spec.mix_fraction,
               "mix_steps": spec.mix_steps, "seed": self.spec.teacher_seed}

        def build(d: Path) -> dict:
            train = self.clips(data.outputs["train"])
            n_mix = int(round(spec.mix_fraction * len(train)))
            video = train.video.clone()
            if n_mix > 0:
                model, _ = load_checkpoint(teacher.outputs["checkpoint"])
                idx = torch.arange(len(train) - n_mix, len(train))
                part = train.subset(idx)
                samples = sample_model(model, part.condition(), part.video.shape, spec.mix_steps,
                                       self.spec.teacher_seed + 2)
                keep = part.mask.bool()[:, :, None, None, None]
                video[idx] = torch.where(keep, part.video, samples.clamp(-1, 1))
            mixed = ClipSet(video, train.attrs, train.mask, train.config, train.seed, train.origins)
            mixed.save(d / "train")
            (d / "mix.json").write_text(json.dumps({"n_teacher": n_mix, "n_total": len(train)}))
            return {"train": d / "train"}

        return self.stage("distill_data", key, build, seed=self.spec.teacher_seed)

    def phase1(self, seed: int) -> Stage:
        dd, teacher = self.distill_data(), self.teacher()
        key = {"data": dd.key, "teacher": teacher.key, "phase1": asdict(self.spec.phase1), "seed": seed}

        def build(d: Path) -> dict:
            ckpt = run_phase1(self.spec.phase1, teacher.outputs["checkpoint"], self.clips(dd.outputs["train"]), d, seed)
            return {"checkpoint": ckpt, "metrics": d / "metrics.jsonl"}

        return self.stage("phase1", key, build, seed=seed)

    def baseline(self, method: str, seed: int, steps: Optional[int] = None) -> Stage:
        dd, teacher = self.distill_data(), self.teacher()
        cfg = dataclasses.replace(self.spec.baseline, method=method)
        if steps is not None:
            cfg = dataclasses.replace(cfg, steps=steps)
        key = {"data": dd.key, "teacher": teacher.key, "baseline": asdict(cfg), "seed": seed}

        def build(d: Path) -> dict:
            ckpt = run_baseline(cfg, teacher.outputs["checkpoint"], self.clips(dd.outputs["train"]), d, seed)
            return {"checkpoint": ckpt, "metrics": d / "metrics.jsonl"}

        return self.stage(f"baseline_{method}", key, build, seed=seed)

    def priming(self, kind: str, seed: int) -> Stage:
        """Initial generator for the adversarial phase."""
        if kind == "pose":
            return self.phase1(seed)
        if kind == "lcm":
            return self.baseline("lcm", seed, steps=self.spec.phase1.steps)
        if kind == "none":
            return self.teacher()
        raise ValueError(f"unknown priming {kind!r}")

    def phase2(self, seed: int, priming: str = "pose", lam: Optional[float] = None, backbone: str = "ema") -> Stage:
        init, dd, teacher = self.priming(priming, seed), self.distill_data(), self.teacher()
        cfg = self.spec.phase2
        if lam is not None:
            cfg = dataclasses.replace(cfg, lam=float(lam))
        if backbone == "frozen":
            cfg = dataclasses.replace(cfg, ema_decay=1.0)
        key = {"init": init.key, "data": dd.key, "teacher": teacher.key, "phase2": asdict(cfg), "seed": seed}

        def build(d: Path) -> dict:
            ckpt = run_phase2(cfg, init.outputs["checkpoint"], teacher.outputs["checkpoint"],
                              self.clips(dd.outputs["train"]), d, seed)
            return {"checkpoint": ckpt, "metrics": d / "metrics.jsonl", "head": d / "head.pt"}

        return self.stage("phase2", key, build, seed=seed)

    def evaluate(self, trained: Stage, label: str, seed: Optional[int], steps: Sequence[int], normalize: bool = True) -> Stage:
        data = self.data()
        norm_stage = self.reference() if normalize else None
        key = {"model": trained.key, "data": data.key, "eval": asdict(self.spec.eval), "steps": list(steps),
               "normalizers": norm_stage.key if norm_stage else None}

        def build(d: Path) -> dict:
            model, _ = load_checkpoint(trained.outputs["checkpoint"])
            norms = None
            if norm_stage is not None:
                norms = Normalizers(**json.loads(Path(norm_stage.outputs["normalizers"]).read_text()))
            val = self.clips(data.outputs["val"])
            reports, keep = {}, {}
            for s in steps:
                report, samples = evaluate_model(model, val, s, self.spec.eval, norms)
                reports[str(s)] = report.to_dict()
                keep[str(s)] = samples[: self.spec.eval.keep_samples].clone()
            _atomic_write_json(d / "report.json", reports)
            torch.save(keep, d / "samples.pt")
            return {"report": d / "report.json", "samples": d / "samples.pt"}

        info = {"label": label, "model_stage": trained.name, "model_key": trained.key,
                "training_metrics": trained.outputs.get("metrics")}
        return self.stage("eval", key, build, kind="evaluation", seed=seed, info=info)

    def reference(self) -> Stage:
        """Teacher at the reference step count; freezes the composite normalizers."""
        data, teacher = self.data(), self.teacher()
        key = {"teacher": teacher.key, "data": data.key, "eval": asdict(self.spec.eval), "steps": REFERENCE_STEPS}

        def build(d: Path) -> dict:
            model, _ = load_checkpoint(teacher.outputs["checkpoint"])
            report, _ = evaluate_model(model, self.clips(data.outputs["val"]), REFERENCE_STEPS, self.spec.eval)
            norms = Normalizers.from_report(report)
            _atomic_write_json(d / "normalizers.json", asdict(norms))
            _atomic_write_json(d / "report.json", report.to_dict())
            return {"normalizers": d / "normalizers.json", "report": d / "report.json"}

        return self.stage("reference", key, build, kind="evaluation")


def evaluate_model(model, val: ClipSet, steps: int, eval_spec, normalizers: Optional[Normalizers] = None) -> Tuple[EvalReport, torch.Tensor]:
    """Sample every validation condition with ``steps`` Euler steps and score it."""
    cond = val.condition()
    samples = sample_model(model, cond, val.video.shape, steps, eval_spec.sample_seed)
    lb = min(eval_spec.latency_batch, len(val))
    noise = torch.randn(val.video[:lb].shape, generator=torch.Generator().manual_seed(eval_spec.sample_seed))
    timing = latency_report(model, [steps], noise, cond.index(slice(0, lb)), repeats=eval_spec.latency_repeats)[0]
    report = evaluate_samples(
        samples, val.video, val.condition_frame, nfe=timing["nfe"], wall_time_s=timing["wall_time_s"],
        n_projections=eval_spec.n_projections, projection_seed=eval_spec.projection_seed, normalizers=normalizers,
    )
    return report, samples


# ---------------------------------------------------------------- experiments


PRIMING_LABELS = {"none": "Adv. + No-Priming", "lcm": "Adv. + LCM", "pose": "Adv. + POSE-I"}
BASELINE_LABELS = {"lcm": "LCM", "add": "ADD", "dmd2": "DMD2"}


def _lam_label(lam: float) -> str:
    return f"lambda={lam:g}"


def _main_stages(p: Pipeline) -> None:
    steps = list(p.spec.eval.steps)
    p.evaluate(p.teacher(), "Teacher", None, sorted(set(steps) | {REFERENCE_STEPS}))
    for seed in p.spec.seeds:
        p.evaluate(p.phase1(seed), "POSE-I only", seed, [1])
        p.evaluate(p.phase2(seed), "POSE", seed, steps)


MAIN_ROWS = [("reference", "Teacher"), ("main", "POSE-I only"), ("main", "POSE")]


def run_pipeline(spec: ExperimentSpec, root: Optional[Union[str, Path]] = None, resume: bool = True) -> RunManifest:
    """data -> teacher -> phase1 -> phase2 -> eval for every seed."""
    p = Pipeline(spec, root, resume)
    _main_stages(p)
    _record_table(p, MAIN_ROWS)
    return p.manifest


def run_ablations(spec: ExperimentSpec, root: Optional[Union[str, Path]] = None, resume: bool = True) -> List[dict]:
    """Priming necessity, lambda, backbone and baseline comparisons.

    Returns the comparison table (medians over seeds) and records it in the
    manifest so ``emit_report`` can rebuild it.
    """
    p = Pipeline(spec, root, resume)
    _main_stages(p)
    rows: List[Tuple[str, str]] = list(MAIN_ROWS)
    for seed in spec.seeds:
        for kind in spec.ablation.priming:
            p.evaluate(p.phase2(seed, priming=kind), PRIMING_LABELS[kind], seed, [1])
        for lam in spec.ablation.lam:
            p.evaluate(p.phase2(seed, lam=lam), _lam_label(lam), seed, [1])
        for b in spec.ablation.backbone:
            p.evaluate(p.phase2(seed, backbone=b), f"backbone={b}", seed, [1])
        for method in spec.ablation.baselines:
            p.evaluate(p.baseline(method, seed), BASELINE_LABELS[method], seed, [1])
    rows += [("priming", PRIMING_LABELS[k]) for k in spec.ablation.priming]
    rows += [("lambda", _lam_label(lam)) for lam in spec.ablation.lam]
    rows += [("backbone", f"backbone={b}") for b in spec.ablation.backbone]
    rows += [("baselines", BASELINE_LABELS[m]) for m in spec.ablation.baselines]
    _record_table(p, rows)
    return comparison_table(p.manifest.entries())


def _record_table(p: Pipeline, rows: List[Tuple[str, str]]) -> None:
    p.manifest.append({"stage": "table", "spec_hash": p.spec_hash, "code_version": p.version,
                       "rows": [list(r) for r in rows], "seeds": list(p.spec.seeds), "time": _now()})


METRIC_COLUMNS = (
    "sliced_wasserstein", "mmd_rbf", "motion_smoothness", "subject_consistency",
    "condition_mse", "dynamic_degree", "composite", "wall_time_s",
)


def latest_evals(entries: List[dict], spec_hash: Optional[str] = None) -> Dict[Tuple[str, Optional[int]], dict]:
    """Most recent successful eval entry per (label, seed)."""
    out = {}
    for e in entries:
        if e.get("stage") != "eval" or e.get("status") == "failed":
            continue
        if spec_hash is not None and e.get("spec_hash") != spec_hash:
            continue
        out[(e["label"], e.get("seed"))] = e
    return out


def comparison_table(entries: List[dict]) -> List[dict]:
    """Rows of (group, label, nfe) with per-metric medians over seeds.

    Row structure comes from the latest table entry; without one, every
    evaluated label forms its own row.
    """
    tables = [e for e in entries if e.get("stage") == "table"]
    spec_hash = tables[-1]["spec_hash"] if tables else None
    evals = latest_evals(entries, spec_hash)
    if tables:
        layout = [tuple(r) for r in tables[-1]["rows"]]
    else:
        layout = [("runs", label) for label in sorted({k[0] for k in evals})]
    rows = []
    for group, label in layout:
        reports: Dict[int, List[dict]] = {}
        for (lbl, seed), e in sorted(evals.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])):
            if lbl != label:
                continue
            for steps, rep in json.loads(Path(e["outputs"]["report"]).read_text()).items():
                reports.setdefault(int(steps), []).append(rep)
        for nfe_steps in sorted(reports):
            reps = reports[nfe_steps]
            row = {"group": group, "label": label, "steps": nfe_steps, "nfe": reps[0]["nfe"], "n_seeds": len(reps)}
            for col in METRIC_COLUMNS:
                row[col] = float(median(float(r[col]) for r in reps))
            rows.append(row)
    return rows


def lookup(table: List[dict], label: str, steps: int = 1) -> dict:
    for row in table:
        if row["label"] == label and row["steps"] == steps:
            return row
    raise KeyError(f"no row {label!r} at {steps} steps")
