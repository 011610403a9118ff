"""Markdown / CSV / JSON comparison tables, loss curves, sample grids and GIFs.

Everything is derived from the manifest and the files it points to, with
no timestamps, so regenerating a report from the same runs is byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch
from PIL import Image

from ..train_utils import read_metrics
from .pipeline import METRIC_COLUMNS, RunManifest, comparison_table, latest_evals

logger = logging.getLogger(__name__)

NO_RUNS = "_no runs_"
CSV_COLUMNS = ("group", "label", "steps", "nfe", "n_seeds") + METRIC_COLUMNS


def slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", label.lower()).strip("-")


def _to_uint8(frames: torch.Tensor) -> np.ndarray:
    x = ((frames.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.numpy()


def clip_grid(clips: torch.Tensor, scale: int = 4, pad: int = 1) -> Image.Image:
    """Rows are clips, columns are frames; (N, F, C, H, W) in [-1, 1]."""
    N, F, C, H, W = clips.shape
    arr = _to_uint8(clips)
    canvas = np.full((N * (H + pad) + pad, F * (W + pad) + pad, 3), 40, dtype=np.uint8)
    for i in range(N):
        for f in range(F):
            tile = arr[i, f].transpose(1, 2, 0)
            tile = np.repeat(tile, 3, axis=2) if C == 1 else tile[..., :3]
            y, x = pad + i * (H + pad), pad + f * (W + pad)
            canvas[y : y + H, x : x + W] = tile
    img = Image.fromarray(canvas)
    return img.resize((img.width * scale, img.height * scale), Image.NEAREST)


def save_png(img: Image.Image, path: Path) -> None:
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False)
    path.write_bytes(buf.getvalue())


def save_gif(clips: torch.Tensor, path: Path, scale: int = 4, duration_ms: int = 150) -> None:
    """Animated GIF whose frame f tiles frame f of every clip side by side."""
    frames = [clip_grid(clips[:, f : f + 1].transpose(0, 1), scale) for f in range(clips.shape[1])]
    frames = [fr.convert("P", palette=Image.ADAPTIVE) for fr in frames]
    buf = io.BytesIO()
    frames[0].save(buf, format="GIF", save_all=True, append_images=frames[1:], duration=duration_ms, loop=0)
    path.write_bytes(buf.getvalue())


def plot_curves(rows: List[dict], title: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    keys = [k for k in rows[0] if k != "step" and isinstance(rows[0][k], (int, float))]
    fig, axes = plt.subplots(len(keys), 1, figsize=(6, 1.8 * len(keys)), sharex=True, squeeze=False)
    steps = [r["step"] for r in rows]
    for ax, key in zip(axes[:, 0], keys):
        ax.plot(steps, [r[key] for r in rows], lw=0.8)
        ax.set_ylabel(key, fontsize=8)
    axes[-1, 0].set_xlabel("step")
    fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=80, metadata={"Software": None})
    plt.close(fig)
    path.write_bytes(buf.getvalue())


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _markdown_table(table: List[dict]) -> str:
    cols = ("label", "nfe", "n_seeds", "composite", "sliced_wasserstein", "condition_mse",
            "subject_consistency", "motion_smoothness", "mmd_rbf", "wall_time_s")
    lines = []
    for group in dict.fromkeys(r["group"] for r in table):
        lines += [f"### {group}", "", "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        for r in table:
            if r["group"] == group:
                lines.append("| " + " | ".join(_fmt(r[c]) for c in cols) + " |")
        lines.append("")
    return "\n".join(lines)


def emit_report(root: Union[str, Path], out_dir: Optional[Union[str, Path]] = None) -> Path:
    """Write ``report.md``, ``comparison.csv``, ``comparison.json`` plus
    ``curves/`` and ``samples/`` under ``out_dir`` (default ``<root>/report``).
    """
    root = Path(root)
    out = Path(out_dir) if out_dir is not None else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    entries = RunManifest(root).entries()
    table = comparison_table(entries)
    warnings: List[str] = []

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in table:
        writer.writerow({k: row[k] for k in CSV_COLUMNS})
    (out / "comparison.csv").write_text(buf.getvalue())
    (out / "comparison.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")

    if not table:
        (out / "report.md").write_text(f"# Experiment report\n\n{NO_RUNS}\n")
        return out

    tables = [e for e in entries if e.get("stage") == "table"]
    spec_hash = tables[-1]["spec_hash"] if tables else None
    evals = latest_evals(entries, spec_hash)
    first: Dict[str, dict] = {}
    for (label, seed), e in sorted(evals.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])):
        first.setdefault(label, e)

    (out / "curves").mkdir(exist_ok=True)
    (out / "samples").mkdir(exist_ok=True)
    media: Dict[str, List[str]] = {}
    for label, e in sorted(first.items()):
        name = slug(label)
        files = media.setdefault(label, [])
        metrics = e.get("training_metrics")
        if metrics and Path(metrics).exists():
            rows = read_metrics(metrics)
            if rows:
                plot_curves(rows, label, out / "curves" / f"{name}.png")
                files.append(f"curves/{name}.png")
        elif metrics:
            warnings.append(f"missing training metrics for {label}: {metrics}")
        samples_path = Path(e["outputs"].get("samples", ""))
        if samples_path.is_file():
            samples = torch.load(samples_path)
            for steps in sorted(samples, key=int):
                clips = samples[steps][:8]
                save_png(clip_grid(clips), out / "samples" / f"{name}_nfe{steps}.png")
                save_gif(clips, out / "samples" / f"{name}_nfe{steps}.gif")
                files += [f"samples/{name}_nfe{steps}.png", f"samples/{name}_nfe{steps}.gif"]
        else:
            warnings.append(f"missing samples for {label}")

    seeds = sorted({s for (_, s) in evals if s is not None})
    versions = sorted({e.get("code_version", "?") for e in evals.values()})
    lines = [
        "# Experiment report",
        "",
        f"spec hash `{spec_hash or 'n/a'}`; code {', '.join(versions)}; seeds {seeds}.",
        "Values are medians over seeds. Composite is higher-is-better; all distances lower-is-better.",
        "",
        "## Comparison",
        "",
        _markdown_table(table),
        "## Figures",
        "",
    ]
    for label in sorted(media):
        if media[label]:
            lines.append(f"- {label}: " + ", ".join(f"[{Path(f).name}]({f})" for f in media[label]))
    if warnings:
        lines += ["", "## Warnings", ""] + [f"- {w}" for w in sorted(warnings)]
        for w in warnings:
            logger.warning(w)
    (out / "report.md").write_text("\n".join(lines) + "\n")
    return out
