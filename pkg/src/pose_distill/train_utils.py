"""Small pieces shared by every trainer: metric logs, NaN guards, batching."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterator, Optional, Union

import torch
from torch import Tensor, nn

from .synth_data import ClipSet

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite or logits blow up."""

    def __init__(self, message: str, dump: Optional[dict] = None):
        super().__init__(message)
        self.dump = dump or {}


def check_finite(metrics: Dict[str, float], step: int, dump_dir: Optional[Path] = None) -> None:
    bad = {k: v for k, v in metrics.items() if isinstance(v, float) and not math.isfinite(v)}
    if not bad:
        return
    dump = {"step": step, "metrics": metrics}
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        (dump_dir / "diverged.json").write_text(json.dumps(dump, indent=1, default=str))
    raise TrainingDiverged(f"non-finite loss at step {step}: {sorted(bad)}", dump)


class MetricLog:
    """Append-only JSON-lines metric writer (no-op when ``path`` is None)."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.rows = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(row) + "\n")


def read_metrics(path: Union[str, Path]) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def batches(data: ClipSet, batch_size: int, generator: torch.Generator) -> Iterator[ClipSet]:
    """Endless shuffled mini-batches, reshuffling each epoch."""
    n = len(data)
    if n == 0:
        raise ValueError("empty dataset")
    while True:
        if n < batch_size:
            yield data.subset(torch.randint(0, n, (batch_size,), generator=generator))
            continue
        perm = torch.randperm(n, generator=generator)
        for i in range(0, n - batch_size + 1, batch_size):
            yield data.subset(perm[i : i + batch_size])


def frozen(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def adam(params, lr: float, betas) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas))


def noise_like(x: Tensor, generator: torch.Generator) -> Tensor:
    return torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
