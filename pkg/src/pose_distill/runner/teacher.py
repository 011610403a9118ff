"""Teacher training: a flow-matching VelocityNet fitted to the clip data."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import torch

from ..flow_core import diffusion_loss, sample_levels
from ..metrics import sample_model, sliced_wasserstein
from ..nets import NetConfig, VelocityNet, save_checkpoint
from ..synth_data import ClipSet
from ..train_utils import MetricLog, adam, batches, check_finite, noise_like

logger = logging.getLogger(__name__)


@dataclass
class TeacherConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    warmup: int = 100
    t_lo: float = 0.02
    t_hi: float = 0.98
    # probability of dropping the condition (enables the guidance hook)
    cond_dropout: float = 0.0
    validate_samples: int = 128

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def _lr_lambda(config: TeacherConfig):
    def f(step: int) -> float:
        if step < config.warmup:
            return (step + 1) / config.warmup
        frac = (step - config.warmup) / max(1, config.steps - config.warmup)
        return 0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))

    return f


def fit_teacher(
    config: TeacherConfig,
    net_config: NetConfig,
    dataset: ClipSet,
    seed: int = 0,
    log: Optional[MetricLog] = None,
) -> VelocityNet:
    torch.manual_seed(seed)
    model = VelocityNet(net_config)
    opt = adam(model.parameters(), config.lr, config.betas)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(config))
    rng = torch.Generator().manual_seed(seed)
    stream = batches(dataset, config.batch_size, torch.Generator().manual_seed(seed + 1))
    log = log or MetricLog()
    model.train()
    for step in range(1, config.steps + 1):
        batch = next(stream)
        x0 = batch.video
        cond = batch.condition()
        if config.cond_dropout > 0 and float(torch.rand((), generator=rng)) < config.cond_dropout:
            cond = None
        t = sample_levels(len(batch), config.t_lo, config.t_hi, rng)
        loss = diffusion_loss(model, x0, noise_like(x0, rng), t, cond)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        row = {"step": step, "loss": loss.item()}
        check_finite(row, step)
        log.write(row)
        if step % 500 == 0:
            logger.info("teacher step %d loss %.4f", step, loss.item())
    model.eval()
    return model


def headroom_check(model: VelocityNet, val: ClipSet, n: int = 128, seed: int = 0) -> dict:
    """Sliced-Wasserstein of 1-step vs 40-step samples against held-out clips."""
    val = val.subset(torch.arange(min(n, len(val))))
    cond = val.condition()
    sw = {}
    for steps in (1, 40):
        samples = sample_model(model, cond, val.video.shape, steps, seed)
        sw[steps] = sliced_wasserstein(samples, val.video, 128, seed)
    ok = sw[40] < sw[1]
    if not ok:
        logger.warning("teacher has no distillation headroom: SW(40)=%.4f >= SW(1)=%.4f", sw[40], sw[1])
    return {"sw_1": sw[1], "sw_40": sw[40], "headroom": ok}


def train_teacher(
    config: TeacherConfig,
    net_config: NetConfig,
    dataset: ClipSet,
    out_dir: Union[str, Path],
    seed: int = 0,
    val: Optional[ClipSet] = None,
) -> Path:
    """Fit a teacher and write ``teacher.pt``; a headroom failure only warns."""
    out_dir = Path(out_dir)
    model = fit_teacher(config, net_config, dataset, seed, MetricLog(out_dir / "metrics.jsonl"))
    check = headroom_check(model, val if val is not None else dataset, config.validate_samples, seed)
    return save_checkpoint(
        model, out_dir / "teacher.pt", role="teacher", step=config.steps, seed=seed,
        extra={"config": asdict(config), "validation": check},
    )
