"""Stability priming: distribution-matching updates of a one-step generator.

The generator starts as a copy of the teacher and is only ever evaluated at
t = 1. Its samples are re-noised to a random level and scored by two
velocity models: the frozen teacher ("real") and a LoRA-adapted teacher
("fake") that is continually refit to the generator's own outputs. The
generator follows the difference of the implied scores.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Union

import torch
from torch import Tensor, nn

from .flow_core import diffusion_loss, interpolate, level_tensor, sample_levels, score_from_velocity
from .nets import generate, load_checkpoint, lora_attach, lora_parameters, save_checkpoint
from .synth_data import ClipSet, Condition
from .train_utils import MetricLog, adam, batches, check_finite, frozen, grad_norm, noise_like

logger = logging.getLogger(__name__)


@dataclass
class Phase1Config:
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-6
    fake_lr: float = 1e-6
    betas: tuple = (0.9, 0.999)
    fake_updates: int = 5
    dmd_weight: float = 1.0
    t_lo: float = 0.02
    t_hi: float = 0.98
    # high-to-low SNR curriculum on the upper perturbation level
    curriculum: bool = True
    curriculum_start: float = 0.6
    curriculum_steps: int = 250
    normalize: bool = True
    lora_rank: int = 4
    lora_alpha: Optional[float] = None

    @classmethod
    def from_dict(cls, d: dict) -> "Phase1Config":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def dmd_gradient(
    x0_gen: Tensor,
    mu_real,
    mu_fake,
    t,
    eps: Tensor,
    cond: Any = None,
    normalize: bool = False,
) -> Tensor:
    """Per-element distribution-matching direction ``g = s_fake - s_real``.

    Both scores are evaluated at ``x_t = interpolate(x0_gen, eps, t)``. The
    result is detached; descending ``<g, x0_gen>`` moves generator samples
    toward higher teacher density and away from the fake model's. With
    ``normalize`` each sample's ``g`` is divided by its mean absolute value.
    """
    t_vec = level_tensor(t, x0_gen.shape[0], x0_gen)
    if float(t_vec.min()) <= 0.0:
        raise ZeroDivisionError("distribution matching needs t > 0 (score singularity at t = 0)")
    with torch.no_grad():
        x_t = interpolate(x0_gen.detach(), eps, t_vec)
        s_real = score_from_velocity(x_t, mu_real(x_t, t_vec, cond), t_vec)
        s_fake = score_from_velocity(x_t, mu_fake(x_t, t_vec, cond), t_vec)
        g = -(s_real - s_fake)
        if normalize:
            dims = tuple(range(1, g.ndim))
            scale = g.abs().mean(dim=dims, keepdim=True) if dims else g.abs()
            g = g / (scale + 1e-8)
    return g


def dmd_surrogate(x0_gen: Tensor, g: Tensor) -> Tensor:
    """Loss whose gradient w.r.t. ``x0_gen`` is ``g / numel``."""
    return (g.detach() * x0_gen).mean()


def fake_model_loss(mu_fake, x0_gen: Tensor, eps: Tensor, t, cond: Any = None) -> Tensor:
    """Flow-matching loss of the fake model on detached generator samples."""
    return diffusion_loss(mu_fake, x0_gen.detach(), eps, t, cond)


@dataclass
class PrimingState:
    generator: nn.Module
    real: nn.Module
    fake: nn.Module
    opt_g: torch.optim.Optimizer
    opt_f: torch.optim.Optimizer
    config: Phase1Config
    step: int = 0
    last_x0: Optional[Tensor] = None


def make_priming_state(teacher: nn.Module, config: Phase1Config, seed: int = 0) -> PrimingState:
    torch.manual_seed(seed)
    generator = copy.deepcopy(teacher)
    generator.train()
    for p in generator.parameters():
        p.requires_grad_(True)
    real = frozen(copy.deepcopy(teacher))
    fake = lora_attach(teacher, config.lora_rank, config.lora_alpha)
    return PrimingState(
        generator=generator,
        real=real,
        fake=fake,
        opt_g=adam(generator.parameters(), config.lr, config.betas),
        opt_f=adam(lora_parameters(fake), config.fake_lr, config.betas),
        config=config,
    )


def perturbation_ceiling(config: Phase1Config, step: int) -> float:
    """Upper perturbation level, annealed from high SNR toward low SNR."""
    if not config.curriculum or config.curriculum_steps <= 0:
        return config.t_hi
    frac = min(1.0, step / config.curriculum_steps)
    return config.curriculum_start + frac * (config.t_hi - config.curriculum_start)


def _condition(batch: Union[ClipSet, Condition]) -> Condition:
    return batch.condition() if isinstance(batch, ClipSet) else batch


def priming_step(
    state: PrimingState,
    batch: Union[ClipSet, Condition],
    rng: torch.Generator,
    extra_loss: Optional[Callable[[Tensor, Condition], Tensor]] = None,
) -> dict:
    """One generator update followed by ``fake_updates`` fake-model updates.

    ``extra_loss(x0, cond)`` is added to the generator objective when given
    (used by the simultaneous DMD + adversarial baseline).
    """
    cfg = state.config
    cond = _condition(batch)
    B = len(cond)
    z = noise_like(cond.frames, rng)
    x0 = generate(state.generator, z, cond)

    t_hi = perturbation_ceiling(cfg, state.step)
    t = sample_levels(B, cfg.t_lo, t_hi, rng, dtype=x0.dtype)
    eps = noise_like(x0, rng)
    g = dmd_gradient(x0, state.real, state.fake, t, eps, cond, normalize=cfg.normalize)
    loss = cfg.dmd_weight * dmd_surrogate(x0, g)
    total = loss if extra_loss is None else loss + extra_loss(x0, cond)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    gnorm = grad_norm(state.generator.parameters())
    state.opt_g.step()

    x0_detached = x0.detach()
    state.last_x0 = x0_detached
    fake_losses = []
    for _ in range(cfg.fake_updates):
        t_f = sample_levels(B, cfg.t_lo, cfg.t_hi, rng, dtype=x0.dtype)
        eps_f = noise_like(x0, rng)
        lf = fake_model_loss(state.fake, x0_detached, eps_f, t_f, cond)
        state.opt_f.zero_grad(set_to_none=True)
        lf.backward()
        state.opt_f.step()
        fake_losses.append(lf.item())

    state.step += 1
    metrics = {
        "step": state.step,
        "dmd_loss": loss.item(),
        "fake_loss": sum(fake_losses) / len(fake_losses) if fake_losses else 0.0,
        "grad_norm": gnorm,
        "t_hi": t_hi,
    }
    check_finite(metrics, state.step)
    return metrics


def train_phase1(
    config: Phase1Config,
    teacher: nn.Module,
    dataset: ClipSet,
    seed: int = 0,
    log: Optional[MetricLog] = None,
) -> PrimingState:
    state = make_priming_state(teacher, config, seed)
    rng = torch.Generator().manual_seed(seed)
    data_rng = torch.Generator().manual_seed(seed + 1)
    stream = batches(dataset, config.batch_size, data_rng)
    log = log or MetricLog()
    for _ in range(config.steps):
        metrics = priming_step(state, next(stream), rng)
        log.write(metrics)
        if state.step % 100 == 0:
            logger.info("phase1 step %d dmd %.4g fake %.4g", state.step, metrics["dmd_loss"], metrics["fake_loss"])
    state.generator.eval()
    return state


def run_phase1(
    config: Phase1Config,
    teacher_ckpt: Union[str, Path],
    dataset: ClipSet,
    out_dir: Union[str, Path],
    seed: int = 0,
) -> Path:
    """Prime a generator from a teacher checkpoint; returns the checkpoint path.

    Writes ``generator.pt`` (+ sidecar, role ``phase1``) and ``metrics.jsonl``.
    """
    teacher, meta = load_checkpoint(teacher_ckpt)
    out_dir = Path(out_dir)
    log = MetricLog(out_dir / "metrics.jsonl")
    state = train_phase1(config, teacher, dataset, seed, log)
    return save_checkpoint(
        state.generator,
        out_dir / "generator.pt",
        role="phase1",
        step=state.step,
        seed=seed,
        extra={"config": asdict(config), "teacher_checksum": meta.get("checksum"), "teacher_path": str(teacher_ckpt)},
    )
