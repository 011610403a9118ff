"""Unified adversarial equilibrium.

The discriminator backbone is an EMA shadow of the generator itself and is
never optimised; only a light head reads its multi-layer features. Real and
generated clips are both noised to low-SNR levels before discrimination. The
head is regularised by a finite-perturbation R1 penalty, and the generator is
additionally pulled toward the frozen teacher's one-step denoising of its own
(stop-gradient) noised samples.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .flow_core import interpolate, level_tensor, one_step_denoise, sample_levels
from .nets import (
    Discriminator,
    EmaShadow,
    backbone_refresh,
    generate,
    load_checkpoint,
    make_head,
    save_checkpoint,
)
from .synth_data import ClipSet, Condition, PerturbationSpec, perturb_spatiotemporal
from .train_utils import MetricLog, TrainingDiverged, adam, batches, check_finite, frozen, noise_like

logger = logging.getLogger(__name__)


@dataclass
class Phase2Config:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 2e-6
    head_lr: float = 2e-6
    betas: tuple = (0.5, 0.999)
    ema_decay: float = 0.995
    lam: float = 10.0
    eta: float = 1.0
    adv_weight: float = 1.0
    t_lo: float = 0.6
    t_hi: float = 0.98
    # re-noising range of the frame consistency term; None reuses the adversarial draw
    consist_t_lo: Optional[float] = None
    consist_t_hi: Optional[float] = None
    loss: str = "hinge"  # or "logistic"
    r1_mode: str = "second_order"  # or "detached"
    r1_on_fake: bool = False
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    head: str = "semantic"  # or "conv"
    n_queries: int = 16
    divergence_limit: float = 1e3
    divergence_patience: int = 50

    @classmethod
    def from_dict(cls, d: dict) -> "Phase2Config":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if isinstance(d.get("perturbation"), dict):
            d["perturbation"] = PerturbationSpec(**d["perturbation"])
        return cls(**d)


def adversarial_losses(logits_real: Tensor, logits_fake: Tensor, kind: str = "hinge") -> Tuple[Tensor, Tensor]:
    """Return ``(generator_loss, discriminator_loss)``.

    ``hinge``: D minimises ``relu(1 - D(real)) + relu(1 + D(fake))`` and G
    minimises ``-D(fake)``. ``logistic`` is the non-saturating variant.
    """
    if kind == "hinge":
        d_loss = F.relu(1 - logits_real).mean() + F.relu(1 + logits_fake).mean()
        g_loss = -logits_fake.mean()
    elif kind == "logistic":
        d_loss = F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean()
        g_loss = F.softplus(-logits_fake).mean()
    else:
        raise ValueError(f"unknown adversarial loss {kind!r}")
    return g_loss, d_loss


def generator_adversarial_loss(logits_fake: Tensor, kind: str = "hinge") -> Tensor:
    if kind == "hinge":
        return -logits_fake.mean()
    if kind == "logistic":
        return F.softplus(-logits_fake).mean()
    raise ValueError(f"unknown adversarial loss {kind!r}")


def _input_grad(D: Callable, x: Tensor, t: Tensor, create_graph: bool) -> Tensor:
    x = x.detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(D(x, t).sum(), x, create_graph=create_graph)
    return grad


def st_r1_penalty(
    D: Callable[[Tensor, Tensor], Tensor],
    x: Tensor,
    t,
    spec: PerturbationSpec,
    generator: Optional[torch.Generator] = None,
    mode: str = "second_order",
) -> Tensor:
    """Finite-perturbation R1 penalty.

    ``|grad_x D(x_pert, t_pert) - grad_x D(x, t)|^2 / |eps_s + eps_t|^2``
    averaged over the batch. ``mode="second_order"`` differentiates through
    both input gradients; ``"detached"`` holds the unperturbed gradient
    constant.
    """
    if mode not in ("second_order", "detached"):
        raise ValueError(f"unknown ST-R1 mode {mode!r}")
    t_vec = level_tensor(t, x.shape[0], x)
    pert = perturb_spatiotemporal(x.detach(), spec, t_vec, generator)
    delta = (pert.eps_s + pert.eps_t).flatten(1)
    denom = delta.pow(2).sum(1)
    if bool((denom == 0).any()):
        raise ValueError("perturbation has zero norm; the ST-R1 spec must be nonzero")
    grad_ref = _input_grad(D, x, t_vec, create_graph=(mode == "second_order"))
    if mode == "detached":
        grad_ref = grad_ref.detach()
    grad_pert = _input_grad(D, pert.x_pert, pert.t_pert, create_graph=True)
    num = (grad_pert - grad_ref).flatten(1).pow(2).sum(1)
    return (num / denom).mean()


def frame_consistency_loss(x0_gen: Tensor, mu_real, t, eps: Tensor, cond: Any = None) -> Tensor:
    """Mean squared distance from ``x0_gen`` to the teacher's one-step denoise
    of ``interpolate(sg(x0_gen), eps, t)``. Only the ``x0_gen`` term carries
    gradient.
    """
    with torch.no_grad():
        x_t = interpolate(x0_gen.detach(), eps, t)
        target = one_step_denoise(mu_real, x_t, t, cond)
    return (x0_gen - target).pow(2).mean()


@dataclass
class EquilibriumState:
    generator: nn.Module
    shadow: EmaShadow
    head: nn.Module
    real: nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    config: Phase2Config
    step: int = 0
    blowup_streak: int = 0


def make_equilibrium_state(
    init: nn.Module,
    teacher: nn.Module,
    config: Phase2Config,
    seed: int = 0,
) -> EquilibriumState:
    torch.manual_seed(seed)
    generator = copy.deepcopy(init)
    generator.train()
    for p in generator.parameters():
        p.requires_grad_(True)
    shadow = EmaShadow(generator, config.ema_decay)
    head = make_head(config.head, generator.config, config.n_queries)
    return EquilibriumState(
        generator=generator,
        shadow=shadow,
        head=head,
        real=frozen(copy.deepcopy(teacher)),
        opt_g=adam(generator.parameters(), config.lr, config.betas),
        opt_d=adam(head.parameters(), config.head_lr, config.betas),
        config=config,
    )


def equilibrium_step(state: EquilibriumState, batch: ClipSet, rng: torch.Generator) -> dict:
    """Discriminator-head update, generator update, then backbone refresh."""
    cfg = state.config
    cond = batch.condition()
    real = batch.video.to(cond.frames.dtype)
    B = real.shape[0]
    D = Discriminator(state.shadow.module, state.head, cond)

    x0 = generate(state.generator, noise_like(real, rng), cond)
    t = sample_levels(B, cfg.t_lo, cfg.t_hi, rng, dtype=real.dtype)
    real_t = interpolate(real, noise_like(real, rng), t)
    fake_t = interpolate(x0, noise_like(real, rng), t)

    # discriminator head
    logits_real = D(real_t, t)
    logits_fake = D(fake_t.detach(), t)
    _, adv_d = adversarial_losses(logits_real, logits_fake, cfg.loss)
    r1 = torch.zeros((), dtype=real.dtype)
    if cfg.eta > 0:
        r1 = st_r1_penalty(D, real_t, t, cfg.perturbation, rng, cfg.r1_mode)
        if cfg.r1_on_fake:
            r1 = r1 + st_r1_penalty(D, fake_t.detach(), t, cfg.perturbation, rng, cfg.r1_mode)
    loss_d = adv_d + cfg.eta * r1
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_d.step()

    # generator
    adv_g = generator_adversarial_loss(D(fake_t, t), cfg.loss)
    consist = torch.zeros((), dtype=real.dtype)
    if cfg.lam > 0:
        t_c = t
        if cfg.consist_t_lo is not None or cfg.consist_t_hi is not None:
            lo = cfg.t_lo if cfg.consist_t_lo is None else cfg.consist_t_lo
            hi = cfg.t_hi if cfg.consist_t_hi is None else cfg.consist_t_hi
            t_c = sample_levels(B, lo, hi, rng, dtype=real.dtype)
        consist = frame_consistency_loss(x0, state.real, t_c, noise_like(real, rng), cond)
    loss_g = cfg.adv_weight * adv_g + cfg.lam * consist
    state.opt_g.zero_grad(set_to_none=True)
    state.opt_d.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_g.step()
    state.opt_d.zero_grad(set_to_none=True)

    backbone_refresh(state.generator, state.shadow)
    state.step += 1

    peak = float(torch.cat([logits_real, logits_fake]).detach().abs().max())
    state.blowup_streak = state.blowup_streak + 1 if peak > cfg.divergence_limit else 0
    metrics = {
        "step": state.step,
        "adv_g": adv_g.item(),
        "adv_d": adv_d.item(),
        "st_r1": r1.item(),
        "consist": consist.item(),
        "logit_real_mean": logits_real.mean().item(),
        "logit_fake_mean": logits_fake.mean().item(),
    }
    check_finite(metrics, state.step)
    if state.blowup_streak >= cfg.divergence_patience:
        raise TrainingDiverged(
            f"|logits| above {cfg.divergence_limit} for {state.blowup_streak} consecutive steps",
            {"step": state.step, "metrics": metrics},
        )
    return metrics


def train_phase2(
    config: Phase2Config,
    init: nn.Module,
    teacher: nn.Module,
    dataset: ClipSet,
    seed: int = 0,
    log: Optional[MetricLog] = None,
) -> EquilibriumState:
    state = make_equilibrium_state(init, teacher, config, seed)
    rng = torch.Generator().manual_seed(seed)
    stream = batches(dataset, config.batch_size, torch.Generator().manual_seed(seed + 1))
    log = log or MetricLog()
    for _ in range(config.steps):
        metrics = equilibrium_step(state, next(stream), rng)
        log.write(metrics)
        if state.step % 100 == 0:
            logger.info(
                "phase2 step %d adv_g %.3g adv_d %.3g r1 %.3g consist %.3g",
                state.step, metrics["adv_g"], metrics["adv_d"], metrics["st_r1"], metrics["consist"],
            )
    state.generator.eval()
    return state


def run_phase2(
    config: Phase2Config,
    init_ckpt: Union[str, Path],
    teacher_ckpt: Union[str, Path],
    dataset: ClipSet,
    out_dir: Union[str, Path],
    seed: int = 0,
) -> Path:
    """Adversarial stage from a primed (or teacher) checkpoint.

    Writes ``generator.pt`` (role ``phase2``), ``head.pt`` and ``metrics.jsonl``.
    """
    init, init_meta = load_checkpoint(init_ckpt)
    teacher, _ = load_checkpoint(teacher_ckpt)
    out_dir = Path(out_dir)
    log = MetricLog(out_dir / "metrics.jsonl")
    state = train_phase2(config, init, teacher, dataset, seed, log)
    torch.save(state.head.state_dict(), out_dir / "head.pt")
    return save_checkpoint(
        state.generator,
        out_dir / "generator.pt",
        role="phase2",
        step=state.step,
        seed=seed,
        extra={"config": asdict(config), "init_role": init_meta.get("role")},
    )
