"""Comparison distillation methods trained on the same teacher and data.

* ``lcm``: consistency distillation along teacher Euler trajectories with a
  pseudo-Huber metric and an EMA target network.
* ``add``: adversarial distillation from partially noised real clips at four
  fixed sampling points, discriminated by a frozen teacher with a conv head.
* ``dmd2``: the priming DMD update plus an adversarial term whose
  discriminator reads the fake model's features at a single high-SNR level.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import torch
from torch import Tensor, nn

from .flow_core import interpolate, one_step_denoise, sample_levels
from .nets import Discriminator, EmaShadow, generate, load_checkpoint, make_head, save_checkpoint
from .phase1 import Phase1Config, make_priming_state, priming_step
from .phase2 import adversarial_losses, generator_adversarial_loss, st_r1_penalty
from .synth_data import ClipSet, PerturbationSpec
from .train_utils import MetricLog, adam, batches, check_finite, frozen, grad_norm, noise_like

logger = logging.getLogger(__name__)

METHODS = ("lcm", "add", "dmd2")


@dataclass
class BaselineConfig:
    method: str = "lcm"
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-6
    betas: tuple = (0.9, 0.999)
    # lcm
    ode_points: int = 64
    huber_c: float = 0.001
    target_decay: float = 0.95
    # add
    add_levels: tuple = (0.25, 0.5, 0.75, 1.0)
    ema_decay: float = 0.995
    head_lr: float = 1e-6
    adv_t_lo: float = 0.6
    adv_t_hi: float = 0.98
    eta: float = 1.0
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    loss: str = "hinge"
    # dmd2
    fake_lr: float = 1e-6
    fake_updates: int = 5
    dmd_t_lo: float = 0.02
    dmd_t_hi: float = 0.98
    normalize: bool = True
    lora_rank: int = 4
    adv_level: float = 0.4
    adv_weight: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline {self.method!r}; expected one of {METHODS}")
        if self.ode_points < 1:
            raise ValueError("ode_points must be >= 1")
        if self.huber_c <= 0:
            raise ValueError("huber_c must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        d = dict(d)
        for key in ("betas", "add_levels"):
            if key in d:
                d[key] = tuple(d[key])
        if isinstance(d.get("perturbation"), dict):
            d["perturbation"] = PerturbationSpec(**d["perturbation"])
        return cls(**d)

    def phase1_config(self) -> Phase1Config:
        """DMD settings of the ``dmd2`` baseline as a priming config."""
        return Phase1Config(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            fake_lr=self.fake_lr,
            betas=self.betas,
            fake_updates=self.fake_updates,
            t_lo=self.dmd_t_lo,
            t_hi=self.dmd_t_hi,
            curriculum=False,
            normalize=self.normalize,
            lora_rank=self.lora_rank,
        )


def pseudo_huber(pred: Tensor, target: Tensor, c: float) -> Tensor:
    """Per-sample ``sqrt(|r|^2 + c^2) - c`` averaged over the batch.

    Zero at ``r = 0``; close to ``|r|^2 / (2c)`` for ``|r| << c`` and to
    ``|r|`` for ``|r| >> c``.
    """
    r2 = (pred - target).flatten(1).pow(2).sum(1)
    return (torch.sqrt(r2 + c * c) - c).mean()


def _trainable_copy(model: nn.Module) -> nn.Module:
    m = copy.deepcopy(model)
    m.train()
    for p in m.parameters():
        p.requires_grad_(True)
    return m


# ---------------------------------------------------------------- LCM


@dataclass
class LcmState:
    student: nn.Module
    target: EmaShadow
    teacher: nn.Module
    opt: torch.optim.Optimizer
    config: BaselineConfig
    step: int = 0

    @property
    def output(self) -> nn.Module:
        return self.target.module


def make_lcm_state(teacher: nn.Module, config: BaselineConfig, seed: int = 0) -> LcmState:
    torch.manual_seed(seed)
    student = _trainable_copy(teacher)
    return LcmState(
        student=student,
        target=EmaShadow(student, config.target_decay),
        teacher=frozen(copy.deepcopy(teacher)),
        opt=adam(student.parameters(), config.lr, config.betas),
        config=config,
    )


def lcm_step(state: LcmState, batch: ClipSet, rng: torch.Generator) -> dict:
    """Match the student's clean estimate at ``t_n`` to the target network's at
    ``t_{n-1}``, one teacher Euler step down the same trajectory."""
    cfg = state.config
    cond = batch.condition()
    x0 = batch.video.to(cond.frames.dtype)
    B = x0.shape[0]
    n = torch.randint(1, cfg.ode_points + 1, (B,), generator=rng)
    t_n = n.to(x0.dtype) / cfg.ode_points
    t_prev = (n - 1).to(x0.dtype) / cfg.ode_points
    x_n = interpolate(x0, noise_like(x0, rng), t_n)
    with torch.no_grad():
        dt = (t_n - t_prev).view(-1, *([1] * (x0.ndim - 1)))
        x_prev = x_n - dt * state.teacher(x_n, t_n, cond)
        # identity at t = 0 is the consistency boundary condition
        target = one_step_denoise(state.target.module, x_prev, t_prev, cond)
    pred = one_step_denoise(state.student, x_n, t_n, cond)
    loss = pseudo_huber(pred, target, cfg.huber_c)
    state.opt.zero_grad(set_to_none=True)
    loss.backward()
    gnorm = grad_norm(state.student.parameters())
    state.opt.step()
    state.target.update(state.student)
    state.step += 1
    metrics = {"step": state.step, "loss": loss.item(), "grad_norm": gnorm}
    check_finite(metrics, state.step)
    return metrics


# ---------------------------------------------------------------- ADD


@dataclass
class AddState:
    student: nn.Module
    ema: EmaShadow
    teacher: nn.Module
    head: nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    config: BaselineConfig
    step: int = 0

    @property
    def output(self) -> nn.Module:
        return self.ema.module


def make_add_state(teacher: nn.Module, config: BaselineConfig, seed: int = 0) -> AddState:
    torch.manual_seed(seed)
    student = _trainable_copy(teacher)
    head = make_head("conv", teacher.config)
    return AddState(
        student=student,
        ema=EmaShadow(student, config.ema_decay),
        teacher=frozen(copy.deepcopy(teacher)),
        head=head,
        opt_g=adam(student.parameters(), config.lr, config.betas),
        opt_d=adam(head.parameters(), config.head_lr, config.betas),
        config=config,
    )


def add_step(state: AddState, batch: ClipSet, rng: torch.Generator) -> dict:
    cfg = state.config
    cond = batch.condition()
    real = batch.video.to(cond.frames.dtype)
    B = real.shape[0]
    levels = torch.tensor(cfg.add_levels, dtype=real.dtype)
    s = levels[torch.randint(0, len(levels), (B,), generator=rng)]
    x_s = interpolate(real, noise_like(real, rng), s)
    x0 = one_step_denoise(state.student, x_s, s, cond)

    D = Discriminator(state.teacher, state.head, cond)
    t = sample_levels(B, cfg.adv_t_lo, cfg.adv_t_hi, rng, dtype=real.dtype)
    real_t = interpolate(real, noise_like(real, rng), t)
    fake_t = interpolate(x0, noise_like(real, rng), t)

    logits_real = D(real_t, t)
    logits_fake = D(fake_t.detach(), t)
    _, adv_d = adversarial_losses(logits_real, logits_fake, cfg.loss)
    r1 = torch.zeros((), dtype=real.dtype)
    if cfg.eta > 0:
        r1 = st_r1_penalty(D, real_t, t, cfg.perturbation, rng)
    state.opt_d.zero_grad(set_to_none=True)
    (adv_d + cfg.eta * r1).backward()
    state.opt_d.step()

    adv_g = generator_adversarial_loss(D(fake_t, t), cfg.loss)
    state.opt_g.zero_grad(set_to_none=True)
    adv_g.backward()
    state.opt_g.step()
    state.opt_d.zero_grad(set_to_none=True)
    state.ema.update(state.student)
    state.step += 1
    metrics = {"step": state.step, "adv_g": adv_g.item(), "adv_d": adv_d.item(), "st_r1": r1.item()}
    check_finite(metrics, state.step)
    return metrics


# ---------------------------------------------------------------- DMD2


@dataclass
class Dmd2State:
    priming: object  # PrimingState
    head: Optional[nn.Module]
    opt_d: Optional[torch.optim.Optimizer]
    adv_rng: torch.Generator
    config: BaselineConfig

    @property
    def step(self) -> int:
        return self.priming.step

    @property
    def output(self) -> nn.Module:
        return self.priming.generator


def make_dmd2_state(teacher: nn.Module, config: BaselineConfig, seed: int = 0) -> Dmd2State:
    priming = make_priming_state(teacher, config.phase1_config(), seed)
    head = opt_d = None
    if config.adv_weight > 0:
        # separate stream so that the DMD path sees the same draws either way
        head = make_head("conv", teacher.config)
        opt_d = adam(head.parameters(), config.head_lr, config.betas)
    return Dmd2State(priming, head, opt_d, torch.Generator().manual_seed(seed + 7919), config)


def dmd2_step(state: Dmd2State, batch: ClipSet, rng: torch.Generator) -> dict:
    cfg = state.config
    if state.head is None:
        return priming_step(state.priming, batch, rng)

    cond = batch.condition()
    real = batch.video.to(cond.frames.dtype)
    D = Discriminator(state.priming.fake, state.head, cond)
    t = torch.full((real.shape[0],), cfg.adv_level, dtype=real.dtype)
    arng = state.adv_rng
    noise_fake = noise_like(real, arng)
    record = {}

    def adversarial(x0: Tensor, _cond) -> Tensor:
        loss = generator_adversarial_loss(D(interpolate(x0, noise_fake, t), t), cfg.loss)
        record["adv_g"] = loss.item()
        return cfg.adv_weight * loss

    metrics = priming_step(state.priming, batch, rng, extra_loss=adversarial)

    fake_t = interpolate(state.priming.last_x0, noise_fake, t)
    real_t = interpolate(real, noise_like(real, arng), t)
    _, adv_d = adversarial_losses(D(real_t, t), D(fake_t, t), cfg.loss)
    state.opt_d.zero_grad(set_to_none=True)
    adv_d.backward()
    state.opt_d.step()
    # the fake model's adapter is trained by its own diffusion loss only
    state.priming.opt_f.zero_grad(set_to_none=True)
    metrics.update(adv_g=record["adv_g"], adv_d=adv_d.item())
    check_finite(metrics, metrics["step"])
    return metrics


# ---------------------------------------------------------------- driver


_FACTORIES = {
    "lcm": (make_lcm_state, lcm_step),
    "add": (make_add_state, add_step),
    "dmd2": (make_dmd2_state, dmd2_step),
}


def train_baseline(
    config: BaselineConfig,
    teacher: nn.Module,
    dataset: ClipSet,
    seed: int = 0,
    log: Optional[MetricLog] = None,
):
    """Run ``config.steps`` updates; returns the method state (``.output`` is the
    one-step model to evaluate)."""
    make, step_fn = _FACTORIES[config.method]
    state = make(teacher, config, seed)
    rng = torch.Generator().manual_seed(seed)
    stream = batches(dataset, config.batch_size, torch.Generator().manual_seed(seed + 1))
    log = log or MetricLog()
    for _ in range(config.steps):
        metrics = step_fn(state, next(stream), rng)
        log.write(metrics)
        if metrics["step"] % 100 == 0:
            logger.info("%s step %d %s", config.method, metrics["step"], metrics)
    state.output.eval()
    return state


def train_lcm(config: BaselineConfig, teacher: nn.Module, dataset: ClipSet, seed: int = 0, log=None) -> LcmState:
    return train_baseline(_with_method(config, "lcm"), teacher, dataset, seed, log)


def train_add(config: BaselineConfig, teacher: nn.Module, dataset: ClipSet, seed: int = 0, log=None) -> AddState:
    return train_baseline(_with_method(config, "add"), teacher, dataset, seed, log)


def train_dmd2(config: BaselineConfig, teacher: nn.Module, dataset: ClipSet, seed: int = 0, log=None) -> Dmd2State:
    return train_baseline(_with_method(config, "dmd2"), teacher, dataset, seed, log)


def _with_method(config: BaselineConfig, method: str) -> BaselineConfig:
    if config.method == method:
        return config
    return BaselineConfig.from_dict({**asdict(config), "method": method})


def run_baseline(
    config: BaselineConfig,
    teacher_ckpt: Union[str, Path],
    dataset: ClipSet,
    out_dir: Union[str, Path],
    seed: int = 0,
) -> Path:
    """Train one baseline and write ``generator.pt`` (role = method tag)."""
    teacher, meta = load_checkpoint(teacher_ckpt)
    out_dir = Path(out_dir)
    state = train_baseline(config, teacher, dataset, seed, MetricLog(out_dir / "metrics.jsonl"))
    return save_checkpoint(
        state.output,
        out_dir / "generator.pt",
        role=config.method,
        step=state.step,
        seed=seed,
        extra={"config": asdict(config), "teacher_checksum": meta.get("checksum"), "teacher_path": str(teacher_ckpt)},
    )
