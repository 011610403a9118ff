import copy

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pose_distill.flow_core import interpolate, one_step_denoise
from pose_distill.nets import NetConfig, VelocityNet, load_checkpoint, parameter_checksum, save_checkpoint
from pose_distill.phase2 import (
    Phase2Config,
    adversarial_losses,
    equilibrium_step,
    frame_consistency_loss,
    generator_adversarial_loss,
    make_equilibrium_state,
    run_phase2,
    st_r1_penalty,
    train_phase2,
)
from pose_distill.synth_data import BlobConfig, GaussianMixture, PerturbationSpec, make_moving_blob
from pose_distill.train_utils import TrainingDiverged, read_metrics

BLOB = BlobConfig(frames=4, height=8, width=8, radius=1.5)
NET = NetConfig(frames=4, height=8, width=8, patch=2, dim=16, depth=2, heads=2, attr_cardinalities=BLOB.text_cardinalities)
TINY = dict(steps=2, batch_size=4, lr=1e-3, head_lr=1e-3, n_queries=4)


def _net(seed: int) -> VelocityNet:
    torch.manual_seed(seed)
    model = VelocityNet(NET)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g))
    return model


@pytest.fixture(scope="module")
def clips():
    return make_moving_blob(BLOB, 16, seed=0)


def test_hinge_loss_examples():
    g, d = adversarial_losses(torch.tensor([2.0, 0.0]), torch.tensor([-2.0, 0.0]))
    assert d.item() == pytest.approx(1.0)
    assert g.item() == pytest.approx(1.0)
    g, d = adversarial_losses(torch.tensor([1.5]), torch.tensor([-1.5]))
    assert d.item() == 0.0


def test_logistic_loss_examples():
    g, d = adversarial_losses(torch.zeros(3), torch.zeros(3), "logistic")
    assert d.item() == pytest.approx(2 * torch.log(torch.tensor(2.0)).item())
    assert g.item() == pytest.approx(torch.log(torch.tensor(2.0)).item())
    assert generator_adversarial_loss(torch.tensor([1.0, 3.0])).item() == -2.0


def test_unknown_loss_raises():
    with pytest.raises(ValueError):
        adversarial_losses(torch.zeros(1), torch.zeros(1), "wgan")
    with pytest.raises(ValueError):
        generator_adversarial_loss(torch.zeros(1), "wgan")


specs = st.builds(
    PerturbationSpec,
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
    st.floats(0.0, 0.3),
).filter(lambda s: s.sigma_s > 1e-3 or s.sigma_t > 1e-3)


@given(specs, st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_st_r1_is_zero_for_linear_discriminator(spec, seed):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(2, 4, 1, 3, 3, dtype=torch.float64, generator=g)
    x = torch.randn(3, 4, 1, 3, 3, dtype=torch.float64, generator=g)
    D = lambda x, t: (x * w[:1]).flatten(1).sum(1) + t
    assert st_r1_penalty(D, x, 0.5, spec, g).item() < 1e-10


@given(specs, st.floats(0.1, 5.0), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_st_r1_equals_curvature_squared_for_quadratic(spec, a, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(3, 4, 1, 3, 3, dtype=torch.float64, generator=g)
    D = lambda x, t: 0.5 * a * x.flatten(1).pow(2).sum(1)
    for mode in ("second_order", "detached"):
        assert st_r1_penalty(D, x, 0.5, spec, g, mode).item() == pytest.approx(a * a, abs=1e-6)


def test_st_r1_rejects_zero_perturbation_and_unknown_mode():
    D = lambda x, t: x.flatten(1).sum(1)
    x = torch.randn(2, 3, 1, 2, 2)
    with pytest.raises(ValueError):
        st_r1_penalty(D, x, 0.5, PerturbationSpec(0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        st_r1_penalty(D, x, 0.5, PerturbationSpec(), mode="third")


def test_st_r1_second_order_reaches_discriminator_parameters():
    a = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)
    D = lambda x, t: 0.5 * a * x.flatten(1).pow(2).sum(1)
    x = torch.randn(2, 3, 1, 2, 2, dtype=torch.float64)
    (grad,) = torch.autograd.grad(st_r1_penalty(D, x, 0.5, PerturbationSpec()), a)
    assert grad.item() == pytest.approx(4.0, abs=1e-6)


def test_frame_consistency_gradient_matches_finite_differences():
    mu = GaussianMixture([1.0], [[0.5]], [[2.0]]).velocity_field()
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(6, 1, dtype=torch.float64, generator=g, requires_grad=True)
    eps = torch.randn(6, 1, dtype=torch.float64, generator=g)
    t = 0.7
    (grad,) = torch.autograd.grad(frame_consistency_loss(x0, mu, t, eps), x0)
    with torch.no_grad():
        target = one_step_denoise(mu, interpolate(x0, eps, t), t)
    analytic = 2 * (x0.detach() - target) / x0.numel()
    assert torch.allclose(grad, analytic, atol=1e-15)
    h = 1e-6
    loss = lambda v: (v - target).pow(2).mean()
    for i in range(x0.shape[0]):
        e = torch.zeros_like(x0)
        e[i] = h
        fd = ((loss(x0.detach() + e) - loss(x0.detach() - e)) / (2 * h)).item()
        assert abs(fd - grad[i].item()) <= 1e-4 * abs(grad[i].item())


def test_substep_checksums_and_ema_exactness(clips):
    teacher, init = _net(0), _net(1)
    cfg = Phase2Config(**TINY)
    state = make_equilibrium_state(init, teacher, cfg)
    real_sum = parameter_checksum(state.real)
    head_sum = parameter_checksum(state.head)
    gen_sum = parameter_checksum(state.generator)
    shadow_before = copy.deepcopy(state.shadow.module)
    equilibrium_step(state, clips, torch.Generator().manual_seed(0))
    assert parameter_checksum(state.real) == real_sum == parameter_checksum(teacher)
    assert parameter_checksum(state.head) != head_sum
    assert parameter_checksum(state.generator) != gen_sum
    assert all(not p.requires_grad for p in state.shadow.module.parameters())
    for s0, s1, live in zip(shadow_before.parameters(), state.shadow.module.parameters(), state.generator.parameters()):
        expected = s0 * cfg.ema_decay + live.detach() * (1 - cfg.ema_decay)
        assert torch.allclose(s1, expected, atol=1e-8, rtol=1e-6)


def test_zero_learning_rates_leave_generator_unchanged(clips):
    init = _net(1)
    state = train_phase2(Phase2Config(**{**TINY, "lr": 0.0, "head_lr": 0.0}), init, _net(0), clips)
    assert parameter_checksum(state.generator) == parameter_checksum(init)
    for s, p in zip(state.shadow.module.parameters(), init.parameters()):
        assert torch.allclose(s, p, atol=1e-7)


def test_frozen_backbone_never_moves(clips):
    init = _net(1)
    state = train_phase2(Phase2Config(**{**TINY, "ema_decay": 1.0}), init, _net(0), clips)
    assert parameter_checksum(state.shadow.module) == parameter_checksum(init)


def test_same_seed_is_deterministic(clips):
    a = train_phase2(Phase2Config(**TINY), _net(1), _net(0), clips, seed=3)
    b = train_phase2(Phase2Config(**TINY), _net(1), _net(0), clips, seed=3)
    assert parameter_checksum(a.generator) == parameter_checksum(b.generator)
    assert parameter_checksum(a.head) == parameter_checksum(b.head)


@pytest.mark.parametrize("head,loss", [("conv", "logistic"), ("semantic", "hinge")])
def test_variants_run(clips, head, loss):
    cfg = Phase2Config(**{**TINY, "head": head, "loss": loss, "lam": 0.0, "eta": 0.0})
    state = train_phase2(cfg, _net(1), _net(0), clips)
    assert state.step == 2


def test_divergence_guard_raises(clips):
    cfg = Phase2Config(**{**TINY, "divergence_limit": 0.0, "divergence_patience": 2, "steps": 5})
    with pytest.raises(TrainingDiverged):
        train_phase2(cfg, _net(1), _net(0), clips)


def test_run_phase2_outputs(tmp_path, clips):
    teacher = save_checkpoint(_net(0), tmp_path / "teacher.pt", role="teacher")
    init = save_checkpoint(_net(1), tmp_path / "init.pt", role="phase1")
    path = run_phase2(Phase2Config(**TINY), init, teacher, clips, tmp_path / "p2")
    _, meta = load_checkpoint(path)
    assert meta["role"] == "phase2" and meta["init_role"] == "phase1"
    assert (tmp_path / "p2" / "head.pt").exists()
    rows = read_metrics(tmp_path / "p2" / "metrics.jsonl")
    assert [r["step"] for r in rows] == [1, 2]


def test_separate_consistency_levels_change_the_update(clips):
    base = train_phase2(Phase2Config(**TINY), _net(1), _net(0), clips, seed=1)
    split = train_phase2(Phase2Config(**TINY, consist_t_lo=0.05, consist_t_hi=0.2), _net(1), _net(0), clips, seed=1)
    assert parameter_checksum(base.generator) != parameter_checksum(split.generator)


def test_all_weights_zero_is_a_no_op(clips):
    init = _net(1)
    cfg = Phase2Config(**{**TINY, "eta": 0.0, "lam": 0.0, "adv_weight": 0.0})
    state = train_phase2(cfg, init, _net(0), clips)
    assert parameter_checksum(state.generator) == parameter_checksum(init)
