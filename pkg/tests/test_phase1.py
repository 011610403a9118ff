import json
import math

import pytest
import torch

from pose_distill.nets import NetConfig, VelocityNet, load_checkpoint, parameter_checksum, save_checkpoint
from pose_distill.phase1 import (
    Phase1Config,
    dmd_gradient,
    dmd_surrogate,
    make_priming_state,
    perturbation_ceiling,
    priming_step,
    run_phase1,
    train_phase1,
)
from pose_distill.synth_data import BlobConfig, GaussianMixture, make_moving_blob
from pose_distill.train_utils import read_metrics

BLOB = BlobConfig(frames=4, height=8, width=8, radius=1.5)
NET = NetConfig(frames=4, height=8, width=8, patch=2, dim=16, depth=2, heads=2, attr_cardinalities=BLOB.text_cardinalities)
TINY = dict(steps=3, batch_size=4, lr=1e-3, fake_lr=1e-3, fake_updates=2, curriculum_steps=2)


def _gauss(m: float, var: float = 1.0):
    return GaussianMixture([1.0], [[m]], [[var]]).velocity_field()


def _teacher(seed: int = 0) -> VelocityNet:
    torch.manual_seed(seed)
    model = VelocityNet(NET)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        # leave the zero-initialised gates non-zero so every layer carries signal
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g))
    return model


@pytest.fixture(scope="module")
def clips():
    return make_moving_blob(BLOB, 16, seed=0)


def test_identical_models_give_zero_gradient(rng):
    x0 = torch.randn(64, 3, dtype=torch.float64, generator=rng)
    eps = torch.randn(64, 3, dtype=torch.float64, generator=rng)
    mu = _gauss(0.3, 2.0)
    g = dmd_gradient(x0, mu, mu, 0.4, eps)
    assert g.abs().max().item() < 1e-12


@pytest.mark.parametrize("t", [0.3, 0.5, 0.8])
@pytest.mark.parametrize("m,sigma", [(1.0, 1.0), (1.0, 2.0), (-0.5, 0.5)])
def test_gradient_matches_gaussian_oracle(t, m, sigma):
    # generator N(m, sigma^2) against target N(0, 1): E[g] = (1 - t) m / ((1 - t)^2 + t^2)
    n = 100_000
    g_ = torch.Generator().manual_seed(int(100 * t))
    x0 = m + sigma * torch.randn(n, 1, dtype=torch.float64, generator=g_)
    eps = torch.randn(n, 1, dtype=torch.float64, generator=g_)
    g = dmd_gradient(x0, _gauss(0.0), _gauss(m, sigma**2), t, eps)
    expected = (1 - t) * m / ((1 - t) ** 2 + t**2)
    stderr = g.std().item() / math.sqrt(n)
    assert abs(g.mean().item() - expected) <= max(3 * stderr, 1e-9)


def test_unit_gaussian_oracle_factor_is_one():
    n = 100_000
    g_ = torch.Generator().manual_seed(0)
    x0 = 1.0 + torch.randn(n, 1, dtype=torch.float64, generator=g_)
    eps = torch.randn(n, 1, dtype=torch.float64, generator=g_)
    g = dmd_gradient(x0, _gauss(0.0), _gauss(1.0), 0.5, eps)
    assert abs(g.mean().item() - 1.0) < 0.05


def test_matched_means_give_zero_mean_gradient():
    n = 100_000
    g_ = torch.Generator().manual_seed(3)
    x0 = torch.randn(n, 1, dtype=torch.float64, generator=g_)
    eps = torch.randn(n, 1, dtype=torch.float64, generator=g_)
    g = dmd_gradient(x0, _gauss(0.0), _gauss(0.0), 0.5, eps)
    assert abs(g.mean().item()) < 1e-9


def test_zero_level_raises(rng):
    x0 = torch.randn(4, 1, dtype=torch.float64, generator=rng)
    with pytest.raises(ZeroDivisionError):
        dmd_gradient(x0, _gauss(0.0), _gauss(1.0), 0.0, torch.randn_like(x0))


def test_gradient_is_detached_and_surrogate_routes_it(rng):
    x0 = torch.randn(8, 2, dtype=torch.float64, generator=rng, requires_grad=True)
    eps = torch.randn(8, 2, dtype=torch.float64, generator=rng)
    g = dmd_gradient(x0, _gauss(0.0), _gauss(1.0), 0.5, eps)
    assert not g.requires_grad
    (grad,) = torch.autograd.grad(dmd_surrogate(x0, g), x0)
    assert torch.allclose(grad, g / g.numel(), atol=1e-15)


def test_normalized_gradient_has_unit_mean_magnitude(rng):
    x0 = torch.randn(8, 2, 3, dtype=torch.float64, generator=rng)
    eps = torch.randn_like(x0)
    g = dmd_gradient(x0, _gauss(0.0), _gauss(1.0, 2.0), 0.5, eps, normalize=True)
    assert torch.allclose(g.abs().mean(dim=(1, 2)), torch.ones(8, dtype=torch.float64), atol=1e-6)


def test_curriculum_ceiling_anneals():
    cfg = Phase1Config(curriculum_start=0.6, t_hi=0.98, curriculum_steps=10)
    assert perturbation_ceiling(cfg, 0) == pytest.approx(0.6)
    assert perturbation_ceiling(cfg, 5) == pytest.approx(0.79)
    assert perturbation_ceiling(cfg, 50) == pytest.approx(0.98)
    assert perturbation_ceiling(Phase1Config(curriculum=False), 0) == 0.98


def test_zero_steps_returns_teacher_copy(clips):
    teacher = _teacher()
    state = train_phase1(Phase1Config(**{**TINY, "steps": 0}), teacher, clips)
    assert parameter_checksum(state.generator) == parameter_checksum(teacher)


def test_zero_learning_rates_are_a_no_op(clips):
    teacher = _teacher()
    state = train_phase1(Phase1Config(**{**TINY, "lr": 0.0, "fake_lr": 0.0}), teacher, clips)
    assert parameter_checksum(state.generator) == parameter_checksum(teacher)


def test_training_leaves_teacher_and_real_model_untouched(clips):
    teacher = _teacher()
    before = parameter_checksum(teacher)
    state = train_phase1(Phase1Config(**TINY), teacher, clips)
    assert parameter_checksum(teacher) == before
    assert parameter_checksum(state.real) == before
    assert parameter_checksum(state.generator) != before


def test_fake_model_only_moves_adapters(clips):
    teacher = _teacher()
    state = train_phase1(Phase1Config(**TINY), teacher, clips)
    base = {k: v for k, v in state.fake.state_dict().items() if "lora_" not in k}
    ref = teacher.state_dict()
    for name, value in base.items():
        assert torch.equal(value, ref[name.replace(".base.", ".")])


def test_same_seed_is_deterministic(clips):
    a = train_phase1(Phase1Config(**TINY), _teacher(), clips, seed=5)
    b = train_phase1(Phase1Config(**TINY), _teacher(), clips, seed=5)
    assert parameter_checksum(a.generator) == parameter_checksum(b.generator)


def test_step_metrics_and_extra_loss(clips):
    state = make_priming_state(_teacher(), Phase1Config(**TINY))
    calls = []

    def extra(x0, cond):
        calls.append(x0.shape)
        return 0.0 * x0.sum()

    m = priming_step(state, clips, torch.Generator().manual_seed(0), extra)
    assert calls == [clips.video.shape]
    assert set(m) >= {"step", "dmd_loss", "fake_loss", "grad_norm", "t_hi"}
    assert state.last_x0.shape == clips.video.shape and not state.last_x0.requires_grad


def test_run_phase1_writes_checkpoint_and_metrics(tmp_path, clips):
    teacher_path = save_checkpoint(_teacher(), tmp_path / "teacher.pt", role="teacher")
    path = run_phase1(Phase1Config(**TINY), teacher_path, clips, tmp_path / "p1", seed=0)
    model, meta = load_checkpoint(path)
    assert meta["role"] == "phase1" and meta["step"] == 3
    assert meta["teacher_path"] == str(teacher_path)
    assert len(read_metrics(tmp_path / "p1" / "metrics.jsonl")) == 3
    json.dumps(meta)
