import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pose_distill.synth_data import (
    BlobConfig,
    ClipSet,
    GaussianMixture,
    PerturbationSpec,
    SceneAttributes,
    circular_centroid,
    forward_fill,
    make_gaussian_toy,
    make_moving_blob,
    perturb_spatiotemporal,
    temporal_walk,
)


def test_blob_clips_have_expected_layout():
    cfg = BlobConfig()
    clips = make_moving_blob(cfg, 6, seed=1)
    assert clips.video.shape == (6, 8, 1, 16, 16)
    assert clips.video.min() >= -1 and clips.video.max() <= 1
    assert torch.equal(clips.condition_frame, clips.video[:, 0])
    assert torch.equal(clips.mask[:, 0], torch.ones(6))
    assert torch.equal(clips.mask[:, 1:], torch.zeros(6, 7))


def test_same_seed_is_bit_identical():
    a = make_moving_blob(BlobConfig(), 5, seed=3)
    b = make_moving_blob(BlobConfig(), 5, seed=3)
    assert torch.equal(a.video, b.video) and torch.equal(a.attrs, b.attrs)
    c = make_moving_blob(BlobConfig(), 5, seed=4)
    assert not torch.equal(a.video, c.video)


def test_zero_speed_gives_static_frames():
    clips = make_moving_blob(BlobConfig(speeds=(0.0,)), 4, seed=0)
    assert torch.equal(clips.video, clips.video[:, :1].expand_as(clips.video))


def test_centroid_advances_two_pixels_per_frame():
    cfg = BlobConfig(speeds=(2.0,), n_directions=8, n_shapes=1)
    clips = make_moving_blob(cfg, 40, seed=5)
    rightward = (clips.attrs[:, 1] == 0).nonzero().flatten()
    assert len(rightward) > 0
    for i in rightward.tolist():
        c = circular_centroid(clips.video[i, :, 0])
        dx = torch.remainder(c[1:, 0] - c[:-1, 0] + 8, 16) - 8
        assert torch.all((dx - 2.0).abs() < 0.5)
        dy = torch.remainder(c[1:, 1] - c[:-1, 1] + 8, 16) - 8
        assert torch.all(dy.abs() < 0.5)


@pytest.mark.parametrize(
    "kwargs",
    [dict(radius=8.0), dict(frames=1), dict(height=4, width=4, radius=1.0), dict(speeds=(-1.0,)), dict(mask_frames=(1,))],
)
def test_invalid_blob_configs_raise(kwargs):
    with pytest.raises(ValueError):
        BlobConfig(**kwargs)


def test_scene_attributes_validation():
    SceneAttributes(0, (1.0, 0.0), 1.0, 0)
    with pytest.raises(ValueError):
        SceneAttributes(0, (1.0, 1.0), 1.0, 0)
    with pytest.raises(ValueError):
        SceneAttributes(0, (0.0, 1.0), -1.0, 0)


def test_attributes_roundtrip():
    clips = make_moving_blob(BlobConfig(), 3, seed=2)
    a = clips.attributes(1)
    assert abs(math.hypot(*a.motion_direction) - 1) < 1e-9
    assert a.speed in BlobConfig().speeds


def test_discontinuous_mask_forward_fills():
    cfg = BlobConfig(mask_frames=(0, 7))
    clips = make_moving_blob(cfg, 2, seed=0)
    cond = clips.condition()
    assert torch.equal(cond.frames[:, 3], clips.video[:, 0])
    assert torch.equal(cond.frames[:, 7], clips.video[:, 7])
    v = torch.arange(4.0).view(1, 4, 1, 1, 1)
    m = torch.tensor([[1.0, 0.0, 1.0, 0.0]])
    assert forward_fill(v, m).flatten().tolist() == [0.0, 0.0, 2.0, 2.0]


def test_clipset_save_and_load(tmp_path):
    clips = make_moving_blob(BlobConfig(), 4, seed=7)
    clips.save(tmp_path / "clips")
    assert (tmp_path / "clips" / "manifest.json").exists()
    back = ClipSet.load(tmp_path / "clips")
    assert torch.equal(back.video, clips.video)
    assert torch.equal(back.attrs, clips.attrs)
    assert back.config == clips.config and back.seed == 7


def test_gaussian_toy_single_component_mean():
    n = 100_000
    toy = make_gaussian_toy(1, [(1.0, 0.0, 1.0)], n, seed=0)
    assert abs(toy.samples.mean().item()) < 3 / math.sqrt(n)


def test_gaussian_toy_symmetric_mixture_mean():
    n = 100_000
    toy = make_gaussian_toy(1, [(0.5, -2.0, 1.0), (0.5, 2.0, 1.0)], n, seed=1)
    stderr = toy.samples.std().item() / math.sqrt(n)
    assert abs(toy.samples.mean().item()) < 3 * stderr


def test_gaussian_score_formula():
    toy = make_gaussian_toy(1, [(1.0, 1.0, 1.0)], 10, seed=0)
    assert toy.score(torch.zeros(1, 1)).item() == pytest.approx(1.0)


def test_mixture_score_matches_autograd_log_prob():
    mix = GaussianMixture([0.3, 0.7], [[-1.0, 0.5], [2.0, 0.0]], [[0.5, 1.0], [1.5, 0.2]])
    x = torch.randn(16, 2, dtype=torch.float64, requires_grad=True)
    for t in (0.0, 0.3, 0.9):
        (g,) = torch.autograd.grad(mix.log_prob(x, t).sum(), x)
        assert torch.allclose(mix.score(x.detach(), t), g, atol=1e-10)


def test_mixture_velocity_consistent_with_score():
    mix = GaussianMixture([0.4, 0.6], [[-1.0], [1.5]], [[0.3], [0.8]])
    x = torch.linspace(-3, 3, 25, dtype=torch.float64).unsqueeze(1)
    for t in (0.2, 0.5, 0.8):
        s = mix.score(x, t)
        v = mix.velocity(x, t)
        # s = -(x + (1 - t) v) / t
        assert torch.allclose(s, -(x + (1 - t) * v) / t, atol=1e-10)


@pytest.mark.parametrize(
    "params",
    [
        [(0.5, 0.0, 1.0), (0.6, 1.0, 1.0)],
        [(1.0, 0.0, -1.0)],
        [(1.0, 0.0, 0.0)],
    ],
)
def test_invalid_mixture_raises(params):
    with pytest.raises(ValueError):
        make_gaussian_toy(1, params, 10, seed=0)


def test_zero_perturbation_is_identity():
    x = torch.randn(2, 4, 1, 3, 3)
    p = perturb_spatiotemporal(x, PerturbationSpec(0.0, 0.0, 0.0), 0.7)
    assert torch.equal(p.x_pert, x)
    assert torch.equal(p.t_pert, torch.full((2,), 0.7))


def test_temporal_only_perturbation_is_constant_within_frames(rng):
    x = torch.randn(3, 5, 2, 4, 4)
    p = perturb_spatiotemporal(x, PerturbationSpec(0.0, 0.5, 0.0), 0.5, rng)
    delta = (p.x_pert - x).flatten(2)
    assert torch.all(delta.var(dim=2) < 1e-12)
    assert delta.abs().max() > 0


def test_spatial_noise_energy_chi_square(rng):
    x = torch.zeros(1, 4, 4, 16, 16, dtype=torch.float64)  # 4096 elements
    p = perturb_spatiotemporal(x, PerturbationSpec(1.0, 0.0, 0.0), 0.5, rng)
    energy = p.eps_s.pow(2).sum().item()
    assert abs(energy - 4096) / 4096 < 0.05


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 0.5), st.floats(0.01, 1.0), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_perturbation_decomposes_and_keeps_level_in_range(ss, stt, tj, t, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 4, 1, 3, 3, dtype=torch.float64, generator=g)
    p = perturb_spatiotemporal(x, PerturbationSpec(ss, stt, tj), t, g)
    assert torch.allclose(p.x_pert - x, p.eps_s + p.eps_t, atol=1e-12, rtol=0)
    assert torch.all(p.t_pert > 0) and torch.all(p.t_pert <= 1)


def test_perturbation_spec_rejects_negative():
    with pytest.raises(ValueError):
        PerturbationSpec(-0.1, 0.0, 0.0)


def test_temporal_walk_is_smoothed_cumsum():
    g = torch.Generator().manual_seed(0)
    w = temporal_walk(2, 6, g, torch.float64)
    g = torch.Generator().manual_seed(0)
    c = torch.randn(2, 6, generator=g, dtype=torch.float64).cumsum(1)
    assert torch.allclose(w[:, 2], (c[:, 1] + c[:, 2] + c[:, 3]) / 3)
    assert torch.allclose(w[:, 0], (2 * c[:, 0] + c[:, 1]) / 3)
