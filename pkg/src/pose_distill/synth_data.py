"""Synthetic data: moving-blob clips, Gaussian-mixture toys, and the
structured spatial/temporal perturbations used by the ST-R1 penalty.

Clips are rank-5 tensors ``(batch, frames, channels, height, width)`` with
values in ``[-1, 1]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import Tensor

SHAPES = ("disk", "square", "diamond", "cross")
ATTRIBUTE_FIELDS = ("shape", "direction", "speed", "color")


@dataclass(frozen=True)
class BlobConfig:
    frames: int = 8
    height: int = 16
    width: int = 16
    channels: int = 1
    n_shapes: int = 4
    n_directions: int = 8
    speeds: tuple = (1.0, 2.0)
    # intensity per color id; multi-channel clips repeat it across channels
    colors: tuple = (0.0, 0.5, 1.0)
    radius: float = 2.5
    background: float = -1.0
    # frames supplied as conditions (1 in the mask)
    mask_frames: tuple = (0,)
    # attribute fields exposed to the networks as the "text" condition
    text_fields: tuple = ("shape", "direction", "color")

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("need at least 2 frames")
        if min(self.height, self.width) < 8:
            raise ValueError("resolution must be at least 8x8")
        if not 1 <= self.n_shapes <= len(SHAPES):
            raise ValueError(f"n_shapes must be in [1, {len(SHAPES)}]")
        if 2 * self.radius >= min(self.height, self.width):
            raise ValueError("blob is larger than the frame")
        if any(s < 0 for s in self.speeds):
            raise ValueError("speeds must be non-negative")
        if 0 not in self.mask_frames or any(not 0 <= f < self.frames for f in self.mask_frames):
            raise ValueError("mask must include frame 0 and stay within the clip")
        for name in self.text_fields:
            if name not in ATTRIBUTE_FIELDS:
                raise ValueError(f"unknown attribute field {name!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "BlobConfig":
        d = dict(d)
        for key in ("speeds", "colors", "mask_frames", "text_fields"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def cardinality(self, name: str) -> int:
        return {
            "shape": self.n_shapes,
            "direction": self.n_directions,
            "speed": len(self.speeds),
            "color": len(self.colors),
        }[name]

    @property
    def text_cardinalities(self) -> tuple:
        return tuple(self.cardinality(n) for n in self.text_fields)

    def direction(self, k: int) -> tuple:
        angle = 2 * math.pi * k / self.n_directions
        return (math.cos(angle), math.sin(angle))


@dataclass(frozen=True)
class SceneAttributes:
    shape_class: int
    motion_direction: tuple
    speed: float
    color: int

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        if abs(math.hypot(*self.motion_direction) - 1.0) > 1e-9:
            raise ValueError("motion direction must have unit norm")


@dataclass
class Condition:
    """Everything a network is conditioned on.

    ``frames`` holds the conditional frames forward-filled along time: with the
    default first-frame mask it is the first frame replicated over all frames.
    """

    frames: Tensor  # (B, F, C, H, W)
    mask: Tensor  # (B, F), 1 = conditional frame
    attrs: Tensor  # (B, K) categorical ids of the text fields

    @property
    def frame(self) -> Tensor:
        return self.frames[:, 0]

    def __len__(self) -> int:
        return self.frames.shape[0]

    def index(self, idx) -> "Condition":
        return Condition(self.frames[idx], self.mask[idx], self.attrs[idx])

    def to(self, dtype: torch.dtype) -> "Condition":
        """Cast the floating tensors; attribute ids stay integral."""
        return Condition(self.frames.to(dtype), self.mask.to(dtype), self.attrs)

    def repeat(self, n: int) -> "Condition":
        return Condition(
            self.frames.repeat_interleave(n, 0),
            self.mask.repeat_interleave(n, 0),
            self.attrs.repeat_interleave(n, 0),
        )


def forward_fill(video: Tensor, mask: Tensor) -> Tensor:
    """Replace every unmasked frame by the latest masked frame before it."""
    out = video.clone()
    for f in range(1, video.shape[1]):
        keep = mask[:, f].bool()
        out[~keep, f] = out[~keep, f - 1]
    return out


@dataclass
class ClipSet:
    """A batch of conditioned clips.

    ``attrs`` columns follow ``ATTRIBUTE_FIELDS``: shape id, direction id,
    speed id, color id.
    """

    video: Tensor
    attrs: Tensor
    mask: Tensor
    config: BlobConfig
    seed: int = 0
    origins: Optional[Tensor] = None

    def __len__(self) -> int:
        return self.video.shape[0]

    @property
    def condition_frame(self) -> Tensor:
        return self.video[:, 0]

    def text_attrs(self, idx=slice(None)) -> Tensor:
        cols = [ATTRIBUTE_FIELDS.index(n) for n in self.config.text_fields]
        return self.attrs[idx][:, cols]

    def condition(self, idx=slice(None)) -> Condition:
        video, mask = self.video[idx], self.mask[idx]
        return Condition(forward_fill(video, mask), mask, self.text_attrs(idx))

    def subset(self, idx) -> "ClipSet":
        origins = None if self.origins is None else self.origins[idx]
        return ClipSet(self.video[idx], self.attrs[idx], self.mask[idx], self.config, self.seed, origins)

    def attributes(self, i: int) -> SceneAttributes:
        s, d, v, c = (int(a) for a in self.attrs[i])
        return SceneAttributes(s, self.config.direction(d), float(self.config.speeds[v]), c)

    def save(self, directory: Union[str, Path]) -> Path:
        """Write ``clips.pt`` plus a JSON manifest into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save({"video": self.video, "attrs": self.attrs, "mask": self.mask}, directory / "clips.pt")
        manifest = {
            "shape": list(self.video.shape),
            "dtype": str(self.video.dtype).replace("torch.", ""),
            "seed": self.seed,
            "config": asdict(self.config),
            "attribute_fields": list(ATTRIBUTE_FIELDS),
            "attributes": self.attrs.tolist(),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "ClipSet":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        tensors = torch.load(directory / "clips.pt")
        return cls(
            tensors["video"],
            tensors["attrs"],
            tensors["mask"],
            BlobConfig.from_dict(manifest["config"]),
            manifest["seed"],
        )


def _shape_distance(shape: int, dx: Tensor, dy: Tensor) -> Tensor:
    name = SHAPES[shape]
    if name == "disk":
        return torch.sqrt(dx**2 + dy**2)
    if name == "square":
        return torch.maximum(dx.abs(), dy.abs()) * 1.15
    if name == "diamond":
        return (dx.abs() + dy.abs()) * 0.8
    # plus-shaped cross: thin arms, measured along the thinner axis
    arm = torch.minimum(dx.abs(), dy.abs()) * 2.2
    return torch.maximum(arm, torch.maximum(dx.abs(), dy.abs()))


def render_frames(config: BlobConfig, shape: int, color: int, centers: Tensor) -> Tensor:
    """Render one clip given per-frame blob centres ``(F, 2)`` as (x, y).

    Distances wrap toroidally; edges are anti-aliased over one pixel.
    """
    H, W = config.height, config.width
    ys = torch.arange(H, dtype=torch.float64).view(1, H, 1)
    xs = torch.arange(W, dtype=torch.float64).view(1, 1, W)
    cx = centers[:, 0].view(-1, 1, 1)
    cy = centers[:, 1].view(-1, 1, 1)
    dx = torch.remainder(xs - cx + W / 2, W) - W / 2
    dy = torch.remainder(ys - cy + H / 2, H) - H / 2
    dist = _shape_distance(shape, dx, dy)
    coverage = (config.radius - dist + 0.5).clamp(0.0, 1.0)
    level = config.colors[color]
    frames = config.background + coverage * (level - config.background)
    return frames.unsqueeze(1).expand(-1, config.channels, -1, -1).float()


def make_moving_blob(config: BlobConfig, n: int, seed: int) -> ClipSet:
    """Render ``n`` clips of a shape translating at constant velocity.

    The blob centre at frame f is ``p0 + f * speed * direction`` with toroidal
    wrap. All randomness comes from ``seed``.
    """
    rng = np.random.default_rng(seed)
    F = config.frames
    shapes = rng.integers(0, config.n_shapes, n)
    dirs = rng.integers(0, config.n_directions, n)
    speeds = rng.integers(0, len(config.speeds), n)
    colors = rng.integers(0, len(config.colors), n)
    origins = rng.uniform(0, 1, (n, 2)) * np.array([config.width, config.height])

    video = torch.empty(n, F, config.channels, config.height, config.width)
    steps = torch.arange(F, dtype=torch.float64).view(F, 1)
    for i in range(n):
        ux, uy = config.direction(int(dirs[i]))
        velocity = torch.tensor([[ux, uy]], dtype=torch.float64) * config.speeds[speeds[i]]
        centers = torch.tensor(origins[i], dtype=torch.float64).view(1, 2) + steps * velocity
        video[i] = render_frames(config, int(shapes[i]), int(colors[i]), centers)

    attrs = torch.from_numpy(np.stack([shapes, dirs, speeds, colors], axis=1)).long()
    mask = torch.zeros(n, F)
    mask[:, list(config.mask_frames)] = 1.0
    return ClipSet(video, attrs, mask, config, seed, torch.from_numpy(origins))


def circular_centroid(frames: Tensor, background: float = -1.0) -> Tensor:
    """Blob centroid per frame on a torus, ``frames`` of shape (F, H, W).

    Returns (F, 2) pixel coordinates (x, y) in ``[0, W) x [0, H)``.
    """
    F, H, W = frames.shape
    weight = (frames.double() - background).clamp_min(0)
    out = torch.empty(F, 2, dtype=torch.float64)
    for axis, size, dim in ((0, W, 2), (1, H, 1)):
        theta = 2 * math.pi * torch.arange(size, dtype=torch.float64) / size
        marg = weight.sum(dim=3 - dim)  # (F, size)
        c = (marg * torch.cos(theta)).sum(1)
        s = (marg * torch.sin(theta)).sum(1)
        out[:, axis] = torch.remainder(torch.atan2(s, c) * size / (2 * math.pi), size)
    return out


# ---------------------------------------------------------------------------
# Gaussian mixture toys
# ---------------------------------------------------------------------------


@dataclass
class GaussianMixture:
    """Diagonal Gaussian mixture with closed-form noised scores and velocities."""

    weights: Tensor  # (K,)
    means: Tensor  # (K, D)
    variances: Tensor  # (K, D)

    def __post_init__(self):
        self.weights = torch.as_tensor(self.weights, dtype=torch.float64).flatten()
        self.means = torch.as_tensor(self.means, dtype=torch.float64)
        self.variances = torch.as_tensor(self.variances, dtype=torch.float64)
        if self.means.ndim == 1:
            self.means = self.means.unsqueeze(1)
        if self.variances.ndim == 1:
            self.variances = self.variances.unsqueeze(1).expand_as(self.means).clone()
        K = self.weights.shape[0]
        if self.means.shape[0] != K or self.variances.shape != self.means.shape:
            raise ValueError("mixture parameter shapes disagree")
        if (self.weights < 0).any() or abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if (self.variances <= 0).any():
            raise ValueError("mixture variances must be positive")

    @property
    def dims(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, generator: Optional[torch.Generator] = None) -> Tensor:
        comp = torch.multinomial(self.weights, n, replacement=True, generator=generator)
        z = torch.randn(n, self.dims, generator=generator, dtype=torch.float64)
        return self.means[comp] + self.variances[comp].sqrt() * z

    def _noised(self, t: float):
        m = (1 - t) * self.means
        v = (1 - t) ** 2 * self.variances + t**2
        return m, v

    def _responsibilities(self, x: Tensor, m: Tensor, v: Tensor) -> Tensor:
        diff = x.unsqueeze(1) - m.unsqueeze(0)  # (N, K, D)
        logp = -0.5 * (diff**2 / v + torch.log(2 * math.pi * v)).sum(-1) + torch.log(self.weights)
        return torch.softmax(logp, dim=1)

    def log_prob(self, x: Tensor, t: float = 0.0) -> Tensor:
        m, v = self._noised(t)
        diff = x.unsqueeze(1) - m.unsqueeze(0)
        logp = -0.5 * (diff**2 / v + torch.log(2 * math.pi * v)).sum(-1) + torch.log(self.weights)
        return torch.logsumexp(logp, dim=1)

    def score(self, x: Tensor, t: float = 0.0) -> Tensor:
        """``grad log p_t(x)`` of the mixture noised to level ``t``."""
        x = x.double()
        m, v = self._noised(t)
        r = self._responsibilities(x, m, v)
        comp = -(x.unsqueeze(1) - m.unsqueeze(0)) / v.unsqueeze(0)
        return (r.unsqueeze(-1) * comp).sum(1)

    def velocity(self, x: Tensor, t: float) -> Tensor:
        """Optimal flow-matching velocity ``E[eps - x0 | x_t = x]``."""
        x = x.double()
        m, v = self._noised(t)
        r = self._responsibilities(x, m, v).unsqueeze(-1)
        centred = x.unsqueeze(1) - m.unsqueeze(0)
        e_eps = t / v * centred
        e_x0 = self.means.unsqueeze(0) + (1 - t) * self.variances / v * centred
        return (r * (e_eps - e_x0)).sum(1)

    def velocity_field(self):
        """Adapter to the ``mu(x_t, t, cond)`` calling convention.

        Accepts tensors of any shape whose trailing size is ``dims`` (or any
        shape at all when ``dims == 1``); levels must be shared by the batch.
        """

        def field(x_t: Tensor, t: Tensor, cond=None) -> Tensor:
            t_val = float(t.flatten()[0]) if isinstance(t, Tensor) else float(t)
            if isinstance(t, Tensor) and t.numel() > 1 and not torch.all(t == t.flatten()[0]):
                return torch.stack(
                    [field(x_t[i : i + 1], t[i : i + 1]).squeeze(0) for i in range(x_t.shape[0])]
                )
            flat = x_t.reshape(-1, self.dims)
            return self.velocity(flat, t_val).reshape(x_t.shape).to(x_t.dtype)

        return field


@dataclass
class GaussianToy:
    samples: Tensor
    mixture: GaussianMixture
    seed: int

    def score(self, x: Tensor, t: float = 0.0) -> Tensor:
        return self.mixture.score(x, t)

    def log_prob(self, x: Tensor, t: float = 0.0) -> Tensor:
        return self.mixture.log_prob(x, t)

    def velocity(self, x: Tensor, t: float) -> Tensor:
        return self.mixture.velocity(x, t)


def make_gaussian_toy(
    dims: int,
    mixture_params: Union[GaussianMixture, dict, Sequence],
    n: int,
    seed: int,
) -> GaussianToy:
    """Draw ``n`` i.i.d. samples from a diagonal Gaussian mixture.

    ``mixture_params`` is a ``GaussianMixture``, a dict with ``weights``,
    ``means`` and ``variances``, or a sequence of ``(weight, mean, variance)``
    triples.
    """
    if isinstance(mixture_params, GaussianMixture):
        mix = mixture_params
    elif isinstance(mixture_params, dict):
        mix = GaussianMixture(mixture_params["weights"], mixture_params["means"], mixture_params["variances"])
    else:
        w, mu, var = zip(*mixture_params)
        means = torch.as_tensor(np.array(mu, dtype=np.float64)).reshape(len(w), -1)
        variances = torch.as_tensor(np.array(var, dtype=np.float64)).reshape(len(w), -1)
        mix = GaussianMixture(list(w), means.expand(-1, dims), variances.expand(-1, dims))
    if mix.dims != dims:
        raise ValueError(f"mixture has {mix.dims} dims, expected {dims}")
    g = torch.Generator().manual_seed(seed)
    return GaussianToy(mix.sample(n, g), mix, seed)


# ---------------------------------------------------------------------------
# Structured perturbations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationSpec:
    sigma_s: float = 0.01
    sigma_t: float = 0.01
    t_jitter: float = 0.01

    def __post_init__(self):
        if min(self.sigma_s, self.sigma_t, self.t_jitter) < 0:
            raise ValueError("perturbation scales must be non-negative")

    @property
    def is_zero(self) -> bool:
        return self.sigma_s == 0 and self.sigma_t == 0


@dataclass
class Perturbation:
    x_pert: Tensor
    t_pert: Tensor
    eps_s: Tensor
    eps_t: Tensor


def temporal_walk(batch: int, frames: int, generator=None, dtype=torch.float32, device="cpu") -> Tensor:
    """Gaussian random walk over frames smoothed by a length-3 moving average.

    Returns (batch, frames). Edges are padded by replication.
    """
    steps = torch.randn(batch, frames, generator=generator, dtype=dtype, device=device)
    walk = steps.cumsum(1)
    padded = torch.cat([walk[:, :1], walk, walk[:, -1:]], dim=1)
    return (padded[:, :-2] + padded[:, 1:-1] + padded[:, 2:]) / 3


def perturb_spatiotemporal(
    x: Tensor,
    spec: PerturbationSpec,
    t,
    generator: Optional[torch.Generator] = None,
) -> Perturbation:
    """Apply ``x + eps_s + eps_t`` and jitter the noise level.

    ``eps_s`` is i.i.d. per-pixel Gaussian noise scaled by ``sigma_s``.
    ``eps_t`` is one offset per frame, constant over that frame's pixels and
    channels, following a smoothed random walk scaled by ``sigma_t``. The
    level becomes ``clamp(t + t_jitter * N(0,1), (0, 1])``.
    """
    B, F = x.shape[:2]
    t_vec = t if isinstance(t, Tensor) else torch.full((B,), float(t), dtype=x.dtype, device=x.device)
    t_vec = t_vec.to(x.dtype)
    if t_vec.ndim == 0:
        t_vec = t_vec.expand(B)
    eps_s = spec.sigma_s * torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    walk = temporal_walk(B, F, generator, x.dtype, x.device)
    eps_t = (spec.sigma_t * walk).view(B, F, *([1] * (x.ndim - 2))).expand_as(x).clone()
    if spec.t_jitter > 0:
        jitter = spec.t_jitter * torch.randn(B, generator=generator, dtype=x.dtype, device=x.device)
        t_pert = (t_vec + jitter).clamp(1e-3, 1.0)
    else:
        t_pert = t_vec.clone()
    return Perturbation(x + (eps_s + eps_t), t_pert, eps_s, eps_t)
