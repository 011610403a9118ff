"""Desk-scale evaluation: distribution distances, temporal proxies,
condition fidelity, NFE/latency accounting and a composite score.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .flow_core import CountingField, euler_sample

COMPOSITE_WEIGHTS = {
    "sliced_wasserstein": 0.4,
    "subject_consistency": 0.2,
    "motion_smoothness": 0.2,
    "condition_mse": 0.2,
}


def _as_2d(x) -> np.ndarray:
    a = x.detach().cpu().double().numpy() if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    return a.reshape(a.shape[0], -1)


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact W1 between empirical distributions, column-wise.

    ``a`` is (n, P), ``b`` is (m, P); returns (P,). Works for n != m by
    integrating the gap between the two quantile functions.
    """
    a = np.sort(a, axis=0)
    b = np.sort(b, axis=0)
    n, m = a.shape[0], b.shape[0]
    if n == m:
        return np.abs(a - b).mean(axis=0)
    cuts = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    widths = np.diff(np.concatenate([[0.0], cuts]))
    mids = cuts - widths / 2
    ia = np.minimum((mids * n).astype(int), n - 1)
    ib = np.minimum((mids * m).astype(int), m - 1)
    return (widths[:, None] * np.abs(a[ia] - b[ib])).sum(axis=0)


def random_directions(dim: int, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((dim, n))
    return v / np.linalg.norm(v, axis=0, keepdims=True)


def sliced_wasserstein(A, B, n_projections: int = 256, seed: int = 0) -> float:
    """Mean 1-D Wasserstein-1 distance over random unit projections."""
    a, b = _as_2d(A), _as_2d(B)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples per set")
    if a.shape[1] == 1:
        return float(wasserstein_1d(a, b)[0])
    dirs = random_directions(a.shape[1], n_projections, seed)
    return float(wasserstein_1d(a @ dirs, b @ dirs).mean())


def _pairwise_sq(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2 * x @ y.T
    return np.maximum(d, 0.0)


def median_bandwidth(A, B) -> float:
    pooled = np.concatenate([_as_2d(A), _as_2d(B)])
    d = _pairwise_sq(pooled, pooled)
    off = d[~np.eye(len(pooled), dtype=bool)]
    med = float(np.median(off))
    return math.sqrt(med / 2) if med > 0 else 1.0


def mmd_rbf(A, B, bandwidth: Optional[float] = None, unbiased: bool = False) -> float:
    """Squared MMD with an RBF kernel ``exp(-d^2 / (2 h^2))``.

    ``h`` defaults to the median heuristic on the pooled sample. The biased
    estimator is always non-negative.
    """
    a, b = _as_2d(A), _as_2d(B)
    h = bandwidth if bandwidth is not None else median_bandwidth(a, b)
    kxx = np.exp(-_pairwise_sq(a, a) / (2 * h * h))
    kyy = np.exp(-_pairwise_sq(b, b) / (2 * h * h))
    kxy = np.exp(-_pairwise_sq(a, b) / (2 * h * h))
    n, m = len(a), len(b)
    if unbiased:
        xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
        yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
        return float(xx + yy - 2 * kxy.mean())
    return float(max(kxx.mean() + kyy.mean() - 2 * kxy.mean(), 0.0))


def random_features(x, n_features: int = 128, seed: int = 0) -> np.ndarray:
    """Fixed seeded random-projection feature map ``tanh(x W / sqrt(d))``."""
    a = _as_2d(x)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((a.shape[1], n_features))
    return np.tanh(a @ w / math.sqrt(a.shape[1]))


def _frame_correlation(a: Tensor, b: Tensor) -> Tensor:
    """Pearson correlation of flattened frames; rows are (N, D)."""
    a = a - a.mean(1, keepdim=True)
    b = b - b.mean(1, keepdim=True)
    na, nb = a.norm(dim=1), b.norm(dim=1)
    corr = (a * b).sum(1) / (na * nb).clamp_min(1e-12)
    # constant frames: correlated iff both constant
    both_flat = (na < 1e-12) & (nb < 1e-12)
    return torch.where(both_flat, torch.ones_like(corr), corr)


def temporal_metrics(videos: Tensor) -> Dict[str, float]:
    """Motion smoothness, subject consistency and dynamic degree.

    ``motion_smoothness`` is the mean squared second temporal difference per
    element (lower is smoother); ``subject_consistency`` the mean Pearson
    correlation of adjacent frames; ``dynamic_degree`` the mean squared first
    temporal difference per element.
    """
    if videos.ndim != 5:
        raise ValueError("expected (B, F, C, H, W)")
    B, Fr = videos.shape[:2]
    if Fr < 3:
        raise ValueError("temporal metrics need at least 3 frames")
    v = videos.double()
    second = v[:, 2:] - 2 * v[:, 1:-1] + v[:, :-2]
    first = v[:, 1:] - v[:, :-1]
    flat = v.reshape(B, Fr, -1)
    corr = _frame_correlation(flat[:, :-1].reshape(B * (Fr - 1), -1), flat[:, 1:].reshape(B * (Fr - 1), -1))
    return {
        "motion_smoothness": float(second.pow(2).mean()),
        "subject_consistency": float(corr.mean()),
        "dynamic_degree": float(first.pow(2).mean()),
    }


def condition_fidelity(videos: Tensor, conditions: Tensor) -> float:
    """MSE between generated frame 0 and the condition frame."""
    if videos.shape[0] != conditions.shape[0] or videos.shape[2:] != conditions.shape[1:]:
        raise ValueError("conditions do not align with the video batch")
    return float((videos[:, 0].double() - conditions.double()).pow(2).mean())


@dataclass
class EvalReport:
    sliced_wasserstein: float
    mmd_rbf: float
    motion_smoothness: float
    subject_consistency: float
    condition_mse: float
    dynamic_degree: float
    nfe: int
    wall_time_s: float
    composite: float = float("nan")
    feature_sw: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        names = {f.name for f in fields(cls)}
        missing = {"sliced_wasserstein", "subject_consistency", "motion_smoothness", "condition_mse"} - set(d)
        if missing:
            raise KeyError(f"report is missing fields: {sorted(missing)}")
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class Normalizers:
    """Per-dataset scales, frozen from the teacher's many-step run."""

    sliced_wasserstein: float
    motion_smoothness: float
    condition_mse: float

    @classmethod
    def from_report(cls, report: EvalReport, floor: float = 1e-6) -> "Normalizers":
        return cls(
            max(report.sliced_wasserstein, floor),
            max(report.motion_smoothness, floor),
            max(report.condition_mse, floor),
        )


def _squash(value: float, scale: float) -> float:
    # monotone map of [0, inf) onto [0, 1); equals 0.5 at value == scale
    return value / (value + scale)


def composite_score(report, normalizers: Normalizers, weights: Optional[dict] = None) -> float:
    """Fixed weighted aggregate, higher is better.

    ``0.4 (1 - n(SW)) + 0.2 consistency + 0.2 (1 - n(smoothness)) +
    0.2 (1 - n(condition MSE))`` with ``n(v) = v / (v + scale)`` and scales
    taken from the teacher's many-step run.
    """
    w = weights or COMPOSITE_WEIGHTS
    r = report.to_dict() if isinstance(report, EvalReport) else dict(report)
    for key in w:
        if key not in r or r[key] is None:
            raise KeyError(f"report is missing {key!r}")
    return (
        w["sliced_wasserstein"] * (1 - _squash(r["sliced_wasserstein"], normalizers.sliced_wasserstein))
        + w["subject_consistency"] * r["subject_consistency"]
        + w["motion_smoothness"] * (1 - _squash(r["motion_smoothness"], normalizers.motion_smoothness))
        + w["condition_mse"] * (1 - _squash(r["condition_mse"], normalizers.condition_mse))
    )


def nfe_for(steps: int, guided: bool = False) -> int:
    """NFE convention: one call per step, two under classifier-free guidance."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return 2 * steps if guided else steps


def latency_report(
    model,
    steps_list: Sequence[int],
    x_T: Tensor,
    cond: Any = None,
    guidance_scale: Optional[float] = None,
    repeats: int = 3,
) -> List[dict]:
    """Time Euler sampling at each step count on a fixed batch.

    Wall time is the minimum over ``repeats`` runs; NFE is counted from the
    actual number of model calls.
    """
    rows = []
    for steps in steps_list:
        if steps < 1:
            raise ValueError("steps must be >= 1")
        best = math.inf
        nfe = 0
        for _ in range(repeats):
            counter = CountingField(model)
            start = time.perf_counter()
            with torch.no_grad():
                euler_sample(counter, x_T, steps, cond, guidance_scale=guidance_scale)
            best = min(best, time.perf_counter() - start)
            nfe = counter.nfe
        expected = nfe_for(steps, guidance_scale is not None)
        if nfe != expected:
            raise AssertionError(f"counted {nfe} evaluations, expected {expected}")
        rows.append({"steps": steps, "nfe": nfe, "wall_time_s": best})
    return rows


def evaluate_samples(
    samples: Tensor,
    reference: Tensor,
    conditions: Tensor,
    nfe: int,
    wall_time_s: float = 0.0,
    n_projections: int = 256,
    projection_seed: int = 0,
    normalizers: Optional[Normalizers] = None,
) -> EvalReport:
    """Full report for a batch of generated clips against real clips."""
    tm = temporal_metrics(samples)
    fa = random_features(samples, seed=projection_seed)
    fb = random_features(reference, seed=projection_seed)
    report = EvalReport(
        sliced_wasserstein=sliced_wasserstein(samples, reference, n_projections, projection_seed),
        mmd_rbf=mmd_rbf(fa, fb),
        motion_smoothness=tm["motion_smoothness"],
        subject_consistency=tm["subject_consistency"],
        condition_mse=condition_fidelity(samples, conditions),
        dynamic_degree=tm["dynamic_degree"],
        nfe=nfe,
        wall_time_s=wall_time_s,
        feature_sw=sliced_wasserstein(fa, fb, n_projections, projection_seed),
    )
    if normalizers is not None:
        report.composite = composite_score(report, normalizers)
    return report


@torch.no_grad()
def sample_model(model, cond, shape, steps: int, seed: int, batch_size: int = 256) -> Tensor:
    """Euler samples for every condition in ``cond`` from seeded noise."""
    g = torch.Generator().manual_seed(seed)
    noise = torch.randn(shape, generator=g)
    outs = []
    for i in range(0, shape[0], batch_size):
        sl = slice(i, i + batch_size)
        outs.append(euler_sample(model, noise[sl], steps, cond.index(sl)))
    return torch.cat(outs)
