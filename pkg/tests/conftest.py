import pytest
import torch

from pose_distill.flow_core import broadcast_level


def std_normal_velocity(x_t, t, cond=None):
    """Optimal velocity for N(0, 1) data: ``(2t - 1) x / ((1 - t)^2 + t^2)``."""
    tb = broadcast_level(t, x_t)
    return (2 * tb - 1) * x_t / ((1 - tb) ** 2 + tb**2)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


TINY_OVERRIDES = {
    "name": "tiny",
    "data": {"blob": {"frames": 4, "height": 8, "width": 8, "radius": 1.5},
             "n_train": 16, "n_val": 8, "mix_steps": 2},
    "net": {"dim": 16, "depth": 2, "heads": 2},
    "teacher": {"steps": 4, "batch_size": 4, "warmup": 1, "validate_samples": 4},
    "phase1": {"steps": 2, "batch_size": 4, "fake_updates": 1, "curriculum_steps": 1},
    "phase2": {"steps": 2, "batch_size": 4, "n_queries": 2},
    "baseline": {"steps": 2, "batch_size": 4, "ode_points": 4, "fake_updates": 1},
    "eval": {"steps": [1, 2], "n_projections": 8, "latency_batch": 2, "latency_repeats": 1, "keep_samples": 2},
    "seeds": [0],
}


@pytest.fixture
def tiny_overrides():
    import copy

    return copy.deepcopy(TINY_OVERRIDES)


@pytest.fixture
def tiny_spec(tiny_overrides):
    from pose_distill.runner.config import resolve

    return resolve(tiny_overrides)


ACCEPTANCE_LINES = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
