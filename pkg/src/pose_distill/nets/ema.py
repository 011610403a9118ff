"""Exponential moving averages of parameter sets."""

from __future__ import annotations

import copy
from typing import Iterable, Union

import torch
from torch import Tensor, nn

Params = Union[nn.Module, Iterable[Tensor]]


def _tensors(params: Params) -> list:
    if isinstance(params, nn.Module):
        return list(params.parameters())
    return list(params)


@torch.no_grad()
def ema_update(shadow: Params, live: Params, decay: float) -> None:
    """In place ``shadow <- decay * shadow + (1 - decay) * live`` per tensor."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    s_list, l_list = _tensors(shadow), _tensors(live)
    if len(s_list) != len(l_list):
        raise ValueError("shadow and live parameter sets differ in length")
    for s, l in zip(s_list, l_list):
        if s.shape != l.shape:
            raise ValueError(f"parameter shape mismatch: {tuple(s.shape)} vs {tuple(l.shape)}")
        if decay == 1.0:
            continue
        if decay == 0.0:
            s.copy_(l)
        else:
            s.mul_(decay).add_(l, alpha=1.0 - decay)


class EmaShadow:
    """Frozen trailing copy of a module.

    The shadow never receives gradients; it only moves through ``update``.
    ``decay=1`` freezes it, ``decay=0`` makes it track the live model exactly.
    """

    def __init__(self, model: nn.Module, decay: float = 0.995):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        self.decay = decay
        self.module = copy.deepcopy(model)
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.updates = 0

    def update(self, live: nn.Module) -> nn.Module:
        ema_update(self.module, live, self.decay)
        with torch.no_grad():
            for s, l in zip(self.module.buffers(), live.buffers()):
                s.copy_(l)
        self.updates += 1
        return self.module

    def __call__(self, *args, **kwargs):
        return self.module(*args, **kwargs)

    def state_dict(self) -> dict:
        return {"decay": self.decay, "updates": self.updates, "module": self.module.state_dict()}


def backbone_refresh(generator: nn.Module, shadow: EmaShadow) -> nn.Module:
    """Pull the discriminator backbone toward the generator after its update."""
    return shadow.update(generator)
