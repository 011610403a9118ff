"""Low-rank adapters on linear layers."""

from __future__ import annotations

import copy
import math
from typing import Iterable, List

import torch
from torch import Tensor, nn

DEFAULT_TARGETS = ("qkv", "proj", "fc1", "fc2")


class LoRALinear(nn.Module):
    """``W x + b + (alpha / r) B A x`` with ``W, b`` frozen.

    ``B`` starts at zero so the adapted layer reproduces the base layer
    exactly at initialisation.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        d_out, d_in = base.weight.shape
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if rank > min(d_in, d_out):
            raise ValueError(f"LoRA rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = alpha / rank
        w = base.weight
        self.lora_A = nn.Parameter(torch.empty(rank, d_in, dtype=w.dtype, device=w.device))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=w.dtype, device=w.device))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    def effective_weight(self) -> Tensor:
        return self.base.weight + self.scale * self.lora_B @ self.lora_A

    def forward(self, x: Tensor) -> Tensor:
        return self.base(x) + self.scale * ((x @ self.lora_A.t()) @ self.lora_B.t())


def lora_attach(
    base: nn.Module,
    rank: int = 4,
    alpha: float | None = None,
    targets: Iterable[str] = DEFAULT_TARGETS,
) -> nn.Module:
    """Return a copy of ``base`` whose targeted linear layers carry adapters.

    Every parameter of the copy except the adapters is frozen; ``base`` itself
    is left untouched. ``alpha`` defaults to ``rank`` (unit scale).
    """
    if rank < 1:
        raise ValueError("LoRA rank must be >= 1")
    alpha = float(rank if alpha is None else alpha)
    targets = tuple(targets)
    model = copy.deepcopy(base)
    for p in model.parameters():
        p.requires_grad_(False)
    replaced = 0
    for name, module in list(model.named_modules()):
        for child_name, child in list(module.named_children()):
            if isinstance(child, nn.Linear) and child_name in targets:
                setattr(module, child_name, LoRALinear(child, rank, alpha))
                replaced += 1
    if replaced == 0:
        raise ValueError(f"no linear layers named {targets} found")
    return model


def lora_parameters(model: nn.Module) -> List[nn.Parameter]:
    return [p for n, p in model.named_parameters() if n.endswith(("lora_A", "lora_B"))]
