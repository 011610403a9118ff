"""Checkpoint files: one ``.pt`` container plus a JSON sidecar per model."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Optional, Tuple, Union

import torch
from torch import nn

from .velocity import NetConfig, VelocityNet


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    model: VelocityNet,
    path: Union[str, Path],
    role: str,
    step: int = 0,
    seed: Optional[int] = None,
    extra: Optional[dict] = None,
) -> Path:
    """Write ``path`` (state dict) and ``path.json`` (architecture + metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(model.state_dict(), tmp)
    os.replace(tmp, path)
    meta = {
        "architecture": model.config.to_dict(),
        "role": role,
        "step": step,
        "seed": seed,
        "checksum": parameter_checksum(model),
    }
    if extra:
        meta.update(extra)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[VelocityNet, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    model = VelocityNet(NetConfig.from_dict(meta["architecture"]))
    model.load_state_dict(torch.load(path))
    model.eval()
    return model, meta
