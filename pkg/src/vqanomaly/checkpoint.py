from __future__ import annotations

import os
import tempfile
from pathlib import Path

import torch

from .model import NetworkConfig, VQUNet

FORMAT_TAG = "vqanomaly-checkpoint/1"
# pixel = value * scale + offset maps [0, 255] onto [-1, 1]
NORMALIZATION = {"scale": 1 / 127.5, "offset": -1.0}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, model: VQUNet, optimizer=None, epoch: int = 0, **extra) -> Path:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {
        "format": FORMAT_TAG,
        "network": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "normalization": dict(NORMALIZATION),
        **extra,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(state, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path: str | Path, map_location="cpu") -> tuple[VQUNet, dict]:
    try:
        state = torch.load(path, map_location=map_location, weights_only=False)
    except (OSError, RuntimeError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path}: not a {FORMAT_TAG} checkpoint")
    model = VQUNet(NetworkConfig(**state["network"]))
    model.load_state_dict(state["state_dict"])
    model.eval()
    return model, state
