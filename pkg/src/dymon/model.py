"""Model container (decoder + refinement network) and checkpoint format."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from dymon.decoder import PIXEL_SIGMA, Decoder
from dymon.inference import RefinementNetwork

CHECKPOINT_FORMAT = "dymon-checkpoint/1"


@dataclass
class ModelConfig:
    K: int = 7
    D: int = 16
    d: int = 3
    H: int = 64
    W: int = 64
    L: int = 5
    sigma: float = PIXEL_SIGMA
    viewpoint_scale: float = 1.0
    decoder_hidden: int = 256
    decoder_channels: tuple = (32, 32, 32, 32)
    refiner_channels: tuple = (32, 32, 64, 64)
    refiner_hidden: int = 256
    refiner_pool: int = 1
    state_size: int = 128
    cell: str = "gru"

    def __post_init__(self):
        self.decoder_channels = tuple(self.decoder_channels)
        self.refiner_channels = tuple(self.refiner_channels)


class DyMON(nn.Module):
    """Generative decoder and amortized refinement network sharing one config."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.pixel_sigma = cfg.sigma
        self.decoder = Decoder(cfg.D, cfg.H, cfg.W, cfg.d, cfg.decoder_hidden,
                               cfg.decoder_channels, cfg.viewpoint_scale)
        self.refiner = RefinementNetwork(cfg.D, cfg.H, cfg.W, cfg.refiner_channels,
                                         cfg.refiner_hidden, cfg.state_size, cfg.cell,
                                         cfg.refiner_pool)


def save_checkpoint(model: DyMON, path: os.PathLike, **extra) -> Path:
    """Write named parameter arrays plus the config stanza to one file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.cfg),
        "cell": model.cfg.cell,
        "params": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "shapes": {k: tuple(v.shape) for k, v in model.state_dict().items()},
    }
    payload.update(extra)
    torch.save(payload, path)
    return path


def load_checkpoint(path: os.PathLike, dtype=None) -> tuple[DyMON, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a DyMON checkpoint")
    model = DyMON(ModelConfig(**payload["config"]))
    model.load_state_dict(payload["params"])
    if dtype is not None:
        model.to(dtype)
    return model, payload
