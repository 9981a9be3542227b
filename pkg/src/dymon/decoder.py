"""Slot decoder and spatial Gaussian-mixture likelihood.

Each slot latent is projected together with the viewpoint, broadcast over
the image grid, and rendered by a small stride-1 CNN into an RGB mean and a
mask logit per pixel. Pixels are modelled as a K-way mixture whose weights
are the softmax of the mask logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from dymon.types import ConfigError, NumericError

PIXEL_SIGMA = 0.1


@dataclass
class DecodedSlots:
    """Raw per-slot decoder output, before mixing.

    rgb_means: (..., K, H, W, 3); mask_logits: (..., K, H, W).
    """

    rgb_means: torch.Tensor
    mask_logits: torch.Tensor

    def __post_init__(self):
        if self.rgb_means.shape[:-1] != self.mask_logits.shape or self.rgb_means.shape[-1] != 3:
            raise ConfigError(
                f"inconsistent decoded shapes {tuple(self.rgb_means.shape)} / "
                f"{tuple(self.mask_logits.shape)}")

    @property
    def K(self) -> int:
        return self.mask_logits.shape[-3]

    def permute(self, order) -> "DecodedSlots":
        idx = torch.as_tensor(list(order), dtype=torch.long)
        return DecodedSlots(self.rgb_means.index_select(-4, idx),
                            self.mask_logits.index_select(-3, idx))


def coordinate_grid(H: int, W: int, dtype=torch.float32) -> torch.Tensor:
    """2 x H x W grid with both channels spanning [-1, 1]."""
    ys = torch.linspace(-1.0, 1.0, H, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, W, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy])


class Decoder(nn.Module):
    """Viewpoint-conditioned spatial-broadcast decoder.

    projection: [z_k; v] -> 256 (ReLU) -> D
    rendering:  tile over H x W, append x/y coordinates, 3x3 convs
                (32, 32, 32, 32, ReLU) then a linear 3x3 conv to 4 channels.
    """

    def __init__(self, D: int, H: int, W: int, d: int = 3, hidden: int = 256,
                 channels=(32, 32, 32, 32), viewpoint_scale: float = 1.0):
        super().__init__()
        self.D, self.H, self.W, self.d = D, H, W, d
        self.viewpoint_scale = float(viewpoint_scale)
        self.projection = nn.Sequential(
            nn.Linear(D + d, hidden), nn.ReLU(), nn.Linear(hidden, D))
        layers = []
        c_in = D + 2
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU()]
            c_in = c
        layers.append(nn.Conv2d(c_in, 4, 3, padding=1))
        self.render = nn.Sequential(*layers)
        self.register_buffer("grid", coordinate_grid(H, W), persistent=False)

    def forward(self, z: torch.Tensor, v: torch.Tensor) -> DecodedSlots:
        """Decode z (..., K, D) seen from v (..., d)."""
        if z.shape[-1] != self.D:
            raise ConfigError(f"latent width {z.shape[-1]} != D={self.D}")
        v = torch.as_tensor(v, dtype=z.dtype, device=z.device)
        if v.shape[-1] != self.d or v.shape[:-1] != z.shape[:-2]:
            raise ConfigError(f"viewpoint shape {tuple(v.shape)} does not fit latents {tuple(z.shape)}")
        lead = z.shape[:-1]  # (..., K)
        v = (v / self.viewpoint_scale).unsqueeze(-2).expand(*lead, self.d)
        code = self.projection(torch.cat([z, v], dim=-1)).reshape(-1, self.D)
        n = code.shape[0]
        tiled = code[:, :, None, None].expand(n, self.D, self.H, self.W)
        grid = self.grid.to(code.dtype).expand(n, 2, self.H, self.W)
        out = self.render(torch.cat([tiled, grid], dim=1))
        out = out.reshape(*lead, 4, self.H, self.W)
        rgb = out[..., :3, :, :].movedim(-3, -1)
        return DecodedSlots(rgb, out[..., 3, :, :])


def decode_slots(z: torch.Tensor, v, decoder: Decoder) -> DecodedSlots:
    return decoder(z, torch.as_tensor(v, dtype=z.dtype))


def mixture_weights(decoded: DecodedSlots) -> torch.Tensor:
    return torch.softmax(decoded.mask_logits, dim=-3)


def compose(decoded: DecodedSlots) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean image of the mixture and its per-pixel slot weights."""
    weights = mixture_weights(decoded)
    image = (weights.unsqueeze(-1) * decoded.rgb_means).sum(dim=-4)
    return image, weights


def pixel_log_density(x: torch.Tensor, rgb_means: torch.Tensor,
                      sigma: float = PIXEL_SIGMA) -> torch.Tensor:
    """log N(x_i; mu_k,i, sigma^2 I) per slot and pixel, shape (..., K, H, W)."""
    diff = (x.unsqueeze(-4) - rgb_means) / sigma
    const = 3 * (math.log(sigma) + 0.5 * math.log(2 * math.pi))
    return -0.5 * (diff * diff).sum(dim=-1) - const


def log_mixture_components(x: torch.Tensor, decoded: DecodedSlots,
                           sigma: float = PIXEL_SIGMA) -> torch.Tensor:
    """log w_k,i + log N_k,i, the per-slot terms of the pixel mixture."""
    log_w = torch.log_softmax(decoded.mask_logits, dim=-3)
    return log_w + pixel_log_density(x, decoded.rgb_means, sigma)


def log_likelihood(x: torch.Tensor, decoded: DecodedSlots,
                   sigma: float = PIXEL_SIGMA) -> torch.Tensor:
    """Sum over pixels of log sum_k w_k N(x; mu_k, sigma^2 I)."""
    if x.shape[-3:-1] != decoded.mask_logits.shape[-2:]:
        raise ConfigError("image and decoded slots disagree on H x W")
    if not (torch.isfinite(x).all() and torch.isfinite(decoded.rgb_means).all()
            and torch.isfinite(decoded.mask_logits).all()):
        raise NumericError("non-finite input to log_likelihood")
    comps = log_mixture_components(x, decoded, sigma)
    return torch.logsumexp(comps, dim=-3).sum(dim=(-2, -1))
