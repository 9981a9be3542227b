"""Shared domain types: frames, sequences and per-slot Gaussian parameters."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence as Seq

import numpy as np
import torch

SCFO = "SCFO"
FCSO = "FCSO"
CLUSTER_LABELS = (SCFO, FCSO)

# log-sigma floor used when refinement pushes a scale towards zero
MIN_SIGMA = 1e-5
LOG_MIN_SIGMA = math.log(MIN_SIGMA)


class ConfigError(ValueError):
    """Shapes or settings that do not fit the model configuration."""


class InvalidParameterError(ValueError):
    """Distribution parameters outside their domain (e.g. sigma <= 0)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class DegenerateDatasetError(ValueError):
    """A dataset that cannot be split into two speed regimes."""


def as_viewpoint(v: Any) -> np.ndarray:
    """Validate and return a viewpoint as a float64 3-vector."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (3,):
        raise ConfigError(f"viewpoint must be a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("viewpoint has non-finite components")
    return arr


@dataclass(frozen=True)
class Frame:
    """One timestamped observation.

    ``image`` is H x W x 3 in [0, 1]; ``gt_masks`` (optional) holds an
    integer instance id per pixel with 0 reserved for the background.
    """

    image: np.ndarray
    viewpoint: np.ndarray
    time_index: int
    gt_masks: Optional[np.ndarray] = None

    def __post_init__(self):
        img = np.clip(np.asarray(self.image, dtype=np.float64), 0.0, 1.0)
        if img.ndim != 3 or img.shape[-1] != 3:
            raise ConfigError(f"image must be H x W x 3, got {img.shape}")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "viewpoint", as_viewpoint(self.viewpoint))
        if int(self.time_index) < 1:
            raise ConfigError("time_index starts at 1")
        object.__setattr__(self, "time_index", int(self.time_index))
        if self.gt_masks is not None:
            masks = np.asarray(self.gt_masks)
            if masks.shape != img.shape[:2]:
                raise ConfigError("gt_masks must match the image's H x W")
            if masks.min() < 0:
                raise ConfigError("mask ids are non-negative")
            object.__setattr__(self, "gt_masks", masks.astype(np.int64))

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass
class Sequence:
    """An ordered run of frames from one scene, t = 1..T."""

    frames: list[Frame]
    cluster_label: Optional[str] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        times = [f.time_index for f in self.frames]
        if times != list(range(1, len(times) + 1)):
            raise ConfigError("frame time indices must run 1..T")
        if self.frames and len({f.hw for f in self.frames}) != 1:
            raise ConfigError("all frames of a sequence share H and W")
        if self.cluster_label is not None and self.cluster_label not in CLUSTER_LABELS:
            raise ConfigError(f"unknown cluster label {self.cluster_label!r}")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, t: int) -> Frame:
        """1-based access, matching the time index."""
        if not 1 <= t <= len(self.frames):
            raise IndexError(f"time {t} outside [1, {len(self.frames)}]")
        return self.frames[t - 1]

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def hw(self) -> tuple[int, int]:
        return self.frames[0].hw

    def images(self) -> np.ndarray:
        return np.stack([f.image for f in self.frames])

    def viewpoints(self) -> np.ndarray:
        return np.stack([f.viewpoint for f in self.frames])

    def masks(self) -> Optional[np.ndarray]:
        if any(f.gt_masks is None for f in self.frames):
            return None
        return np.stack([f.gt_masks for f in self.frames])


@dataclass
class SlotGaussians:
    """Diagonal Gaussians over K slot latents of width D.

    Scales are stored as ``log_sigma`` so that every refinement update keeps
    them positive; ``sigma`` is derived.
    """

    mu: torch.Tensor
    log_sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape or self.mu.dim() != 2:
            raise ConfigError(
                f"mu and sigma must both be K x D, got {tuple(self.mu.shape)} "
                f"and {tuple(self.log_sigma.shape)}")

    @classmethod
    def from_sigma(cls, mu, sigma) -> "SlotGaussians":
        mu = torch.as_tensor(mu)
        sigma = torch.as_tensor(sigma, dtype=mu.dtype)
        if torch.any(sigma <= 0) or torch.any(torch.isnan(sigma)):
            raise InvalidParameterError("sigma must be strictly positive")
        return cls(mu, torch.log(sigma))

    @classmethod
    def standard(cls, K: int, D: int, dtype=torch.float32, device=None) -> "SlotGaussians":
        """The N(0, I) prior every sequence starts from."""
        zeros = torch.zeros(K, D, dtype=dtype, device=device)
        return cls(zeros, zeros.clone())

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def D(self) -> int:
        return self.mu.shape[1]

    def detach(self) -> "SlotGaussians":
        return SlotGaussians(self.mu.detach(), self.log_sigma.detach())

    def permute(self, order: Seq[int]) -> "SlotGaussians":
        idx = torch.as_tensor(list(order), dtype=torch.long)
        return SlotGaussians(self.mu[idx], self.log_sigma[idx])


def sample_slots(params: SlotGaussians, generator: Optional[torch.Generator] = None,
                 eps: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Reparameterized draw z = mu + sigma * eps, eps ~ N(0, I).

    Returns a K x D tensor through which gradients reach ``mu`` and
    ``log_sigma``. Passing ``eps`` explicitly bypasses the generator.
    """
    if torch.any(torch.isnan(params.log_sigma)):
        raise InvalidParameterError("sigma is not a number")
    if eps is None:
        eps = torch.randn(params.mu.shape, generator=generator,
                          dtype=params.mu.dtype, device=params.mu.device)
    return params.mu + params.sigma * eps
