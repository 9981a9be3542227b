"""Iterative amortized inference within a view and recursive chaining across views.

Within one observation the posterior over slot latents is refined L times by
a recurrent network that reads the image, the current reconstruction and the
gradients of the per-step loss. Across observations the posterior of one
time step becomes the prior of the next.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import torch
import torch.nn as nn

from dymon.decoder import (DecodedSlots, PIXEL_SIGMA, log_likelihood,
                           mixture_weights, pixel_log_density)
from dymon.types import LOG_MIN_SIGMA, ConfigError, Sequence, SlotGaussians, sample_slots

log = logging.getLogger(__name__)

AUX_CHANNELS = 17
_NORM_EPS = 1e-5


def spatial_layer_norm(t: torch.Tensor, eps: float = _NORM_EPS) -> torch.Tensor:
    """Zero-mean, unit-variance normalization of each map over its H x W."""
    mean = t.mean(dim=(-2, -1), keepdim=True)
    var = t.var(dim=(-2, -1), unbiased=False, keepdim=True)
    return (t - mean) / torch.sqrt(var + eps)


def _vector_norm(t: torch.Tensor, eps: float = _NORM_EPS) -> torch.Tensor:
    mean = t.mean(dim=-1, keepdim=True)
    var = t.var(dim=-1, unbiased=False, keepdim=True)
    return (t - mean) / torch.sqrt(var + eps)


def leave_one_out_loglik(x: torch.Tensor, decoded: DecodedSlots,
                         sigma: float = PIXEL_SIGMA) -> torch.Tensor:
    """Per-slot log-likelihood of each pixel with that slot removed.

    The remaining slots' weights are renormalized. With a single slot there
    is nothing left to explain the pixel and the map is zero.
    """
    K = decoded.K
    if K == 1:
        return torch.zeros_like(decoded.mask_logits)
    logits = decoded.mask_logits.unsqueeze(-4).expand(*decoded.mask_logits.shape[:-3], K, K,
                                                      *decoded.mask_logits.shape[-2:])
    eye = torch.eye(K, dtype=torch.bool, device=logits.device)[..., None, None]
    masked = logits.masked_fill(eye, float("-inf"))
    log_w = torch.log_softmax(masked, dim=-3)
    dens = pixel_log_density(x, decoded.rgb_means, sigma).unsqueeze(-4)
    terms = torch.where(eye, torch.full_like(log_w, float("-inf")), log_w + dens)
    return torch.logsumexp(terms, dim=-3)


def auxiliary_inputs(x: torch.Tensor, decoded: DecodedSlots, weights: torch.Tensor,
                     grads: tuple[torch.Tensor, torch.Tensor],
                     sigma: float = PIXEL_SIGMA) -> torch.Tensor:
    """Stack the 17 per-slot refinement input channels, shape K x 17 x H x W.

    Channel order: image (3), slot rgb mean (3), mixture weight (1), mask
    logit (1), posterior pixel assignment (1), residual image (3), gradient
    w.r.t. rgb mean (3), gradient w.r.t. mask logit (1), leave-one-out
    likelihood (1). Gradient maps and the leave-one-out map are normalized
    over space per slot and channel.
    """
    grad_rgb, grad_logits = grads
    K, H, W = decoded.mask_logits.shape[-3:]
    if x.shape[-3:] != (H, W, 3) or weights.shape[-3:] != (K, H, W):
        raise ConfigError("auxiliary inputs need matching spatial shapes")
    log_comp = torch.log(weights.clamp_min(1e-38)) + pixel_log_density(x, decoded.rgb_means, sigma)
    posterior = torch.softmax(log_comp, dim=-3)
    composed = (weights.unsqueeze(-1) * decoded.rgb_means).sum(dim=-4)
    residual = (x - composed)

    def chw(t):  # (..., H, W, C) -> (..., C, H, W)
        return t.movedim(-1, -3)

    img = chw(x).unsqueeze(-4).expand(K, 3, H, W)
    res = chw(residual).unsqueeze(-4).expand(K, 3, H, W)
    aux = torch.cat([
        img,
        chw(decoded.rgb_means),
        weights.unsqueeze(-3),
        decoded.mask_logits.unsqueeze(-3),
        posterior.unsqueeze(-3),
        res,
        spatial_layer_norm(chw(grad_rgb)),
        spatial_layer_norm(grad_logits.unsqueeze(-3)),
        spatial_layer_norm(leave_one_out_loglik(x, decoded, sigma).unsqueeze(-3)),
    ], dim=-3)
    if aux.shape[-3] != AUX_CHANNELS:
        raise ConfigError(f"built {aux.shape[-3]} auxiliary channels, expected {AUX_CHANNELS}")
    return aux


class RefinementNetwork(nn.Module):
    """Maps auxiliary inputs and latent statistics to a posterior update.

    conv 3x3 (32, 32, 64, 64, ReLU) -> flatten -> 256 (ReLU) -> 128, then
    concatenated with [mu, log sigma, dL/dmu, dL/dlog sigma] into a gated
    recurrent cell of width 128 and a linear head producing (dmu, dlog sigma).
    ``pool > 1`` average-pools the conv features before flattening, which
    shrinks the first dense layer by pool**2 (1 keeps the full layout).
    """

    def __init__(self, D: int, H: int, W: int, channels=(32, 32, 64, 64), hidden: int = 256,
                 state: int = 128, cell: str = "gru", pool: int = 1):
        super().__init__()
        self.D, self.state_size, self.cell_type = D, state, cell
        layers = []
        c_in = AUX_CHANNELS
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU()]
            c_in = c
        if pool > 1:
            if H % pool or W % pool:
                raise ConfigError(f"pool factor {pool} must divide {H}x{W}")
            layers.append(nn.AvgPool2d(pool))
        flat = c_in * (H // pool) * (W // pool)
        self.encoder = nn.Sequential(*layers, nn.Flatten(),
                                     nn.Linear(flat, hidden), nn.ReLU(),
                                     nn.Linear(hidden, 128))
        if cell == "gru":
            self.cell = nn.GRUCell(128 + 4 * D, state)
        elif cell == "lstm":
            self.cell = nn.LSTMCell(128 + 4 * D, state)
        else:
            raise ConfigError(f"unknown recurrent cell {cell!r}")
        self.head = nn.Linear(state, 2 * D)

    def initial_state(self, K: int, dtype=torch.float32):
        h = torch.zeros(K, self.state_size, dtype=dtype)
        return (h, h.clone()) if self.cell_type == "lstm" else h

    def forward(self, aux: torch.Tensor, stats: torch.Tensor, hidden):
        feats = self.encoder(aux)
        inp = torch.cat([feats, stats], dim=-1)
        hidden = self.cell(inp, hidden)
        out = hidden[0] if self.cell_type == "lstm" else hidden
        delta = self.head(out)
        return delta[..., :self.D], delta[..., self.D:], hidden


def kl_diag_gaussian(a: SlotGaussians, b: SlotGaussians) -> torch.Tensor:
    """KL(N(a) || N(b)) summed over slots and latent dimensions."""
    if a.mu.shape != b.mu.shape:
        raise ConfigError(f"KL between mismatched shapes {tuple(a.mu.shape)} and {tuple(b.mu.shape)}")
    var_ratio = torch.exp(2 * (a.log_sigma - b.log_sigma))
    mean_term = ((a.mu - b.mu) / b.sigma) ** 2
    return 0.5 * (var_ratio + mean_term - 1.0).sum() - (a.log_sigma - b.log_sigma).sum()


@dataclass
class InferenceResult:
    elbo: torch.Tensor
    lambda_post: SlotGaussians
    hidden: object
    step_elbos: list = field(default_factory=list)


def iterative_inference(x: torch.Tensor, v, lambda_prior: SlotGaussians, L: int, model,
                        generator: Optional[torch.Generator] = None,
                        create_graph: bool = True) -> InferenceResult:
    """Refine ``lambda_prior`` against one observation ``x`` seen from ``v``.

    Each of the L cycles samples z from the current posterior, scores
    loss = -log p(x | z, v) + KL(current || prior), and applies the
    refinement network. Returns the average per-step ELBO (= -loss) and the
    posterior after the last refinement.

    ``create_graph`` keeps the auxiliary gradients differentiable so that the
    gradient of the returned ELBO w.r.t. the parameters is exact; with
    ``False`` they are treated as constants (cheaper, for evaluation).
    """
    if L < 1:
        raise ConfigError("L must be at least 1")
    decoder, refiner = model.decoder, model.refiner
    dtype = lambda_prior.mu.dtype
    x = torch.as_tensor(x, dtype=dtype)
    v = torch.as_tensor(v, dtype=dtype)
    sigma = getattr(model, "pixel_sigma", PIXEL_SIGMA)

    with torch.enable_grad():
        mu, log_sigma = lambda_prior.mu, lambda_prior.log_sigma
        if not mu.requires_grad:
            mu = mu.detach().requires_grad_()
        if not log_sigma.requires_grad:
            log_sigma = log_sigma.detach().requires_grad_()
        prior = SlotGaussians(mu, log_sigma)
        hidden = refiner.initial_state(prior.K, dtype=dtype)
        current = prior
        elbo = x.new_zeros(())
        step_elbos = []
        for _ in range(L):
            z = sample_slots(current, generator)
            decoded = decoder(z, v.expand(*z.shape[:-2], v.shape[-1]))
            nll = -log_likelihood(x, decoded, sigma)
            loss = nll + kl_diag_gaussian(current, prior)
            g_rgb, g_logits, g_mu, g_ls = torch.autograd.grad(
                loss, [decoded.rgb_means, decoded.mask_logits, current.mu, current.log_sigma],
                create_graph=create_graph, retain_graph=True)
            if not create_graph:
                decoded = DecodedSlots(decoded.rgb_means.detach(), decoded.mask_logits.detach())
            aux = auxiliary_inputs(x, decoded, mixture_weights(decoded), (g_rgb, g_logits), sigma)
            stats = torch.cat([current.mu, current.log_sigma,
                               _vector_norm(g_mu), _vector_norm(g_ls)], dim=-1)
            d_mu, d_ls, hidden = refiner(aux, stats, hidden)
            new_ls = current.log_sigma + d_ls
            if bool((new_ls.detach() < LOG_MIN_SIGMA).any()):
                log.warning("posterior sigma fell below %.0e; clamping", float(torch.exp(torch.tensor(LOG_MIN_SIGMA))))
                new_ls = new_ls.clamp_min(LOG_MIN_SIGMA)
            current = SlotGaussians(current.mu + d_mu, new_ls)
            step_elbos.append(-loss)
            elbo = elbo + (-loss) / L
    return InferenceResult(elbo, current, hidden, step_elbos)


def sequence_inference(seq: Sequence, inference_times: Iterable[int], model,
                       generator: Optional[torch.Generator] = None, L: Optional[int] = None,
                       create_graph: bool = False, dtype=torch.float32):
    """Chain per-view inference over the chosen times, starting from N(0, I).

    Returns a list of ``(t, posterior, InferenceResult)`` in visiting order.
    """
    times = list(inference_times)
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ConfigError("inference times must be strictly increasing")
    if times and (times[0] < 1 or times[-1] > seq.T):
        raise ConfigError(f"inference times must lie in [1, {seq.T}]")
    L = L if L is not None else model.cfg.L
    lam = SlotGaussians.standard(model.cfg.K, model.cfg.D, dtype=dtype)
    trajectory = []
    for t in times:
        frame = seq[t]
        res = iterative_inference(torch.as_tensor(frame.image, dtype=dtype), frame.viewpoint,
                                  lam, L, model, generator, create_graph=create_graph)
        lam = res.lambda_post if create_graph else res.lambda_post.detach()
        trajectory.append((t, lam, res))
    return trajectory
