"""Training loop: branch-dependent update schedules and the query-augmented ELBO.

Every sequence is pre-labelled SCFO (slow camera, fast objects) or FCSO
(fast camera, slow objects). The label decides how often the latent scene
is re-inferred (``dt_z``) and how often the held viewpoint is refreshed
(``dt_v``), and which weight ``beta`` the viewpoint-query likelihood gets.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from dymon.decoder import log_likelihood
from dymon.inference import iterative_inference
from dymon.model import DyMON, ModelConfig, save_checkpoint
from dymon.types import CLUSTER_LABELS, FCSO, SCFO, ConfigError, Sequence, SlotGaussians, sample_slots

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    K: int = 7
    D: int = 16
    d: int = 3
    H: int = 64
    W: int = 64
    L: int = 5
    Q_size: int = 3
    beta_fcso: float = 1.0
    beta_scfo: float = 0.5
    delta_t: int = 5
    delta_tau: int = 3
    eta0: float = 3e-3
    total_steps: int = 5000
    batch_size: int = 2
    seed: int = 0
    grad_clip: float = 5.0
    checkpoint_every: int = 1000
    exact_aux_grads: bool = True
    # sweep hooks: force (dt_z, dt_v, beta) regardless of branch
    dt_z_override: Optional[int] = None
    dt_v_override: Optional[int] = None
    beta_override: Optional[float] = None
    # model-shape knobs not fixed by the schedule
    viewpoint_scale: Optional[float] = None   # None: dome radius of the data
    refiner_pool: int = 1
    cell: str = "gru"
    dtype: str = "float32"

    def __post_init__(self):
        if not self.delta_t > self.delta_tau > 2:
            raise ConfigError(f"need delta_t > delta_tau > 2, got {self.delta_t}, {self.delta_tau}")
        if not self.beta_fcso > self.beta_scfo > 0:
            raise ConfigError(f"need beta_fcso > beta_scfo > 0, got {self.beta_fcso}, {self.beta_scfo}")
        if self.L < 1 or self.Q_size < 1 or self.batch_size < 1:
            raise ConfigError("L, Q_size and batch_size must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(K=self.K, D=self.D, d=self.d, H=self.H, W=self.W, L=self.L,
                           viewpoint_scale=self.viewpoint_scale or 1.0,
                           refiner_pool=self.refiner_pool, cell=self.cell)

    def schedule(self, branch: str) -> tuple[float, int, int]:
        """(beta, dt_v, dt_z) for a cluster branch."""
        if branch == FCSO:
            beta, dt_v, dt_z = self.beta_fcso, self.delta_tau, self.delta_t
        elif branch == SCFO:
            beta, dt_v, dt_z = self.beta_scfo, self.delta_t, self.delta_tau
        else:
            raise ConfigError(f"unknown branch {branch!r}")
        if self.dt_z_override is not None:
            dt_z = self.dt_z_override
        if self.dt_v_override is not None:
            dt_v = self.dt_v_override
        if self.beta_override is not None:
            beta = self.beta_override
        return beta, dt_v, dt_z

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        flat = {}
        for key, value in data.items():
            if isinstance(value, dict):  # nested stanzas are flattened
                flat.update(value)
            else:
                flat[key] = value
        unknown = set(flat) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**flat)


@dataclass
class StepReport:
    step: int
    elbo: float
    ll_query: float
    loss: float
    lr: float
    cluster_branch: str
    beta: float = 0.0
    n_inferences: int = 0
    n_view_updates: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def lr_at_step(s: int, eta0: float) -> float:
    """Linear decay over 1e6 steps to a floor of 0.1 * eta0."""
    if s < 0:
        raise ValueError("step must be non-negative")
    return max(0.1 * eta0 + 0.9 * eta0 * (1.0 - s / 1e6), 0.1 * eta0)


def random_walk_times(start: int, end: int, expected_step: int,
                      rng: np.random.Generator) -> list[int]:
    """Times start, start+g1, ... with gaps uniform on {step-2, ..., step+2}."""
    if end < 1 or end < start:
        raise ValueError(f"invalid sequence span [{start}, {end}]")
    if expected_step <= 2:
        raise ValueError("expected step must exceed 2")
    times = [start]
    while True:
        nxt = times[-1] + int(rng.integers(expected_step - 2, expected_step + 3))
        if nxt > end:
            return times
        times.append(nxt)


def sample_query_times(t: int, dt_z: int, size: int, T: int,
                       rng: np.random.Generator) -> list[int]:
    """``size`` draws, with replacement, from [t - dt_z//2, t + dt_z//2] clipped to [1, T]."""
    if not 1 <= t <= T:
        raise ValueError(f"time {t} outside [1, {T}]")
    half = dt_z // 2
    lo, hi = max(1, t - half), min(T, t + half)
    return [int(q) for q in rng.integers(lo, hi + 1, size=size)]


@dataclass
class ObjectiveResult:
    """Differentiable pieces of one sequence's objective."""

    elbo: torch.Tensor
    ll_query: torch.Tensor
    beta: float
    branch: str
    inference_times: list
    view_updates: list
    trajectory: list = field(default_factory=list)

    @property
    def objective(self) -> torch.Tensor:
        return self.elbo + self.beta * self.ll_query

    @property
    def loss(self) -> torch.Tensor:
        return -self.objective


def sequence_objective(seq: Sequence, branch: str, cfg: TrainConfig, model: DyMON,
                       rng: np.random.Generator,
                       generator: Optional[torch.Generator] = None,
                       inference_times: Optional[list] = None,
                       query_times: Optional[dict] = None) -> ObjectiveResult:
    """Run the training schedule over one sequence and return ELBO and query LL.

    The held viewpoint is refreshed whenever t is a multiple of dt_v; at each
    inference time the current image is explained from the held viewpoint,
    a latent is drawn from the new posterior, and the query frames are scored
    with that latent fixed and their own viewpoints substituted.
    ``inference_times``/``query_times`` bypass the random samplers.
    """
    if seq.cluster_label is not None and seq.cluster_label != branch:
        raise ConfigError(f"sequence labelled {seq.cluster_label} run as {branch}")
    beta, dt_v, dt_z = cfg.schedule(branch)
    T = seq.T
    dtype = cfg.torch_dtype
    times = inference_times if inference_times is not None else random_walk_times(1, T, dt_z, rng)
    time_set = set(times)
    n_t = len(times)

    images = torch.as_tensor(seq.images(), dtype=dtype)
    views = torch.as_tensor(seq.viewpoints(), dtype=dtype)
    x, v = images[0], views[0]
    lam = SlotGaussians.standard(cfg.K, cfg.D, dtype=dtype)
    elbo = images.new_zeros(())
    ll_query = images.new_zeros(())
    view_updates, trajectory = [], []
    for t in range(1, T + 1):
        if t % dt_v == 0:
            v = views[t - 1]
            view_updates.append(t)
        if t not in time_set:
            continue
        x = images[t - 1]
        res = iterative_inference(x, v, lam, cfg.L, model, generator,
                                  create_graph=cfg.exact_aux_grads)
        lam = res.lambda_post
        z = sample_slots(lam, generator)
        qs = query_times[t] if query_times is not None else sample_query_times(t, dt_z, cfg.Q_size, T, rng)
        for q in qs:
            decoded = model.decoder(z, views[q - 1])
            ll_query = ll_query + log_likelihood(images[q - 1], decoded, model.pixel_sigma) / (len(qs) * n_t)
        elbo = elbo + res.elbo / n_t
        trajectory.append((t, lam))
    return ObjectiveResult(elbo, ll_query, beta, branch, list(times), view_updates, trajectory)


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


class BranchBatcher:
    """Yields batches that never mix cluster labels.

    Branches alternate step by step when both exist; sequences inside a
    branch are drawn without replacement and reshuffled each pass.
    """

    def __init__(self, labels: list, batch_size: int, rng: np.random.Generator):
        self.rng = rng
        self.batch_size = batch_size
        self.pools = {b: [i for i, l in enumerate(labels) if l == b] for b in CLUSTER_LABELS}
        self.pools = {b: idx for b, idx in self.pools.items() if idx}
        if not self.pools:
            raise ConfigError("no labelled sequences to train on")
        if len(self.pools) == 1:
            log.warning("dataset has a single cluster (%s); training that branch only",
                        next(iter(self.pools)))
        self.branches = sorted(self.pools)
        self._queues = {b: [] for b in self.branches}
        self._turn = 0

    def _draw(self, branch: str) -> int:
        queue = self._queues[branch]
        if not queue:
            queue.extend(self.rng.permutation(self.pools[branch]).tolist())
        return queue.pop()

    def next(self) -> tuple[str, list[int]]:
        branch = self.branches[self._turn % len(self.branches)]
        self._turn += 1
        return branch, [self._draw(branch) for _ in range(self.batch_size)]


def infer_viewpoint_scale(dataset) -> float:
    """Dome radius recorded by the generator, else the largest viewpoint norm."""
    first = dataset[0]
    radius = first.metadata.get("dome_radius")
    if radius:
        return float(radius)
    return float(max(np.linalg.norm(dataset[i].viewpoints(), axis=1).max() for i in range(len(dataset))))


def fit(dataset, cfg: TrainConfig, out_dir: Optional[os.PathLike] = None,
        model: Optional[DyMON] = None, log_every: int = 50,
        callback=None) -> tuple[DyMON, list[StepReport]]:
    """Optimize the model on a pre-labelled dataset for ``cfg.total_steps`` steps.

    ``dataset`` is indexable and yields labelled :class:`Sequence` objects.
    With ``out_dir`` set, checkpoints (``step_XXXXXXX.pt`` and ``final.pt``)
    and an append-only ``train_log.jsonl`` are written there.
    """
    if cfg.viewpoint_scale is None:
        cfg = replace(cfg, viewpoint_scale=infer_viewpoint_scale(dataset))
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    if model is None:
        model = DyMON(cfg.model_config())
    model.to(cfg.torch_dtype)
    model.train()
    labels = [dataset[i].cluster_label for i in range(len(dataset))]
    if any(l is None for l in labels):
        raise ConfigError("every training sequence needs a cluster label; run assignment first")
    batcher = BranchBatcher(labels, cfg.batch_size, rng)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.eta0)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a")
    reports = []
    start = time.time()
    try:
        for step in range(cfg.total_steps):
            lr = lr_at_step(step, cfg.eta0)
            _set_lr(optimizer, lr)
            branch, idx = batcher.next()
            optimizer.zero_grad()
            parts = []
            for i in idx:
                seq = dataset[i]
                if seq.T < cfg.delta_t:
                    log.warning("sequence %d shorter than delta_t; skipped", i)
                    continue
                res = sequence_objective(seq, branch, cfg, model, rng, generator)
                (res.loss / len(idx)).backward()
                parts.append(res)
            if not parts:
                continue
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            elbo = float(np.mean([float(p.elbo.detach()) for p in parts]))
            llq = float(np.mean([float(p.ll_query.detach()) for p in parts]))
            beta = parts[0].beta
            rep = StepReport(step=step, elbo=elbo, ll_query=llq, loss=-(elbo + beta * llq), lr=lr,
                             cluster_branch=branch, beta=beta,
                             n_inferences=sum(len(p.inference_times) for p in parts),
                             n_view_updates=sum(len(p.view_updates) for p in parts))
            reports.append(rep)
            if log_fh is not None:
                log_fh.write(rep.to_json() + "\n")
            if log_every and step % log_every == 0:
                log.info("step %d %s loss %.1f elbo %.1f llq %.1f (%.0fs)", step, branch,
                         rep.loss, elbo, llq, time.time() - start)
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, out / f"step_{step + 1:07d}.pt", step=step + 1)
            if callback is not None:
                callback(step, model, rep)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save_checkpoint(model, out / "final.pt", step=cfg.total_steps, train_config=asdict(cfg))
    return model, reports
