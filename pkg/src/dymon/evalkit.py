"""Evaluation: reconstruction/segmentation metrics, space-time queries, replay, sweeps."""
from __future__ import annotations

import csv
import io as _io
import itertools
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from dymon.decoder import compose
from dymon.droom.camera import dome_position
from dymon.droom.generate import render_novel_view
from dymon.inference import sequence_inference
from dymon.types import Sequence, SlotGaussians, as_viewpoint

log = logging.getLogger(__name__)


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def iou_matrix(pred_ids: np.ndarray, gt_ids: np.ndarray, K: int, gt_labels: np.ndarray) -> np.ndarray:
    """K x G intersection-over-union between predicted slots and GT components."""
    pred_onehot = pred_ids.reshape(-1)[None, :] == np.arange(K)[:, None]
    gt_onehot = gt_ids.reshape(-1)[None, :] == gt_labels[:, None]
    inter = pred_onehot.astype(np.int64) @ gt_onehot.T.astype(np.int64)
    union = pred_onehot.sum(1)[:, None] + gt_onehot.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return iou


def miou_hungarian(pred_weights, gt_masks) -> float:
    """Mean IoU over ground-truth components after optimal slot matching.

    Predicted masks are the per-pixel argmax of ``pred_weights`` (K x H x W).
    Every id present in ``gt_masks`` (background included) is a component;
    components left without a slot score 0.
    """
    w = np.asarray(pred_weights.detach().cpu() if torch.is_tensor(pred_weights) else pred_weights)
    gt = np.asarray(gt_masks)
    if gt.size == 0:
        raise ValueError("empty ground truth: mIoU undefined")
    K = w.shape[0]
    pred = w.argmax(axis=0)
    labels = np.unique(gt)
    iou = iou_matrix(pred, gt, K, labels)
    rows, cols = linear_sum_assignment(iou, maximize=True)
    return math.fsum(iou[rows, cols]) / len(labels)


def select_time(traj, t: int):
    """Most recent trajectory entry at or before t."""
    chosen = None
    for entry in traj:
        if entry[0] <= t:
            chosen = entry
        else:
            break
    if chosen is None:
        raise ValueError(f"no inference at or before time {t}")
    return chosen


def _decode_mean(model, mu: torch.Tensor, v, with_slots: bool = False):
    with torch.no_grad():
        v = torch.as_tensor(as_viewpoint(v), dtype=mu.dtype)
        decoded = model.decoder(mu, v)
        image, weights = compose(decoded)
        return (image, weights, decoded) if with_slots else (image, weights)


def query_spacetime(traj, t: int, v_q, model) -> tuple[np.ndarray, np.ndarray]:
    """Render the posterior-mean scene of time t from viewpoint ``v_q``.

    ``traj`` is a list of ``(time, SlotGaussians, ...)`` sorted by time; t
    maps to the latest inference time not after it. Returns
    (image H x W x 3, weights K x H x W) as numpy arrays.
    """
    entry = select_time(traj, t)
    image, weights = _decode_mean(model, entry[1].mu, v_q)
    return image.numpy(), weights.numpy()


def replay(traj, times: list, v_fixed, model, frozen_slots: Iterable[int] = (),
           return_slots: bool = False) -> list:
    """Re-render the trajectory at ``times`` from one fixed viewpoint.

    Slots listed in ``frozen_slots`` (0-based) keep their latent from
    ``times[0]``; all others follow the trajectory. Freezing every slot but
    one isolates that object's motion. Returns a list of (image, weights),
    or (image, weights, slot rgb, slot mask logits) with ``return_slots``.
    """
    frozen = sorted(set(int(k) for k in frozen_slots))
    if not times:
        return []
    first = select_time(traj, times[0])[1].mu
    K = first.shape[0]
    if any(k < 0 or k >= K for k in frozen):
        raise ValueError(f"frozen slot indices must lie in [0, {K - 1}]")
    out = []
    for t in times:
        mu = select_time(traj, t)[1].mu.clone()
        if frozen:
            mu[frozen] = first[frozen]
        image, weights, decoded = _decode_mean(model, mu, v_fixed, with_slots=True)
        item = (image.numpy(), weights.numpy())
        if return_slots:
            item += (decoded.rgb_means.numpy(), decoded.mask_logits.numpy())
        out.append(item)
    return out


@dataclass
class EvalReport:
    obs_rec_mse: float
    nv_obs_mse: float
    obs_seg_miou: float
    nv_seg_miou: float
    per_sequence: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = _io.StringIO()
        keys = ["sequence", "obs_rec_mse", "nv_obs_mse", "obs_seg_miou", "nv_seg_miou"]
        writer = csv.DictWriter(buf, fieldnames=keys)
        writer.writeheader()
        for row in self.per_sequence:
            writer.writerow({k: row.get(k) for k in keys})
        writer.writerow({"sequence": "mean", "obs_rec_mse": self.obs_rec_mse, "nv_obs_mse": self.nv_obs_mse,
                         "obs_seg_miou": self.obs_seg_miou, "nv_seg_miou": self.nv_seg_miou})
        return buf.getvalue()

    def summary(self) -> str:
        return "\n".join([
            f"sequences:    {len(self.per_sequence)}",
            f"Obs.Rec. MSE  {self.obs_rec_mse:.5f}",
            f"Nv.Obs.  MSE  {self.nv_obs_mse:.5f}",
            f"Obs.Seg. mIoU {self.obs_seg_miou:.4f}",
            f"Nv.Seg.  mIoU {self.nv_seg_miou:.4f}",
        ])

    def write(self, out_dir: os.PathLike) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.csv").write_text(self.to_csv())
        (out / "eval_report.txt").write_text(self.summary() + "\n")


def novel_viewpoints(n: int, radius: float, seed: int, elevation=(15.0, 70.0)) -> np.ndarray:
    """Fixed set of dome viewpoints used as held-out query views."""
    rng = np.random.default_rng(seed)
    return np.array([dome_position(rng.uniform(0, 360), rng.uniform(*elevation), radius) for _ in range(n)])


def _nanmean(values) -> float:
    vals = [v for v in values if v is not None and not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(model, dataset, states: Optional[list] = None, n_novel_views: int = 3,
             time_stride: int = 1, seed: int = 0, max_sequences: Optional[int] = None) -> EvalReport:
    """Infer each sequence recursively and score observed and novel views.

    Observed views reconstruct each inferred frame from its own viewpoint with
    the posterior mean. Novel views need the generator state (``states[i]``
    or ``dataset.state(i)``); the true scene is re-rendered at every
    inference time from ``n_novel_views`` fixed dome positions.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(seed)
    rows = []
    n = len(dataset) if max_sequences is None else min(len(dataset), max_sequences)
    for i in range(n):
        seq: Sequence = dataset[i]
        times = list(range(1, seq.T + 1, time_stride))
        traj = sequence_inference(seq, times, model, generator=gen, dtype=dtype)
        rec, seg = [], []
        for t, lam, _ in traj:
            frame = seq[t]
            image, weights = _decode_mean(model, lam.mu, frame.viewpoint)
            rec.append(mse(image.numpy(), frame.image))
            if frame.gt_masks is not None:
                seg.append(miou_hungarian(weights.numpy(), frame.gt_masks))
        row = {"sequence": seq.metadata.get("sequence_index", i), "obs_rec_mse": float(np.mean(rec)),
               "obs_seg_miou": _nanmean(seg), "nv_obs_mse": float("nan"), "nv_seg_miou": float("nan")}
        state = states[i] if states is not None else (dataset.state(i) if hasattr(dataset, "state") else None)
        if state is not None and n_novel_views > 0 and "objects" in seq.metadata:
            H, W = seq.hw
            views = novel_viewpoints(n_novel_views, float(seq.metadata["dome_radius"]), seed + i)
            nv_rec, nv_seg = [], []
            for t, lam, _ in traj:
                for vq in views:
                    gt_img, gt_ids = render_novel_view(seq.metadata, state, t, vq, H, W)
                    image, weights = _decode_mean(model, lam.mu, vq)
                    nv_rec.append(mse(image.numpy(), gt_img))
                    nv_seg.append(miou_hungarian(weights.numpy(), gt_ids))
            row["nv_obs_mse"] = float(np.mean(nv_rec))
            row["nv_seg_miou"] = float(np.mean(nv_seg))
        rows.append(row)
    return EvalReport(
        obs_rec_mse=_nanmean(r["obs_rec_mse"] for r in rows),
        nv_obs_mse=_nanmean(r["nv_obs_mse"] for r in rows),
        obs_seg_miou=_nanmean(r["obs_seg_miou"] for r in rows),
        nv_seg_miou=_nanmean(r["nv_seg_miou"] for r in rows),
        per_sequence=rows)


# --------------------------------------------------------------------------- sweeps

DT_Z_GRID = (3, 5)
DT_V_GRID = (5, 6, 8)
BETA_GRID = (0.5, 1.0, 2.0)


@dataclass
class SweepResult:
    kind: str
    row_name: str
    col_name: str
    rows: list
    cols: list
    cells: dict                       # (row, col) -> value (nan on failure)
    failures: dict = field(default_factory=dict)

    def row_means(self) -> dict:
        return {r: _nanmean(self.cells.get((r, c)) for c in self.cols) for r in self.rows}

    def col_means(self) -> dict:
        return {c: _nanmean(self.cells.get((r, c)) for r in self.rows) for c in self.cols}

    def table(self) -> str:
        head = f"{self.row_name:>10} | " + " ".join(f"{self.col_name}={c!s:>8}" for c in self.cols) + " |     mean"
        lines = [head, "-" * len(head)]
        rm = self.row_means()
        for r in self.rows:
            vals = " ".join(f"{self.cells.get((r, c), float('nan')):>{len(self.col_name) + 9}.5f}" for c in self.cols)
            lines.append(f"{r!s:>10} | {vals} | {rm[r]:8.5f}")
        cm = self.col_means()
        lines.append(f"{'mean':>10} | " + " ".join(f"{cm[c]:>{len(self.col_name) + 9}.5f}" for c in self.cols))
        for key, msg in self.failures.items():
            lines.append(f"failed {key}: {msg}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf)
        w.writerow([self.row_name, self.col_name, "mse"])
        for r in self.rows:
            for c in self.cols:
                w.writerow([r, c, self.cells.get((r, c), float("nan"))])
        return buf.getvalue()


def _run_cell(train_fn: Callable, eval_fn: Callable, overrides: dict) -> float:
    model = train_fn(overrides)
    return eval_fn(model, overrides)


def sweep(harness_spec: dict, train_fn: Callable, eval_fn: Callable,
          out_dir: Optional[os.PathLike] = None) -> list[SweepResult]:
    """Run ablation grids, one train + evaluate per cell.

    ``harness_spec`` keys (all optional):
      ``dt_grid``: {"dt_z": [...], "dt_v": [...]} (defaults 3,5 x 5,6,8)
      ``beta``: list of beta values, applied to both branches' query weight
      ``speed_levels``: {"train": [names], "test": [names]} cross-level grid
    ``train_fn(overrides) -> model`` and ``eval_fn(model, overrides) -> mse``
    carry the actual work; a failing cell is recorded and the sweep goes on.
    """
    results = []
    if "dt_grid" in harness_spec:
        grid = harness_spec["dt_grid"] or {}
        dz = list(grid.get("dt_z", DT_Z_GRID))
        dv = list(grid.get("dt_v", DT_V_GRID))
        res = SweepResult("dt_grid", "dt_z", "dt_v", dz, dv, {})
        for a, b in itertools.product(dz, dv):
            try:
                res.cells[(a, b)] = float(_run_cell(train_fn, eval_fn, {"dt_z_override": a, "dt_v_override": b}))
            except Exception as exc:  # noqa: BLE001 - keep sweeping
                log.exception("cell dt_z=%s dt_v=%s failed", a, b)
                res.cells[(a, b)] = float("nan")
                res.failures[(a, b)] = repr(exc)
        results.append(res)
    if "beta" in harness_spec:
        betas = list(harness_spec["beta"] or BETA_GRID)
        res = SweepResult("beta", "beta", "metric", betas, ["nv_mse"], {})
        for beta in betas:
            try:
                res.cells[(beta, "nv_mse")] = float(_run_cell(train_fn, eval_fn, {"beta": beta}))
            except Exception as exc:  # noqa: BLE001
                log.exception("cell beta=%s failed", beta)
                res.cells[(beta, "nv_mse")] = float("nan")
                res.failures[(beta, "nv_mse")] = repr(exc)
        results.append(res)
    if "speed_levels" in harness_spec:
        levels = harness_spec["speed_levels"]
        train_levels, test_levels = list(levels["train"]), list(levels.get("test", levels["train"]))
        res = SweepResult("speed_levels", "train", "test", train_levels, test_levels, {})
        for tr in train_levels:
            try:
                model = train_fn({"train_level": tr})
            except Exception as exc:  # noqa: BLE001
                log.exception("training on %s failed", tr)
                for te in test_levels:
                    res.cells[(tr, te)] = float("nan")
                    res.failures[(tr, te)] = repr(exc)
                continue
            for te in test_levels:
                try:
                    res.cells[(tr, te)] = float(eval_fn(model, {"train_level": tr, "test_level": te}))
                except Exception as exc:  # noqa: BLE001
                    res.cells[(tr, te)] = float("nan")
                    res.failures[(tr, te)] = repr(exc)
        results.append(res)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in results:
            (out / f"sweep_{r.kind}.csv").write_text(r.to_csv())
            (out / f"sweep_{r.kind}.txt").write_text(r.table() + "\n")
    return results


def dataset_sweep(harness_spec: dict, base_cfg, train_roots: dict, test_roots: dict,
                  out_dir: Optional[os.PathLike] = None, n_novel_views: int = 3,
                  max_eval_sequences: Optional[int] = None) -> list[SweepResult]:
    """Sweep driver over datasets on disk.

    ``train_roots``/``test_roots`` map a level name to a dataset root; the
    key ``"default"`` is used by the dt and beta grids. Each cell trains
    ``base_cfg`` (a TrainConfig) with the cell's overrides and reports the
    novel-view MSE on the matching test set.
    """
    from dymon import io
    from dymon.trainer import fit

    cache = {}

    def load(root):
        if root not in cache:
            cache[root] = io.Dataset(root)
        return cache[root]

    def train_fn(overrides):
        cfg_over = {}
        if "dt_z_override" in overrides:
            cfg_over["dt_z_override"] = overrides["dt_z_override"]
            cfg_over["dt_v_override"] = overrides["dt_v_override"]
        if "beta" in overrides:
            cfg_over["beta_override"] = overrides["beta"]
        cfg = replace(base_cfg, **cfg_over)
        level = overrides.get("train_level", "default")
        model, _ = fit(load(train_roots[level]), cfg, log_every=0)
        return model

    def eval_fn(model, overrides):
        level = overrides.get("test_level", "default")
        report = evaluate(model, load(test_roots[level]), n_novel_views=n_novel_views,
                          max_sequences=max_eval_sequences)
        return report.nv_obs_mse

    return sweep(harness_spec, train_fn, eval_fn, out_dir)
