"""Split a dataset into slow-camera (SCFO) and fast-camera (FCSO) sequences.

Only viewpoints are used: object speeds are unobservable without labels,
so every sequence is characterised by its average camera speed and the
speeds are clustered into two groups. The faster group is FCSO.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence as Seq

import numpy as np

from dymon.types import FCSO, SCFO, DegenerateDatasetError, Sequence


@dataclass(frozen=True)
class ClusterModel:
    centroid_slow: float
    centroid_fast: float

    @property
    def boundary(self) -> float:
        return 0.5 * (self.centroid_slow + self.centroid_fast)

    def label(self, speed: float) -> str:
        return FCSO if speed > self.boundary else SCFO

    def report(self, speeds: Seq[float], bins: int = 10) -> str:
        speeds = np.asarray(speeds, dtype=np.float64)
        counts, edges = np.histogram(speeds, bins=bins)
        lines = [
            f"centroid_slow: {self.centroid_slow:.6g}",
            f"centroid_fast: {self.centroid_fast:.6g}",
            f"boundary:      {self.boundary:.6g}",
            f"n_scfo: {int((speeds <= self.boundary).sum())}  n_fcso: {int((speeds > self.boundary).sum())}",
            "histogram (speed range: count):",
        ]
        width = max(1, int(counts.max()) if counts.size else 1)
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            bar = "#" * int(round(30 * c / width))
            lines.append(f"  [{lo:9.4f}, {hi:9.4f}) {c:5d} {bar}")
        return "\n".join(lines)


def avg_camera_speed(seq) -> float:
    """Mean distance between consecutive viewpoints, one frame = one time unit.

    Accepts a :class:`Sequence` or a T x 3 array of viewpoints.
    """
    views = seq.viewpoints() if isinstance(seq, Sequence) else np.asarray(seq, dtype=np.float64)
    if len(views) < 2:
        raise ValueError("camera speed is undefined for fewer than two frames")
    return float(np.linalg.norm(np.diff(views, axis=0), axis=1).mean())


def two_means_1d(values: Seq[float], restarts: int = 10, seed: int = 0,
                 max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with two centroids on scalars.

    Returns (centroids sorted ascending, labels with 1 = larger centroid).
    The restart with the lowest within-cluster squared error wins.
    """
    x = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    best = None
    for r in range(restarts):
        # first restart seeds at the extremes, the rest at random distinct points
        if r == 0:
            c = np.array([x.min(), x.max()])
        else:
            c = np.sort(rng.choice(x, size=2, replace=False))
        for _ in range(max_iter):
            lab = (np.abs(x - c[1]) < np.abs(x - c[0])).astype(int)
            if lab.all() or not lab.any():
                break
            new = np.array([x[lab == 0].mean(), x[lab == 1].mean()])
            if np.array_equal(new, c):
                break
            c = new
        lab = (np.abs(x - c[1]) < np.abs(x - c[0])).astype(int)
        if lab.all() or not lab.any():
            continue
        c = np.array([x[lab == 0].mean(), x[lab == 1].mean()])
        sse = ((x - c[lab]) ** 2).sum()
        if best is None or sse < best[0]:
            best = (sse, c, lab)
    if best is None:
        raise DegenerateDatasetError("two-means found no split")
    _, c, lab = best
    if c[0] > c[1]:
        c, lab = c[::-1], 1 - lab
    return c, lab


def fit_speeds(speeds: Seq[float], restarts: int = 10, seed: int = 0) -> tuple[ClusterModel, list[str]]:
    speeds = np.asarray(speeds, dtype=np.float64)
    if speeds.size < 2:
        raise DegenerateDatasetError("need at least two sequences to cluster")
    if speeds.max() - speeds.min() <= 1e-9:
        raise DegenerateDatasetError("all camera speeds are equal; no speed regimes to separate")
    centroids, lab = two_means_1d(speeds, restarts=restarts, seed=seed)
    model = ClusterModel(float(centroids[0]), float(centroids[1]))
    return model, [FCSO if l else SCFO for l in lab]


def fit_and_assign(dataset, restarts: int = 10, seed: int = 0) -> tuple[list[str], ClusterModel, np.ndarray]:
    """Cluster sequences by camera speed and write labels onto them.

    ``dataset`` is an iterable of :class:`Sequence`; each one's
    ``cluster_label`` is set in place. Returns (labels, model, speeds).
    """
    seqs = list(dataset)
    speeds = np.array([avg_camera_speed(s) for s in seqs])
    model, labels = fit_speeds(speeds, restarts=restarts, seed=seed)
    for seq, label in zip(seqs, labels):
        seq.cluster_label = label
    return labels, model, speeds


def assign_on_disk(root, restarts: int = 10, seed: int = 0, fallback: str | None = None):
    """Label every sequence of a dataset root and write the labels to metadata.

    ``fallback`` labels the whole dataset when it has a single speed regime
    (e.g. a static-camera subset); without it such a dataset raises.
    """
    from dymon import io

    ds = io.Dataset(root)
    speeds = np.array([avg_camera_speed(ds[i]) for i in range(len(ds))])
    try:
        model, labels = fit_speeds(speeds, restarts=restarts, seed=seed)
        report = model.report(speeds)
    except DegenerateDatasetError:
        if fallback is None:
            raise
        model, labels = None, [fallback] * len(ds)
        report = f"degenerate speeds; all sequences labelled {fallback}"
    for i, label in enumerate(labels):
        io.write_label(ds.path(i), label, {"avg_camera_speed": float(speeds[i])})
    ds.invalidate()
    (ds.root / "cluster_report.txt").write_text(report + "\n")
    return labels, model, speeds
