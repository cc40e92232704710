"""Trajectory records, checkpoint splitting and the bucketed batch pipeline."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NORMAL, ABNORMAL, UNKNOWN = "normal", "abnormal", "unknown"
LABELS = (NORMAL, ABNORMAL, UNKNOWN)
STD_FLOOR = 1e-8
MASK_VALUE = 0.0


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError(f"points must be (N, 4) [t, x, y, z], got {pts.shape}")
    if len(pts) < 2:
        raise ValueError("a trajectory needs at least 2 points")
    if not np.all(np.diff(pts[:, 0]) > 0):
        raise ValueError("timestamps must be strictly increasing")
    return pts


@dataclass
class Trajectory:
    """One entity's track: rows of ``(t, x, y, z)`` in seconds and meters.

    ``anomaly_span`` optionally narrows an abnormal label to a time window so
    that sub-trajectories outside it are labelled normal.
    """
    entity_id: str
    points: np.ndarray
    label: str = UNKNOWN
    anomaly_span: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entity_id = str(self.entity_id)
        self.points = _as_points(self.points)
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")

    def __len__(self):
        return len(self.points)


@dataclass
class SubTrajectory:
    parent_id: str
    segment_index: int
    points: np.ndarray
    label: str = UNKNOWN

    def __post_init__(self):
        self.points = _as_points(self.points)

    def __len__(self):
        return len(self.points)

    @property
    def key(self) -> tuple[str, int]:
        return (self.parent_id, self.segment_index)

    @property
    def positions(self) -> np.ndarray:
        return self.points[:, 1:]


@dataclass(frozen=True)
class Checkpoint:
    position: tuple[float, float, float]
    radius: float = 2.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("checkpoint radius must be positive")
        if not np.all(np.isfinite(self.position)):
            raise ValueError("checkpoint position must be finite")


CheckpointSet = Sequence[Checkpoint]


def span_label(label: str, span: tuple[float, float] | None, t0: float, t1: float) -> str:
    """Label of the piece ``[t0, t1]`` of a track whose anomaly is confined to ``span``."""
    if label != ABNORMAL or span is None:
        return label
    return ABNORMAL if min(t1, span[1]) > max(t0, span[0]) else NORMAL


def checkpoint_distance(positions: np.ndarray, cp: Checkpoint):
    # written out so the streaming splitter gets bit-identical distances
    d = np.asarray(positions, dtype=np.float64) - np.asarray(cp.position, dtype=np.float64)
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def split_indices(positions: np.ndarray, cps: CheckpointSet) -> list[int]:
    """Indices where the track is cut: closest approach within each in-radius run."""
    n = len(positions)
    cuts = set()
    for cp in cps:
        d = checkpoint_distance(positions, cp)
        inside = d <= cp.radius
        t = 0
        while t < n:
            if not inside[t]:
                t += 1
                continue
            start = t
            while t < n and inside[t]:
                t += 1
            cuts.add(start + int(np.argmin(d[start:t])))
    # cuts at either end would leave a one-point segment
    return sorted(k for k in cuts if 0 < k < n - 1)


def segments_from_cuts(traj: Trajectory, cuts: Sequence[int]) -> list[SubTrajectory]:
    bounds = [0, *cuts, len(traj) - 1]
    out = []
    for j, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        pts = traj.points[a:b + 1]
        out.append(SubTrajectory(traj.entity_id, j, pts,
                                 span_label(traj.label, traj.anomaly_span,
                                            pts[0, 0], pts[-1, 0])))
    return out


def split_by_checkpoints(traj: Trajectory, cps: CheckpointSet) -> list[SubTrajectory]:
    """Cut a trajectory at every checkpoint visit; boundary points are shared."""
    return segments_from_cuts(traj, split_indices(traj.points[:, 1:], cps))


def split_corpus(trajs: Iterable[Trajectory], cps: CheckpointSet) -> list[SubTrajectory]:
    return [s for tr in trajs for s in split_by_checkpoints(tr, cps)]


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64).reshape(3), STD_FLOOR)

    def normalize(self, p: np.ndarray) -> np.ndarray:
        return (p - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


def fit_normalizer(subs: Sequence[SubTrajectory]) -> Normalizer:
    """Per-axis mean and population std over every point of the corpus."""
    if not subs:
        raise ValueError("cannot fit a normalizer on an empty corpus")
    allp = np.concatenate([s.positions for s in subs])
    return Normalizer(allp.mean(axis=0), allp.std(axis=0))


@dataclass
class BatcherConfig:
    bucket_width: int = 100
    batch_size: int = 64
    min_bucket_count: int | None = None  # defaults to 2 * batch_size
    rng_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.bucket_width < 1:
            raise ValueError("batch_size and bucket_width must be positive")
        if self.min_bucket_count is None:
            self.min_bucket_count = 2 * self.batch_size
        if self.min_bucket_count < 1:
            raise ValueError("min_bucket_count must be positive")


def bucketize(lengths: Sequence[int], cfg: BatcherConfig) -> list[list[int]]:
    """Group sample indices into length intervals of width ``bucket_width``.

    Intervals are ``[m, m+L), [m+L, m+2L), ...`` clipped at the longest length,
    which belongs to the last interval. Buckets with fewer than
    ``min_bucket_count`` samples are folded into the previous one (the first
    into the next).
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size == 0:
        raise ValueError("no sequences to bucket")
    lo, hi, L = int(lengths.min()), int(lengths.max()), cfg.bucket_width
    n_buckets = max(1, -(-(hi - lo + 1) // L))
    which = np.minimum((lengths - lo) // L, n_buckets - 1)
    buckets = [list(np.flatnonzero(which == k)) for k in range(n_buckets)]
    buckets = [[int(i) for i in b] for b in buckets if b]
    merged: list[list[int]] = []
    for b in buckets:
        if merged and len(b) < cfg.min_bucket_count:
            merged[-1].extend(b)
        else:
            merged.append(b)
    if len(merged) > 1 and len(merged[0]) < cfg.min_bucket_count:
        first = merged.pop(0)
        merged[0] = first + merged[0]
    return merged


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def make_batches(buckets: Sequence[Sequence[int]], cfg: BatcherConfig,
                 epoch_seed: int) -> list[list[int]]:
    """Shuffle inside buckets, cut sequentially into batches, shuffle batch order."""
    rng = epoch_rng(cfg.rng_seed, epoch_seed)
    order: list[int] = []
    for b in buckets:
        order.extend(int(i) for i in rng.permutation(np.asarray(b, dtype=np.int64)))
    bs = cfg.batch_size
    batches = [order[k:k + bs] for k in range(0, len(order), bs)]
    return [batches[k] for k in rng.permutation(len(batches))]


@dataclass
class Batch:
    inputs: np.ndarray   # (B, T_max, 3) normalized
    mask: np.ndarray     # (B, T_max) bool
    lengths: np.ndarray  # (B,)
    sample_refs: list

    @property
    def size(self) -> int:
        return len(self.lengths)


def pad_sequences(seqs: Sequence[np.ndarray], fill: float = MASK_VALUE):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if len(seqs) == 0 or lengths.min() < 1:
        raise ValueError("cannot pad an empty batch or an empty sequence")
    T = int(lengths.max())
    out = np.full((len(seqs), T, seqs[0].shape[-1]), fill, dtype=np.float64)
    for k, s in enumerate(seqs):
        out[k, :len(s)] = s
    mask = np.arange(T)[None, :] < lengths[:, None]
    return out, mask, lengths


def pad_batch(samples: Sequence[SubTrajectory], norm: Normalizer) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    x, mask, lengths = pad_sequences([norm.normalize(s.positions) for s in samples])
    return Batch(x, mask, lengths, [s.key for s in samples])


# -- file formats ---------------------------------------------------------------

def trajectory_to_record(tr: Trajectory) -> dict:
    rec = {"entity_id": tr.entity_id, "label": tr.label,
           "points": [[float(v) for v in row] for row in tr.points]}
    if tr.anomaly_span is not None:
        rec["anomaly_span"] = [float(tr.anomaly_span[0]), float(tr.anomaly_span[1])]
    if tr.meta:
        rec["meta"] = tr.meta
    return rec


def trajectory_from_record(rec: dict) -> Trajectory:
    span = rec.get("anomaly_span")
    return Trajectory(rec["entity_id"], rec["points"], rec.get("label", UNKNOWN),
                      None if span is None else (float(span[0]), float(span[1])),
                      rec.get("meta", {}))


def write_trajectories(path, trajs: Iterable[Trajectory]) -> None:
    with open(path, "w") as fh:
        for tr in trajs:
            fh.write(json.dumps(trajectory_to_record(tr), separators=(",", ":")) + "\n")


def read_trajectories(path) -> list[Trajectory]:
    """Load line-delimited JSON records, or CSV with ``entity_id,t,x,y,z,label``."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _read_csv(path)
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(trajectory_from_record(json.loads(line)))
    return out


def _read_csv(path: Path) -> list[Trajectory]:
    rows: dict[str, list] = {}
    labels: dict[str, str] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            eid = r["entity_id"]
            rows.setdefault(eid, []).append([float(r[k]) for k in ("t", "x", "y", "z")])
            labels[eid] = r.get("label") or UNKNOWN
    return [Trajectory(eid, sorted(pts), labels[eid]) for eid, pts in rows.items()]


def write_checkpoints(path, cps: CheckpointSet) -> None:
    with open(path, "w") as fh:
        for cp in cps:
            x, y, z = cp.position
            fh.write(json.dumps({"x": x, "y": y, "z": z, "radius": cp.radius}) + "\n")


def read_checkpoints(path) -> list[Checkpoint]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out.append(Checkpoint((float(r["x"]), float(r["y"]), float(r["z"])),
                                      float(r.get("radius", 2.0))))
    return out
