"""Online scoring: per-entity sessions, checkpoint splitting as points arrive."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .data import UNKNOWN, CheckpointSet, SubTrajectory, checkpoint_distance, span_label
from .seq2seq import ModelParameters, reconstruction_error


@dataclass
class ScoreReport:
    entity_id: str
    segment_index: int
    epsilon: float
    threshold_theta: float
    t_start: float
    t_end: float
    label: str = UNKNOWN

    @property
    def is_alert(self) -> bool:
        return self.epsilon > self.threshold_theta

    def to_dict(self) -> dict:
        return {"entity_id": self.entity_id, "segment_index": self.segment_index,
                "epsilon": self.epsilon, "threshold_theta": self.threshold_theta,
                "is_alert": self.is_alert, "t_start": self.t_start, "t_end": self.t_end,
                "label": self.label}


def score(params: ModelParameters, sub: SubTrajectory, theta: float) -> ScoreReport:
    eps = reconstruction_error(params, sub)
    return ScoreReport(sub.parent_id, sub.segment_index, eps, float(theta),
                       float(sub.points[0, 0]), float(sub.points[-1, 0]), sub.label)


@dataclass
class _Run:
    start: int
    best_index: int
    best_dist: float


@dataclass
class EntitySession:
    """Streaming counterpart of :func:`trajad.data.split_by_checkpoints`.

    Points are buffered from the last emitted cut. A cut becomes final once
    its checkpoint run has closed and no still-open run started at or before
    it, which keeps the output identical to offline splitting.
    """
    entity_id: str
    checkpoints: CheckpointSet
    label: str = UNKNOWN
    anomaly_span: tuple[float, float] | None = None
    buffer: list = field(default_factory=list)
    offset: int = 0           # global index of buffer[0]
    segment_index: int = 0
    runs: dict = field(default_factory=dict)     # checkpoint index -> open _Run
    pending: set = field(default_factory=set)    # closed-run cut indices (global)

    @property
    def n_seen(self) -> int:
        return self.offset + len(self.buffer)

    def ingest_point(self, point) -> list[SubTrajectory]:
        p = np.asarray(point, dtype=np.float64).reshape(4)
        if self.buffer and not p[0] > self.buffer[-1][0]:
            raise ValueError(f"{self.entity_id}: timestamp {p[0]} not after "
                             f"{self.buffer[-1][0]}")
        k = self.n_seen
        self.buffer.append(p)
        for ci, cp in enumerate(self.checkpoints):
            d = float(checkpoint_distance(p[1:], cp))
            run = self.runs.get(ci)
            if d <= cp.radius:
                if run is None:
                    self.runs[ci] = _Run(k, k, d)
                elif d < run.best_dist:
                    run.best_index, run.best_dist = k, d
            elif run is not None:
                del self.runs[ci]
                self.pending.add(run.best_index)
        return self._emit_ready(final=False)

    def finalize(self) -> list[SubTrajectory]:
        """Flush everything; the last segment is emitted if it has >= 2 points."""
        for run in self.runs.values():
            self.pending.add(run.best_index)
        self.runs.clear()
        out = self._emit_ready(final=True)
        if len(self.buffer) >= 2:
            out.append(self._segment(len(self.buffer) - 1))
        self.buffer = self.buffer[-1:]
        return out

    def _emit_ready(self, final: bool) -> list[SubTrajectory]:
        out = []
        open_min = min((r.start for r in self.runs.values()), default=None)
        last = self.n_seen - 1
        for cut in sorted(self.pending):
            if open_min is not None and cut >= open_min:
                break
            if cut <= 0 or cut == self.offset or (final and cut >= last):
                self.pending.discard(cut)
                continue
            self.pending.discard(cut)
            local = cut - self.offset
            out.append(self._segment(local))
            self.buffer = self.buffer[local:]
            self.offset = cut
        return out

    def _segment(self, local_end: int) -> SubTrajectory:
        pts = np.array(self.buffer[:local_end + 1])
        sub = SubTrajectory(self.entity_id, self.segment_index, pts,
                            span_label(self.label, self.anomaly_span, pts[0, 0], pts[-1, 0]))
        self.segment_index += 1
        return sub


class Detector:
    """Drives many entity sessions against one shared model."""

    def __init__(self, params: ModelParameters, checkpoints: CheckpointSet, theta: float):
        self.params = params
        self.checkpoints = list(checkpoints)
        self.theta = float(theta)
        self.sessions: dict[str, EntitySession] = {}

    def session(self, entity_id: str, label: str = UNKNOWN,
                anomaly_span: tuple[float, float] | None = None) -> EntitySession:
        s = self.sessions.get(entity_id)
        if s is None:
            s = self.sessions[entity_id] = EntitySession(entity_id, self.checkpoints, label,
                                                         anomaly_span)
        return s

    def feed(self, entity_id: str, point) -> list[ScoreReport]:
        subs = self.session(entity_id).ingest_point(point)
        return [score(self.params, s, self.theta) for s in subs]

    def close(self, entity_id: str) -> list[ScoreReport]:
        s = self.sessions.pop(entity_id, None)
        if s is None:
            return []
        return [score(self.params, sub, self.theta) for sub in s.finalize()]

    def close_all(self) -> list[ScoreReport]:
        out = []
        for eid in list(self.sessions):
            out.extend(self.close(eid))
        return out


def stream_segments(points: Iterable, entity_id: str, checkpoints: CheckpointSet,
                    label: str = UNKNOWN,
                    anomaly_span: tuple[float, float] | None = None) -> list[SubTrajectory]:
    s = EntitySession(entity_id, checkpoints, label, anomaly_span)
    out = []
    for p in points:
        out.extend(s.ingest_point(p))
    out.extend(s.finalize())
    return out
