"""Threshold calibration and detection metrics (abnormal is the positive class)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ABNORMAL, NORMAL


@dataclass(frozen=True)
class LabeledScore:
    epsilon: float
    true_label: str

    def __post_init__(self):
        if self.true_label not in (NORMAL, ABNORMAL):
            raise ValueError(f"label must be normal/abnormal, got {self.true_label!r}")


@dataclass
class Calibration:
    theta_star: float
    best_f1_abnormal: float
    sweep: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"theta": self.theta_star, "best_f1_abnormal": self.best_f1_abnormal,
                "sweep": [[t, f] for t, f in self.sweep]}

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        return cls(float(d["theta"]), float(d["best_f1_abnormal"]),
                   [(float(t), float(f)) for t, f in d.get("sweep", [])])


def _arrays(scores) -> tuple[np.ndarray, np.ndarray]:
    """Accept LabeledScores or an ``(eps, is_abnormal)`` pair of arrays."""
    if isinstance(scores, tuple) and len(scores) == 2:
        eps, pos = scores
        return np.asarray(eps, dtype=np.float64), np.asarray(pos, dtype=bool)
    scores = list(scores)
    if not scores:
        raise ValueError("no scores")
    return (np.array([s.epsilon for s in scores], dtype=np.float64),
            np.array([s.true_label == ABNORMAL for s in scores]))


def confusion_at(scores, theta: float) -> tuple[int, int, int, int]:
    """``(tp, fp, tn, fn)`` with an alert iff ``eps > theta``."""
    eps, pos = _arrays(scores)
    alert = eps > theta
    tp = int(np.sum(alert & pos))
    fp = int(np.sum(alert & ~pos))
    return tp, fp, int(np.sum(~alert & ~pos)), int(np.sum(~alert & pos))


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def f1_at(scores, theta: float) -> float:
    tp, fp, _, fn = confusion_at(scores, theta)
    return f1_from_counts(tp, fp, fn)


def candidate_thresholds(eps: np.ndarray) -> np.ndarray:
    u = np.unique(eps)
    lo, hi = float(u[0]), float(u[-1])
    spread = hi - lo
    pad = spread if spread > 0 else abs(hi) + 1.0
    return np.concatenate([[lo - pad], (u[:-1] + u[1:]) / 2.0, [hi + pad]])


def calibrate_theta(scores) -> Calibration:
    """Pick the threshold maximizing abnormal-class F1 (smallest on ties)."""
    eps, pos = _arrays(scores)
    if pos.all() or not pos.any():
        raise ValueError("calibration needs both normal and abnormal scores")
    cands = candidate_thresholds(eps)
    # sweep with counts: alerts at theta are scores strictly above it
    order = np.sort(eps)
    pos_sorted = np.sort(eps[pos])
    n_pos = int(pos.sum())
    alerts = len(order) - np.searchsorted(order, cands, side="right")
    tp = n_pos - np.searchsorted(pos_sorted, cands, side="right")
    fp = alerts - tp
    fn = n_pos - tp
    f1 = np.where(2 * tp + fp + fn > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
    k = int(np.argmax(f1))  # first maximum is the smallest theta
    sweep = [(float(t), float(f)) for t, f in zip(cands, f1)]
    return Calibration(float(cands[k]), float(f1[k]), sweep)


def _descending_groups(eps: np.ndarray, pos: np.ndarray):
    """Cumulative ``(tp, fp)`` after each distinct score, highest first."""
    order = np.argsort(-eps, kind="stable")
    e, p = eps[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(e) != 0), len(e) - 1]
    tp = np.cumsum(p)[last]
    fp = np.cumsum(~p)[last]
    return e[last], tp.astype(np.int64), fp.astype(np.int64)


def roc_curve(scores):
    """``(fpr, tpr, thresholds)`` from (0, 0) to (1, 1), ties grouped."""
    eps, pos = _arrays(scores)
    P, N = int(pos.sum()), int((~pos).sum())
    if P == 0 or N == 0:
        raise ValueError("ROC needs both classes")
    thr, tp, fp = _descending_groups(eps, pos)
    fpr = np.r_[0.0, fp / N]
    tpr = np.r_[0.0, tp / P]
    return fpr, tpr, np.r_[np.inf, thr]


def auc_roc(scores) -> float:
    """Trapezoidal area under the ROC curve, accumulated in integer counts."""
    eps, pos = _arrays(scores)
    P, N = int(pos.sum()), int((~pos).sum())
    if P == 0 or N == 0:
        raise ValueError("AUC needs both classes")
    _, tp, fp = _descending_groups(eps, pos)
    tp0 = np.r_[0, tp[:-1]]
    fp0 = np.r_[0, fp[:-1]]
    twice_area = int(np.sum((fp - fp0) * (tp + tp0)))
    return twice_area / (2 * P * N)


def pr_curve(scores):
    """``(recall, precision, thresholds)`` over descending distinct scores."""
    eps, pos = _arrays(scores)
    P = int(pos.sum())
    if P == 0:
        raise ValueError("PR curve needs positives")
    thr, tp, fp = _descending_groups(eps, pos)
    return tp / P, tp / (tp + fp), thr


def average_precision(scores) -> float:
    """Sum of ``(R_k - R_{k-1}) * P_k`` over the descending sweep."""
    eps, pos = _arrays(scores)
    P = int(pos.sum())
    if P == 0:
        raise ValueError("AP needs positives")
    _, tp, fp = _descending_groups(eps, pos)
    prev = 0
    terms = []
    for t, f in zip(tp.tolist(), fp.tolist()):
        terms.append(((t - prev) / P) * (t / (t + f)))
        prev = t
    return math.fsum(terms)


def f1_sweep(scores, theta_grid: Sequence[float] | None = None, n: int = 200):
    eps, pos = _arrays(scores)
    if theta_grid is None:
        theta_grid = np.linspace(0.0, float(eps.max()), n)
    return [(float(t), f1_at((eps, pos), t)) for t in theta_grid]


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r, f1_from_counts(tp, fp, fn)


def classification_report(scores, theta: float) -> dict[str, ClassMetrics | float]:
    """Per-class precision/recall/F1/support plus support-weighted averages."""
    tp, fp, tn, fn = confusion_at(scores, theta)
    ab = ClassMetrics(*_prf(tp, fp, fn), support=tp + fn)
    no = ClassMetrics(*_prf(tn, fn, fp), support=tn + fp)
    n = ab.support + no.support
    avg = ClassMetrics(*(
        (getattr(no, k) * no.support + getattr(ab, k) * ab.support) / n
        for k in ("precision", "recall", "f1")), support=n)
    return {NORMAL: no, ABNORMAL: ab, "average": avg, "accuracy": (tp + tn) / n}


def summary(scores, theta: float) -> dict:
    rep = classification_report(scores, theta)
    return {
        "theta": theta,
        "ap": average_precision(scores),
        "auc_roc": auc_roc(scores),
        "f1_abnormal": rep[ABNORMAL].f1,
        "accuracy": rep["accuracy"],
        "classes": {k: vars(v) for k, v in rep.items() if k != "accuracy"},
    }


def format_summary(s: dict) -> str:
    lines = [f"AP              {s['ap']:.4f}",
             f"AUC-ROC         {s['auc_roc']:.4f}",
             f"F1 (theta={s['theta']:.6g})  {s['f1_abnormal']:.4f}",
             f"accuracy        {s['accuracy']:.4f}",
             "",
             f"{'':14s}{'precision':>10s}{'recall':>10s}{'F1-score':>10s}{'support':>10s}"]
    for name, key in (("normal", NORMAL), ("abnormal", ABNORMAL), ("average score", "average")):
        c = s["classes"][key]
        lines.append(f"{name:14s}{c['precision']:10.3f}{c['recall']:10.3f}"
                     f"{c['f1']:10.3f}{c['support']:10d}")
    return "\n".join(lines) + "\n"
