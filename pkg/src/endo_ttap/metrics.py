"""Tracking metrics over matched point tracks.

Position metrics are evaluated on (frame, point) pairs where the ground
truth is visible; occlusion accuracy compares visibility flags on all
matched pairs.  The threshold-ladder accuracy follows the track-any-point
delta-average convention with thresholds {4, 8, 16, 32, 64} px, and the
robustness score is the joint position-within-8px and visibility-agreement
success rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .core import PointTrack, euclidean_dist
from .errors import EmptyEvaluationSetError

ACC_THRESHOLDS = (4.0, 8.0, 16.0, 32.0, 64.0)
ROB_DEFAULT_THRESHOLD = 8.0


@dataclass
class MetricReport:
    acc2d: float
    epe2d: float
    rob2d: float
    occ_accuracy: float
    per_threshold: dict[float, float] = field(default_factory=dict)
    pair_count: int = 0

    def as_dict(self) -> dict[str, float]:
        out = {
            "acc2d": self.acc2d,
            "epe2d": self.epe2d,
            "rob2d": self.rob2d,
            "occ_accuracy": self.occ_accuracy,
            "pair_count": float(self.pair_count),
        }
        for thr, val in sorted(self.per_threshold.items()):
            out[f"acc2d_within_{int(thr)}"] = val
        return out


def _matched_pairs(pred: dict[int, PointTrack], gt: dict[int, PointTrack]):
    """Yield (pid, frame, pred_point, gt_point) on the id/frame intersection."""
    for pid in sorted(set(pred) & set(gt)):
        p_track, g_track = pred[pid], gt[pid]
        for frame in sorted(set(p_track.points) & set(g_track.points)):
            yield pid, frame, p_track.points[frame], g_track.points[frame]


def _visible_errors(pred: dict[int, PointTrack], gt: dict[int, PointTrack]):
    errors = []
    for _, _, p, g in _matched_pairs(pred, gt):
        if g.visible:
            errors.append((euclidean_dist((p.x, p.y), (g.x, g.y)), p.visible))
    if not errors:
        raise EmptyEvaluationSetError(
            "empty evaluation set: no visible ground-truth points matched")
    return errors


def epe2d(pred: dict[int, PointTrack], gt: dict[int, PointTrack]) -> float:
    """Mean Euclidean error over visible-ground-truth pairs."""
    errors = _visible_errors(pred, gt)
    return sum(e for e, _ in errors) / len(errors)


def acc2d(pred: dict[int, PointTrack], gt: dict[int, PointTrack]) -> float:
    """Mean over the threshold ladder of the within-threshold fraction."""
    return sum(acc2d_breakdown(pred, gt).values()) / len(ACC_THRESHOLDS)


def acc2d_breakdown(pred: dict[int, PointTrack],
                    gt: dict[int, PointTrack]) -> dict[float, float]:
    errors = _visible_errors(pred, gt)
    return {
        thr: sum(1 for e, _ in errors if e < thr) / len(errors)
        for thr in ACC_THRESHOLDS
    }


def rob2d(pred: dict[int, PointTrack], gt: dict[int, PointTrack],
          threshold: float = ROB_DEFAULT_THRESHOLD) -> float:
    """Fraction of visible-gt pairs within the threshold with matching
    visibility flags."""
    errors = _visible_errors(pred, gt)
    good = sum(1 for e, pred_vis in errors if e < threshold and pred_vis)
    return good / len(errors)


def occ_accuracy(pred: dict[int, PointTrack], gt: dict[int, PointTrack]) -> float:
    """Fraction of matched pairs whose visibility flags agree."""
    total = 0
    agree = 0
    for _, _, p, g in _matched_pairs(pred, gt):
        total += 1
        agree += int(p.visible == g.visible)
    if total == 0:
        raise EmptyEvaluationSetError("empty evaluation set: no matched pairs")
    return agree / total


def evaluate(pred: dict[int, PointTrack], gt: dict[int, PointTrack]) -> MetricReport:
    breakdown = acc2d_breakdown(pred, gt)
    errors = _visible_errors(pred, gt)
    return MetricReport(
        acc2d=sum(breakdown.values()) / len(breakdown),
        epe2d=epe2d(pred, gt),
        rob2d=rob2d(pred, gt),
        occ_accuracy=occ_accuracy(pred, gt),
        per_threshold=breakdown,
        pair_count=len(errors),
    )


def write_report(path, report: MetricReport) -> None:
    lines = [f"{key} = {value!r}" for key, value in report.as_dict().items()]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_report(path) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = float(value.strip())
    return out
