"""Pseudo-label generation: anchor matching, forward teacher propagation,
last-frame distance filtering, and backward removal.

Anchors are first/last-frame correspondences above a confidence threshold.
Each teacher propagates the anchors from the first frame through the whole
video; a propagated track survives only if it lands within ``d_filter``
pixels of its anchor's last-frame position, and non-survivors are removed
from every frame.  Teacher outputs are merged side by side with
teacher-tagged point ids rather than averaged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .core import (
    Anchor,
    Correspondence,
    Frame,
    FlowField,
    PseudoLabelSet,
    bilinear_sample,
    euclidean_dist,
)
from .errors import NoReliableAnchorsError, TeacherError

logger = logging.getLogger(__name__)

TEACHER_ID_STRIDE = 1000  # merged point_id = teacher_index * stride + anchor id


@dataclass(frozen=True)
class PLGConfig:
    score_threshold: float = 0.85
    d_filter: float = 5.0
    max_anchors: int = 8

    def __post_init__(self):
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError("score_threshold must lie in (0, 1)")
        if self.d_filter <= 0:
            raise ValueError("d_filter must be positive")
        if self.max_anchors < 1:
            raise ValueError("max_anchors must be at least 1")


class Teacher(Protocol):
    """Propagates first-frame points through a video.

    Returns an array of shape (T, N, 2) covering every frame.
    """

    def __call__(self, video: Sequence[Frame],
                 points: Sequence[tuple[float, float]]) -> np.ndarray: ...


Matcher = Callable[[Frame, Frame], list[Correspondence]]


def select_anchors(matches: Sequence[Correspondence], cfg: PLGConfig) -> list[Anchor]:
    """Keep matches at or above the threshold, best first, capped, re-id'd."""
    if not matches:
        raise NoReliableAnchorsError("no reliable anchors: matcher returned nothing")
    kept = [(i, m) for i, m in enumerate(matches) if m.score >= cfg.score_threshold]
    if not kept:
        raise NoReliableAnchorsError(
            f"no reliable anchors: best score "
            f"{max(m.score for m in matches):.3f} < {cfg.score_threshold}")
    kept.sort(key=lambda im: (-im[1].score, im[0]))
    kept = kept[:cfg.max_anchors]
    return [
        Anchor(point_id=pid, x1=m.x1, y1=m.y1, xt=m.xt, yt=m.yt, score=m.score)
        for pid, (_, m) in enumerate(kept)
    ]


def propagate(teacher: Teacher, video: Sequence[Frame],
              anchors: Sequence[Anchor]) -> np.ndarray:
    """Run one teacher on the anchor points; validate full-video coverage."""
    points = [(a.x1, a.y1) for a in anchors]
    try:
        tracks = np.asarray(teacher(video, points), dtype=np.float64)
    except Exception as exc:
        raise TeacherError(f"teacher failed on video of {len(video)} frames: {exc}") from exc
    expected = (len(video), len(anchors), 2)
    if tracks.shape != expected:
        raise TeacherError(
            f"teacher output shape {tracks.shape} != expected {expected}")
    return tracks


def filter_and_backtrace(
    tracks: np.ndarray,
    anchors: Sequence[Anchor],
    cfg: PLGConfig,
) -> PseudoLabelSet:
    """Drop tracks that end more than ``d_filter`` px from their anchor and
    emit labels for survivors on every intermediate frame."""
    t_count = tracks.shape[0]
    survivors = [
        a.point_id for i, a in enumerate(anchors)
        if euclidean_dist(tracks[t_count - 1, i], (a.xt, a.yt)) <= cfg.d_filter
    ]
    survivor_set = set(survivors)
    labels: dict[int, dict[int, tuple[float, float]]] = {}
    for t in range(1, t_count - 1):
        labels[t] = {
            a.point_id: (float(tracks[t, i, 0]), float(tracks[t, i, 1]))
            for i, a in enumerate(anchors) if a.point_id in survivor_set
        }
    if not survivors:
        logger.info("pseudo-label filter removed every track (N=%d)", len(anchors))
    return PseudoLabelSet(anchors=list(anchors), labels=labels,
                          survivor_ids=survivors)


def generate(
    video: Sequence[Frame],
    matcher: Matcher,
    teachers: Sequence[tuple[str, Teacher]],
    cfg: PLGConfig = PLGConfig(),
) -> PseudoLabelSet:
    """Anchor once, then propagate and filter per teacher; merge by tagging.

    Merged point ids are ``teacher_index * TEACHER_ID_STRIDE + anchor id`` so
    each teacher's filtered stream stays intact side by side.
    """
    matches = matcher(video[0], video[-1])
    anchors = select_anchors(matches, cfg)

    merged_anchors: list[Anchor] = []
    merged_labels: dict[int, dict[int, tuple[float, float]]] = {
        t: {} for t in range(1, len(video) - 1)}
    merged_survivors: list[int] = []
    for t_index, (name, teacher) in enumerate(teachers):
        tracks = propagate(teacher, video, anchors)
        subset = filter_and_backtrace(tracks, anchors, cfg)
        offset = t_index * TEACHER_ID_STRIDE
        logger.info("teacher %s: %d/%d tracks survive the last-frame filter",
                    name, subset.survivor_count, len(anchors))
        for a in subset.anchors:
            merged_anchors.append(Anchor(point_id=a.point_id + offset, x1=a.x1,
                                         y1=a.y1, xt=a.xt, yt=a.yt, score=a.score))
        for frame, pts in subset.labels.items():
            for pid, pos in pts.items():
                merged_labels[frame][pid + offset] = pos
        merged_survivors.extend(pid + offset for pid in subset.survivor_ids)

    return PseudoLabelSet(anchors=merged_anchors, labels=merged_labels,
                          survivor_ids=merged_survivors)


# ---------------------------------------------------------------------------
# toy matcher
# ---------------------------------------------------------------------------

@dataclass
class PatchCorrelationMatcher:
    """Corner detection plus exhaustive normalized cross-correlation matching.

    Keypoints come from a structure-tensor corner score on the first frame;
    each is matched in the last frame by searching an 8x8-patch NCC inside
    ``search_radius``.  Scores map NCC from [-1, 1] to [0, 1].
    """

    patch: int = 8
    max_keypoints: int = 16
    search_radius: int = 12
    min_separation: int = 8

    def _corner_scores(self, gray: torch.Tensor) -> torch.Tensor:
        gx = torch.zeros_like(gray)
        gy = torch.zeros_like(gray)
        gx[:, 1:-1] = (gray[:, 2:] - gray[:, :-2]) * 0.5
        gy[1:-1, :] = (gray[2:, :] - gray[:-2, :]) * 0.5
        import torch.nn.functional as torch_f

        def box(t):
            return torch_f.avg_pool2d(
                torch_f.pad(t.unsqueeze(0).unsqueeze(0), (2, 2, 2, 2), mode="replicate"),
                5, stride=1).squeeze(0).squeeze(0)

        jxx, jyy, jxy = box(gx * gx), box(gy * gy), box(gx * gy)
        det = jxx * jyy - jxy * jxy
        trace = jxx + jyy
        return det - 0.05 * trace * trace

    def _keypoints(self, frame: Frame) -> list[tuple[int, int]]:
        gray = frame.pixels.mean(dim=-1)
        score = self._corner_scores(gray)
        h, w = score.shape
        m = self.patch  # keep full patches inside the frame
        score[:m, :] = float("-inf")
        score[-m:, :] = float("-inf")
        score[:, :m] = float("-inf")
        score[:, -m:] = float("-inf")
        order = torch.argsort(score.reshape(-1), descending=True)
        points: list[tuple[int, int]] = []
        for idx in order.tolist():
            y, x = divmod(idx, w)
            if score[y, x] == float("-inf"):
                break
            if all(max(abs(x - px), abs(y - py)) >= self.min_separation
                   for px, py in points):
                points.append((x, y))
            if len(points) >= self.max_keypoints:
                break
        return points

    def _ncc(self, patch_a: torch.Tensor, patch_b: torch.Tensor) -> float:
        a = patch_a - patch_a.mean()
        b = patch_b - patch_b.mean()
        denom = a.norm() * b.norm()
        if denom < 1e-9:
            return 0.0
        return float((a * b).sum() / denom)

    def __call__(self, first: Frame, last: Frame) -> list[Correspondence]:
        half = self.patch // 2
        ga = first.pixels.mean(dim=-1)
        gb = last.pixels.mean(dim=-1)
        h, w = ga.shape
        out = []
        for x, y in self._keypoints(first):
            ref = ga[y - half:y + half, x - half:x + half]
            best_score, best_xy = -1.0, (x, y)
            for dy in range(-self.search_radius, self.search_radius + 1):
                for dx in range(-self.search_radius, self.search_radius + 1):
                    cx, cy = x + dx, y + dy
                    if cx - half < 0 or cy - half < 0 or cx + half > w or cy + half > h:
                        continue
                    cand = gb[cy - half:cy + half, cx - half:cx + half]
                    ncc = self._ncc(ref, cand)
                    if ncc > best_score:
                        best_score, best_xy = ncc, (cx, cy)
            out.append(Correspondence(
                x1=float(x), y1=float(y), xt=float(best_xy[0]), yt=float(best_xy[1]),
                score=(best_score + 1.0) / 2.0))
        return out


# ---------------------------------------------------------------------------
# toy teachers
# ---------------------------------------------------------------------------

def identity_teacher(video: Sequence[Frame],
                     points: Sequence[tuple[float, float]]) -> np.ndarray:
    """Static-scene teacher: every track stays at its anchor position."""
    base = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.repeat(base[None, :, :], len(video), axis=0)


@dataclass
class ConstantDriftTeacher:
    """Degenerate teacher drifting every point by a fixed velocity per frame."""

    vx: float = 1.0
    vy: float = 0.0

    def __call__(self, video, points) -> np.ndarray:
        base = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        steps = np.arange(len(video), dtype=np.float64)
        drift = np.stack([steps * self.vx, steps * self.vy], axis=-1)
        return base[None, :, :] + drift[:, None, :]


@dataclass
class FlowChainTeacher:
    """Chains per-pair flow fields from any provider (exact or estimated)."""

    flow_provider: Callable[[int], FlowField]  # t -> flow field t -> t+1

    def __call__(self, video, points) -> np.ndarray:
        n = len(points)
        out = np.zeros((len(video), n, 2), dtype=np.float64)
        pos = np.asarray(points, dtype=np.float64).reshape(n, 2).copy()
        out[0] = pos
        for t in range(len(video) - 1):
            flow = self.flow_provider(t).vectors
            vec = bilinear_sample(
                flow.double(),
                torch.from_numpy(pos[:, 0].copy()),
                torch.from_numpy(pos[:, 1].copy()),
            ).numpy()
            pos = pos + vec
            out[t + 1] = pos
        return out


@dataclass
class WarpOracleTeacher:
    """Exact teacher reading the synthetic generator's analytic warp."""

    warp: object  # synth.RbfWarp

    def __call__(self, video, points) -> np.ndarray:
        base = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return np.stack([self.warp.forward(t, base) for t in range(len(video))])
