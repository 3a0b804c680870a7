"""Shared domain types and geometry.

Conventions used everywhere in this package:

* tensors are laid out H x W x C (channels last), torch float32 unless noted;
* x is the column coordinate, y the row coordinate, origin at the center of
  the top-left pixel;
* frame indices are 0-based, both in memory and in every file format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import NonFiniteInputError


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass
class Frame:
    """One video frame: H x W x 3 pixels in [0, 1] plus its index."""

    pixels: torch.Tensor
    index: int

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"frame pixels must be HxWx3, got {tuple(self.pixels.shape)}")
        h, w = self.pixels.shape[:2]
        if h < 8 or w < 8:
            raise ValueError(f"frame too small: {h}x{w} (need at least 8x8)")
        if self.index < 0:
            raise ValueError(f"frame index must be >= 0, got {self.index}")
        if not torch.isfinite(self.pixels).all():
            raise NonFiniteInputError("frame pixels contain non-finite values")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"frame pixels outside [0,1]: min={lo}, max={hi}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class FlowField:
    """Dense displacement field (dx, dy) in pixels, H x W x 2.

    ``vectors[y, x]`` moves a point at (x, y) in the source frame to
    (x + dx, y + dy) in the target frame.
    """

    vectors: torch.Tensor
    source_index: int = 0
    target_index: int = 1

    def __post_init__(self):
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 2:
            raise ValueError(f"flow must be HxWx2, got {tuple(self.vectors.shape)}")
        if not torch.isfinite(self.vectors).all():
            raise NonFiniteInputError("flow field contains non-finite values")

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


@dataclass
class OcclusionMap:
    """Per-pixel occlusion logits; probability = sigmoid(logits)."""

    logits: torch.Tensor

    def __post_init__(self):
        if self.logits.ndim != 2:
            raise ValueError(f"occlusion logits must be HxW, got {tuple(self.logits.shape)}")
        if not torch.isfinite(self.logits).all():
            raise NonFiniteInputError("occlusion logits contain non-finite values")

    def probability(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


@dataclass
class UncertaintyMap:
    """Per-pixel log-variance (log sigma^2) of the flow estimate."""

    log_variance: torch.Tensor

    def __post_init__(self):
        if self.log_variance.ndim != 2:
            raise ValueError(
                f"log-variance must be HxW, got {tuple(self.log_variance.shape)}")
        if not torch.isfinite(self.log_variance).all():
            raise NonFiniteInputError("log-variance contains non-finite values")

    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_variance)


@dataclass(frozen=True)
class PointQuery:
    """A point to track, anchored at a given frame."""

    frame_index: int
    x: float
    y: float


@dataclass(frozen=True)
class TrackPoint:
    """State of one tracked point at one frame."""

    x: float
    y: float
    visible: bool
    uncertainty: float | None = None


@dataclass
class PointTrack:
    """Per-query trajectory: one entry per frame from the query frame on."""

    query: PointQuery
    points: dict[int, TrackPoint] = field(default_factory=dict)

    def frames(self) -> list[int]:
        return sorted(self.points)

    def position(self, frame_index: int) -> tuple[float, float]:
        p = self.points[frame_index]
        return p.x, p.y


@dataclass(frozen=True)
class Correspondence:
    """A first-frame / last-frame match with a confidence score in [0, 1]."""

    x1: float
    y1: float
    xt: float
    yt: float
    score: float


@dataclass(frozen=True)
class Anchor:
    """A correspondence promoted to a pseudo-label seed."""

    point_id: int
    x1: float
    y1: float
    xt: float
    yt: float
    score: float


@dataclass
class PseudoLabelSet:
    """Anchor-derived per-frame pseudo point labels.

    ``labels`` maps frame index -> {point_id: (x, y)}.  Every point_id that
    appears in an intermediate frame is a survivor of the last-frame filter.
    """

    anchors: list[Anchor]
    labels: dict[int, dict[int, tuple[float, float]]]
    survivor_ids: list[int]

    @property
    def survivor_count(self) -> int:
        return len(self.survivor_ids)

    def labeled_frames(self) -> list[int]:
        return sorted(f for f, pts in self.labels.items() if pts)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def euclidean_dist(p, q) -> float:
    """L2 distance in pixels between two (x, y) points."""
    px, py = float(p[0]), float(p[1])
    qx, qy = float(q[0]), float(q[1])
    if not all(math.isfinite(v) for v in (px, py, qx, qy)):
        raise NonFiniteInputError("euclidean_dist needs finite coordinates")
    return math.hypot(px - qx, py - qy)


def bilinear_sample(
    field: torch.Tensor,
    x,
    y,
    return_clamped: bool = False,
):
    """Bilinearly interpolate ``field`` (HxW or HxWxC) at sub-pixel points.

    Coordinates outside [0, W-1] x [0, H-1] are clamped to the border
    (clamp-to-edge policy); pass ``return_clamped=True`` to also get a mask of
    the points that were clamped.  ``x`` and ``y`` may be scalars or 1-D
    tensors; the result has shape (C,), (), (N, C) or (N,) accordingly.
    Differentiable with respect to ``field`` and the coordinates.
    """
    squeeze_channel = field.ndim == 2
    if squeeze_channel:
        field = field.unsqueeze(-1)
    if field.ndim != 3:
        raise ValueError(f"field must be HxW or HxWxC, got {tuple(field.shape)}")
    h, w = field.shape[:2]

    xt = torch.as_tensor(x, dtype=field.dtype)
    yt = torch.as_tensor(y, dtype=field.dtype)
    scalar_input = xt.ndim == 0
    xt = xt.reshape(-1)
    yt = yt.reshape(-1)

    clamped = (xt < 0) | (xt > w - 1) | (yt < 0) | (yt > h - 1)
    xc = xt.clamp(0.0, float(w - 1))
    yc = yt.clamp(0.0, float(h - 1))

    x0 = xc.floor().clamp(0, w - 2) if w > 1 else xc.floor().clamp(0, 0)
    y0 = yc.floor().clamp(0, h - 2) if h > 1 else yc.floor().clamp(0, 0)
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(0, w - 1)
    y1i = (y0i + 1).clamp(0, h - 1)

    fx = (xc - x0).unsqueeze(-1)
    fy = (yc - y0).unsqueeze(-1)

    v00 = field[y0i, x0i]
    v01 = field[y0i, x1i]
    v10 = field[y1i, x0i]
    v11 = field[y1i, x1i]

    top = v00 * (1 - fx) + v01 * fx
    bottom = v10 * (1 - fx) + v11 * fx
    out = top * (1 - fy) + bottom * fy

    if squeeze_channel:
        out = out.squeeze(-1)
    if scalar_input:
        out = out.squeeze(0)
        clamped = clamped.squeeze(0)
    if return_clamped:
        return out, clamped
    return out


def warp_with_flow(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Pull ``image`` back through ``flow``: out[y, x] = image(x+dx, y+dy).

    ``image`` is HxW or HxWxC; ``flow`` is HxWx2 on the output grid.  Border
    samples use clamp-to-edge, matching :func:`bilinear_sample`.
    """
    h, w = flow.shape[:2]
    if image.shape[0] != h or image.shape[1] != w:
        raise ValueError(
            f"image {tuple(image.shape[:2])} and flow {(h, w)} grids differ")
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=flow.dtype),
        torch.arange(w, dtype=flow.dtype),
        indexing="ij",
    )
    sample_x = (xs + flow[..., 0]).reshape(-1)
    sample_y = (ys + flow[..., 1]).reshape(-1)
    out = bilinear_sample(image, sample_x, sample_y)
    if image.ndim == 2:
        return out.reshape(h, w)
    return out.reshape(h, w, image.shape[2])


def tracks_to_frame_map(
    tracks: dict[int, PointTrack],
) -> dict[int, dict[int, tuple[float, float]]]:
    """Re-index tracks-by-id into frame -> {point_id: (x, y)}."""
    out: dict[int, dict[int, tuple[float, float]]] = {}
    for pid, track in tracks.items():
        for frame_index, pt in track.points.items():
            out.setdefault(frame_index, {})[pid] = (pt.x, pt.y)
    return out
