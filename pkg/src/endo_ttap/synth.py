"""Synthetic ground-truth video generation.

A video is a textured base image deformed by a smooth time-varying
radial-basis displacement field, optionally with a solid moving rectangle
painted on top to simulate an instrument.  Frames, dense flow between
consecutive frames (both directions), point tracks for a seeded query grid
and per-frame occlusion masks are all derived analytically from the same
displacement field, so serve as exact oracles for each other.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import Frame, FlowField, PointQuery, PointTrack, TrackPoint, bilinear_sample
from .data import (
    frame_filename,
    write_flow_file,
    write_label_file,
    write_mask,
    write_track_file,
    write_video,
)
from .errors import FoldOverRiskError

_INVERSE_TOL = 1e-9
_INVERSE_MAX_ITERS = 60


@dataclass(frozen=True)
class OccluderSpec:
    height: int = 14
    width: int = 14
    vx: float = 3.0
    vy: float = 0.5
    entry_frame: int = 4


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    frame_count: int = 20
    warp_amplitude: float = 3.0
    warp_control_points: int = 4
    occluder: OccluderSpec | None = OccluderSpec()
    texture: str = "tissue"  # "tissue" or "noise"
    query_grid_step: int = 8
    query_margin: int = 8

    def validate(self) -> None:
        if self.frame_count < 3:
            raise ValueError("frame_count must be >= 3 (first, last and intermediate)")
        if self.warp_amplitude >= min(self.height, self.width) / 4:
            raise FoldOverRiskError(
                f"warp amplitude {self.warp_amplitude} too large for "
                f"{self.height}x{self.width} frames (fold-over risk)")
        if self.texture not in ("tissue", "noise"):
            raise ValueError(f"unknown texture kind {self.texture!r}")


class RbfWarp:
    """Analytic time-varying displacement field over base coordinates.

    ``forward(t, pts)`` maps base-frame points to their frame-t positions;
    ``inverse(t, pts)`` solves the fixed-point equation for the reverse map.
    Displacement at frame 0 is identically zero.
    """

    def __init__(self, spec: SynthSpec, rng: np.random.Generator):
        h, w, n = spec.height, spec.width, spec.warp_control_points
        self.centers = np.stack([
            rng.uniform(0.15 * w, 0.85 * w, size=n),
            rng.uniform(0.15 * h, 0.85 * h, size=n),
        ], axis=1)  # (n, 2) as (x, y)
        self.sigmas = rng.uniform(0.25, 0.45, size=n) * min(h, w)
        directions = rng.normal(size=(n, 2))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        magnitudes = rng.uniform(0.5, 1.0, size=n) * spec.warp_amplitude
        self.amplitudes = directions * magnitudes[:, None]  # (n, 2)
        self.freqs = rng.uniform(0.6, 1.4, size=n) * np.pi
        self.phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
        self.frame_count = spec.frame_count

        # contraction bound for the fixed-point inverse: the displacement
        # Jacobian norm must stay < 1; max |grad| of a Gaussian bump is
        # exp(-1/2)/sigma
        lipschitz = float(np.sum(
            np.linalg.norm(self.amplitudes, axis=1) * np.exp(-0.5) / self.sigmas))
        if lipschitz >= 0.5:
            raise FoldOverRiskError(
                f"warp Lipschitz bound {lipschitz:.3f} >= 0.5 (fold-over risk)")

    def _time_scales(self, t: int) -> np.ndarray:
        tau = t / max(self.frame_count - 1, 1)
        return np.sin(self.freqs * tau + self.phases) - np.sin(self.phases)

    def displacement(self, t: int, pts: np.ndarray) -> np.ndarray:
        """RBF displacement at base-frame coordinates ``pts`` (N, 2)."""
        scales = self._time_scales(t)
        d2 = ((pts[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        weights = np.exp(-d2 / (2.0 * self.sigmas[None, :] ** 2))
        coeffs = self.amplitudes * scales[:, None]  # (n, 2)
        return weights @ coeffs

    def forward(self, t: int, pts: np.ndarray) -> np.ndarray:
        return pts + self.displacement(t, pts)

    def inverse(self, t: int, pts: np.ndarray) -> np.ndarray:
        base = pts.copy()
        for _ in range(_INVERSE_MAX_ITERS):
            prev = base
            base = pts - self.displacement(t, prev)
            if np.abs(base - prev).max() < _INVERSE_TOL:
                break
        return base


@dataclass
class SynthSample:
    spec: SynthSpec
    frames: list[Frame]
    gt_flows_fwd: list[FlowField]   # [t] is flow t -> t+1
    gt_flows_bwd: list[FlowField]   # [t] is flow t+1 -> t
    gt_tracks: dict[int, PointTrack]
    gt_occlusion: list[np.ndarray]  # per-frame bool mask, True under occluder
    warp: RbfWarp


def _base_texture(spec: SynthSpec, rng: np.random.Generator, margin: int) -> np.ndarray:
    """Textured base image with a margin so warped samples never leave it."""
    h, w = spec.height + 2 * margin, spec.width + 2 * margin
    if spec.texture == "noise":
        img = rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float64)
        img = _box_blur(img, 1)
    else:
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        base = np.empty((h, w, 3), dtype=np.float64)
        base[..., 0] = 0.55
        base[..., 1] = 0.25
        base[..., 2] = 0.22
        n_blobs = max(24, (h * w) // 170)
        for _ in range(n_blobs):
            cx = rng.uniform(0, w)
            cy = rng.uniform(0, h)
            s = rng.uniform(2.0, 7.0)
            amp = rng.uniform(-0.28, 0.34)
            bump = amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s))
            tint = rng.uniform(0.4, 1.0, size=3)
            base += bump[..., None] * tint[None, None, :]
        base += rng.normal(scale=0.015, size=(h, w, 3))
        img = _box_blur(base, 1)
    lo, hi = img.min(), img.max()
    img = 0.06 + 0.88 * (img - lo) / max(hi - lo, 1e-9)
    return img.astype(np.float32)


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    out = img
    for axis in (0, 1):
        acc = np.zeros_like(out)
        n = 0
        for d in range(-radius, radius + 1):
            acc += np.roll(out, d, axis=axis)
            n += 1
        out = acc / n
    return out


def _occluder_rect(spec: SynthSpec, t: int) -> tuple[float, float, float, float] | None:
    """Occluder bounds (x0, y0, x1, y1) at frame t, or None if absent."""
    occ = spec.occluder
    if occ is None or t < occ.entry_frame:
        return None
    dt = t - occ.entry_frame
    x0 = -occ.width + occ.vx * dt
    y0 = (spec.height - occ.height) / 2.0 + occ.vy * dt
    return x0, y0, x0 + occ.width, y0 + occ.height


def _point_under_occluder(spec: SynthSpec, t: int, x: float, y: float) -> bool:
    rect = _occluder_rect(spec, t)
    if rect is None:
        return False
    x0, y0, x1, y1 = rect
    return x0 <= x <= x1 and y0 <= y <= y1


_OCCLUDER_COLOR = np.array([0.82, 0.85, 0.9], dtype=np.float32)


def generate_synth(spec: SynthSpec) -> SynthSample:
    """Generate a deterministic sample; everything derives from one warp."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    margin = int(np.ceil(spec.warp_amplitude)) + 2
    base = _base_texture(spec, rng, margin)
    warp = RbfWarp(spec, rng)
    h, w, tcount = spec.height, spec.width, spec.frame_count

    grid = np.stack(np.meshgrid(
        np.arange(w, dtype=np.float64),
        np.arange(h, dtype=np.float64), indexing="xy"), axis=-1).reshape(-1, 2)

    frames: list[Frame] = []
    occ_masks: list[np.ndarray] = []
    base_coords = []  # per frame: base coordinate of each pixel, (H*W, 2)
    for t in range(tcount):
        inv = warp.inverse(t, grid)
        base_coords.append(inv)
        sample_x = torch.from_numpy(inv[:, 0] + margin)
        sample_y = torch.from_numpy(inv[:, 1] + margin)
        pix = bilinear_sample(torch.from_numpy(base.astype(np.float64)),
                              sample_x, sample_y).reshape(h, w, 3).numpy()

        rect = _occluder_rect(spec, t)
        mask = np.zeros((h, w), dtype=bool)
        if rect is not None:
            x0, y0, x1, y1 = rect
            ys, xs = np.mgrid[0:h, 0:w]
            mask = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
            pix[mask] = _OCCLUDER_COLOR
        occ_masks.append(mask)
        frames.append(Frame(pixels=torch.from_numpy(
            np.clip(pix, 0.0, 1.0).astype(np.float32)), index=t))

    gt_fwd: list[FlowField] = []
    gt_bwd: list[FlowField] = []
    for t in range(tcount - 1):
        fwd = (warp.forward(t + 1, base_coords[t]) - grid).reshape(h, w, 2)
        bwd = (warp.forward(t, base_coords[t + 1]) - grid).reshape(h, w, 2)
        gt_fwd.append(FlowField(torch.from_numpy(fwd.astype(np.float32)),
                                source_index=t, target_index=t + 1))
        gt_bwd.append(FlowField(torch.from_numpy(bwd.astype(np.float32)),
                                source_index=t + 1, target_index=t))

    tracks: dict[int, PointTrack] = {}
    step, m = spec.query_grid_step, spec.query_margin
    queries = [
        (float(x), float(y))
        for y in range(m, h - m + 1, step)
        for x in range(m, w - m + 1, step)
    ]
    for pid, (qx, qy) in enumerate(queries):
        track = PointTrack(query=PointQuery(0, qx, qy))
        for t in range(tcount):
            pos = warp.forward(t, np.array([[qx, qy]]))
            x, y = float(pos[0, 0]), float(pos[0, 1])
            in_bounds = 0.0 <= x <= w - 1 and 0.0 <= y <= h - 1
            visible = in_bounds and not _point_under_occluder(spec, t, x, y)
            track.points[t] = TrackPoint(x, y, visible)
        tracks[pid] = track

    return SynthSample(spec=spec, frames=frames, gt_flows_fwd=gt_fwd,
                       gt_flows_bwd=gt_bwd, gt_tracks=tracks,
                       gt_occlusion=occ_masks, warp=warp)


# ---------------------------------------------------------------------------
# disk layout: <dir>/%06d.png frames plus a gt/ sidecar directory
# ---------------------------------------------------------------------------

def save_sample(directory: str | Path, sample: SynthSample) -> None:
    directory = Path(directory)
    write_video(directory, sample.frames)
    gt_dir = directory / "gt"
    gt_dir.mkdir(parents=True, exist_ok=True)
    for t, (fwd, bwd) in enumerate(zip(sample.gt_flows_fwd, sample.gt_flows_bwd)):
        write_flow_file(gt_dir / f"flow_{t:06d}_fwd.etfl", fwd)
        write_flow_file(gt_dir / f"flow_{t:06d}_bwd.etfl", bwd)
    for t, mask in enumerate(sample.gt_occlusion):
        write_mask(gt_dir / f"occ_{t:06d}.png", mask)
    write_track_file(gt_dir / "tracks.csv", sample.gt_tracks)

    last = sample.spec.frame_count - 1
    sparse: dict[int, dict[int, tuple[float, float]]] = {0: {}, last: {}}
    for pid, track in sample.gt_tracks.items():
        for t in (0, last):
            pt = track.points[t]
            if pt.visible:
                sparse[t][pid] = (pt.x, pt.y)
    write_label_file(gt_dir / "sparse_labels.csv", sparse)
    write_spec_file(gt_dir / "spec.txt", sample.spec)


def write_spec_file(path: str | Path, spec: SynthSpec) -> None:
    lines = []
    for f in dataclasses.fields(spec):
        value = getattr(spec, f.name)
        if f.name == "occluder":
            if value is None:
                lines.append("occluder = none")
            else:
                lines.append(
                    "occluder = "
                    f"{value.height},{value.width},{value.vx},{value.vy},{value.entry_frame}")
        else:
            lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_spec_file(path: str | Path) -> SynthSpec:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()

    kwargs = {}
    int_fields = {"seed", "height", "width", "frame_count", "warp_control_points",
                  "query_grid_step", "query_margin"}
    for name, raw in values.items():
        if name == "occluder":
            if raw.lower() == "none":
                kwargs[name] = None
            else:
                parts = raw.split(",")
                kwargs[name] = OccluderSpec(
                    height=int(parts[0]), width=int(parts[1]),
                    vx=float(parts[2]), vy=float(parts[3]),
                    entry_frame=int(parts[4]))
        elif name in int_fields:
            kwargs[name] = int(raw)
        elif name == "warp_amplitude":
            kwargs[name] = float(raw)
        elif name == "texture":
            kwargs[name] = raw
        else:
            raise ValueError(f"{path}: unknown spec key {name!r}")
    return SynthSpec(**kwargs)
