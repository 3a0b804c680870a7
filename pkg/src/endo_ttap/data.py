"""On-disk formats: flow files, track/label CSVs, PNG frame directories.

Flow file layout (bit-exact):
    bytes 0..3    magic ``ETFL``
    bytes 4..7    u32 little-endian height
    bytes 8..11   u32 little-endian width
    bytes 12..15  u32 little-endian reserved (0)
    bytes 16..    row-major float32 LE (dx, dy) pairs

Track / label files are UTF-8 CSV with the header
``frame,point_id,x,y,visible,uncertainty``; ``visible`` is 0 or 1 and a
missing uncertainty is written as an empty field.  A video on disk is a
directory of ``%06d.png`` frames.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import Frame, FlowField, PointQuery, PointTrack, TrackPoint
from .errors import FileFormatError

FLOW_MAGIC = b"ETFL"
TRACK_HEADER = ["frame", "point_id", "x", "y", "visible", "uncertainty"]


# ---------------------------------------------------------------------------
# flow files
# ---------------------------------------------------------------------------

def write_flow_file(path: str | Path, flow: FlowField) -> None:
    h, w = flow.height, flow.width
    payload = flow.vectors.detach().cpu().numpy().astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<III", h, w, 0))
        f.write(payload)


def read_flow_file(path: str | Path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FileFormatError(
            f"{path}: truncated header, field 'magic' needs 16 bytes at offset 0, "
            f"got {len(raw)}")
    if raw[:4] != FLOW_MAGIC:
        raise FileFormatError(
            f"{path}: field 'magic' at byte offset 0 is {raw[:4]!r}, expected {FLOW_MAGIC!r}")
    h, w, reserved = struct.unpack("<III", raw[4:16])
    if reserved != 0:
        raise FileFormatError(
            f"{path}: field 'reserved' at byte offset 12 is {reserved}, expected 0")
    expected = 16 + h * w * 2 * 4
    if len(raw) != expected:
        raise FileFormatError(
            f"{path}: field 'payload' at byte offset 16 has {len(raw) - 16} bytes, "
            f"expected {expected - 16} for {h}x{w}")
    vectors = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, 2).copy()
    return FlowField(vectors=torch.from_numpy(vectors))


# ---------------------------------------------------------------------------
# track / label CSVs
# ---------------------------------------------------------------------------

def _format_float(v: float) -> str:
    return repr(float(v))


def write_track_file(path: str | Path, tracks: dict[int, PointTrack]) -> None:
    """Write tracks keyed by point id; rows sorted by (frame, point_id)."""
    rows = []
    for pid, track in tracks.items():
        for frame_index in track.frames():
            pt = track.points[frame_index]
            unc = "" if pt.uncertainty is None else _format_float(pt.uncertainty)
            rows.append((frame_index, pid, pt.x, pt.y, int(pt.visible), unc))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(TRACK_HEADER)
        for frame_index, pid, x, y, vis, unc in rows:
            writer.writerow([frame_index, pid, _format_float(x), _format_float(y), vis, unc])


def read_track_file(path: str | Path) -> dict[int, PointTrack]:
    tracks: dict[int, PointTrack] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != TRACK_HEADER:
            raise FileFormatError(
                f"{path}: field 'header' at byte offset 0 is {header}, "
                f"expected {TRACK_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise FileFormatError(
                    f"{path}: line {lineno} has {len(row)} fields, expected 6")
            try:
                frame_index = int(row[0])
                pid = int(row[1])
                x, y = float(row[2]), float(row[3])
                visible = bool(int(row[4]))
                unc = None if row[5] == "" else float(row[5])
            except ValueError as exc:
                raise FileFormatError(f"{path}: line {lineno}: {exc}") from exc
            if pid not in tracks:
                tracks[pid] = PointTrack(query=PointQuery(frame_index, x, y))
            tracks[pid].points[frame_index] = TrackPoint(x, y, visible, unc)
    return tracks


def write_label_file(
    path: str | Path,
    labels: dict[int, dict[int, tuple[float, float]]],
) -> None:
    """Write sparse labels (frame -> {point_id: (x, y)}) as a track CSV."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(TRACK_HEADER)
        for frame_index in sorted(labels):
            for pid in sorted(labels[frame_index]):
                x, y = labels[frame_index][pid]
                writer.writerow(
                    [frame_index, pid, _format_float(x), _format_float(y), 1, ""])


def read_label_file(path: str | Path) -> dict[int, dict[int, tuple[float, float]]]:
    tracks = read_track_file(path)
    labels: dict[int, dict[int, tuple[float, float]]] = {}
    for pid, track in tracks.items():
        for frame_index, pt in track.points.items():
            labels.setdefault(frame_index, {})[pid] = (pt.x, pt.y)
    return labels


# ---------------------------------------------------------------------------
# videos and masks
# ---------------------------------------------------------------------------

def frame_filename(index: int) -> str:
    return f"{index:06d}.png"


def write_video(directory: str | Path, frames: list[Frame]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for frame in frames:
        arr = (frame.pixels.detach().cpu().numpy() * 255.0).round().astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(directory / frame_filename(frame.index))


def read_video(directory: str | Path) -> list[Frame]:
    directory = Path(directory)
    paths = sorted(directory.glob("[0-9]" * 6 + ".png"))
    if not paths:
        raise FileFormatError(f"{directory}: no %06d.png frames found")
    frames = []
    for i, p in enumerate(paths):
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        frames.append(Frame(pixels=torch.from_numpy(arr), index=i))
    return frames


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((mask.astype(np.uint8)) * 255, mode="L").save(path)


def read_mask(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127
