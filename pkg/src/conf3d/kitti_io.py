"""Readers and writers for KITTI-style text files.

Covers object labels (15 columns), detections (label columns plus a score),
OXTS pose lines, newline-delimited split manifests and the pose CSV
``frame_id,sequence_id,lat,lon`` used as the toolkit's interchange format.
Floats are written with six decimals so that files diff cleanly.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .geometry import Box3D

LABEL_COLUMNS = 15
DETECTION_COLUMNS = 16
DONTCARE = "DontCare"

CLASS_IDS = {"Car": 0, "Pedestrian": 1, "Cyclist": 2}


class KittiParseError(ValueError):
    """Raised for malformed KITTI text; carries the 1-based line number."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ManifestWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Annotation:
    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple[float, float, float, float]  # left, top, right, bottom
    shape: tuple[float, float, float]  # H, W, L
    location: tuple[float, float, float]  # X, Y, Z (camera frame)
    rotation_y: float

    @property
    def box(self) -> Box3D:
        return Box3D(center=self.location, shape=self.shape, yaw=self.rotation_y)

    @property
    def height_px(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]

    @property
    def is_dontcare(self) -> bool:
        return self.class_name == DONTCARE


@dataclass(frozen=True)
class Detection(Annotation):
    score2d: float = 0.0
    score3d: Optional[float] = None
    features: Optional[tuple[float, ...]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.score3d is not None and not 0.0 <= self.score3d <= 1.0:
            raise ValueError(f"score3d must lie in [0, 1], got {self.score3d}")


@dataclass(frozen=True)
class GeoPose:
    frame_id: str
    sequence_id: str
    lat: Optional[float]
    lon: Optional[float]

    def __post_init__(self):
        if not self.frame_id.isdigit():
            raise ValueError(f"frame_id must be a non-negative integer string, got {self.frame_id!r}")
        if self.lat is not None and not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if self.lon is not None and not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")

    @property
    def has_fix(self) -> bool:
        return self.lat is not None and self.lon is not None


@dataclass(frozen=True)
class SplitManifest:
    name: str
    frame_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.frame_ids)

    def __iter__(self):
        return iter(self.frame_ids)


def _floats(tokens: Sequence[str], lineno: int) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise KittiParseError(f"non-numeric field ({exc})", lineno) from None


def _annotation_fields(tokens: Sequence[str], lineno: int) -> dict:
    vals = _floats(tokens[1:LABEL_COLUMNS], lineno)
    occ = vals[1]
    if occ != int(occ):
        raise KittiParseError(f"occlusion must be an integer level, got {tokens[2]}", lineno)
    return dict(
        class_name=tokens[0],
        truncation=vals[0],
        occlusion=int(occ),
        alpha=vals[2],
        bbox2d=tuple(vals[3:7]),
        shape=tuple(vals[7:10]),
        location=tuple(vals[10:13]),
        rotation_y=vals[13],
    )


def _lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line:
            yield lineno, line.split()


def parse_label_file(text: str) -> list[Annotation]:
    out = []
    for lineno, tokens in _lines(text):
        if len(tokens) != LABEL_COLUMNS:
            raise KittiParseError(f"expected {LABEL_COLUMNS} columns, got {len(tokens)}", lineno)
        out.append(Annotation(**_annotation_fields(tokens, lineno)))
    return out


def parse_detection_file(text: str) -> list[Detection]:
    out = []
    for lineno, tokens in _lines(text):
        if len(tokens) != DETECTION_COLUMNS:
            raise KittiParseError(
                f"expected {DETECTION_COLUMNS} columns (label + score), got {len(tokens)}", lineno
            )
        fields = _annotation_fields(tokens, lineno)
        (score,) = _floats(tokens[15:16], lineno)
        out.append(Detection(**fields, score2d=score))
    return out


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def _annotation_tokens(a: Annotation) -> list[str]:
    return [
        a.class_name,
        _fmt(a.truncation),
        str(int(a.occlusion)),
        _fmt(a.alpha),
        *(_fmt(v) for v in a.bbox2d),
        *(_fmt(v) for v in a.shape),
        *(_fmt(v) for v in a.location),
        _fmt(a.rotation_y),
    ]


def write_label_file(annotations: Iterable[Annotation]) -> str:
    return "".join(" ".join(_annotation_tokens(a)) + "\n" for a in annotations)


def write_detection_file(dets: Sequence[Detection], score_mode: str = "score2d", combine: str = "product") -> str:
    """Serialize detections, one 16-column line each.

    ``score_mode`` selects the score column: ``score2d``, ``score3d`` or
    ``combined`` (see :func:`conf3d.confidence.combine_scores`). The latter
    two require ``score3d`` on every detection.
    """
    from .confidence import combine_scores

    if score_mode not in ("score2d", "score3d", "combined"):
        raise ValueError(f"unknown score_mode {score_mode!r}")
    if score_mode != "score2d":
        missing = [i for i, d in enumerate(dets) if d.score3d is None]
        if missing:
            raise ValueError(f"score3d missing for detections at indices {missing}")
    lines = []
    for d in dets:
        if score_mode == "score2d":
            score = d.score2d
        elif score_mode == "score3d":
            score = d.score3d
        else:
            score = combine_scores(d.score2d, d.score3d, rule=combine)
        lines.append(" ".join(_annotation_tokens(d) + [_fmt(score)]) + "\n")
    return "".join(lines)


def parse_pose_file(text: str) -> tuple[float, float]:
    """Latitude and longitude (degrees) from the first line of an OXTS file."""
    for lineno, tokens in _lines(text):
        if len(tokens) < 2:
            raise KittiParseError("OXTS line needs at least lat and lon", lineno)
        lat, lon = _floats(tokens[:2], lineno)
        return lat, lon
    raise KittiParseError("empty OXTS file")


def parse_split_manifest(text: str, name: str = "") -> SplitManifest:
    ids = [tokens[0] for _, tokens in _lines(text)]
    unique = sorted(set(ids))
    if len(unique) != len(ids):
        dups = sorted({i for i in ids if ids.count(i) > 1})
        warnings.warn(f"split {name or '<unnamed>'}: duplicate frame ids {dups}", ManifestWarning, stacklevel=2)
    return SplitManifest(name=name, frame_ids=tuple(unique))


def write_split_manifest(manifest: SplitManifest | Iterable[str]) -> str:
    ids = manifest.frame_ids if isinstance(manifest, SplitManifest) else tuple(manifest)
    return "".join(f"{i}\n" for i in ids)


POSE_CSV_HEADER = ("frame_id", "sequence_id", "lat", "lon")


def read_pose_csv(text: str) -> list[GeoPose]:
    reader = csv.reader(io.StringIO(text))
    poses = []
    for lineno, row in enumerate(reader, start=1):
        if not row or (lineno == 1 and tuple(c.strip() for c in row) == POSE_CSV_HEADER):
            continue
        if len(row) != 4:
            raise KittiParseError(f"pose CSV rows need 4 fields, got {len(row)}", lineno)
        fid, seq, lat, lon = (c.strip() for c in row)
        try:
            lat_v = float(lat) if lat else None
            lon_v = float(lon) if lon else None
        except ValueError:
            raise KittiParseError("non-numeric lat/lon", lineno) from None
        if lat_v is not None and math.isnan(lat_v):
            lat_v = None
        if lon_v is not None and math.isnan(lon_v):
            lon_v = None
        try:
            poses.append(GeoPose(fid, seq, lat_v, lon_v))
        except ValueError as exc:
            raise KittiParseError(str(exc), lineno) from None
    return poses


def write_pose_csv(poses: Iterable[GeoPose]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(POSE_CSV_HEADER)
    for p in poses:
        w.writerow([
            p.frame_id,
            p.sequence_id,
            "" if p.lat is None else f"{p.lat:.9f}",
            "" if p.lon is None else f"{p.lon:.9f}",
        ])
    return buf.getvalue()


def read_oxts_dir(root: str | Path, sequence_of: Optional[dict[str, str]] = None) -> list[GeoPose]:
    """Load a one-file-per-frame OXTS directory (``<frame_id>.txt``)."""
    poses = []
    for path in sorted(Path(root).glob("*.txt")):
        lat, lon = parse_pose_file(path.read_text())
        fid = path.stem
        poses.append(GeoPose(fid, (sequence_of or {}).get(fid, ""), lat, lon))
    return poses


def with_score3d(det: Detection, score3d: float) -> Detection:
    return replace(det, score3d=score3d)
