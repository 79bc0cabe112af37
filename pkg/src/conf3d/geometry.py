"""Oriented 3D boxes, BEV polygon overlap, 3D IoU and great-circle distance.

Boxes live in the KITTI camera frame: X right, Y down, Z forward. The
location is the bottom-face center, so the box spans ``[Y - H, Y]``
vertically. Yaw rotates about the camera Y axis; at yaw 0 the length runs
along X.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

EPS = 1e-12
EARTH_RADIUS_M = 6_371_000.0

Point = tuple[float, float]
Polygon = list[Point]


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]  # X, Y (bottom), Z
    shape: tuple[float, float, float]  # H, W, L
    yaw: float

    @property
    def volume(self) -> float:
        h, w, l = self.shape
        return h * w * l

    @property
    def bev_area(self) -> float:
        return self.shape[1] * self.shape[2]


def bev_corners(box: Box3D) -> Polygon:
    """Footprint rectangle in the (x, z) plane, counter-clockwise."""
    x0, _, z0 = box.center
    _, w, l = box.shape
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = ((l / 2, w / 2), (-l / 2, w / 2), (-l / 2, -w / 2), (l / 2, -w / 2))
    return [(x0 + c * x + s * z, z0 - s * x + c * z) for x, z in local]


def box_corners_3d(box: Box3D) -> np.ndarray:
    """Eight corners, shape (8, 3): bottom face first, then top face."""
    h = box.shape[0]
    y0 = box.center[1]
    foot = bev_corners(box)
    bottom = [(x, y0, z) for x, z in foot]
    top = [(x, y0 - h, z) for x, z in foot]
    return np.array(bottom + top, dtype=float)


def polygon_area(poly: Sequence[Point]) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def _ccw(poly: Sequence[Point]) -> list[Point]:
    poly = list(poly)
    return poly if polygon_area(poly) >= 0 else poly[::-1]


def _clip(subject: list[Point], a: Point, b: Point) -> list[Point]:
    # Keep the part of `subject` on the left of the directed line a->b.
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    out: list[Point] = []
    n = len(subject)
    for i in range(n):
        p, q = subject[i], subject[(i + 1) % n]
        sp, sq = side(p), side(q)
        p_in, q_in = sp >= -EPS, sq >= -EPS
        if p_in:
            out.append(p)
        if p_in != q_in:
            t = sp / (sp - sq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def polygon_intersection_area(a: Sequence[Point], b: Sequence[Point]) -> float:
    """Area of the intersection of two convex polygons (Sutherland-Hodgman)."""
    subject = _ccw(a)
    clip = _ccw(b)
    for i in range(len(clip)):
        if len(subject) < 3:
            return 0.0
        subject = _clip(subject, clip[i], clip[(i + 1) % len(clip)])
    return max(0.0, polygon_area(subject))


def _far_apart(a: Box3D, b: Box3D) -> bool:
    ra = 0.5 * math.hypot(a.shape[1], a.shape[2])
    rb = 0.5 * math.hypot(b.shape[1], b.shape[2])
    dx = a.center[0] - b.center[0]
    dz = a.center[2] - b.center[2]
    return dx * dx + dz * dz > (ra + rb) ** 2


def bev_intersection(a: Box3D, b: Box3D) -> float:
    if _far_apart(a, b):
        return 0.0
    return polygon_intersection_area(bev_corners(a), bev_corners(b))


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection(a, b)
    union = a.bev_area + b.bev_area - inter
    if union < EPS:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def vertical_overlap(a: Box3D, b: Box3D) -> float:
    top = max(a.center[1] - a.shape[0], b.center[1] - b.shape[0])
    bottom = min(a.center[1], b.center[1])
    return max(0.0, bottom - top)


def iou_3d(a: Box3D, b: Box3D) -> float:
    dy = vertical_overlap(a, b)
    inter = bev_intersection(a, b) * dy if dy > 0 else 0.0
    union = a.volume + b.volume - inter
    if union < EPS:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def _latlon(p) -> tuple[float, float]:
    if hasattr(p, "lat"):
        return p.lat, p.lon
    return p[0], p[1]


def haversine_m(p, q) -> float:
    """Great-circle distance in meters; accepts GeoPose-likes or (lat, lon)."""
    lat1, lon1 = map(math.radians, _latlon(p))
    lat2, lon2 = map(math.radians, _latlon(q))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def haversine_matrix(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Pairwise distances (meters) between two sets of points, shape (n1, n2)."""
    la1 = np.radians(np.asarray(lat1, dtype=float))[:, None]
    lo1 = np.radians(np.asarray(lon1, dtype=float))[:, None]
    la2 = np.radians(np.asarray(lat2, dtype=float))[None, :]
    lo2 = np.radians(np.asarray(lon2, dtype=float))[None, :]
    h = np.sin((la2 - la1) / 2) ** 2 + np.cos(la1) * np.cos(la2) * np.sin((lo2 - lo1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))
