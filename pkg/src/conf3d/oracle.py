"""Oracle analysis: swap one predicted component for its ground truth and re-evaluate."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

from .evaluation import DIFFICULTIES, evaluate, score_order
from .kitti_io import Annotation, Detection

COMPONENTS = ("R", "HWL", "XY", "Z")
CENTER_GATE_M = 4.0
IOU2D_GATE = 0.5


def _iou2d(a: Annotation, b: Annotation) -> float:
    l1, t1, r1, b1 = a.bbox2d
    l2, t2, r2, b2 = b.bbox2d
    iw = min(r1, r2) - max(l1, l2)
    ih = min(b1, b2) - max(t1, t2)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (r1 - l1) * (b1 - t1) + (r2 - l2) * (b2 - t2) - inter
    return inter / union if union > 0 else 0.0


def match_detections(dets: Sequence[Detection], gts: Sequence[Annotation], policy: str = "center",
                     gate: float | None = None) -> list[int]:
    """Greedy one-to-one assignment of detections to same-class ground truth.

    Detections are visited by descending score. ``center`` picks the nearest
    free ground truth by BEV center distance within ``gate`` meters (default
    4); ``iou2d`` picks the best 2D-box IoU of at least ``gate`` (default
    0.5). Returns the ground-truth index per detection, -1 when unmatched.
    """
    if policy not in ("center", "iou2d"):
        raise ValueError(f"unknown match policy {policy!r}")
    if gate is None:
        gate = CENTER_GATE_M if policy == "center" else IOU2D_GATE
    out = [-1] * len(dets)
    taken = [False] * len(gts)
    for d in score_order([det.score2d for det in dets]):
        det = dets[d]
        best, best_val = -1, None
        for g, gt in enumerate(gts):
            if taken[g] or gt.is_dontcare or gt.class_name != det.class_name:
                continue
            if policy == "center":
                v = math.hypot(det.location[0] - gt.location[0], det.location[2] - gt.location[2])
                ok = v <= gate and (best_val is None or v < best_val)
            else:
                v = _iou2d(det, gt)
                ok = v >= gate and (best_val is None or v > best_val)
            if ok:
                best, best_val = g, v
        if best >= 0:
            taken[best] = True
            out[d] = best
    return out


def _substitute(det: Detection, gt: Annotation, component: str) -> Detection:
    x, y, z = det.location
    if component == "R":
        return replace(det, rotation_y=gt.rotation_y)
    if component == "HWL":
        return replace(det, shape=gt.shape)
    if component == "XY":
        return replace(det, location=(gt.location[0], gt.location[1], z))
    if component == "Z":
        return replace(det, location=(x, y, gt.location[2]))
    raise ValueError(f"unknown oracle component {component!r}; expected one of {COMPONENTS}")


def apply_substitution(dets: Sequence[Detection], gts: Sequence[Annotation], matching: Sequence[int],
                       component: str) -> list[Detection]:
    if component not in COMPONENTS:
        raise ValueError(f"unknown oracle component {component!r}; expected one of {COMPONENTS}")
    return [d if m < 0 else _substitute(d, gts[m], component) for d, m in zip(dets, matching)]


def oracle_substitute(dets, gts, component: str, match_policy: str = "center"):
    """Per-frame detections with ``component`` copied from the matched ground truth.

    Accepts mappings keyed by frame id or aligned per-frame sequences, and
    returns the same kind.
    """
    if component not in COMPONENTS:
        raise ValueError(f"unknown oracle component {component!r}; expected one of {COMPONENTS}")
    if isinstance(gts, dict):
        return {
            f: apply_substitution(dets.get(f, []), gts[f], match_detections(dets.get(f, []), gts[f], match_policy), component)
            for f in gts
        }
    return [apply_substitution(d, g, match_detections(d, g, match_policy), component) for d, g in zip(dets, gts)]


@dataclass
class OracleRow:
    component: str
    easy: float
    moderate: float
    hard: float


@dataclass
class OracleTable:
    rows: list[OracleRow]
    class_name: str
    metric: str
    match_policy: str

    def row(self, component: str) -> OracleRow:
        for r in self.rows:
            if r.component == component:
                return r
        raise KeyError(component)

    def gain(self, component: str, difficulty: str = "moderate") -> float:
        return getattr(self.row(component), difficulty) - getattr(self.row("none"), difficulty)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "easy", "moderate", "hard"])
        for r in self.rows:
            w.writerow([r.component, f"{r.easy:.6f}", f"{r.moderate:.6f}", f"{r.hard:.6f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "class": self.class_name,
            "metric": self.metric,
            "match_policy": self.match_policy,
            "rows": [vars(r) for r in self.rows],
        }


def oracle_sweep(dets, gts, components: Sequence[str] = COMPONENTS, class_name: str = "Car", metric: str = "3D",
                 kind: str = "r40", match_policy: str = "center", iou_threshold: float | None = None,
                 threads: int = 1) -> OracleTable:
    """Baseline row plus one row per substituted component (Easy/Moderate/Hard AP)."""
    for c in components:
        if c not in COMPONENTS:
            raise ValueError(f"unknown oracle component {c!r}; expected one of {COMPONENTS}")
    thr = None if iou_threshold is None else {class_name: iou_threshold}

    def run(frames, label):
        res = evaluate(frames, gts, classes=(class_name,), difficulties=DIFFICULTIES, metrics=(metric,),
                       kind=kind, iou_thresholds=thr, threads=threads)
        return OracleRow(label, *(res.ap(class_name, d, metric) for d in DIFFICULTIES))

    rows = [run(dets, "none")]
    for c in components:
        rows.append(run(oracle_substitute(dets, gts, c, match_policy), c))
    return OracleTable(rows, class_name, metric, match_policy)


def tables_json(tables: Sequence[OracleTable]) -> str:
    return json.dumps({"tables": [t.to_dict() for t in tables]}, indent=2) + "\n"
