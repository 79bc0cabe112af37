"""KITTI-style 3D / BEV average precision (AP|R40 and AP|R11).

Matching is greedy per frame: detections are visited by descending score
(ties keep input order) and each one claims the unmatched ground truth it
overlaps most. Ground truths of the evaluated class that fail the
difficulty rule, and DontCare regions, only cause detections to be
ignored; they never count as misses. Other classes are invisible to a
class-restricted evaluation (no Van/Car style neighbor handling).
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .geometry import iou_3d, iou_bev
from .kitti_io import Annotation, Detection

TP, FP, IGNORED = "TP", "FP", "ignored"

DIFFICULTIES = ("Easy", "Moderate", "Hard")
METRICS = {"3D": iou_3d, "BEV": iou_bev}
DEFAULT_IOU = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}
DONTCARE_MIN_OVERLAP = 0.5


@dataclass(frozen=True)
class DifficultyRule:
    name: str
    min_bbox_height: float
    max_occlusion: int
    max_truncation: float

    def admits(self, gt: Annotation) -> bool:
        return (
            gt.height_px >= self.min_bbox_height
            and gt.occlusion <= self.max_occlusion
            and gt.truncation <= self.max_truncation
        )


DEFAULT_RULES = (
    DifficultyRule("Easy", 40.0, 0, 0.15),
    DifficultyRule("Moderate", 25.0, 1, 0.30),
    DifficultyRule("Hard", 25.0, 2, 0.50),
)


def _rule(name: str, rules: Sequence[DifficultyRule]) -> DifficultyRule:
    for r in rules:
        if r.name == name:
            return r
    raise KeyError(f"unknown difficulty {name!r}")


def assign_difficulty(gt: Annotation, rules: Sequence[DifficultyRule] = DEFAULT_RULES) -> set[str]:
    if gt.is_dontcare:
        return set()
    return {r.name for r in rules if r.admits(gt)}


def _overlap_over_det_area(det: Annotation, region: Annotation) -> float:
    l1, t1, r1, b1 = det.bbox2d
    l2, t2, r2, b2 = region.bbox2d
    iw = min(r1, r2) - max(l1, l2)
    ih = min(b1, b2) - max(t1, t2)
    area = (r1 - l1) * (b1 - t1)
    if iw <= 0 or ih <= 0 or area <= 0:
        return 0.0
    return iw * ih / area


def score_order(scores: Sequence[float]) -> list[int]:
    """Indices by descending score; equal scores keep their input order."""
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def _match(
    scores: Sequence[float],
    iou: np.ndarray,
    gt_valid: Sequence[bool],
    iou_threshold: float,
    dontcare_hits: Sequence[bool],
) -> list[str]:
    n_det, n_gt = iou.shape
    flags = [FP] * n_det
    taken = [False] * n_gt
    for d in score_order(scores):
        best = {True: (-1, -1.0), False: (-1, -1.0)}
        for g in range(n_gt):
            if taken[g] or iou[d, g] < iou_threshold:
                continue
            v = bool(gt_valid[g])
            if iou[d, g] > best[v][1]:
                best[v] = (g, iou[d, g])
        if best[True][0] >= 0:
            taken[best[True][0]] = True
            flags[d] = TP
        elif best[False][0] >= 0:
            taken[best[False][0]] = True
            flags[d] = IGNORED
        elif dontcare_hits[d]:
            flags[d] = IGNORED
    return flags


def match_frame(
    dets: Sequence[Detection],
    gts: Sequence[Annotation],
    iou_fn: Callable = iou_3d,
    iou_threshold: float = 0.7,
    gt_valid: Optional[Sequence[bool]] = None,
    score_key: Callable[[Detection], float] = lambda d: d.score2d,
) -> list[str]:
    """Label each detection TP, FP or ignored (returned in input order).

    ``gt_valid`` marks ground truths that count toward recall; the rest
    (failing the difficulty rule) only absorb detections. DontCare entries
    in ``gts`` are handled by 2D overlap and are never matched in 3D.
    """
    regular = [g for g in gts if not g.is_dontcare]
    if gt_valid is None:
        valid = [True] * len(regular)
    else:
        valid = [v for g, v in zip(gts, gt_valid) if not g.is_dontcare]
    dontcare = [g for g in gts if g.is_dontcare]
    iou = np.zeros((len(dets), len(regular)))
    for i, d in enumerate(dets):
        for j, g in enumerate(regular):
            iou[i, j] = iou_fn(d.box, g.box)
    dc_hits = [any(_overlap_over_det_area(d, r) > DONTCARE_MIN_OVERLAP for r in dontcare) for d in dets]
    return _match([score_key(d) for d in dets], iou, valid, iou_threshold, dc_hits)


def recall_points(kind: str) -> tuple[int, list[int]]:
    """(denominator, numerators) of the sampled recall levels."""
    if kind == "r40":
        return 40, list(range(1, 41))
    if kind == "r11":
        return 10, list(range(0, 11))
    raise ValueError(f"unknown AP kind {kind!r}")


def interpolated_precision(tp_flags: Sequence[bool], n_gt: int, kind: str = "r40") -> list[float]:
    """Interpolated precision at each recall sample.

    ``tp_flags`` is the ranked list of non-ignored detections. Precision at
    recall level r is the highest precision reached by any cut-off whose
    recall is at least r, or 0 if no cut-off gets there.
    """
    denom, nums = recall_points(kind)
    if n_gt <= 0:
        return [0.0] * len(nums)
    tp_cum = np.cumsum(np.asarray(tp_flags, dtype=np.int64))
    k = np.arange(1, len(tp_cum) + 1)
    precision = tp_cum / k if len(k) else np.zeros(0)
    suffix_max = np.maximum.accumulate(precision[::-1])[::-1] if len(k) else precision
    out = []
    for j in nums:
        # first cut-off with tp / n_gt >= j / denom, compared in integers
        idx = int(np.searchsorted(tp_cum * denom, j * n_gt, side="left"))
        out.append(float(suffix_max[idx]) if idx < len(tp_cum) else 0.0)
    return out


def average_precision(tp_flags: Sequence[bool], n_gt: int, kind: str = "r40") -> float:
    samples = interpolated_precision(tp_flags, n_gt, kind)
    return 100.0 * sum(samples) / len(samples)


@dataclass
class EvalEntry:
    class_name: str
    difficulty: str
    metric: str
    ap: float
    n_gt: int
    n_det: int
    recall: list[float]
    precision: list[float]
    no_ground_truth: bool = False


@dataclass
class EvalResult:
    kind: str
    entries: list[EvalEntry] = field(default_factory=list)

    def get(self, class_name: str, difficulty: str, metric: str) -> EvalEntry:
        for e in self.entries:
            if (e.class_name, e.difficulty, e.metric) == (class_name, difficulty, metric):
                return e
        raise KeyError((class_name, difficulty, metric))

    def ap(self, class_name: str = "Car", difficulty: str = "Moderate", metric: str = "3D") -> float:
        return self.get(class_name, difficulty, metric).ap

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "difficulty", "metric", "ap"])
        for e in self.entries:
            w.writerow([e.class_name, e.difficulty, e.metric, f"{e.ap:.6f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "ap_kind": self.kind,
            "results": [
                {
                    "class": e.class_name,
                    "difficulty": e.difficulty,
                    "metric": e.metric,
                    "ap": e.ap,
                    "n_gt": e.n_gt,
                    "n_det": e.n_det,
                    "no_ground_truth": e.no_ground_truth,
                    "recall": e.recall,
                    "precision": e.precision,
                }
                for e in self.entries
            ],
        }
        return json.dumps(payload, indent=2) + "\n"


def _align(dets, gts) -> tuple[list[list[Detection]], list[list[Annotation]]]:
    if isinstance(gts, Mapping):
        keys = sorted(gts)
        dets = dets if isinstance(dets, Mapping) else dict(zip(keys, dets))
        return [list(dets.get(k, [])) for k in keys], [list(gts[k]) for k in keys]
    gts = [list(g) for g in gts]
    dets = [list(d) for d in dets] if dets else [[] for _ in gts]
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection frames vs {len(gts)} ground-truth frames")
    return dets, gts


def _frame_flags(dets, gts, classes, metrics, difficulties, iou_thresholds, rules, score_key):
    """Per (class, metric, difficulty): (scores, flags, n_valid_gt) for one frame."""
    out = {}
    dontcare = [g for g in gts if g.is_dontcare]
    for cls in classes:
        cd = [d for d in dets if d.class_name == cls]
        cg = [g for g in gts if g.class_name == cls]
        scores = [score_key(d) for d in cd]
        dc_hits = [any(_overlap_over_det_area(d, r) > DONTCARE_MIN_OVERLAP for r in dontcare) for d in cd]
        for metric in metrics:
            fn = METRICS[metric]
            iou = np.zeros((len(cd), len(cg)))
            for i, d in enumerate(cd):
                for j, g in enumerate(cg):
                    iou[i, j] = fn(d.box, g.box)
            for diff in difficulties:
                rule = _rule(diff, rules)
                valid = [rule.admits(g) for g in cg]
                flags = _match(scores, iou, valid, iou_thresholds[cls], dc_hits)
                out[(cls, metric, diff)] = (scores, flags, sum(valid))
    return out


def evaluate(
    dets,
    gts,
    classes: Sequence[str] = ("Car",),
    difficulties: Sequence[str] = DIFFICULTIES,
    metrics: Sequence[str] = ("3D", "BEV"),
    kind: str = "r40",
    iou_thresholds: Optional[Mapping[str, float]] = None,
    rules: Sequence[DifficultyRule] = DEFAULT_RULES,
    threads: int = 1,
    score_key: Callable[[Detection], float] = lambda d: d.score2d,
) -> EvalResult:
    """Evaluate per-frame detections against per-frame ground truth.

    ``dets`` and ``gts`` are either aligned sequences of per-frame lists or
    mappings keyed by frame id (frames follow the sorted ground-truth keys).
    Frames may be matched concurrently; ranking happens afterwards in
    frame order, so the result does not depend on ``threads``.
    """
    thresholds = dict(DEFAULT_IOU)
    thresholds.update(iou_thresholds or {})
    det_frames, gt_frames = _align(dets, gts)
    args = (classes, metrics, difficulties, thresholds, rules, score_key)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_frame = list(pool.map(lambda fr: _frame_flags(*fr, *args), zip(det_frames, gt_frames)))
    else:
        per_frame = [_frame_flags(d, g, *args) for d, g in zip(det_frames, gt_frames)]

    denom, nums = recall_points(kind)
    result = EvalResult(kind=kind)
    for cls in classes:
        for diff in difficulties:
            for metric in metrics:
                ranked = []
                n_gt = 0
                for f, frame in enumerate(per_frame):
                    scores, flags, nv = frame[(cls, metric, diff)]
                    n_gt += nv
                    ranked.extend((-s, f, i, fl == TP) for i, (s, fl) in enumerate(zip(scores, flags)) if fl != IGNORED)
                ranked.sort(key=lambda r: r[:3])
                tp_flags = [r[3] for r in ranked]
                samples = interpolated_precision(tp_flags, n_gt, kind)
                result.entries.append(
                    EvalEntry(
                        class_name=cls,
                        difficulty=diff,
                        metric=metric,
                        ap=100.0 * sum(samples) / len(samples),
                        n_gt=n_gt,
                        n_det=len(tp_flags),
                        recall=[j / denom for j in nums],
                        precision=samples,
                        no_ground_truth=n_gt == 0,
                    )
                )
    return result


def _single(dets, gts, class_name, difficulty, metric, iou_threshold, kind, rules) -> float:
    res = evaluate(
        dets,
        gts,
        classes=(class_name,),
        difficulties=(difficulty,),
        metrics=(metric,),
        kind=kind,
        iou_thresholds=None if iou_threshold is None else {class_name: iou_threshold},
        rules=rules,
    )
    return res.entries[0].ap


def ap_r40(dets, gts, class_name="Car", difficulty="Moderate", metric="3D", iou_threshold=None, rules=DEFAULT_RULES) -> float:
    return _single(dets, gts, class_name, difficulty, metric, iou_threshold, "r40", rules)


def ap_r11(dets, gts, class_name="Car", difficulty="Moderate", metric="3D", iou_threshold=None, rules=DEFAULT_RULES) -> float:
    return _single(dets, gts, class_name, difficulty, metric, iou_threshold, "r11", rules)
