"""Geographically separated splits and split-contamination audits."""

from __future__ import annotations

import json
import math
import warnings
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import EARTH_RADIUS_M, haversine_matrix
from .kitti_io import GeoPose, SplitManifest

CHUNK = 2048


@dataclass
class AuditReport:
    size_a: int
    size_b: int
    shared_frames: int
    shared_fraction: float
    shared_sequences: list[str]
    shared_with_sequences: int
    shared_with_sequences_fraction: float
    missing_poses: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def overlap_audit(split_a: SplitManifest, split_b: SplitManifest, poses: Sequence[GeoPose] = ()) -> AuditReport:
    """Frames of ``split_b`` that also occur in ``split_a``.

    Fractions are relative to ``split_b``. The sequence-level count adds
    frames of ``split_b`` whose capture sequence contributes any frame to
    ``split_a``; frames without a pose entry are listed, not fatal.
    """
    a, b = set(split_a.frame_ids), set(split_b.frame_ids)
    shared = a & b
    seq_of = {p.frame_id: p.sequence_id for p in poses}
    missing = sorted(f for f in a | b if f not in seq_of)
    seqs_a = {seq_of[f] for f in a if seq_of.get(f)}
    seqs_b = {seq_of[f] for f in b if seq_of.get(f)}
    with_seq = {f for f in b if f in shared or seq_of.get(f) in seqs_a}
    nb = len(b)
    return AuditReport(
        size_a=len(a),
        size_b=nb,
        shared_frames=len(shared),
        shared_fraction=len(shared) / nb if nb else 0.0,
        shared_sequences=sorted(seqs_a & seqs_b),
        shared_with_sequences=len(with_seq),
        shared_with_sequences_fraction=len(with_seq) / nb if nb else 0.0,
        missing_poses=missing,
    )


@dataclass
class GeoSepReport:
    candidates: int
    retained: int
    dropped_distance: int
    dropped_sequence: int
    dropped_missing_pose: int
    radius_m: float
    exclude_sequences: bool
    min_retained_distance_m: Optional[float]
    verification_passed: bool
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


@dataclass
class GeoSepResult:
    manifest: SplitManifest
    report: GeoSepReport


def _min_dist_brute(lat, lon, plat, plon) -> np.ndarray:
    out = np.full(len(lat), np.inf)
    if len(plat) == 0:
        return out
    for s in range(0, len(lat), CHUNK):
        out[s:s + CHUNK] = haversine_matrix(lat[s:s + CHUNK], lon[s:s + CHUNK], plat, plon).min(axis=1)
    return out


def _grid_usable(lat, lon, plat, plon, radius_m) -> bool:
    # tiny radii make the cells absurdly small; brute force is fine there
    if radius_m < 1.0 or len(plat) == 0:
        return False
    allv = np.concatenate([lat, plat])
    alll = np.concatenate([lon, plon])
    return bool(np.all(np.abs(allv) < 80.0) and np.all(np.abs(alll) < 179.0))


def _min_dist_grid(lat, lon, plat, plon, radius_m) -> np.ndarray:
    """Distance to the nearest protected pose in the neighboring cells.

    Exact whenever that nearest pose lies within ``radius_m``; otherwise the
    value is only guaranteed to exceed ``radius_m`` (possibly ``inf``).
    """
    # cell edge >= radius with margin; a meridian arc lower-bounds the distance
    cell_lat = 1.5 * math.degrees(radius_m / EARTH_RADIUS_M)
    max_lat = float(np.max(np.abs(np.concatenate([lat, plat]))))
    cell_lon = cell_lat / math.cos(math.radians(max_lat))
    buckets: dict[tuple[int, int], list[int]] = defaultdict(list)
    for k, (a, o) in enumerate(zip(plat, plon)):
        buckets[(math.floor(a / cell_lat), math.floor(o / cell_lon))].append(k)
    out = np.full(len(lat), np.inf)
    for i, (a, o) in enumerate(zip(lat, lon)):
        ci, cj = math.floor(a / cell_lat), math.floor(o / cell_lon)
        near = [k for di in (-1, 0, 1) for dj in (-1, 0, 1) for k in buckets.get((ci + di, cj + dj), ())]
        if near:
            out[i] = haversine_matrix([a], [o], plat[near], plon[near]).min()
    return out


def min_distances(lat, lon, plat, plon, radius_m: float = 0.0, use_grid: bool = True, threads: int = 1) -> np.ndarray:
    lat, lon = np.asarray(lat, dtype=float), np.asarray(lon, dtype=float)
    plat, plon = np.asarray(plat, dtype=float), np.asarray(plon, dtype=float)
    grid = use_grid and _grid_usable(lat, lon, plat, plon, radius_m)

    def work(sl):
        if grid:
            return _min_dist_grid(lat[sl], lon[sl], plat, plon, radius_m)
        return _min_dist_brute(lat[sl], lon[sl], plat, plon)

    slices = [slice(s, s + CHUNK) for s in range(0, len(lat), CHUNK)]
    if threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, slices))
    else:
        parts = [work(sl) for sl in slices]
    return np.concatenate(parts) if parts else np.zeros(0)


def geosep_filter(
    candidates: Sequence[GeoPose],
    protected: Sequence[GeoPose],
    radius_m: float = 200.0,
    exclude_sequences: bool = True,
    use_grid: bool = True,
    threads: int = 1,
    name: str = "geosep",
) -> GeoSepResult:
    """Keep candidates farther than ``radius_m`` from every protected pose.

    A candidate exactly at ``radius_m`` is dropped. With
    ``exclude_sequences`` candidates sharing a sequence id with any
    protected frame are dropped too. Candidates without a GPS fix cannot be
    shown to be separated and are dropped.
    """
    if radius_m < 0:
        raise ValueError("radius_m must be >= 0")
    notes: list[str] = []
    if not protected:
        msg = "protected set is empty; every candidate is retained"
        warnings.warn(msg, stacklevel=2)
        ids = tuple(sorted({c.frame_id for c in candidates}))
        report = GeoSepReport(len(candidates), len(ids), 0, 0, 0, radius_m, exclude_sequences, None, True, [msg])
        return GeoSepResult(SplitManifest(name, ids), report)

    fixed = [p for p in protected if p.has_fix]
    plat = np.array([p.lat for p in fixed], dtype=float)
    plon = np.array([p.lon for p in fixed], dtype=float)
    if not fixed:
        notes.append("no protected pose has a GPS fix; only the sequence rule applies")
    protected_seqs = {p.sequence_id for p in protected if p.sequence_id}

    with_fix = [c for c in candidates if c.has_fix]
    n_missing = len(candidates) - len(with_fix)
    lat = np.array([c.lat for c in with_fix], dtype=float)
    lon = np.array([c.lon for c in with_fix], dtype=float)
    dist = min_distances(lat, lon, plat, plon, radius_m, use_grid, threads)

    keep_ids, dropped_d, dropped_s = [], 0, 0
    for c, d in zip(with_fix, dist):
        if d <= radius_m:
            dropped_d += 1
        elif exclude_sequences and c.sequence_id in protected_seqs:
            dropped_s += 1
        else:
            keep_ids.append(c.frame_id)
    manifest = SplitManifest(name, tuple(sorted(set(keep_ids))))

    # independent brute-force recheck of the retained set
    kept = {c.frame_id: c for c in with_fix if c.frame_id in set(manifest.frame_ids)}
    klat = np.array([kept[f].lat for f in manifest.frame_ids], dtype=float)
    klon = np.array([kept[f].lon for f in manifest.frame_ids], dtype=float)
    check = _min_dist_brute(klat, klon, plat, plon)
    min_kept = float(check.min()) if len(check) and np.isfinite(check.min()) else None
    passed = bool(np.all(check > radius_m))
    if exclude_sequences:
        passed = passed and not any(kept[f].sequence_id in protected_seqs for f in manifest.frame_ids)

    report = GeoSepReport(
        candidates=len(candidates),
        retained=len(manifest),
        dropped_distance=dropped_d,
        dropped_sequence=dropped_s,
        dropped_missing_pose=n_missing,
        radius_m=radius_m,
        exclude_sequences=exclude_sequences,
        min_retained_distance_m=min_kept,
        verification_passed=passed,
        warnings=notes,
    )
    return GeoSepResult(manifest, report)


def split_train_val(manifest: SplitManifest, val_size: int, seed: int = 0) -> tuple[SplitManifest, SplitManifest]:
    n = len(manifest)
    if val_size < 0:
        raise ValueError("val_size must be >= 0")
    if val_size >= n and not (val_size == 0 and n == 0):
        raise ValueError(f"val_size {val_size} must be smaller than the manifest ({n} frames)")
    rng = np.random.default_rng(seed)
    picked = set(rng.choice(n, size=val_size, replace=False).tolist()) if val_size else set()
    ids = manifest.frame_ids
    val = tuple(ids[i] for i in range(n) if i in picked)
    train = tuple(ids[i] for i in range(n) if i not in picked)
    base = manifest.name or "split"
    return SplitManifest(f"{base}_train", train), SplitManifest(f"{base}_val", val)
