"""Deterministic synthetic KITTI-like corpora.

Ground-truth scenes are sampled per frame, detections are the ground-truth
boxes with per-component Gaussian noise (depth noise optionally growing with
distance), and every detection carries its box loss against the source
ground truth plus a feature vector that encodes that loss. Each frame draws
from its own RNG stream keyed by ``(seed, frame index)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .confidence import TrainRecord, box_loss, wrap_angle, write_records_csv
from .geometry import EARTH_RADIUS_M, Box3D, box_corners_3d
from .kitti_io import (
    CLASS_IDS,
    Annotation,
    Detection,
    GeoPose,
    write_detection_file,
    write_label_file,
    write_pose_csv,
    write_split_manifest,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

FOCAL_PX = 721.0
PRINCIPAL = (609.5, 172.9)
IMAGE_SIZE = (1242.0, 375.0)
CAMERA_HEIGHT = 1.65
Z_RANGE = (5.0, 60.0)
Z_REF = 20.0
FP_FALLBACK_LOSS = 25.0

# mean and std of (H, W, L) per class, roughly KITTI statistics
SHAPE_PRIORS = {
    "Car": ((1.53, 1.63, 3.88), (0.14, 0.10, 0.43)),
    "Pedestrian": ((1.76, 0.66, 0.84), (0.11, 0.14, 0.23)),
    "Cyclist": ((1.74, 0.60, 1.76), (0.09, 0.12, 0.18)),
}


@dataclass(frozen=True)
class NoiseSpec:
    sigma_x: float = 0.10
    sigma_y: float = 0.05
    sigma_z: float = 0.30
    sigma_h: float = 0.05
    sigma_w: float = 0.05
    sigma_l: float = 0.10
    sigma_yaw: float = 0.05
    z_scale_exponent: float = 1.0
    fp_rate: float = 0.3
    fn_rate: float = 0.0
    score2d_model: str = "noise"
    feature_model: str = "loss_linear"
    rho: float = 1.0
    feature_dim: int = 8
    classes: dict = field(default_factory=lambda: {"Car": 1.0})
    occlusion_probs: tuple = (0.6, 0.3, 0.1)
    frames_per_sequence: int = 50

    def __post_init__(self):
        for f in ("sigma_x", "sigma_y", "sigma_z", "sigma_h", "sigma_w", "sigma_l", "sigma_yaw"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")
        for f in ("fp_rate", "fn_rate", "rho"):
            if not 0.0 <= getattr(self, f) <= 1.0:
                raise ValueError(f"{f} must lie in [0, 1]")
        if self.score2d_model not in ("informative", "noise"):
            raise ValueError(f"unknown score2d model {self.score2d_model!r}")
        if self.feature_model not in ("loss_linear", "loss_noisy"):
            raise ValueError(f"unknown feature model {self.feature_model!r}")
        unknown = set(self.classes) - set(SHAPE_PRIORS)
        if unknown:
            raise ValueError(f"no shape prior for classes {sorted(unknown)}")

    @classmethod
    def zero(cls, **kw) -> "NoiseSpec":
        base = dict(sigma_x=0, sigma_y=0, sigma_z=0, sigma_h=0, sigma_w=0, sigma_l=0, sigma_yaw=0,
                    fp_rate=0.0, fn_rate=0.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_mapping(cls, d: dict) -> "NoiseSpec":
        d = dict(d.get("noise", d))
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown noise-profile keys {sorted(extra)}")
        if "occlusion_probs" in d:
            d["occlusion_probs"] = tuple(d["occlusion_probs"])
        return cls(**d)


# Named profiles; "z_dominant" has depth noise well above every other component.
PROFILES = {
    "default": {},
    "z_dominant": dict(sigma_x=0.2, sigma_y=0.1, sigma_z=0.8, sigma_h=0.05, sigma_w=0.05, sigma_l=0.1,
                       sigma_yaw=0.08, score2d_model="informative"),
    "zero": dict(sigma_x=0, sigma_y=0, sigma_z=0, sigma_h=0, sigma_w=0, sigma_l=0, sigma_yaw=0,
                 fp_rate=0.0, fn_rate=0.0),
}


def profile(name: str, **overrides) -> NoiseSpec:
    if name not in PROFILES:
        raise ValueError(f"unknown noise profile {name!r}; known: {sorted(PROFILES)}")
    return NoiseSpec(**{**PROFILES[name], **overrides})


def load_noise_profile(path: str | Path) -> NoiseSpec:
    """Noise spec from a JSON/TOML file, or a built-in profile name."""
    if str(path) in PROFILES:
        return profile(str(path))
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        return NoiseSpec.from_mapping(tomllib.loads(text))
    return NoiseSpec.from_mapping(json.loads(text))


@dataclass
class SynthCorpus:
    frame_ids: list[str]
    gts: dict[str, list[Annotation]]
    dets: dict[str, list[Detection]]
    det_losses: dict[str, list[float]]
    det_sources: dict[str, list[int]]  # index of the source GT, -1 for false positives
    records: list[TrainRecord]
    poses: list[GeoPose]
    loss_direction: np.ndarray
    noise: NoiseSpec


def project_bbox(box: Box3D) -> tuple[tuple[float, float, float, float], float]:
    """Clipped 2D box from a pinhole camera and the truncated fraction."""
    pts = box_corners_3d(box)
    z = np.maximum(pts[:, 2], 0.1)
    u = FOCAL_PX * pts[:, 0] / z + PRINCIPAL[0]
    v = FOCAL_PX * pts[:, 1] / z + PRINCIPAL[1]
    full = (u.min(), v.min(), u.max(), v.max())
    clipped = (
        min(max(full[0], 0.0), IMAGE_SIZE[0] - 1),
        min(max(full[1], 0.0), IMAGE_SIZE[1] - 1),
        min(max(full[2], 0.0), IMAGE_SIZE[0] - 1),
        min(max(full[3], 0.0), IMAGE_SIZE[1] - 1),
    )
    area_full = (full[2] - full[0]) * (full[3] - full[1])
    area_clip = (clipped[2] - clipped[0]) * (clipped[3] - clipped[1])
    trunc = 1.0 - area_clip / area_full if area_full > 0 else 1.0
    return tuple(float(c) for c in clipped), float(min(max(trunc, 0.0), 1.0))


def _sample_box(rng: np.random.Generator, cls: str) -> Box3D:
    mean, std = SHAPE_PRIORS[cls]
    shape = tuple(max(0.2, m + s * rng.standard_normal()) for m, s in zip(mean, std))
    z = rng.uniform(*Z_RANGE)
    x = rng.uniform(-0.55, 0.55) * z
    y = CAMERA_HEIGHT + 0.05 * rng.standard_normal()
    return Box3D((x, y, z), shape, rng.uniform(-math.pi, math.pi))


def _clear_of(box: Box3D, others: list[Box3D], margin: float = 0.5) -> bool:
    r = 0.5 * math.hypot(box.shape[1], box.shape[2])
    for o in others:
        ro = 0.5 * math.hypot(o.shape[1], o.shape[2])
        if math.hypot(box.center[0] - o.center[0], box.center[2] - o.center[2]) < r + ro + margin:
            return False
    return True


def _annotation(cls: str, box: Box3D, occlusion: int) -> Annotation:
    bbox, trunc = project_bbox(box)
    alpha = wrap_angle(box.yaw - math.atan2(box.center[0], box.center[2]))
    return Annotation(cls, trunc, occlusion, alpha, bbox, box.shape, box.center, box.yaw)


def _score2d(rng, noise: NoiseSpec, ann: Annotation) -> float:
    if noise.score2d_model == "noise":
        return float(rng.uniform())
    logit = (ann.height_px - 40.0) / 15.0 - 0.5 * ann.occlusion + 0.5 * rng.standard_normal()
    return float(1.0 / (1.0 + math.exp(-logit)))


def _features(rng, noise: NoiseSpec, direction: np.ndarray, loss: float) -> tuple[float, ...]:
    xi = rng.standard_normal(noise.feature_dim)
    if noise.feature_model == "loss_linear":
        u = loss
    else:
        u = noise.rho * loss + math.sqrt(1.0 - noise.rho ** 2) * rng.standard_normal()
    f = xi - (xi @ direction) * direction + u * direction
    return tuple(float(v) for v in f)


def _perturb(rng, noise: NoiseSpec, box: Box3D) -> Box3D:
    x, y, z = box.center
    h, w, l = box.shape
    sz = noise.sigma_z * (z / Z_REF) ** noise.z_scale_exponent
    center = (x + noise.sigma_x * rng.standard_normal(),
              y + noise.sigma_y * rng.standard_normal(),
              max(0.5, z + sz * rng.standard_normal()))
    shape = (max(0.1, h + noise.sigma_h * rng.standard_normal()),
             max(0.1, w + noise.sigma_w * rng.standard_normal()),
             max(0.1, l + noise.sigma_l * rng.standard_normal()))
    return Box3D(center, shape, wrap_angle(box.yaw + noise.sigma_yaw * rng.standard_normal()))


def _frame(seed: int, idx: int, n_objects: int, noise: NoiseSpec, direction: np.ndarray):
    rng = np.random.default_rng([seed, 1, idx])
    names = sorted(noise.classes)
    probs = np.array([noise.classes[c] for c in names], dtype=float)
    probs /= probs.sum()
    occ_p = np.array(noise.occlusion_probs, dtype=float)
    occ_p /= occ_p.sum()

    boxes: list[Box3D] = []
    gts: list[Annotation] = []
    for _ in range(n_objects):
        cls = names[rng.choice(len(names), p=probs)]
        for _attempt in range(100):
            box = _sample_box(rng, cls)
            if _clear_of(box, boxes):
                break
        else:
            continue
        boxes.append(box)
        gts.append(_annotation(cls, box, int(rng.choice(len(occ_p), p=occ_p))))

    dets, losses, sources, records = [], [], [], []
    for gi, gt in enumerate(gts):
        if rng.uniform() < noise.fn_rate:
            continue
        pred = _perturb(rng, noise, gt.box)
        loss = box_loss(pred, gt.box)
        ann = _annotation(gt.class_name, pred, gt.occlusion)
        ann = replace(ann, bbox2d=gt.bbox2d, truncation=gt.truncation)
        feats = _features(rng, noise, direction, loss)
        dets.append(Detection(**asdict_shallow(ann), score2d=_score2d(rng, noise, ann), features=feats))
        losses.append(loss)
        sources.append(gi)
        records.append(TrainRecord(feats, loss, CLASS_IDS.get(gt.class_name, 0)))

    n_fp = int(rng.binomial(n_objects, noise.fp_rate)) if noise.fp_rate > 0 else 0
    for _ in range(n_fp):
        cls = names[rng.choice(len(names), p=probs)]
        box = _sample_box(rng, cls)
        same = [g for g in gts if g.class_name == cls]
        if same:
            near = min(same, key=lambda g: math.hypot(g.location[0] - box.center[0], g.location[2] - box.center[2]))
            loss = box_loss(box, near.box)
        else:
            loss = FP_FALLBACK_LOSS
        ann = _annotation(cls, box, int(rng.choice(len(occ_p), p=occ_p)))
        feats = _features(rng, noise, direction, loss)
        dets.append(Detection(**asdict_shallow(ann), score2d=_score2d(rng, noise, ann), features=feats))
        losses.append(loss)
        sources.append(-1)
    return gts, dets, losses, sources, records


def asdict_shallow(a: Annotation) -> dict:
    return {f.name: getattr(a, f.name) for f in fields(Annotation)}


def _poses(seed: int, frame_ids: list[str], per_seq: int) -> list[GeoPose]:
    poses = []
    rng = None
    lat = lon = heading = 0.0
    for k, fid in enumerate(frame_ids):
        seq, pos = divmod(k, per_seq)
        if pos == 0:
            rng = np.random.default_rng([seed, 2, seq])
            lat = 48.95 + rng.uniform(0.0, 0.1)
            lon = 8.35 + rng.uniform(0.0, 0.15)
            heading = rng.uniform(0.0, 2 * math.pi)
        else:
            heading += 0.05 * rng.standard_normal()
            step = rng.uniform(5.0, 15.0)
            lat += math.degrees(step * math.cos(heading) / EARTH_RADIUS_M)
            lon += math.degrees(step * math.sin(heading) / (EARTH_RADIUS_M * math.cos(math.radians(lat))))
        poses.append(GeoPose(fid, f"seq_{seq:04d}", round(lat, 9), round(lon, 9)))
    return poses


def loss_direction(seed: int, dim: int) -> np.ndarray:
    """The generating unit vector ``w*``: ``features @ w* == loss`` for loss_linear."""
    v = np.random.default_rng([seed, 0]).standard_normal(dim)
    return v / np.linalg.norm(v)


def generate_corpus(n_frames: int, objects_per_frame: int, noise: NoiseSpec = NoiseSpec(), seed: int = 0,
                    first_frame: int = 0) -> SynthCorpus:
    direction = loss_direction(seed, noise.feature_dim)
    frame_ids = [f"{first_frame + i:06d}" for i in range(n_frames)]
    gts, dets, det_losses, det_sources, records = {}, {}, {}, {}, []
    for i, fid in enumerate(frame_ids):
        g, d, l, s, r = _frame(seed, first_frame + i, objects_per_frame, noise, direction)
        gts[fid], dets[fid], det_losses[fid], det_sources[fid] = g, d, l, s
        records.extend(r)
    poses = _poses(seed, frame_ids, noise.frames_per_sequence)
    return SynthCorpus(frame_ids, gts, dets, det_losses, det_sources, records, poses, direction, noise)


def features_csv(dets: dict[str, list[Detection]]) -> str:
    """``frame_id,det_index,feat_0..`` rows for every detection with features."""
    lines = []
    dim = None
    for fid in sorted(dets):
        for k, d in enumerate(dets[fid]):
            if d.features is None:
                continue
            dim = len(d.features)
            lines.append(",".join([fid, str(k), *(repr(float(v)) for v in d.features)]))
    header = ",".join(["frame_id", "det_index", *(f"feat_{k}" for k in range(dim or 0))])
    return header + "\n" + "".join(line + "\n" for line in lines)


def write_corpus(corpus: SynthCorpus, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "label_2").mkdir(parents=True, exist_ok=True)
    (out / "det").mkdir(parents=True, exist_ok=True)
    for fid in corpus.frame_ids:
        (out / "label_2" / f"{fid}.txt").write_text(write_label_file(corpus.gts[fid]))
        (out / "det" / f"{fid}.txt").write_text(write_detection_file(corpus.dets[fid]))
    (out / "features.csv").write_text(features_csv(corpus.dets))
    (out / "train_records.csv").write_text(write_records_csv(corpus.records))
    (out / "poses.csv").write_text(write_pose_csv(corpus.poses))
    (out / "split.txt").write_text(write_split_manifest(corpus.frame_ids))
    noise = asdict(corpus.noise)
    noise["occlusion_probs"] = list(noise["occlusion_probs"])
    (out / "noise.json").write_text(json.dumps(noise, indent=2, sort_keys=True) + "\n")


def inflate_losses(records: list[TrainRecord], scale: float = 1.5, offset: float = 0.1,
                   exponent: Optional[float] = None) -> list[TrainRecord]:
    """Same features, larger losses: a stand-in for a detector's generalization gap.

    The map ``l -> scale * l**exponent + offset`` is strictly increasing, so
    relative targets are unchanged while absolute targets drop.
    """
    out = []
    for r in records:
        base = r.loss if exponent is None else r.loss ** exponent
        out.append(TrainRecord(r.features, scale * base + offset, r.class_id))
    return out
