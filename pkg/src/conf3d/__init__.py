"""Monocular 3D detection tooling: KITTI I/O, AP evaluation, 3D-confidence rescoring, geo-separated splits."""

from .confidence import (
    ConfidenceTargetConfig,
    Scorer,
    TrainOptions,
    TrainRecord,
    absolute_target,
    bce_loss,
    calibration_bins,
    combine_scores,
    relative_target_exact,
    sample_pair_targets,
    train_scorer,
)
from .evaluation import ap_r11, ap_r40, assign_difficulty, evaluate, match_frame
from .geo_split import geosep_filter, overlap_audit, split_train_val
from .geometry import Box3D, bev_corners, haversine_m, iou_3d, iou_bev, polygon_intersection_area
from .kitti_io import (
    Annotation,
    Detection,
    GeoPose,
    SplitManifest,
    parse_detection_file,
    parse_label_file,
    parse_pose_file,
    parse_split_manifest,
    write_detection_file,
)
from .oracle import oracle_substitute, oracle_sweep
from .synth import NoiseSpec, generate_corpus

__version__ = "0.1.0"
