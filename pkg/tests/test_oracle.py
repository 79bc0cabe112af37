from dataclasses import replace

import pytest

from conf3d.geometry import iou_3d
from conf3d.oracle import COMPONENTS, apply_substitution, match_detections, oracle_substitute, oracle_sweep
from conf3d.synth import NoiseSpec, generate_corpus, profile
from conftest import make_det, make_gt


def test_fixed_point():
    gt = make_gt()
    det = make_det(gt, 0.7)
    for c in COMPONENTS:
        assert oracle_substitute([[det]], [[gt]], c) == [[det]]


def test_z_only_error_is_repaired():
    gt = make_gt()
    det = make_det(gt, 0.7, dz=1.5)
    (out,), = oracle_substitute([[det]], [[gt]], "Z")
    assert iou_3d(out.box, gt.box) == pytest.approx(1.0)
    assert out.score2d == det.score2d


def test_components_touch_only_their_fields():
    gt = make_gt(yaw=0.3)
    det = make_det(gt, 0.7, dx=0.5, dz=1.0, rotation_y=0.1, shape=(1.4, 1.5, 4.2))
    m = [0]
    r, = apply_substitution([det], [gt], m, "R")
    assert r.rotation_y == gt.rotation_y and r.location == det.location and r.shape == det.shape
    h, = apply_substitution([det], [gt], m, "HWL")
    assert h.shape == gt.shape and h.location == det.location
    xy, = apply_substitution([det], [gt], m, "XY")
    assert xy.location == (gt.location[0], gt.location[1], det.location[2])
    z, = apply_substitution([det], [gt], m, "Z")
    assert z.location == (det.location[0], det.location[1], gt.location[2])


def test_unknown_component():
    with pytest.raises(ValueError):
        oracle_substitute([[]], [[]], "Q")
    with pytest.raises(ValueError):
        oracle_sweep([[]], [[]], ["Q"])


def test_unmatched_untouched_and_invariants():
    c = generate_corpus(12, 5, NoiseSpec(), seed=2)
    dets = [c.dets[f] for f in c.frame_ids]
    gts = [c.gts[f] for f in c.frame_ids]
    for comp in COMPONENTS:
        out = oracle_substitute(dets, gts, comp)
        for d_in, d_out, g in zip(dets, out, gts):
            assert len(d_in) == len(d_out)
            m = match_detections(d_in, g)
            for a, b, k in zip(d_in, d_out, m):
                assert (a.class_name, a.score2d, a.score3d) == (b.class_name, b.score2d, b.score3d)
                if k < 0:
                    assert a == b


def test_substitutions_commute():
    c = generate_corpus(10, 5, NoiseSpec(), seed=3)
    for f in c.frame_ids:
        d, g = c.dets[f], c.gts[f]
        m = match_detections(d, g)
        a = apply_substitution(apply_substitution(d, g, m, "XY"), g, m, "Z")
        b = apply_substitution(apply_substitution(d, g, m, "Z"), g, m, "XY")
        assert a == b


def test_match_policies():
    gt = make_gt(bbox=(100, 100, 200, 160))
    near = make_det(gt, 0.9, dz=3.0)
    far = make_det(gt, 0.8, dz=6.0)
    assert match_detections([near], [gt], "center") == [0]
    assert match_detections([far], [gt], "center") == [-1]
    # the 2D box is unchanged, so the 2D policy still pairs the distant one
    assert match_detections([far], [gt], "iou2d") == [0]
    off = make_det(gt, 0.8, bbox2d=(300, 100, 400, 160))
    assert match_detections([off], [gt], "iou2d") == [-1]
    assert match_detections([near, replace(near, score2d=0.95)], [gt]) == [-1, 0]
    with pytest.raises(ValueError):
        match_detections([near], [gt], "hungarian")


def test_sweep_zero_noise_and_empty():
    c = generate_corpus(8, 4, NoiseSpec.zero(), seed=0)
    dets = {f: [replace(d, score2d=1.0) for d in c.dets[f]] for f in c.frame_ids}
    t = oracle_sweep(dets, c.gts)
    assert [r.component for r in t.rows] == ["none", *COMPONENTS]
    for r in t.rows:
        assert (r.easy, r.moderate, r.hard) == (100.0, 100.0, 100.0)
    t = oracle_sweep({f: [] for f in c.frame_ids}, c.gts)
    assert all((r.easy, r.moderate, r.hard) == (0.0, 0.0, 0.0) for r in t.rows)
    assert t.to_csv().splitlines()[0] == "component,easy,moderate,hard"


def test_z_noise_only_ranks_z_first():
    noise = NoiseSpec.zero(sigma_z=1.0, score2d_model="informative")
    c = generate_corpus(40, 5, noise, seed=1)
    t = oracle_sweep(c.dets, c.gts)
    gains = {k: t.gain(k) for k in COMPONENTS}
    assert max(gains, key=gains.get) == "Z"
    # depth errors beyond the 4 m gate stay unmatched, so the row is not quite perfect
    assert t.row("Z").moderate > 95.0


def test_z_dominant_gain_beats_rotation():
    c = generate_corpus(60, 6, profile("z_dominant"), seed=5)
    t = oracle_sweep(c.dets, c.gts)
    assert t.gain("Z") > t.gain("R")


def test_substitution_can_lower_iou():
    # copying the true shape onto a shifted box can shrink the overlap:
    # a too-long prediction that still covers an offset GT loses coverage
    gt = make_gt(x=0.0, z=20.0, shape=(1.5, 1.6, 4.0))
    det = make_det(gt, 0.9, dx=1.0, shape=(1.5, 1.6, 6.0))
    fixed, = apply_substitution([det], [gt], [0], "HWL")
    assert iou_3d(fixed.box, gt.box) < iou_3d(det.box, gt.box)
