import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conf3d.evaluation import (
    DEFAULT_RULES,
    FP,
    IGNORED,
    TP,
    DifficultyRule,
    ap_r11,
    ap_r40,
    assign_difficulty,
    evaluate,
    interpolated_precision,
    match_frame,
    score_order,
)
from conf3d.geometry import iou_3d
from conf3d.kitti_io import Annotation
from conftest import make_det, make_gt
from oracles import perfect_corpus, random_eval_corpus, sweep_ap


def test_difficulty_examples():
    assert assign_difficulty(make_gt(bbox=(0, 0, 10, 50))) == {"Easy", "Moderate", "Hard"}
    gt = make_gt(bbox=(0, 0, 10, 30), occlusion=1, truncation=0.2)
    assert assign_difficulty(gt) == {"Moderate", "Hard"}
    assert assign_difficulty(make_gt(bbox=(0, 0, 10, 20))) == set()


def test_difficulty_rules_monotone():
    for easier, harder in zip(DEFAULT_RULES, DEFAULT_RULES[1:]):
        assert harder.min_bbox_height <= easier.min_bbox_height
        assert harder.max_occlusion >= easier.max_occlusion
        assert harder.max_truncation >= easier.max_truncation


def test_dontcare_has_no_difficulty():
    dc = Annotation("DontCare", -1, -1, -10, (0, 0, 100, 100), (-1, -1, -1), (-1000, -1000, -1000), -10)
    assert assign_difficulty(dc) == set()


def test_match_single_and_duplicate():
    gt = make_gt()
    assert match_frame([make_det(gt, 0.9)], [gt]) == [TP]
    assert match_frame([make_det(gt, 0.9), make_det(gt, 0.8)], [gt]) == [TP, FP]
    # flags are returned in input order even when the better-scored det comes second
    assert match_frame([make_det(gt, 0.3), make_det(gt, 0.8)], [gt]) == [FP, TP]


def test_match_out_of_difficulty_is_ignored():
    gt = make_gt()
    flags = match_frame([make_det(gt, 0.9), make_det(gt, 0.8)], [gt], gt_valid=[False])
    assert flags == [IGNORED, FP]


def test_match_dontcare_region():
    gt = make_gt(x=20.0)
    far = make_det(make_gt(x=-5.0, bbox=(500, 100, 560, 150)), 0.9)
    dc = Annotation("DontCare", -1, -1, -10, (490, 90, 600, 160), (-1, -1, -1), (-1000, -1000, -1000), -10)
    assert match_frame([far], [gt, dc]) == [IGNORED]
    assert match_frame([far], [gt]) == [FP]


def test_ties_keep_input_order():
    assert score_order([0.5, 0.9, 0.5, 0.9]) == [1, 3, 0, 2]


def _brute_greedy(scores, iou, thr):
    # exhaustive: try every order consistent with the score ranking, all must agree
    n_det, n_gt = iou.shape
    order = sorted(range(n_det), key=lambda i: (-scores[i], i))
    taken, flags = set(), [FP] * n_det
    for d in order:
        options = [(iou[d, g], g) for g in range(n_gt) if g not in taken and iou[d, g] >= thr]
        if options:
            taken.add(max(options)[1])
            flags[d] = TP
    return flags


def test_match_small_random_cases_vs_greedy_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        gts = [make_gt(x=rng.uniform(-2, 2), z=20 + rng.uniform(-2, 2), yaw=rng.uniform(-3, 3)) for _ in range(2)]
        dets = [make_det(gts[rng.integers(2)], rng.uniform(), dx=rng.normal(0, 0.5), dz=rng.normal(0, 0.5))
                for _ in range(3)]
        iou = np.array([[iou_3d(d.box, g.box) for g in gts] for d in dets])
        assert match_frame(dets, gts, iou_threshold=0.5) == _brute_greedy([d.score2d for d in dets], iou, 0.5)


def test_perfect_and_empty():
    dets, gts = perfect_corpus()
    for fn in (ap_r40, ap_r11):
        for diff in ("Easy", "Moderate", "Hard"):
            assert fn(dets, gts, "Car", diff) == 100.0
        assert fn([[] for _ in gts], gts) == 0.0
        assert fn([], gts) == 0.0


def test_no_ground_truth_flag():
    res = evaluate([[]], [[]], classes=("Car",), difficulties=("Moderate",), metrics=("3D",))
    e = res.get("Car", "Moderate", "3D")
    assert e.ap == 0.0 and e.no_ground_truth


def test_interpolated_precision_hand_case():
    # ranked: TP FP TP, 4 GTs -> recall reaches 0.5 at precision 2/3
    s = interpolated_precision([True, False, True], 4, "r11")
    assert s[:6] == [1.0, 1.0, 1.0, 2 / 3, 2 / 3, 2 / 3]
    assert s[6:] == [0.0] * 5


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("kind", ["r40", "r11"])
def test_ap_matches_threshold_sweep(seed, kind):
    dets, gts = random_eval_corpus(seed)
    fn = ap_r40 if kind == "r40" else ap_r11
    for diff in ("Easy", "Moderate", "Hard"):
        assert fn(dets, gts, "Car", diff, "3D") == pytest.approx(sweep_ap(dets, gts, "Car", diff, "3D", kind), abs=1e-9)
    assert fn(dets, gts, "Car", "Moderate", "BEV") == pytest.approx(
        sweep_ap(dets, gts, "Car", "Moderate", "BEV", kind), abs=1e-9)


def test_threads_do_not_change_results():
    dets, gts = random_eval_corpus(3, n_frames=15)
    a = evaluate(dets, gts, threads=1)
    b = evaluate(dets, gts, threads=4)
    assert a.to_json() == b.to_json()


def test_dict_and_list_inputs_agree():
    dets, gts = random_eval_corpus(4)
    keys = [f"{i:06d}" for i in range(len(gts))]
    a = evaluate(dict(zip(keys, dets)), dict(zip(keys, gts)))
    assert a.to_csv() == evaluate(dets, gts).to_csv()


def test_csv_and_json_shape():
    dets, gts = perfect_corpus(n_frames=3)
    res = evaluate(dets, gts)
    lines = res.to_csv().splitlines()
    assert lines[0] == "class,difficulty,metric,ap"
    assert "Car,Moderate,3D,100.000000" in lines
    import json

    payload = json.loads(res.to_json())
    entry = payload["results"][0]
    assert len(entry["recall"]) == len(entry["precision"]) == 40
    assert entry["ap"] == pytest.approx(100 * np.mean(entry["precision"]))


def test_custom_rules():
    gt = make_gt(bbox=(0, 0, 10, 30))
    strict = (DifficultyRule("Moderate", 35.0, 1, 0.3),)
    res = evaluate([[make_det(gt, 0.9)]], [[gt]], difficulties=("Moderate",), rules=strict, metrics=("3D",))
    assert res.ap("Car", "Moderate", "3D") == 0.0 and res.get("Car", "Moderate", "3D").no_ground_truth


# -- properties ---------------------------------------------------------------


@given(st.integers(0, 10_000), st.sampled_from(["exp", "cube", "affine", "logit"]))
def test_strictly_increasing_score_map_leaves_ap_unchanged(seed, kind):
    dets, gts = random_eval_corpus(seed, n_frames=5)
    f = {"exp": np.exp, "cube": lambda s: s ** 3, "affine": lambda s: 3 * s + 7,
         "logit": lambda s: np.log(s + 1e-3) - np.log1p(1e-3 - s)}[kind]
    mapped = [[replace(d, score2d=float(f(d.score2d))) for d in fr] for fr in dets]
    assert evaluate(mapped, gts).to_csv() == evaluate(dets, gts).to_csv()


@given(st.integers(0, 10_000))
def test_low_scored_false_positive_never_raises_ap(seed):
    dets, gts = random_eval_corpus(seed, n_frames=4)
    low = min((d.score2d for fr in dets for d in fr), default=1.0) / 2
    extra = make_det(make_gt(x=-30.0, z=50.0), low)
    more = [list(fr) for fr in dets]
    more[0].append(extra)
    for diff in ("Easy", "Moderate", "Hard"):
        assert ap_r40(more, gts, "Car", diff) <= ap_r40(dets, gts, "Car", diff) + 1e-12


def test_other_classes_are_ignored():
    dets, gts = random_eval_corpus(8, n_frames=6)
    ped = make_gt(x=1.0, z=10.0, cls="Pedestrian", shape=(1.7, 0.6, 0.8))
    noisy_d = [fr + [make_det(ped, 0.99, dx=3.0)] for fr in dets]
    noisy_g = [fr + [ped] for fr in gts]
    for diff in ("Easy", "Moderate", "Hard"):
        assert ap_r40(noisy_d, noisy_g, "Car", diff) == ap_r40(dets, gts, "Car", diff)


def test_stable_tie_order_is_documented_behaviour():
    # two dets with equal scores: the one listed first is ranked first
    gt = make_gt()
    good, bad = make_det(gt, 0.5), make_det(make_gt(x=15.0), 0.5)
    assert ap_r40([[good, bad]], [[gt]]) == 100.0
    assert ap_r40([[bad, good]], [[gt]]) == 50.0


def test_exhaustive_tiny_permutations():
    # permuting input order of distinct-score detections changes nothing
    dets, gts = random_eval_corpus(11, n_frames=1)
    base = ap_r40(dets, gts)
    for perm in itertools.islice(itertools.permutations(dets[0]), 24):
        assert ap_r40([list(perm)], gts) == base
