import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unipercept.evaluation import (
    _associate_gt,
    _pairwise_association,
    average_precision_11,
    box_iou_xyxy,
    detection_ap,
    identity_accuracy,
    match_detections,
    mean_ap,
    track_clip,
)


def test_box_iou_xyxy():
    assert box_iou_xyxy((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)
    assert box_iou_xyxy((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert box_iou_xyxy((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0


# --------------------------------------------------------------------- AP


def test_ap_hand_worked_three_detections():
    # ranked TP, FP, TP against 2 ground truths:
    #   precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
    #   recall points 0.0..0.5 interpolate to 1, 0.6..1.0 to 2/3
    ap = average_precision_11([0.9, 0.8, 0.7], [True, False, True], 2)
    assert ap == pytest.approx((6 * 1 + 5 * (2 / 3)) / 11, abs=1e-12)


def test_ap_order_by_score_not_input():
    assert average_precision_11([0.7, 0.9, 0.8], [True, True, False], 2) == pytest.approx(28 / 33)


def test_ap_edges():
    assert average_precision_11([], [], 3) == 0.0
    assert np.isnan(average_precision_11([0.5], [False], 0))
    assert average_precision_11([0.9, 0.1], [True, True], 2) == pytest.approx(1.0)
    # half the ground truth found at full precision
    assert average_precision_11([0.9], [True], 2) == pytest.approx(6 / 11)


def _gt_image(rng, cats=2):
    n = int(rng.integers(1, 4))
    out = []
    for _ in range(n):
        cx, cy = rng.uniform(0.2, 0.8, 2)
        w, h = rng.uniform(0.05, 0.3, 2)
        m = np.zeros((16, 16), bool)
        m[int(cy * 10) : int(cy * 10) + 4, int(cx * 10) : int(cx * 10) + 4] = True
        out.append({"category": int(rng.integers(cats)), "box": [cx, cy, w, h], "mask": m})
    return out


def test_ground_truth_as_predictions_is_one():
    rng = np.random.default_rng(0)
    gts = [_gt_image(rng) for _ in range(20)]
    preds = [[{**g, "score": float(rng.uniform(0.3, 1))} for g in img] for img in gts]
    for kind in ("box", "mask"):
        res = detection_ap(preds, gts, ["a", "b"], kind=kind)
        for per_cat in res.values():
            assert all(v == 1.0 for v in per_cat.values())


def test_no_predictions_is_zero():
    rng = np.random.default_rng(1)
    gts = [_gt_image(rng) for _ in range(5)]
    res = detection_ap([[] for _ in gts], gts, ["a", "b"])
    assert mean_ap(res["AP50"]) == 0.0


def test_category_without_gt_is_nan_and_skipped():
    gts = [[{"category": 0, "box": [0.5, 0.5, 0.2, 0.2]}]]
    preds = [[{"category": 0, "box": [0.5, 0.5, 0.2, 0.2], "score": 0.9}]]
    res = detection_ap(preds, gts, ["a", "b"])
    assert np.isnan(res["AP50"]["b"]) and mean_ap(res["AP50"]) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ap_monotone_under_dropping(seed):
    rng = np.random.default_rng(seed)
    gts = [_gt_image(rng, 1) for _ in range(6)]
    preds = [[{**g, "score": float(rng.uniform(0.3, 1))} for g in img] for img in gts]
    prev = mean_ap(detection_ap(preds, gts, ["a"])["AP50"])
    assert prev == 1.0
    flat = [(i, j) for i, img in enumerate(preds) for j in range(len(img))]
    for k in rng.permutation(len(flat)):
        i, j = flat[k]
        preds[i][j] = None
        cur = mean_ap(detection_ap([[p for p in img if p] for img in preds], gts, ["a"])["AP50"])
        assert cur <= prev + 1e-12
        prev = cur
    assert prev == 0.0


def test_greedy_matching_one_to_one():
    gts = [{"box": [0.5, 0.5, 0.2, 0.2]}]
    preds = [{"box": [0.5, 0.5, 0.2, 0.2], "score": 0.6}, {"box": [0.5, 0.5, 0.2, 0.2], "score": 0.9}]
    from unipercept.evaluation import _box_iou

    flags = match_detections(preds, gts, lambda p, g: _box_iou(p["box"], g["box"]), 0.5)
    assert flags == [False, True]


# ---------------------------------------------------------------- tracking


def _det(box, emb, score=0.9, mask=None, category=0):
    return {"box": box, "embedding": np.asarray(emb, float), "score": score, "mask": mask, "category": category}


def test_associate_gt_prefers_masks():
    a = np.zeros((8, 8), bool)
    a[:4, :4] = True
    b = np.zeros((8, 8), bool)
    b[4:, 4:] = True
    gts = [{"box": [0.25, 0.25, 0.5, 0.5], "mask": a}, {"box": [0.75, 0.75, 0.5, 0.5], "mask": b}]
    # boxes swapped relative to masks: the mask decides
    dets = [_det([0.25, 0.25, 0.5, 0.5], [1, 0], mask=b), _det([0.75, 0.75, 0.5, 0.5], [0, 1], mask=a)]
    assert _associate_gt(gts, dets) == [1, 0]
    gts_nomask = [{**g, "mask": None} for g in gts]
    assert _associate_gt(gts_nomask, dets) == [0, 1]
    assert _associate_gt(gts, []) == [None, None]


def test_oracle_embeddings_full_accuracy():
    rng = np.random.default_rng(0)
    frames_pred, gt_ids = [], []
    for t in range(10):
        order = rng.permutation(3)
        frames_pred.append([_det([0.2 + 0.3 * k, 0.5, 0.1, 0.1], np.eye(3)[k]) for k in order])
        gt_ids.append(list(order))
    tracked = track_clip(frames_pred)
    assigned = [ids for _, ids in tracked]
    assert identity_accuracy(gt_ids, assigned) == 1.0
    tp, fp, fn = _pairwise_association(gt_ids, assigned)
    assert fp == fn == 0 and tp == 3 * 45


def test_score_threshold_filters_detections():
    frames = [[_det([0.5, 0.5, 0.1, 0.1], [1, 0], score=0.2), _det([0.2, 0.2, 0.1, 0.1], [0, 1], score=0.9)]]
    (dets, ids), = track_clip(frames, score_threshold=0.3)
    assert len(dets) == 1 and ids == [0]


def test_pairwise_counts_split_identity():
    # identity 0 split into two tracks over 3 frames
    tp, fp, fn = _pairwise_association([[0], [0], [0]], [[5], [5], [6]])
    assert (tp, fp, fn) == (1, 0, 2)
