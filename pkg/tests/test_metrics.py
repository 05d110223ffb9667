import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from novis.metrics import (THRESHOLDS, ap_bruteforce_oracle, evaluate_ap, identity_ious, iou_matrix,
                           volumetric_iou)
from novis.tensor import ContractViolation
from novis.tracker import Track


def vol(*cells, shape=(2, 3, 3)):
    m = np.zeros(shape, bool)
    for c in cells:
        m[c] = True
    return m


def gt(tid, label, masks):
    return Track(tid, label, 1.0, masks)


def test_volumetric_iou():
    a = vol((0, 0, 0), (1, 0, 0))
    b = vol((1, 0, 0), (1, 1, 1))
    assert volumetric_iou(a, b) == pytest.approx(1 / 3)
    assert volumetric_iou(a, a) == 1.0
    assert volumetric_iou(np.zeros((1, 2, 2)), np.zeros((1, 2, 2))) == 0.0
    with pytest.raises(ContractViolation):
        volumetric_iou(np.zeros((1, 2, 2)), np.zeros((2, 2, 2)))


def test_iou_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    p = [Track(i, 0, 0.5, rng.random((3, 4, 4)) < 0.4) for i in range(3)]
    g = [gt(i, 0, rng.random((3, 4, 4)) < 0.4) for i in range(2)]
    ref = np.array([[volumetric_iou(a.masks, b.masks) for b in g] for a in p])
    np.testing.assert_allclose(iou_matrix(p, g), ref, rtol=1e-12)


# -- hand-computed examples -------------------------------------------------------------------

def test_hand_example_perfect():
    m = vol((0, 1, 1), (1, 1, 2))
    r = evaluate_ap({"v": [Track(0, 0, 0.9, m)]}, {"v": [gt(0, 0, m)]}, num_classes=1)
    assert (r.AP, r.AP50, r.AP75, r.AR1, r.AR10) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_hand_example_miss():
    r = evaluate_ap({"v": [Track(0, 0, 0.9, vol((0, 0, 0)))]}, {"v": [gt(0, 0, vol((1, 2, 2)))]}, num_classes=1)
    assert (r.AP, r.AR10) == (0.0, 0.0)


def test_hand_example_half():
    # a higher-scored false positive ahead of the true positive: precision 1/2 at full recall
    m = vol((0, 0, 0), (0, 0, 1))
    preds = [Track(0, 0, 0.9, vol((1, 2, 2))), Track(1, 0, 0.4, m)]
    r = evaluate_ap({"v": preds}, {"v": [gt(0, 0, m)]}, num_classes=1)
    assert r.AP == 0.5 and r.AP50 == 0.5
    assert r.AR1 == 0.0 and r.AR10 == 1.0


def test_ground_truth_as_predictions_scores_one():
    rng = np.random.default_rng(1)
    gts = {f"v{k}": [gt(i, int(rng.integers(0, 3)), rng.random((4, 6, 6)) < 0.3) for i in range(3)]
           for k in range(3)}
    preds = {k: [Track(t.track_id, t.label, 1.0 - 0.1 * t.track_id, t.masks) for t in v] for k, v in gts.items()}
    r = evaluate_ap(preds, gts)
    assert r.AP == 1.0 and r.AR10 == 1.0


def test_empty_predictions_score_zero():
    gts = {"v": [gt(0, 1, vol((0, 0, 0)))]}
    r = evaluate_ap({}, gts)
    assert r.AP == 0.0 and r.AR1 == 0.0


def test_classes_without_ground_truth_excluded():
    m = vol((0, 0, 0))
    r = evaluate_ap({"v": [Track(0, 2, 0.9, m)]}, {"v": [gt(0, 2, m)]})
    assert r.AP == 1.0 and set(r.per_class) == {"2"}


def test_report_serialization():
    m = vol((0, 0, 0))
    r = evaluate_ap({"v": [Track(0, 0, 0.9, m)]}, {"v": [gt(0, 0, m)]})
    assert '"AP": 1.0' in r.to_json()
    assert r.csv_row() == "1.000000,1.000000,1.000000,1.000000,1.000000"


def test_thresholds_grid():
    assert np.allclose(THRESHOLDS, np.arange(10) * 0.05 + 0.5)


# -- oracle ---------------------------------------------------------------------------------------

def random_instance(seed):
    rng = np.random.default_rng(seed)
    shape = (2, 3, 3)
    n_gt, n_pred = int(rng.integers(1, 4)), int(rng.integers(0, 5))
    gts = [gt(i, 0, rng.random(shape) < 0.4) for i in range(n_gt)]
    preds = []
    for i in range(n_pred):
        if rng.random() < 0.6:
            base = gts[int(rng.integers(0, n_gt))].masks.copy()
            flip = rng.random(shape) < rng.uniform(0, 0.3)
            m = base ^ flip
        else:
            m = rng.random(shape) < 0.4
        score = float(rng.choice([0.2, 0.5, 0.9])) if rng.random() < 0.3 else float(rng.random())
        preds.append(Track(i, 0, score, m))
    thr = float(rng.choice(THRESHOLDS))
    return preds, gts, thr


def oracle_agrees(seed) -> bool:
    preds, gts, thr = random_instance(seed)
    r = evaluate_ap({"v": preds}, {"v": gts}, thresholds=[thr], num_classes=1)
    return abs(r.AP - ap_bruteforce_oracle(preds, gts, thr)) <= 1e-9


def test_evaluate_ap_matches_oracle_sample():
    assert all(oracle_agrees(s) for s in range(200))


def test_oracle_limits():
    with pytest.raises(ContractViolation):
        ap_bruteforce_oracle([Track(i, 0, 0.5, vol()) for i in range(5)], [gt(0, 0, vol())], 0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 20))
def test_report_bounds(seed):
    rng = np.random.default_rng(seed)
    gts = {"v": [gt(i, int(rng.integers(0, 3)), rng.random((2, 4, 4)) < 0.4) for i in range(3)]}
    preds = {"v": [Track(i, int(rng.integers(0, 3)), float(rng.random()), rng.random((2, 4, 4)) < 0.4)
                   for i in range(int(rng.integers(0, 6)))]}
    r = evaluate_ap(preds, gts)
    for v in (r.AP, r.AP50, r.AP75, r.AR1, r.AR10):
        assert 0.0 <= v <= 1.0
    assert r.AP <= r.AP50 + 1e-12 and r.AP75 <= r.AP50 + 1e-12 and r.AR1 <= r.AR10 + 1e-12


def test_ar_at_k_caps_per_video():
    m1, m2 = vol((0, 0, 0)), vol((1, 1, 1))
    preds = {"v": [Track(0, 0, 0.9, m1), Track(1, 0, 0.8, m2)]}
    r = evaluate_ap(preds, {"v": [gt(0, 0, m1), gt(1, 0, m2)]}, num_classes=1)
    assert r.AR1 == 0.5 and r.AR10 == 1.0


def test_multi_video_pooling():
    m = vol((0, 0, 0))
    preds = {"a": [Track(0, 0, 0.9, m)], "b": [Track(0, 0, 0.3, vol((1, 1, 1)))]}
    gts = {"a": [gt(0, 0, m)], "b": [gt(0, 0, m)]}
    r = evaluate_ap(preds, gts, num_classes=1)
    # TP at 0.9 then FP: precision 1 up to recall 0.5 and nothing beyond
    assert r.AP == pytest.approx(51 / 101)


def test_identity_ious_one_to_one():
    a, b = vol((0, 0, 0), (1, 0, 0)), vol((0, 2, 2), (1, 2, 2))
    # one track covering both objects can only stand in for one of them
    both = Track(0, 0, 0.9, a | b)
    np.testing.assert_allclose(identity_ious([both], [a, b]), [0.5, 0.0])
    np.testing.assert_allclose(identity_ious([Track(1, 0, 0.5, b), Track(2, 0, 0.5, a)], [a, b]), [1.0, 1.0])
    assert identity_ious([], [a]).tolist() == [0.0]
