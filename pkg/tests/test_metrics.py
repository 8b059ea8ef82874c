import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glarekit.metrics import (
    BoundingBox as B, DetectionSet, LanePointSet, TrackFrame, average_precision, box_iou,
    load_detections, load_lanes, load_tracks, mean_ap, miou, mota_motp, rmse_depth, rmse_pairs,
    rmse_points, write_report,
)


def _inter(a, b):
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return (max(w, 0) * max(h, 0), (max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3])))


def _area(a):
    return (a[2] - a[0]) * (a[3] - a[1])


def _union_area(rects):
    """Inclusion-exclusion over a small list of rectangles."""
    total = 0
    for k in range(1, len(rects) + 1):
        for combo in itertools.combinations(rects, k):
            cur = combo[0]
            area = _area(cur)
            for r in combo[1:]:
                area, cur = _inter(cur, r)
                if area == 0:
                    break
            total += (-1) ** (k + 1) * area
    return total


def _analytic_region_iou(preds, refs):
    pairs = [_inter(p, r) for p in preds for r in refs]
    inter = _union_area([box for a, box in pairs if a > 0])
    union = _union_area(list(preds) + list(refs))
    return inter / union


def test_miou_examples():
    a = B(0, 0, 10, 10)
    assert miou([a], [a]) == 1.0
    assert miou([a], [B(20, 20, 30, 30)]) == 0.0
    assert miou([a], [B(5, 0, 15, 10)]) == pytest.approx(50 / 150, abs=0)
    assert miou([], []) == 1.0
    assert miou([a], []) == 0.0
    assert miou(DetectionSet("x", [a]), DetectionSet("x", [a])) == 1.0


def test_miou_exhaustive_interval_pairs():
    # every pair of integer x-intervals in [0, 20] against a spread of y layouts
    intervals = [(a, b) for a in range(21) for b in range(a + 1, 21)]
    y_layouts = [((0, 5), (0, 5)), ((0, 5), (3, 9)), ((2, 4), (0, 20)), ((0, 3), (10, 20))]
    for (ya, yb) in y_layouts:
        for (xa, xb) in itertools.product(intervals, repeat=2):
            p = (xa[0], ya[0], xa[1], ya[1])
            r = (xb[0], yb[0], xb[1], yb[1])
            got = miou([B(*p)], [B(*r)])
            assert got == _analytic_region_iou([p], [r])


def test_miou_exhaustive_small_grid():
    boxes = [(x1, y1, x2, y2) for x1 in range(5) for x2 in range(x1 + 1, 6)
             for y1 in range(3) for y2 in range(y1 + 1, 4)]
    for p, r in itertools.product(boxes, repeat=2):
        assert miou([B(*p)], [B(*r)]) == _analytic_region_iou([p], [r])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 19), st.integers(0, 19), st.integers(1, 20), st.integers(1, 20)),
                min_size=4, max_size=4))
def test_miou_two_box_unions(raw):
    boxes = [(x, y, min(x + w, 20), min(y + h, 20)) for x, y, w, h in raw]
    preds, refs = boxes[:2], boxes[2:]
    got = miou([B(*b) for b in preds], [B(*b) for b in refs])
    assert got == pytest.approx(_analytic_region_iou(preds, refs), abs=1e-15)
    assert got == miou([B(*b) for b in refs], [B(*b) for b in preds])
    assert 0.0 <= got <= 1.0


def test_box_validation():
    with pytest.raises(ValueError):
        B(1, 0, 1, 5)
    with pytest.raises(ValueError):
        B(0, 0, 1, 1, score=1.5)
    with pytest.raises(ValueError):
        DetectionSet("", [])


def test_box_iou():
    assert box_iou(B(0, 0, 2, 2), B(1, 0, 3, 2)) == pytest.approx(1 / 3)
    assert box_iou(B(0, 0, 1, 1), B(1, 1, 2, 2)) == 0.0


def test_ap_examples():
    ref = [B(0, 0, 10, 10)]
    assert average_precision([B(0, 0, 10, 10, score=0.9)], ref) == 1.0
    # TP ranked above FP: sweep points (P=1, R=1), (P=0.5, R=1)
    preds = [B(0, 0, 10, 10, score=0.9), B(50, 50, 60, 60, score=0.3)]
    assert average_precision(preds, ref) == 1.0
    # FP ranked first: (P=0, R=0), (P=0.5, R=1) -> 0.5
    preds = [B(0, 0, 10, 10, score=0.3), B(50, 50, 60, 60, score=0.9)]
    assert average_precision(preds, ref) == 0.5
    assert average_precision([B(8, 8, 18, 18, score=1.0)], ref) == 0.0
    assert average_precision([], []) == 1.0
    assert average_precision([B(0, 0, 1, 1)], []) == 0.0
    assert average_precision([], ref) == 0.0
    with pytest.raises(ValueError):
        average_precision([], ref, iou_thresh=1.0)


def test_ap_hand_sweep():
    refs = [B(0, 0, 10, 10), B(20, 0, 30, 10), B(40, 0, 50, 10)]
    preds = [
        B(0, 0, 10, 10, score=0.9),     # TP  P=1   R=1/3
        B(100, 0, 110, 10, score=0.8),  # FP  P=1/2 R=1/3
        B(20, 0, 30, 10, score=0.7),    # TP  P=2/3 R=2/3
        B(1, 0, 11, 10, score=0.6),     # duplicate of a matched ref -> FP
    ]
    expected = (1 / 3) * 1 + (1 / 3) * (2 / 3)
    assert average_precision(preds, refs) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=5, max_size=5, unique=True))
def test_ap_depends_on_ranking_only(scores):
    refs = [B(10 * i, 0, 10 * i + 8, 8) for i in range(3)]
    boxes = [(0, 0, 8, 8), (10, 0, 18, 8), (100, 0, 108, 8), (21, 0, 29, 8), (200, 0, 208, 8)]
    a = [B(*b, score=s) for b, s in zip(boxes, scores)]
    b = [B(*b, score=s**3) for b, s in zip(boxes, scores)]
    assert average_precision(a, refs) == average_precision(b, refs)
    assert 0.0 <= average_precision(a, refs) <= 1.0


def test_mean_ap():
    ref = [B(0, 0, 10, 10)]
    hit = [B(0, 0, 10, 10, score=0.9)]
    assert mean_ap({"a": hit, "b": []}, {"a": ref, "b": ref}) == 0.5
    assert mean_ap({"a": hit}, {"a": ref}) == 1.0
    half_refs = [B(0, 0, 10, 10), B(20, 0, 30, 10)]
    got = mean_ap({"a": hit, "b": hit, "c": hit}, {"a": ref, "b": ref, "c": half_refs})
    assert got == pytest.approx(2.5 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        mean_ap({}, {})


def _frames(spec):
    return [TrackFrame(t, [(i, B(*b)) for i, b in entries]) for t, entries in enumerate(spec)]


A = (0, 0, 10, 10)
Bb = (20, 0, 30, 10)
C = (40, 0, 50, 10)


def test_mota_perfect():
    ref = _frames([[("a", A), ("b", Bb)]] * 3)
    pred = _frames([[("1", A), ("2", Bb)]] * 3)
    assert mota_motp(pred, ref) == (1.0, 1.0)


def test_mota_formula_case():
    # 10 ground-truth objects over 5 frames, one miss and one false positive
    ref = _frames([[("a", A), ("b", Bb)]] * 5)
    pred_spec = [[("1", A), ("2", Bb)]] * 5
    pred_spec[2] = [("1", A)]
    pred_spec[4] = [("1", A), ("2", Bb), ("3", C)]
    s = mota_motp(_frames(pred_spec), ref, full=True)
    assert (s.fn, s.fp, s.ids, s.gt) == (1, 1, 0, 10)
    assert s.mota == pytest.approx(0.8, abs=1e-15)


def test_mota_persistent_swap():
    ref = _frames([[("a", A), ("b", Bb)]] * 3)
    pred = _frames([[("1", A), ("2", Bb)], [("1", Bb), ("2", A)], [("1", Bb), ("2", A)]])
    s = mota_motp(pred, ref, full=True)
    assert s.ids == 2
    assert s.mota == pytest.approx(1 - 2 / 6)


def test_mota_swap_and_back():
    ref = _frames([[("a", A), ("b", Bb)]] * 3)
    pred = _frames([[("1", A), ("2", Bb)], [("1", Bb), ("2", A)], [("1", A), ("2", Bb)]])
    s = mota_motp(pred, ref, full=True)
    assert s.ids == 4
    assert s.mota == pytest.approx(1 - 4 / 6)


def test_mota_persistence_beats_greedy():
    # last frame's pairing survives even though another prediction overlaps more
    ref = _frames([[("a", (0, 0, 10, 10))], [("a", (0, 0, 10, 10))]])
    pred = _frames([[("1", (0, 0, 10, 10))], [("1", (2, 0, 12, 10)), ("2", (0, 0, 10, 10))]])
    s = mota_motp(pred, ref, full=True)
    assert s.ids == 0 and s.fp == 1
    assert s.motp == pytest.approx(1 - (1 - 8 / 12) / 2)


def test_mota_negative_and_errors():
    ref = _frames([[("a", A)]])
    pred = _frames([[("1", Bb), ("2", C)]])
    mota, motp = mota_motp(pred, ref)
    assert mota == -2.0 and motp == 0.0
    with pytest.raises(ValueError):
        mota_motp(pred, _frames([[]]))
    with pytest.raises(ValueError):
        TrackFrame(0, [("1", B(*A)), ("1", B(*Bb))])


def test_rmse_points():
    ref = LanePointSet([[10, 0], [20, 10], [30, 20]])
    assert rmse_points(ref, ref) == 0.0
    shifted = LanePointSet(ref.points + [3, 0])
    assert rmse_points(shifted, ref) == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(ValueError):
        LanePointSet([[1, 2]])
    with pytest.raises(ValueError):
        LanePointSet([[1, 2], [50, 3]], bounds=(10, 10))


def test_rmse_points_resamples_on_reference_rows():
    ref = LanePointSet([[0, 0], [4, 4]])
    pred = LanePointSet([[0, 0], [0, 2], [0, 4]])  # vertical line at x = 0
    # rows 0..4, x errors 0..4
    assert rmse_points(pred, ref) == pytest.approx(np.sqrt(np.mean(np.arange(5.0) ** 2)))


def test_rmse_pairs_against_direct_sum(rng):
    a = rng.random((50, 2)) * 100
    p = rng.random((50, 2)) * 100
    direct = 0.0
    for i in range(50):
        direct += (a[i, 0] - p[i, 0]) ** 2 + (a[i, 1] - p[i, 1]) ** 2
    assert rmse_pairs(a, p) == pytest.approx((direct / 50) ** 0.5, rel=1e-12)
    with pytest.raises(ValueError):
        rmse_pairs(a, p[:3])


def test_rmse_depth():
    ref = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert rmse_depth(ref, ref) == 0.0
    assert rmse_depth(2 * ref, ref) == 0.0
    pred = np.array([[1.0, 2.0], [3.0, 8.0]])
    # ratios 1, 1, 1, 0.5 -> median 1; only the last pixel is off by 4
    assert rmse_depth(pred, ref) == pytest.approx(np.sqrt(16 / 4))
    mask = np.array([[True, True], [True, False]])
    assert rmse_depth(pred, ref, mask) == 0.0
    with pytest.raises(ValueError):
        rmse_depth(pred, ref, np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        rmse_depth(pred, ref[:1])


def test_jsonl_loaders_and_report(tmp_path):
    det = tmp_path / "d.jsonl"
    det.write_text(json.dumps({"image_id": "f0", "boxes": [{"x1": 0, "y1": 0, "x2": 4, "y2": 4, "class": "car", "score": 0.5}]}) + "\n\n")
    sets = load_detections(det)
    assert sets[0].boxes[0].class_id == "car" and sets[0].boxes[0].score == 0.5
    trk = tmp_path / "t.jsonl"
    trk.write_text(json.dumps({"t": 0, "entries": [{"id": 7, "box": {"x1": 0, "y1": 0, "x2": 1, "y2": 1}}]}) + "\n")
    assert load_tracks(trk)[0].entries[0][0] == "7"
    lanes = tmp_path / "l.jsonl"
    lanes.write_text(json.dumps({"image_id": "f0", "points": [[0, 0], [1, 1]]}) + "\n")
    assert load_lanes(lanes)[0].points.shape == (2, 2)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{nope\n")
    with pytest.raises(ValueError):
        load_detections(bad)
    recs = [{"metric": "miou", "value": 0.5, "support": 3}]
    write_report(recs, tmp_path / "r.json", tmp_path / "r.csv")
    assert json.loads((tmp_path / "r.json").read_text()) == recs
    assert (tmp_path / "r.csv").read_text().splitlines() == ["metric,value,support", "miou,0.5,3"]
