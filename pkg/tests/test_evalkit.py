import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xrayattack.detector import Detection
from xrayattack.evalkit import (
    compute_map,
    confidence_distributions,
    count_fn,
    read_report,
    write_histograms,
    write_report,
)
from xrayattack.scene import Annotation


def iou_oracle(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def ap_oracle(dets, anns, c, thr=0.5):
    """Brute force: label every detection, then integrate the interpolated PR curve threshold by threshold."""
    flat = sorted(((d.score, i, j) for i, ds in enumerate(dets) for j, d in enumerate(ds) if d.class_id == c),
                  key=lambda r: (-r[0], r[1], r[2]))
    n_gt = sum(a.class_id == c for an in anns for a in an)
    used = set()
    labels = []
    for _, i, j in flat:
        d = dets[i][j]
        cands = [(iou_oracle(d.bbox, a.bbox), k) for k, a in enumerate(anns[i]) if a.class_id == c]
        best = max(cands, default=(0.0, -1))
        ok = best[0] >= thr and (i, best[1]) not in used
        if ok:
            used.add((i, best[1]))
        labels.append(ok)
    points = []
    for k in range(1, len(labels) + 1):
        tp = sum(labels[:k])
        points.append((tp / n_gt, tp / k))
    ap, prev_r = 0.0, 0.0
    for r, _ in points:
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in points if rr >= r)
            prev_r = r
    return 100.0 * ap


def random_case(rng):
    anns, dets = [], []
    for _ in range(int(rng.integers(1, 4))):
        image_anns = []
        for _ in range(int(rng.integers(1, 4))):
            x, y = rng.uniform(0, 80, 2)
            image_anns.append(Annotation((x, y, x + rng.uniform(8, 30), y + rng.uniform(8, 30)), int(rng.integers(1, 3))))
        image_dets = []
        for a in image_anns:
            if rng.random() < 0.8:
                jit = rng.normal(0, 3, 4)
                image_dets.append(Detection(tuple(np.array(a.bbox) + jit), a.class_id if rng.random() < 0.9 else 3 - a.class_id,
                                            float(rng.random())))
        for _ in range(int(rng.integers(0, 3))):
            x, y = rng.uniform(0, 80, 2)
            image_dets.append(Detection((x, y, x + 15, y + 15), int(rng.integers(1, 3)), float(rng.random())))
        anns.append(image_anns)
        dets.append(image_dets)
    return dets, anns


def test_map_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        dets, anns = random_case(rng)
        rep = compute_map(dets, anns)
        for c, ap in rep.per_class_ap.items():
            assert ap == pytest.approx(ap_oracle(dets, anns, c), abs=1e-9)
        assert rep.map_overall == pytest.approx(np.mean(list(rep.per_class_ap.values())), abs=1e-9)


def test_perfect_detections_give_full_map():
    anns = [[Annotation((0, 0, 10, 10), 1), Annotation((20, 20, 40, 40), 2)], [Annotation((5, 5, 25, 15), 3)]]
    dets = [[Detection(a.bbox, a.class_id, 0.9) for a in an] for an in anns]
    rep = compute_map(dets, anns)
    assert rep.map_overall == pytest.approx(100.0) and rep.fn_count == 0


def test_hand_computed_ap():
    anns = [[Annotation((0, 0, 10, 10), 1), Annotation((50, 50, 60, 60), 1)]]
    # TP at 0.9, FP at 0.8, TP at 0.7: PR points (0.5, 1), (0.5, 0.5), (1, 2/3)
    dets = [[Detection((0, 0, 10, 10), 1, 0.9), Detection((20, 20, 30, 30), 1, 0.8), Detection((50, 50, 60, 60), 1, 0.7)]]
    assert compute_map(dets, anns).per_class_ap[1] == pytest.approx(100 * (0.5 * 1 + 0.5 * 2 / 3))


def test_duplicates_count_as_false_positives():
    anns = [[Annotation((0, 0, 10, 10), 1)]]
    dets = [[Detection((0, 0, 10, 10), 1, 0.9), Detection((0, 0, 10, 10), 1, 0.8)]]
    tp, fp = confidence_distributions(dets, anns)
    assert tp[9] == 1 and fp[8] == 1


def test_class_without_ground_truth_is_excluded():
    anns = [[Annotation((0, 0, 10, 10), 1)]]
    dets = [[Detection((0, 0, 10, 10), 1, 0.9), Detection((30, 30, 40, 40), 2, 0.9)]]
    rep = compute_map(dets, anns, n_classes=3)
    assert set(rep.per_class_ap) == {1} and rep.map_overall == pytest.approx(100.0)
    assert len(rep.notes) == 2


def test_fn_examples():
    a = Annotation((0, 0, 10, 10), 1)
    assert count_fn([[Detection((0, 0, 10, 10), 1, 0.85)]], [[a]]) == 0
    assert count_fn([[Detection((0, 0, 10, 10), 1, 0.75)]], [[a]]) == 1
    assert count_fn([[Detection((0, 0, 10, 10), 2, 0.95)]], [[a]]) == 1
    assert count_fn([[Detection((0, 0, 10, 4), 1, 0.95)]], [[a]]) == 1
    assert count_fn([[]], [[a, a]]) == 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=30))
def test_histograms_partition_detections(scores):
    anns = [[Annotation((0, 0, 10, 10), 1)]]
    dets = [[Detection((0, 0, 10, 10), 1, s) for s in scores]]
    tp, fp = confidence_distributions(dets, anns)
    assert tp.sum() + fp.sum() == len(scores)
    assert tp.sum() == min(len(scores), 1)


def test_report_csv_round_trip(tmp_path):
    anns = [[Annotation((0, 0, 10, 10), 1)]]
    rep = compute_map([[Detection((0, 0, 10, 10), 1, 0.95)]], anns, setting="x")
    write_report([rep], tmp_path / "r.csv")
    (row,) = read_report(tmp_path / "r.csv")
    assert row["setting"] == "x" and float(row["mAP"]) == 100.0 and row["FN@0.8"] == "0"
    write_histograms(rep, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert len(lines) == 11 and lines[-1] == "0.9,1.0,1,0"


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        compute_map([[]], [[], []])
