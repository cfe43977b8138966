import copy

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import bench
from xrayattack.detector import (
    CheckpointError,
    Detection,
    ToyDetector,
    box_iou,
    decode,
    detections_from_json,
    detections_to_json,
    encode,
    iou,
    make_anchors,
    match,
    nms,
)
from xrayattack.evalkit import compute_map
from xrayattack.scene import Annotation, SceneSpec, generate_scene, generate_scenes, to_tensor


def iou_oracle(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


boxes = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(1, 40), st.floats(1, 40)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
)


@settings(max_examples=100, deadline=None)
@given(a=boxes, b=boxes)
def test_iou_matches_oracle(a, b):
    assert iou(a, b) == pytest.approx(iou_oracle(a, b), abs=1e-9)
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)


def test_nms_examples():
    single = [Detection((0, 0, 10, 10), 1, 0.3)]
    assert nms(single, 0.5) == single
    a, b = Detection((0, 0, 10, 10), 1, 0.9), Detection((0, 0, 10, 6), 1, 0.8)
    assert iou(a.bbox, b.bbox) == pytest.approx(0.6)
    assert nms([b, a], 0.5) == [a]
    c = Detection((0, 0, 10, 9), 2, 0.8)
    assert iou(a.bbox, c.bbox) == pytest.approx(0.9)
    assert nms([a, c], 0.5) == [a, c]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(boxes, st.integers(1, 3), st.floats(0.01, 1.0)), max_size=12), st.floats(0.1, 0.9))
def test_nms_subset_and_sorted(raw, thr):
    dets = [Detection(b, c, s) for b, c, s in raw]
    kept = nms(dets, thr)
    assert all(k in dets for k in kept)
    assert all(kept[i].score >= kept[i + 1].score for i in range(len(kept) - 1))
    for i, x in enumerate(kept):
        for y in kept[i + 1:]:
            if x.class_id == y.class_id:
                assert iou(x.bbox, y.bbox) <= thr


def test_detection_center_size():
    assert Detection((10, 20, 30, 60), 1, 0.5).center_size == (20, 40, 20, 40)


def test_encode_decode_round_trip():
    anchors = make_anchors(32, 8)
    gt = torch.tensor([[3.0, 4.0, 20.0, 30.0]]).expand(len(anchors), 4)
    np.testing.assert_allclose(decode(encode(gt, anchors), anchors).numpy(), gt.numpy(), atol=1e-4)


def test_matching_thresholds():
    anchors = torch.tensor([[10.0, 10.0, 20.0, 20.0], [12.0, 10.0, 20.0, 20.0], [40.0, 40.0, 20.0, 20.0], [18.0, 10.0, 20, 20]])
    gt = torch.tensor([[0.0, 0.0, 20.0, 20.0]])
    labels, _ = match(gt, torch.tensor([2]), anchors)
    ious = box_iou(torch.cat([anchors[:, :2] - 10, anchors[:, :2] + 10], 1), gt)[:, 0]
    # forced best anchor and IoU >= 0.5 positive, < 0.4 background, otherwise ignored
    expected = [2 if v >= 0.5 else (0 if v < 0.4 else -1) for v in ious.tolist()]
    expected[int(ious.argmax())] = 2
    assert labels.tolist() == expected
    assert 0 in labels.tolist() and -1 in labels.tolist()


def tiny(**kw):
    params = dict(image_size=48, widths=(8, 8), epochs=1, batch_size=4, seed=0)
    params.update(kw)
    return ToyDetector(**params)


def tiny_data(n=6):
    scenes = generate_scenes(SceneSpec(canvas=48, border=20, n_clutter=(0, 0), tray=False), n, 0)
    return bench.images(scenes), bench.annotations(scenes)


def test_training_is_deterministic():
    X, y = tiny_data()
    a, b = tiny(epochs=2).fit(X, y), tiny(epochs=2).fit(X, y)
    for pa, pb in zip(a.net_.state_dict().values(), b.net_.state_dict().values()):
        assert torch.equal(pa, pb)


def test_memorizes_single_image():
    scene = generate_scene(SceneSpec(), 7)
    X, y = scene.base_image[None], [scene.annotations]
    det = ToyDetector(epochs=150, batch_size=1, flip=False, seed=0).fit(X, y)
    assert compute_map(det.predict(X), y).map_overall == pytest.approx(100.0)


def test_empty_and_bad_inputs():
    with pytest.raises(ValueError):
        tiny().fit(np.zeros((0, 48, 48, 3)), [])
    det = tiny().fit(*tiny_data(4))
    with pytest.raises(ValueError):
        det.predict(np.zeros((1, 16, 16, 3)))
    with pytest.raises(RuntimeError):
        tiny().predict(np.zeros((1, 48, 48, 3)))


def test_confident_correct_predictions_have_tiny_loss():
    det = tiny().fit(*tiny_data(4))
    _, y = tiny_data(4)
    labels, loc_t = det._encode_targets(y)
    logits = torch.nn.functional.one_hot(labels.clamp_min(0), 4).float() * 30.0
    l_cls, l_loc = det.multibox_loss(logits, loc_t, labels, loc_t)
    assert float(l_cls) <= 1e-3 and float(l_loc) == 0.0


def test_cls_loss_gradient_matches_finite_differences():
    X, y = tiny_data(2)
    det = copy.deepcopy(tiny().fit(X, y))
    det.net_.double()
    # noise breaks the exact loss ties of blank regions, which make hard-negative mining a kink
    x = to_tensor(X).double() + 0.01 * torch.rand(2, 3, 48, 48, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    g = det.grad_wrt_image(x, y)
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(10):
        idx = (int(rng.integers(2)), int(rng.integers(3)), int(rng.integers(48)), int(rng.integers(48)))
        xp, xm = x.clone(), x.clone()
        xp[idx] += h
        xm[idx] -= h
        with torch.no_grad():
            fd = (det.cls_loss(xp, y) - det.cls_loss(xm, y)) / (2 * h)
        assert abs(float(g[idx]) - float(fd)) <= 1e-3 * max(abs(float(fd)), 1e-6)


def test_targeted_loss_falls_as_background_rises():
    det = tiny().fit(*tiny_data(4))
    base = torch.randn(1, len(det.anchors_), 4, generator=torch.Generator().manual_seed(0))
    values = []
    for t in np.linspace(-3, 3, 7):
        logits = base.clone()
        logits[..., 0] += t
        det.forward = lambda x, lg=logits: (lg, torch.zeros(1, lg.shape[1], 4))
        values.append(float(det.cls_loss(torch.zeros(1, 3, 48, 48), [[]], mode="targeted")))
    assert all(a > b for a, b in zip(values, values[1:]))


def test_gradient_is_local_for_one_block():
    X, y = tiny_data(2)
    det = tiny(widths=(4,), anchor_sizes=((8.0, 8.0),)).fit(X, y)
    ann = [[Annotation((2.0, 2.0, 10.0, 10.0), 1)]]
    x = torch.rand(1, 3, 48, 48)
    g = det.grad_wrt_image(x, ann, neg_pos_ratio=0)
    labels, _ = det._encode_targets(ann)
    cells = torch.nonzero(labels[0] > 0).flatten()
    # conv 3x3, dilated conv 3x3 (dilation 2), head 3x3: radius 1 + 2 + 1
    radius = 4
    mask = torch.zeros(48, 48, dtype=torch.bool)
    for c in cells.tolist():
        r, col = divmod(c, 48)
        mask[max(r - radius, 0): r + radius + 1, max(col - radius, 0): col + radius + 1] = True
    assert g.abs().sum() > 0
    assert torch.all(g[0][:, ~mask] == 0)


def test_cls_loss_rejects_unknown_mode():
    X, y = tiny_data(2)
    with pytest.raises(ValueError):
        tiny().fit(X, y).cls_loss(to_tensor(X), y, mode="sideways")


def test_checkpoint_round_trip_and_errors(tmp_path):
    X, y = tiny_data(4)
    det = tiny().fit(X, y)
    det.save(tmp_path / "d.pt", provenance={"defense": "none"})
    back = ToyDetector.load(tmp_path / "d.pt")
    assert back.provenance_ == {"defense": "none"}
    assert back.get_params() == det.get_params()
    a, b = det.predict(X), back.predict(X)
    assert a == b
    ckpt = torch.load(tmp_path / "d.pt", weights_only=False)
    ckpt["version"] = 99
    torch.save(ckpt, tmp_path / "v.pt")
    with pytest.raises(CheckpointError, match="version"):
        ToyDetector.load(tmp_path / "v.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        ToyDetector.load(tmp_path / "junk.pt")


def test_detections_json_round_trip(tmp_path):
    dets = [[Detection((1.0, 2.0, 3.0, 4.0), 1, 0.75)], []]
    detections_to_json(dets, tmp_path / "d.jsonl")
    assert detections_from_json(tmp_path / "d.jsonl") == dets


@pytest.mark.slow
def test_mini_detector_reference_behaviour():
    det = bench.detector()
    te = bench.test_scenes()
    # duplicated images give identical detections
    X = bench.images(te[:2])
    d = det.predict(np.concatenate([X, X]))
    assert d[:2] == d[2:]
    assert compute_map(det.predict(bench.images(te)), bench.annotations(te)).map_overall >= 70
    blank = generate_scene(SceneSpec(n_items=(0, 0), n_clutter=(0, 0), tray=False), 0).base_image
    assert [x for x in det.predict(blank[None])[0] if x.score > 0.5] == []
    single = generate_scene(SceneSpec(n_items=(1, 1), n_clutter=(0, 0), class_weights=(1, 0, 0)), 4)
    found = [x for x in det.predict(single.base_image[None])[0] if x.score > 0.5]
    assert len(found) == 1 and found[0].class_id == 1
    assert iou(found[0].bbox, single.annotations[0].bbox) >= 0.5
    # training loss falls across epochs
    hist = det.history_
    assert hist[-1] < hist[0]
