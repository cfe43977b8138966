import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import bench
from xrayattack.attack import AttackConfig
from xrayattack.defense import (
    AdvDetectorModel,
    AugmentSpec,
    add_patches,
    adversarial_train,
    augment_dataset,
    eval_adv_detector,
    train_adv_detector,
)
from xrayattack.detector import ToyDetector
from xrayattack.scene import SceneSpec, generate_scenes

SPEC = SceneSpec(canvas=64, border=20, n_clutter=(0, 0), tray=False)


def pairwise_auc(y, p):
    pos, neg = p[y == 1], p[y == 0]
    wins = sum((a > b) + 0.5 * (a == b) for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def dataset(n=6, seed=0):
    scenes = generate_scenes(SPEC, n, seed)
    return bench.images(scenes), bench.annotations(scenes)


def test_spec_validation():
    with pytest.raises(ValueError):
        AugmentSpec(count_range=(3, 1))
    with pytest.raises(ValueError):
        AugmentSpec(mix_ratio=0)
    with pytest.raises(ValueError):
        AugmentSpec(palette=("green",))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_patch_count_within_range(seed):
    X, y = dataset(1, seed % 7)
    img, masks = add_patches(X[0], y[0], AugmentSpec(footprint=8), np.random.default_rng(seed))
    assert 1 <= len(masks) <= 4
    changed = (img != X[0]).any(axis=2)
    assert not (changed & ~np.any(masks, axis=0)).any()


def test_augmentation_interleaves_and_keeps_annotations():
    X, y = dataset()
    Xa, ya, counts = augment_dataset(X, y, AugmentSpec(footprint=8), seed=3)
    assert len(Xa) == 2 * len(X)
    np.testing.assert_array_equal(Xa[0::2], X)
    assert ya[0::2] == y and ya[1::2] == y
    assert all(1 <= c <= 4 for c in counts[1::2]) and not any(counts[0::2])
    again = augment_dataset(X, y, AugmentSpec(footprint=8), seed=3)
    np.testing.assert_array_equal(again[0], Xa)


def test_zero_patches_only_duplicate():
    X, y = dataset()
    Xa, ya, counts = augment_dataset(X, y, AugmentSpec(count_range=(0, 0), footprint=8))
    np.testing.assert_array_equal(Xa[1::2], X)
    assert counts == [0] * len(Xa)


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    X = rng.random((60, 16, 16, 3)).astype(np.float32)
    X[30:, 4:12, 4:12] *= 0.3
    model = train_adv_detector(X[:30], X[30:], epochs=3)
    acc, auc = eval_adv_detector(model, X[:30], X[30:])
    p = model.predict_proba(X)[:, 1]
    y = np.r_[np.zeros(30), np.ones(30)]
    assert auc == pytest.approx(pairwise_auc(y, p), abs=1e-12)
    assert acc == pytest.approx(np.mean((p >= 0.5) == y))
    assert np.all((p >= 0) & (p <= 1))


def test_classifier_separates_marked_images_and_not_shuffled_ones():
    rng = np.random.default_rng(1)
    X = rng.random((400, 16, 16, 3)).astype(np.float32)
    X[200:, 4:12, 4:12] *= 0.3
    train = np.r_[0:100, 200:300]
    test = np.r_[100:200, 300:400]
    y = np.r_[np.zeros(200, int), np.ones(200, int)]
    model = AdvDetectorModel(epochs=5).fit(X[train], y[train])
    _, auc = eval_adv_detector(model, X[100:200], X[300:400])
    assert auc > 0.95
    # scores ranked against shuffled labels carry no signal
    p = model.predict_proba(X[test])[:, 1]
    aucs = [pairwise_auc(np.random.default_rng(s).permutation(y[test]), p) for s in range(20)]
    assert abs(np.mean(aucs) - 0.5) <= 0.05


def test_single_class_rejected():
    with pytest.raises(ValueError):
        AdvDetectorModel().fit(np.zeros((4, 8, 8, 3)), [1, 1, 1, 1])


def test_zero_epochs_return_the_input_detector():
    X, y = dataset(4)
    det = ToyDetector(image_size=64, widths=(8, 8), epochs=1, seed=0).fit(X, y)
    assert adversarial_train(det, generate_scenes(SPEC, 4, 0), AttackConfig(), epochs=0) is det


def test_adversarial_training_writes_provenance():
    scenes = generate_scenes(SPEC, 4, 0)
    det = ToyDetector(image_size=64, widths=(8, 8), epochs=1, seed=0).fit(bench.images(scenes), bench.annotations(scenes))
    cfg = AttackConfig(footprint=8, num_objects=2, n_grid=16, iterations=2, batch_share=2)
    hard = adversarial_train(det, scenes, cfg, epochs=1, subset=4)
    assert hard is not det and hard.provenance_["defense"] == "adversarial_training/xadv"
    assert len(hard.provenance_["attack_config"]) == 16
    with pytest.raises(ValueError):
        adversarial_train(det, scenes, cfg, epochs=1, method="magic")
