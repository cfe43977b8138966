"""Countermeasures: patch augmentation, adversarial-image classification and adversarial training."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import roc_auc_score
from sklearn.utils.validation import check_is_fitted

from .attack import AttackAborted, AttackConfig, choose_locations, polish_shape
from .detector import ToyDetector
from .physics import builtin_material, transmittance
from .placement import build_region, place_random
from .scene import Scene, to_numpy, to_tensor

log = logging.getLogger(__name__)

PALETTE_MATERIALS = {"blue": "iron", "orange": "plastic"}


@dataclass
class AugmentSpec:
    count_range: tuple[int, int] = (1, 4)
    palette: tuple[str, ...] = ("blue", "orange")
    mix_ratio: float = 1.0
    footprint: int = 20

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid patch count range {self.count_range}")
        if self.mix_ratio <= 0:
            raise ValueError("mix_ratio must be positive")
        unknown = set(self.palette) - set(PALETTE_MATERIALS)
        if unknown:
            raise ValueError(f"unknown palette colors {sorted(unknown)}")


def add_patches(image: np.ndarray, annotations, spec: AugmentSpec, rng: np.random.Generator):
    """Solid patches at random non-center locations; returns (image, masks)."""
    H, W = image.shape[:2]
    f = spec.footprint
    n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    out = image.astype(np.float64)
    masks = []
    for _ in range(n):
        color = spec.palette[int(rng.integers(len(spec.palette)))]
        model = builtin_material(PALETTE_MATERIALS[color])
        lo, hi = model.depth_range
        depth = float(rng.uniform(max(lo, 1e-3), hi))
        for _attempt in range(100):
            if annotations:
                a = annotations[int(rng.integers(len(annotations)))]
                region = build_region(a, f, (H, W))
                x, y = place_random(region, 1, seed=int(rng.integers(2**31)))[0]
            else:
                x, y = int(rng.integers(0, W - f + 1)), int(rng.integers(0, H - f + 1))
            if all(_outside_centers(x, y, f, b.bbox) for b in annotations):
                break
        m = np.zeros((H, W), bool)
        m[y : y + f, x : x + f] = True
        masks.append(m)
        d = np.where(m, depth, 0.0)
        out = out * transmittance(model, d, warn=False)
    return np.clip(out, 0, 1).astype(np.float32), masks


def _outside_centers(x, y, f, bbox) -> bool:
    x0, y0, x1, y1 = bbox
    w, h = x1 - x0, y1 - y0
    ex0, ey0, ex1, ey1 = x0 + 0.25 * w, y0 + 0.25 * h, x1 - 0.25 * w, y1 - 0.25 * h
    return not (x < ex1 and x + f > ex0 and y < ey1 and y + f > ey0)


def augment_dataset(images, annotations, spec: AugmentSpec = AugmentSpec(), seed: int = 0):
    """Interleave each clean sample with a patched copy (1:1 by default); annotations are shared."""
    rng = np.random.default_rng(seed)
    out_imgs, out_anns, n_patches = [], [], []
    n_aug = int(round(len(images) * min(spec.mix_ratio, 1.0) / max(spec.mix_ratio, 1.0)))
    aug_ids = set(rng.permutation(len(images))[:n_aug].tolist()) if spec.mix_ratio != 1.0 else set(range(len(images)))
    for i, (img, anns) in enumerate(zip(images, annotations)):
        out_imgs.append(np.asarray(img, dtype=np.float32))
        out_anns.append(anns)
        n_patches.append(0)
        if i in aug_ids:
            patched, masks = add_patches(np.asarray(img), anns, spec, rng)
            out_imgs.append(patched)
            out_anns.append(anns)
            n_patches.append(len(masks))
    return np.stack(out_imgs), out_anns, n_patches


# -- adversarial-image classifier -------------------------------------------------------------


class _BinaryNet(nn.Module):
    def __init__(self, width=16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(),
            nn.AdaptiveMaxPool2d(1), nn.Flatten(), nn.Linear(2 * width, 1),
        )

    def forward(self, x):
        return self.body(x).squeeze(-1)


class AdvDetectorModel(BaseEstimator, ClassifierMixin):
    """Small convolutional classifier: does an image contain adversarial objects?"""

    def __init__(self, width: int = 16, epochs: int = 15, lr: float = 2e-3, batch_size: int = 16,
                 threshold: float = 0.5, seed: int = 0):
        self.width = width
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.threshold = threshold
        self.seed = seed

    def fit(self, X, y):
        x = to_tensor(X)
        t = torch.as_tensor(np.asarray(y), dtype=torch.float32)
        self.classes_ = np.unique(np.asarray(y))
        if len(self.classes_) < 2:
            raise ValueError("training set contains a single class")
        torch.manual_seed(self.seed)
        self.net_ = _BinaryNet(self.width)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr)
        gen = torch.Generator().manual_seed(self.seed)
        for _ in range(self.epochs):
            self.net_.train()
            perm = torch.randperm(len(x), generator=gen)
            for s in range(0, len(x), self.batch_size):
                idx = perm[s : s + self.batch_size]
                loss = F.binary_cross_entropy_with_logits(self.net_(x[idx]), t[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        self.net_.eval()
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        with torch.no_grad():
            p = torch.sigmoid(self.net_(to_tensor(X))).numpy()
        return np.stack([1 - p, p], 1)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(int)


def train_adv_detector(clean_images, adv_images, seed: int = 0, **params) -> AdvDetectorModel:
    X = np.concatenate([clean_images, adv_images])
    y = np.r_[np.zeros(len(clean_images), int), np.ones(len(adv_images), int)]
    return AdvDetectorModel(seed=seed, **params).fit(X, y)


def eval_adv_detector(model: AdvDetectorModel, clean_images, adv_images) -> tuple[float, float]:
    """(accuracy at the model threshold, ROC AUC) on a labelled clean/adversarial split."""
    X = np.concatenate([clean_images, adv_images])
    y = np.r_[np.zeros(len(clean_images), int), np.ones(len(adv_images), int)]
    p = model.predict_proba(X)[:, 1]
    return float(np.mean((p >= model.threshold) == y)), float(roc_auc_score(y, p))


# -- adversarial training ----------------------------------------------------------------------


def pgd_images(detector: ToyDetector, images: torch.Tensor, annotations, eps=8 / 255, steps=10, step_size=2 / 255):
    """Pixel-space PGD on the full training loss."""
    x0 = images.detach().float()
    labels, loc_t = detector._encode_targets(annotations)
    x = x0.clone()
    for _ in range(steps):
        x.requires_grad_(True)
        logits, loc = detector.forward(x)
        l_cls, l_loc = detector.multibox_loss(logits, loc, labels, loc_t)
        (g,) = torch.autograd.grad(l_cls + detector.loc_weight * l_loc, x)
        with torch.no_grad():
            x = torch.minimum(torch.maximum(x + step_size * g.sign(), x0 - eps), x0 + eps).clamp(0, 1)
    return x.detach()


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()[:16]


def adversarial_train(
    detector: ToyDetector,
    scenes: Sequence[Scene],
    cfg: AttackConfig,
    epochs: int = 4,
    seed: int = 0,
    subset: int = 100,
    method: str = "xadv",
    placement: str = "random",
    lr: float | None = None,
    max_failure: float = 0.2,
) -> ToyDetector:
    """Fine-tune a copy of ``detector`` on fresh attacks mixed 1:1 with clean scenes each epoch."""
    if epochs == 0:
        return detector
    if method not in ("xadv", "pgd"):
        raise ValueError(f"unknown adversarial training method {method!r}")
    model = copy.deepcopy(detector)
    rng = np.random.default_rng(seed)
    clean = np.stack([s.base_image for s in scenes])
    anns = [s.annotations for s in scenes]
    for epoch in range(epochs):
        ids = rng.choice(len(scenes), size=min(subset, len(scenes)), replace=False)
        adv_imgs, adv_anns, failures, groups = [], [], 0, 0
        for g in range(0, len(ids), cfg.batch_share):
            group = [scenes[i] for i in ids[g : g + cfg.batch_share]]
            groups += 1
            try:
                if method == "pgd":
                    x = pgd_images(model, to_tensor(np.stack([s.base_image for s in group])), [s.annotations for s in group])
                    adv_imgs.append(to_numpy(x))
                else:
                    locs = choose_locations(group, model, cfg, placement, seed=int(rng.integers(2**31)))
                    adv_imgs.append(polish_shape(group, locs, model, cfg).images)
                adv_anns.extend(s.annotations for s in group)
            except AttackAborted as exc:
                failures += 1
                log.warning("attack failed during adversarial training: %s", exc)
        if failures > max_failure * groups:
            raise RuntimeError(f"epoch {epoch}: {failures}/{groups} attack groups failed")
        clean_ids = rng.choice(len(scenes), size=len(adv_anns), replace=False)
        X = np.concatenate([clean[clean_ids], *adv_imgs])
        y = [anns[i] for i in clean_ids] + adv_anns
        model.partial_fit(X, y, epochs=1, lr=lr, seed=int(rng.integers(2**31)))
    model.provenance_ = {"defense": f"adversarial_training/{method}", "seed": seed, "epochs": epochs,
                         "attack_config": config_hash(cfg)}
    return model
