"""A small single-shot box detector used as the attack target."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from .scene import Annotation, to_tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "xrayattack-detector"
CHECKPOINT_VERSION = 1
DEFAULT_ANCHORS = ((20.0, 20.0), (36.0, 36.0), (14.0, 40.0), (40.0, 14.0))
VARIANCES = (0.1, 0.2)


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    bbox: tuple[float, float, float, float]
    class_id: int
    score: float

    @property
    def center_size(self) -> tuple[float, float, float, float]:
        x0, y0, x1, y1 = self.bbox
        return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU of (N, 4) and (M, 4) xyxy boxes."""
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = (rb - lt).clamp_min(0).prod(-1)
    area_a = (a[:, 2:] - a[:, :2]).clamp_min(0).prod(-1)
    area_b = (b[:, 2:] - b[:, :2]).clamp_min(0).prod(-1)
    return inter / (area_a[:, None] + area_b[None, :] - inter).clamp_min(1e-12)


def iou(a, b) -> float:
    return float(box_iou(torch.tensor([a], dtype=torch.float64), torch.tensor([b], dtype=torch.float64))[0, 0])


def nms_indices(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    order = torch.argsort(scores, descending=True, stable=True)
    keep = []
    suppressed = torch.zeros(len(boxes), dtype=torch.bool)
    ious = box_iou(boxes, boxes)
    for i in order.tolist():
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return torch.tensor(keep, dtype=torch.long)


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Class-wise suppression of a detection list; kept boxes in descending score order."""
    kept = []
    for c in sorted({d.class_id for d in detections}):
        group = [d for d in detections if d.class_id == c]
        boxes = torch.tensor([d.bbox for d in group], dtype=torch.float64)
        scores = torch.tensor([d.score for d in group], dtype=torch.float64)
        kept += [group[i] for i in nms_indices(boxes, scores, iou_threshold).tolist()]
    return sorted(kept, key=lambda d: -d.score)


def make_anchors(image_size: int, stride: int, sizes=DEFAULT_ANCHORS) -> torch.Tensor:
    """(A, 4) cx, cy, w, h anchors ordered cell-major (row, col, shape)."""
    n = image_size // stride
    c = (torch.arange(n, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(c, c, indexing="ij")
    wh = torch.tensor(sizes, dtype=torch.float32)
    cells = torch.stack([cx, cy], -1).view(-1, 1, 2).expand(-1, len(sizes), 2)
    return torch.cat([cells, wh.view(1, -1, 2).expand(n * n, -1, 2)], -1).reshape(-1, 4)


def _xyxy(cxcywh):
    return torch.cat([cxcywh[..., :2] - cxcywh[..., 2:] / 2, cxcywh[..., :2] + cxcywh[..., 2:] / 2], -1)


def encode(boxes: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    wh = (boxes[:, 2:] - boxes[:, :2]).clamp_min(1e-6)
    c = (boxes[:, :2] + boxes[:, 2:]) / 2
    return torch.cat(
        [(c - anchors[:, :2]) / (VARIANCES[0] * anchors[:, 2:]), torch.log(wh / anchors[:, 2:]) / VARIANCES[1]], -1
    )


def decode(loc: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    c = anchors[:, :2] + loc[..., :2] * VARIANCES[0] * anchors[:, 2:]
    wh = anchors[:, 2:] * torch.exp((loc[..., 2:] * VARIANCES[1]).clamp(max=6.0))
    return _xyxy(torch.cat([c, wh], -1))


def match(gt_boxes: torch.Tensor, gt_labels: torch.Tensor, anchors: torch.Tensor, pos_iou=0.5, neg_iou=0.4):
    """Assign anchors: label > 0 positive, 0 background, -1 ignored."""
    A = len(anchors)
    labels = torch.zeros(A, dtype=torch.long)
    targets = torch.zeros(A, 4)
    if len(gt_boxes) == 0:
        return labels, targets
    ious = box_iou(_xyxy(anchors), gt_boxes)  # (A, G)
    best, idx = ious.max(dim=1)
    # each ground truth forced onto its best anchor
    forced = ious.argmax(dim=0)
    best[forced] = 2.0
    idx[forced] = torch.arange(len(gt_boxes))
    labels = torch.where(best >= pos_iou, gt_labels[idx], torch.zeros_like(labels))
    labels[(best >= neg_iou) & (best < pos_iou)] = -1
    targets = encode(gt_boxes[idx], anchors)
    return labels, targets


class _Backbone(nn.Module):
    def __init__(self, widths, n_anchors, n_classes):
        super().__init__()
        layers, c_in = [], 3
        for i, w in enumerate(widths):
            layers += [nn.Conv2d(c_in, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            if i < len(widths) - 1:
                layers.append(nn.MaxPool2d(2))
            c_in = w
        layers += [nn.Conv2d(c_in, c_in, 3, padding=2, dilation=2), nn.BatchNorm2d(c_in), nn.ReLU(inplace=True)]
        self.features = nn.Sequential(*layers)
        self.cls = nn.Conv2d(c_in, n_anchors * (n_classes + 1), 3, padding=1)
        self.loc = nn.Conv2d(c_in, n_anchors * 4, 3, padding=1)
        self.n_classes = n_classes

    def forward(self, x):
        f = self.features(x)
        B = x.shape[0]
        cls = self.cls(f).permute(0, 2, 3, 1).reshape(B, -1, self.n_classes + 1)
        loc = self.loc(f).permute(0, 2, 3, 1).reshape(B, -1, 4)
        return cls, loc


def _as_batch(X) -> torch.Tensor:
    if isinstance(X, torch.Tensor):
        return X if X.dim() == 4 else X.unsqueeze(0)
    return to_tensor(X)


def _targets_of(annotations: Sequence[Annotation]):
    if not annotations:
        return torch.zeros(0, 4), torch.zeros(0, dtype=torch.long)
    return (
        torch.tensor([a.bbox for a in annotations], dtype=torch.float32),
        torch.tensor([a.class_id for a in annotations], dtype=torch.long),
    )


class ToyDetector(BaseEstimator):
    """Single-shot detector with SSD-style anchors, matching and hard negative mining.

    Images are (N, H, W, 3) float arrays in [0, 1] or (N, 3, H, W) tensors.
    """

    def __init__(
        self,
        n_classes: int = 3,
        image_size: int = 160,
        widths: tuple[int, ...] = (8, 16, 32, 64),
        anchor_sizes: tuple[tuple[float, float], ...] = DEFAULT_ANCHORS,
        epochs: int = 30,
        batch_size: int = 16,
        lr: float = 2e-3,
        weight_decay: float = 1e-4,
        neg_pos_ratio: int = 3,
        loc_weight: float = 1.0,
        pos_iou: float = 0.5,
        neg_iou: float = 0.4,
        nms_iou: float = 0.45,
        score_threshold: float = 0.01,
        top_k: int = 100,
        flip: bool = True,
        noise_std: float = 0.0,
        seed: int = 0,
    ):
        self.n_classes = n_classes
        self.image_size = image_size
        self.widths = widths
        self.anchor_sizes = anchor_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.neg_pos_ratio = neg_pos_ratio
        self.loc_weight = loc_weight
        self.pos_iou = pos_iou
        self.neg_iou = neg_iou
        self.nms_iou = nms_iou
        self.score_threshold = score_threshold
        self.top_k = top_k
        self.flip = flip
        self.noise_std = noise_std
        self.seed = seed

    # -- construction -------------------------------------------------------------

    @property
    def stride(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def _build(self):
        torch.manual_seed(self.seed)
        self.net_ = _Backbone(tuple(self.widths), len(self.anchor_sizes), self.n_classes)
        self.anchors_ = make_anchors(self.image_size, self.stride, self.anchor_sizes)
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise RuntimeError("detector is not fitted")

    def _check_input(self, x: torch.Tensor):
        if x.shape[1] != 3 or x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise ValueError(f"expected (N, 3, {self.image_size}, {self.image_size}) images, got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor):
        """Raw (logits, loc) for a batch; eval-mode network, differentiable in ``x``."""
        self._check_fitted()
        self._check_input(x)
        self.net_.eval()
        return self.net_(x.to(next(self.net_.parameters()).dtype))

    # -- training -----------------------------------------------------------------

    def _encode_targets(self, annotations):
        labels, locs = [], []
        for anns in annotations:
            b, c = _targets_of(anns)
            lab, loc = match(b, c, self.anchors_, self.pos_iou, self.neg_iou)
            labels.append(lab)
            locs.append(loc)
        return torch.stack(labels), torch.stack(locs)

    def multibox_loss(self, logits, loc, labels, loc_t, neg_pos_ratio=None, reduction: str = "mean"):
        """(classification, localization) losses normalized by the positive count.

        ``reduction="none"`` returns per-image classification losses, each
        normalized by that image's positives.
        """
        ratio = self.neg_pos_ratio if neg_pos_ratio is None else neg_pos_ratio
        pos = labels > 0
        n_pos = pos.sum().clamp_min(1).to(logits.dtype)
        ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.clamp_min(0).reshape(-1), reduction="none")
        ce = ce.view(labels.shape)
        with torch.no_grad():
            mine = ce.clone()
            mine[labels != 0] = -1.0
            n_neg = (pos.sum(1, keepdim=True) * ratio).clamp(max=labels.shape[1] - 1)
            rank = mine.argsort(1, descending=True).argsort(1)
            neg = (rank < n_neg) & (labels == 0)
        if reduction == "none":
            return (ce * (pos | neg)).sum(1) / pos.sum(1).clamp_min(1).to(logits.dtype), None
        l_cls = (ce * (pos | neg)).sum() / n_pos
        l_loc = F.smooth_l1_loss(loc[pos], loc_t[pos], reduction="sum") / n_pos if pos.any() else loc.sum() * 0
        return l_cls, l_loc

    def fit(self, X, y, callback=None):
        """Train on images ``X`` with per-image lists of Annotation ``y``."""
        x = self._training_input(X, y)
        self._build()
        self.history_ = []
        self._train(x, y, self.epochs, self.lr, one_cycle=True, seed=self.seed, callback=callback)
        return self

    def partial_fit(self, X, y, epochs: int = 1, lr: float | None = None, seed: int | None = None):
        """Continue training the current weights at a constant learning rate."""
        self._check_fitted()
        x = self._training_input(X, y)
        if not hasattr(self, "history_"):
            self.history_ = []
        self._train(x, y, epochs, lr or 0.25 * self.lr, one_cycle=False, seed=self.seed if seed is None else seed)
        return self

    def _training_input(self, X, y) -> torch.Tensor:
        x = _as_batch(X).float()
        if len(x) == 0:
            raise ValueError("empty training set")
        if len(x) != len(y):
            raise ValueError("X and y lengths differ")
        self._check_input(x)
        return x

    def _train(self, x, y, epochs, lr, one_cycle, seed, callback=None):
        gen = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam(self.net_.parameters(), lr=lr, weight_decay=self.weight_decay)
        steps = epochs * math.ceil(len(x) / self.batch_size)
        sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=max(steps, 1)) if one_cycle else None
        labels, loc_t = self._encode_targets(y)
        flipped = self._encode_targets([_hflip_annotations(a, self.image_size) for a in y]) if self.flip else None
        for epoch in range(epochs):
            self.net_.train()
            perm = torch.randperm(len(x), generator=gen)
            total = 0.0
            for s in range(0, len(x), self.batch_size):
                idx = perm[s : s + self.batch_size]
                xb, lb, tb = x[idx], labels[idx], loc_t[idx]
                if flipped is not None:
                    m = torch.rand(len(idx), generator=gen) < 0.5
                    xb = torch.where(m.view(-1, 1, 1, 1), xb.flip(-1), xb)
                    lb = torch.where(m.view(-1, 1), flipped[0][idx], lb)
                    tb = torch.where(m.view(-1, 1, 1), flipped[1][idx], tb)
                if self.noise_std > 0:
                    xb = (xb + self.noise_std * torch.randn(xb.shape, generator=gen)).clamp(0, 1)
                logits, loc = self.net_(xb)
                l_cls, l_loc = self.multibox_loss(logits, loc, lb, tb)
                loss = l_cls + self.loc_weight * l_loc
                if not torch.isfinite(loss):
                    self.net_.eval()
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch} (cls={float(l_cls)}, loc={float(l_loc)})"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                if sched is not None:
                    sched.step()
                total += float(loss.detach()) * len(idx)
            self.history_.append(total / len(x))
            log.debug("epoch %d loss %.4f", epoch, self.history_[-1])
            if callback is not None:
                callback(epoch, self.history_[-1])
        self.net_.eval()

    # -- inference ----------------------------------------------------------------

    def _postprocess(self, logits, loc) -> list[list[Detection]]:
        probs = logits.softmax(-1)
        boxes = decode(loc, self.anchors_).clamp(0, self.image_size)
        out = []
        for b in range(len(probs)):
            dets = []
            for c in range(1, self.n_classes + 1):
                sc = probs[b, :, c]
                m = sc > self.score_threshold
                if not m.any():
                    continue
                bx, s = boxes[b][m], sc[m]
                for k in nms_indices(bx, s, self.nms_iou).tolist():
                    dets.append(Detection(tuple(float(v) for v in bx[k]), c, float(s[k])))
            dets.sort(key=lambda d: -d.score)
            out.append(dets[: self.top_k])
        return out

    def predict(self, X, batch_size: int = 64) -> list[list[Detection]]:
        x = _as_batch(X)
        out = []
        with torch.no_grad():
            for s in range(0, len(x), batch_size):
                out.extend(self._postprocess(*self.forward(x[s : s + batch_size])))
        return out

    detect = predict

    def class_scores(self, X, batch_size: int = 64) -> np.ndarray:
        """(N, A, C+1) softmax scores over anchors."""
        x = _as_batch(X)
        with torch.no_grad():
            return torch.cat([self.forward(x[s : s + batch_size])[0].softmax(-1) for s in range(0, len(x), batch_size)]).numpy()

    # -- attack objectives ----------------------------------------------------------

    def cls_loss(self, x: torch.Tensor, annotations, mode: str = "untargeted", target_class: int = 0,
                 score_floor: float = 0.01, neg_pos_ratio=None, reduction: str = "mean") -> torch.Tensor:
        """Classification loss of the batch; ``reduction="none"`` gives one value per image.

        ``untargeted``: the training classification loss against ground truth.
        ``targeted``: cross entropy pushing every scoring box toward ``target_class``.
        """
        logits, _ = self.forward(x)
        if mode == "untargeted":
            labels, loc_t = self._encode_targets(annotations)
            l_cls, _ = self.multibox_loss(logits, torch.zeros_like(loc_t), labels, loc_t, neg_pos_ratio, reduction)
            return l_cls
        if mode == "targeted":
            probs = logits.softmax(-1)
            with torch.no_grad():
                active = probs[..., 1:].max(-1).values > score_floor
            ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                                 torch.full((logits.shape[0] * logits.shape[1],), target_class), reduction="none")
            per_image = (ce.view(active.shape) * active).sum(1)
            return per_image if reduction == "none" else per_image.mean()
        raise ValueError(f"unknown loss mode {mode!r}")

    def grad_wrt_image(self, x: torch.Tensor, annotations, **kwargs) -> torch.Tensor:
        x = x.detach().clone().requires_grad_(True)
        self.cls_loss(x, annotations, **kwargs).backward()
        return x.grad

    # -- persistence ----------------------------------------------------------------

    def save(self, path, provenance: dict | None = None) -> None:
        self._check_fitted()
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "provenance": provenance or getattr(self, "provenance_", {}),
                "params": _jsonable(self.get_params()),
                "state_dict": self.net_.state_dict(),
                "history": getattr(self, "history_", []),
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "ToyDetector":
        try:
            ckpt = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:  # unreadable or not a torch archive
            raise CheckpointError(f"{path}: not a detector checkpoint ({exc})") from exc
        if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a detector checkpoint")
        if ckpt.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {ckpt.get('version')} != {CHECKPOINT_VERSION}")
        params = dict(ckpt["params"])
        params["widths"] = tuple(params["widths"])
        params["anchor_sizes"] = tuple(tuple(a) for a in params["anchor_sizes"])
        det = cls(**params)._build()
        try:
            det.net_.load_state_dict(ckpt["state_dict"])
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: architecture mismatch ({exc})") from exc
        det.net_.eval()
        det.history_ = ckpt.get("history", [])
        det.provenance_ = ckpt.get("provenance", {})
        return det


def _jsonable(params):
    return json.loads(json.dumps(params))


def _hflip_annotations(anns, size):
    return [Annotation((size - a.bbox[2], a.bbox[1], size - a.bbox[0], a.bbox[3]), a.class_id, a.difficult) for a in anns]


def detections_to_json(detections: Sequence[Sequence[Detection]], path, names=None) -> None:
    """Write one record per image: ``{"image": name, "detections": [...]}``."""
    names = names or [str(i) for i in range(len(detections))]
    with open(path, "w") as fh:
        for n, dets in zip(names, detections):
            fh.write(json.dumps({"image": n, "detections": [asdict(d) for d in dets]}) + "\n")


def detections_from_json(path) -> list[list[Detection]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append([Detection(tuple(d["bbox"]), int(d["class_id"]), float(d["score"])) for d in rec["detections"]])
    return out
