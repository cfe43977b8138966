"""Detection metrics, perturbation and transfer evaluation, and report tables."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.ndimage import rotate

from .detector import Detection, iou
from .physics import builtin_material
from .scene import Annotation, depth_factor, paste_factors, to_tensor

log = logging.getLogger(__name__)

N_BINS = 10


@dataclass
class EvalReport:
    map_overall: float
    per_class_ap: dict
    fn_count: int
    tp_hist: np.ndarray
    fp_hist: np.ndarray
    setting: str = "clean"
    notes: list = field(default_factory=list)

    def row(self) -> dict:
        out = {"setting": self.setting, "mAP": round(self.map_overall, 4), "FN@0.8": self.fn_count}
        out.update({f"AP_{c}": round(v, 4) for c, v in sorted(self.per_class_ap.items())})
        return out


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-points interpolated area under the PR curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def match_detections(detections, annotations, class_id: int, iou_threshold: float = 0.5):
    """Greedy matching by descending confidence; returns (scores, is_tp, is_ignored, n_gt)."""
    recs = [(d.score, i, j) for i, dets in enumerate(detections) for j, d in enumerate(dets) if d.class_id == class_id]
    recs.sort(key=lambda r: (-r[0], r[1], r[2]))
    gts = [[a for a in anns if a.class_id == class_id] for anns in annotations]
    taken = [np.zeros(len(g), bool) for g in gts]
    n_gt = sum(1 for g in gts for a in g if not a.difficult)
    scores, tp, ignored = [], [], []
    for score, i, j in recs:
        d = detections[i][j]
        best, bi = -1.0, -1
        for gi, a in enumerate(gts[i]):
            o = iou(d.bbox, a.bbox)
            if o > best:
                best, bi = o, gi
        hit = best >= iou_threshold
        ign = hit and gts[i][bi].difficult
        is_tp = hit and not ign and not taken[i][bi]
        if is_tp:
            taken[i][bi] = True
        scores.append(score)
        tp.append(is_tp)
        ignored.append(ign)
    return np.array(scores), np.array(tp, bool), np.array(ignored, bool), n_gt


def _class_ids(annotations, n_classes):
    if n_classes is not None:
        return list(range(1, n_classes + 1))
    return sorted({a.class_id for anns in annotations for a in anns})


def compute_map(detections, annotations, iou_threshold: float = 0.5, n_classes: int | None = None,
                setting: str = "clean") -> EvalReport:
    """mAP (percent) over classes with at least one ground-truth instance."""
    if len(detections) != len(annotations):
        raise ValueError("detections and annotations must cover the same images")
    per_class, notes = {}, []
    for c in _class_ids(annotations, n_classes):
        scores, tp, ign, n_gt = match_detections(detections, annotations, c, iou_threshold)
        if n_gt == 0:
            notes.append(f"class {c} has no ground truth; excluded from the mean")
            continue
        tp, fp = tp[~ign], ~tp[~ign]
        ctp, cfp = np.cumsum(tp), np.cumsum(fp)
        rec = ctp / n_gt
        prec = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
        per_class[c] = 100.0 * average_precision(rec, prec)
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    tp_h, fp_h = confidence_distributions(detections, annotations, iou_threshold)
    fn = count_fn(detections, annotations)
    return EvalReport(m, per_class, fn, tp_h, fp_h, setting, notes)


def count_fn(detections, annotations, confidence: float = 0.8, iou_threshold: float = 0.5) -> int:
    """Ground-truth boxes with no same-class detection of confidence >= ``confidence``."""
    n = 0
    for dets, anns in zip(detections, annotations):
        for a in anns:
            if not any(d.class_id == a.class_id and d.score >= confidence and iou(d.bbox, a.bbox) >= iou_threshold
                       for d in dets):
                n += 1
    return n


def confidence_distributions(detections, annotations, iou_threshold: float = 0.5):
    """(tp_hist, fp_hist) counts in 0.1-wide confidence bins."""
    tp_h, fp_h = np.zeros(N_BINS, int), np.zeros(N_BINS, int)
    classes = sorted({d.class_id for dets in detections for d in dets})
    for c in classes:
        scores, tp, _, _ = match_detections(detections, annotations, c, iou_threshold)
        b = np.clip((scores * N_BINS).astype(int), 0, N_BINS - 1)
        np.add.at(tp_h, b[tp], 1)
        np.add.at(fp_h, b[~tp], 1)
    return tp_h, fp_h


def evaluate(detector, images, annotations, setting: str = "clean") -> EvalReport:
    return compute_map(detector.predict(images), annotations, n_classes=detector.n_classes, setting=setting)


# -- perturbation ----------------------------------------------------------------------------


def _rotate_depth(depth: np.ndarray, angle: float) -> np.ndarray:
    return np.clip(rotate(depth, angle, reshape=False, order=1, mode="constant", cval=0.0), 0.0, None)


def perturbed_images(run, mode: str = "best", seed: int = 0, shift: int = 10, max_rotation: float = 30.0,
                     max_retries: int = 50) -> np.ndarray:
    """Re-composite attack objects: as optimized, jittered (shift + in-plane rotation), or placed anywhere."""
    if mode == "best":
        return run.images
    if mode not in ("change", "random"):
        raise ValueError(f"unknown perturbation mode {mode!r}")
    rng = np.random.default_rng(seed)
    out = []
    for r in run.results:
        model = builtin_material(r.material_id)
        base = to_tensor(r.base_images).double()
        H, W = base.shape[2:]
        f = r.footprint
        for b, locs in enumerate(r.locations):
            patches, new_locs = [], []
            for j, (x, y) in enumerate(locs):
                depth = r.depth_patches[j]
                for _ in range(max_retries):
                    if mode == "change":
                        nx, ny = x + int(rng.integers(-shift, shift + 1)), y + int(rng.integers(-shift, shift + 1))
                    else:
                        nx, ny = int(rng.integers(0, W - f + 1)), int(rng.integers(0, H - f + 1))
                    if 0 <= nx <= W - f and 0 <= ny <= H - f:
                        break
                else:
                    nx, ny = min(max(nx, 0), W - f), min(max(ny, 0), H - f)
                if mode == "change" and max_rotation > 0:
                    depth = _rotate_depth(depth, float(rng.uniform(-max_rotation, max_rotation)))
                patches.append(depth_factor(torch.as_tensor(np.array(depth)), model, r.converter))
                new_locs.append((nx, ny))
            with torch.no_grad():
                img = paste_factors(base[b], torch.stack(patches), new_locs)
            out.append(img.numpy().transpose(1, 2, 0).astype(np.float32))
    return np.stack(out)


def perturb_eval(run, detector, mode: str = "best", seed: int = 0, **kwargs) -> EvalReport:
    images = perturbed_images(run, mode, seed, **kwargs)
    return evaluate(detector, images, run.annotations, setting=f"{run.label}/{mode}")


def transfer_eval(run, detector_b, source: str = "A", target: str = "B", vocab_a=None) -> EvalReport:
    if vocab_a is not None and vocab_a != detector_b.n_classes:
        raise ValueError("source and target detectors have different class vocabularies")
    return evaluate(detector_b, run.images, run.annotations, setting=f"transfer:{source}->{target}")


# -- reports -----------------------------------------------------------------------------------


def write_report(reports: Sequence[EvalReport], path) -> None:
    rows = [r.row() for r in reports]
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_histograms(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "tp", "fp"])
        for i in range(N_BINS):
            w.writerow([i / N_BINS, (i + 1) / N_BINS, int(report.tp_hist[i]), int(report.fp_hist[i])])
