"""Synthetic X-ray luggage scenes, adversarial-object compositing and dataset manifests."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from skimage.draw import disk, polygon

from .geometry import DepthMap, Mesh, projection_topology, thickness_map
from .physics import MaterialModel, builtin_material, eval_material, hsv_to_rgb, transmittance

log = logging.getLogger(__name__)

CLASS_NAMES = ("background", "straight_knife", "folding_knife", "scissors")
DATASET_ROOT_ENV = "XRAYATTACK_DATA"


class PlacementError(RuntimeError):
    pass


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class Annotation:
    bbox: tuple[float, float, float, float]
    class_id: int
    difficult: bool = False

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if self.class_id < 1:
            raise ValueError("class_id 0 is reserved for background")

    def validate(self, image_shape) -> None:
        h, w = image_shape[:2]
        x0, y0, x1, y1 = self.bbox
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            raise ValueError(f"bbox {self.bbox} outside image of size {w}x{h}")

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "bbox": [float(v) for v in self.bbox], "difficult": self.difficult}

    @classmethod
    def from_dict(cls, d) -> "Annotation":
        return cls(tuple(float(v) for v in d["bbox"]), int(d["class_id"]), bool(d.get("difficult", False)))


@dataclass
class PlacedObject:
    mesh: Mesh
    location: tuple[int, int]
    material: MaterialModel


@dataclass
class Scene:
    base_image: np.ndarray
    annotations: list[Annotation]
    placed_objects: list[PlacedObject] = field(default_factory=list)
    rng_seed: int | None = None

    @property
    def size(self) -> tuple[int, int]:
        return self.base_image.shape[:2]


@dataclass
class SceneSpec:
    """Recipe for a synthetic scene; counts are inclusive (min, max) ranges."""

    canvas: int = 160
    n_items: tuple[int, int] = (1, 1)
    n_clutter: tuple[int, int] = (3, 6)
    class_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    tray: bool = True
    border: int = 26
    max_retries: int = 200


# -- shape families -----------------------------------------------------------------


def _rot(points, angle, center):
    c, s = math.cos(angle), math.sin(angle)
    p = np.asarray(points, dtype=float)
    return np.stack([p[:, 0] * c - p[:, 1] * s, p[:, 0] * s + p[:, 1] * c], axis=1) + center


def _fill(depth, pts, value):
    rr, cc = polygon(pts[:, 1], pts[:, 0], depth.shape)
    depth[rr, cc] += value


def _straight_knife(rng):
    L = rng.uniform(40, 54)
    lh, wh, wb = 0.38 * L, rng.uniform(7, 9), rng.uniform(5, 7)
    tip = rng.uniform(6, 9)
    handle = [(-L / 2, -wh / 2), (-L / 2 + lh, -wh / 2), (-L / 2 + lh, wh / 2), (-L / 2, wh / 2)]
    x0 = -L / 2 + lh
    blade = [(x0, -wb / 2), (L / 2 - tip, -wb / 2), (L / 2, wb / 2), (x0, wb / 2)]
    return [(handle, rng.uniform(4.0, 6.0)), (blade, rng.uniform(2.0, 3.0))]


def _folding_knife(rng):
    L = rng.uniform(32, 42)
    wh = rng.uniform(10, 12)
    lh = 0.5 * L
    handle = [(-L / 2, -wh / 2 + 1), (-L / 2 + 2, -wh / 2), (-L / 2 + lh, -wh / 2),
              (-L / 2 + lh, wh / 2), (-L / 2 + 2, wh / 2), (-L / 2, wh / 2 - 1)]
    x0 = -L / 2 + lh
    t = np.linspace(0, 1, 8)
    back = [(x0 + (L / 2 - x0) * ti, -wh / 2 + 1 + 3.0 * ti**2) for ti in t]
    edge = [(x0 + (L / 2 - x0) * ti, wh / 2 - 1 - (wh - 2) * ti**1.5 * 0.9) for ti in t[::-1]]
    blade = back + edge
    return [(handle, rng.uniform(4.5, 6.5)), (blade, rng.uniform(2.0, 3.0))]


def _scissors(rng):
    L = rng.uniform(24, 30)
    half = math.radians(rng.uniform(12, 18))
    parts = []
    for sgn in (-1, 1):
        a = sgn * half
        d = np.array([math.cos(a), math.sin(a)])
        n = np.array([-d[1], d[0]])
        p0, p1 = -0.2 * L * d, 0.8 * L * d
        blade = [p0 + 2 * n, p1 + 0.5 * n, p1 - 0.5 * n, p0 - 2 * n]
        parts.append((blade, rng.uniform(2.0, 3.0)))
        ring_c = -0.35 * L * np.array([math.cos(-a * 2.5), math.sin(-a * 2.5)]) - 0.0 * n
        parts.append((("ring", ring_c, rng.uniform(5.5, 6.5), 3.0), rng.uniform(2.5, 3.5)))
    return parts


ITEM_FAMILIES = {1: _straight_knife, 2: _folding_knife, 3: _scissors}


def render_item(class_id: int, rng, shape, center, angle) -> np.ndarray:
    """Thickness map (mm) of a synthetic prohibited item."""
    depth = np.zeros(shape, dtype=float)
    center = np.asarray(center, dtype=float)
    for part, thick in ITEM_FAMILIES[class_id](rng):
        if isinstance(part, tuple) and part and part[0] == "ring":
            _, c, r_out, r_in = part
            cc = _rot([c], angle, center)[0]
            ring = np.zeros(shape, dtype=bool)
            ring[disk((cc[1], cc[0]), r_out, shape=shape)] = True
            ring[disk((cc[1], cc[0]), r_in, shape=shape)] = False
            depth[ring] += thick
        else:
            _fill(depth, _rot(part, angle, center), thick)
    return depth


def _clutter(rng, shape):
    kind = rng.choice(["plastic", "plastic", "aluminum", "iron"])
    h, w = shape
    center = rng.uniform([10, 10], [w - 10, h - 10])
    angle = rng.uniform(0, 2 * math.pi)
    depth = np.zeros(shape, dtype=float)
    if kind == "iron":
        r = rng.uniform(3, 6)
        rr, cc = disk((center[1], center[0]), r, shape=shape)
        depth[rr, cc] = rng.uniform(0.5, 2.5)
    else:
        sx, sy = rng.uniform(10, 40), rng.uniform(6, 25)
        if rng.random() < 0.5:
            pts = [(-sx / 2, -sy / 2), (sx / 2, -sy / 2), (sx / 2, sy / 2), (-sx / 2, sy / 2)]
        else:
            t = np.linspace(0, 2 * math.pi, 20, endpoint=False)
            pts = np.stack([sx / 2 * np.cos(t), sy / 2 * np.sin(t)], axis=1)
        _fill(depth, _rot(pts, angle, center), 1.0)
        lo, hi = (20.0, 90.0) if kind == "plastic" else (3.0, 30.0)
        depth *= rng.uniform(lo, hi)
    return kind, depth


def _bbox_of(mask) -> tuple[float, float, float, float] | None:
    ys, xs = np.nonzero(mask)
    if not len(xs):
        return None
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _overlap(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    return ix * iy


def generate_scene(spec: SceneSpec, seed: int, materials: dict | None = None) -> Scene:
    """Render a deterministic synthetic scene through the physical converter."""
    mats = materials or {m: builtin_material(m) for m in ("iron", "aluminum", "plastic")}
    rng = np.random.default_rng(seed)
    shape = (spec.canvas, spec.canvas)
    image = np.ones(shape + (3,), dtype=np.float64)
    n_items = int(rng.integers(spec.n_items[0], spec.n_items[1] + 1))
    n_clutter = int(rng.integers(spec.n_clutter[0], spec.n_clutter[1] + 1))
    weights = np.asarray(spec.class_weights, dtype=float)
    weights /= weights.sum()

    annotations: list[Annotation] = []
    item_depth = np.zeros(shape)
    for _ in range(n_items):
        for _attempt in range(spec.max_retries):
            cls = int(rng.choice(len(weights), p=weights)) + 1
            center = rng.uniform(spec.border, spec.canvas - spec.border, size=2)
            depth = render_item(cls, rng, shape, center, rng.uniform(0, 2 * math.pi))
            box = _bbox_of(depth > 0)
            if box is None or box[0] < 2 or box[1] < 2 or box[2] > spec.canvas - 2 or box[3] > spec.canvas - 2:
                continue
            pad = (box[0] - 6, box[1] - 6, box[2] + 6, box[3] + 6)
            if any(_overlap(pad, a.bbox) > 0 for a in annotations):
                continue
            annotations.append(Annotation(box, cls))
            item_depth += depth
            break
        else:
            raise PlacementError(f"could not place {n_items} items after {spec.max_retries} retries")

    if spec.tray:
        tray = np.zeros(shape)
        m = int(rng.integers(4, 12))
        tray[m:-m, m:-m] = rng.uniform(4.0, 12.0)
        image *= transmittance(mats["plastic"], tray, warn=False)
    for _ in range(n_clutter):
        for _attempt in range(spec.max_retries):
            kind, depth = _clutter(rng, shape)
            box = _bbox_of(depth > 0)
            if box is None:
                continue
            area = (box[2] - box[0]) * (box[3] - box[1])
            if any(_overlap(box, a.bbox) > 0.25 * area for a in annotations):
                continue
            image *= transmittance(mats[kind], depth, warn=False)
            break
        else:
            raise PlacementError(f"could not place clutter after {spec.max_retries} retries")
    image *= transmittance(mats["iron"], item_depth, warn=False)
    return Scene(image.astype(np.float32), annotations, [], seed)


def generate_scenes(spec: SceneSpec, n: int, seed: int) -> list[Scene]:
    return [generate_scene(spec, int(s)) for s in np.random.SeedSequence(seed).generate_state(n)]


# -- compositing ----------------------------------------------------------------------


def composite(base_image, depth_map, model: MaterialModel, warn: bool = False):
    """Overlay a thickness map on an image by pixel-wise multiplication.

    ``depth_map`` is either a full-size array/tensor or a DepthMap whose
    ``origin`` (row, col) offsets its grid into the image.
    """
    if isinstance(depth_map, DepthMap):
        h, w = depth_map.grid.shape
        r0, c0 = depth_map.origin
        H, W = np.asarray(base_image).shape[:2]
        if r0 < 0 or c0 < 0 or r0 + h > H or c0 + w > W:
            raise ConstraintError("depth map footprint overflows the image")
        full = np.zeros((H, W))
        full[r0 : r0 + h, c0 : c0 + w] = depth_map.grid
        depth_map = full
    factor = transmittance(model, depth_map, warn=warn)
    if isinstance(base_image, torch.Tensor):
        return (base_image * factor.to(base_image.dtype)).clamp(0.0, 1.0)
    return np.clip(np.asarray(base_image) * factor, 0.0, 1.0).astype(np.asarray(base_image).dtype)


def constant_color_factor(model: MaterialModel, depth: torch.Tensor, ref_depth: float, ramp_mm: float = 0.5):
    """Non-physical converter: one fixed color wherever the object has thickness."""
    ref = transmittance(model, torch.tensor(ref_depth, dtype=depth.dtype), warn=False)
    occ = (depth / ramp_mm).clamp(0.0, 1.0).unsqueeze(-1)
    return 1.0 + occ * (ref - 1.0)


def object_factors(
    vertices: torch.Tensor,
    faces,
    footprint: int,
    model: MaterialModel,
    pixel_pitch: float = 1.0,
    converter: str = "physical",
    ref_depth: float = 8.0,
    pad: int = 1,
) -> torch.Tensor:
    """Per-object (k, 3, f+2p, f+2p) transmittance patches for meshes in footprint-local mm."""
    topo = projection_topology(faces)
    size = footprint + 2 * pad
    out = []
    for v in vertices:
        d = thickness_map(v, topo, (size, size), pixel_pitch, (-pad * pixel_pitch, -pad * pixel_pitch))
        out.append(depth_factor(d, model, converter, ref_depth))
    return torch.stack(out)


def depth_factor(depth: torch.Tensor, model: MaterialModel, converter: str = "physical", ref_depth: float = 8.0):
    """(3, h, w) multiplicative factor for an (h, w) thickness map."""
    if converter == "physical":
        f = transmittance(model, depth, warn=False)
    elif converter == "constant":
        f = constant_color_factor(model, depth, ref_depth)
    else:
        raise ValueError(f"unknown converter {converter!r}")
    return f.permute(2, 0, 1)


def paste_factors(base: torch.Tensor, patches: torch.Tensor, locations, pad: int = 1) -> torch.Tensor:
    """Multiply (k, 3, h, w) patches into a (3, H, W) image at top-left footprint ``locations``."""
    _, H, W = base.shape
    field_ = torch.ones_like(base)
    for patch, (x, y) in zip(patches, locations):
        x0, y0 = int(x) - pad, int(y) - pad
        h, w = patch.shape[1:]
        cx0, cy0 = max(0, -x0), max(0, -y0)
        cx1, cy1 = min(w, W - x0), min(h, H - y0)
        if cx1 <= cx0 or cy1 <= cy0:
            continue
        p = patch[:, cy0:cy1, cx0:cx1]
        left, top = x0 + cx0, y0 + cy0
        p = F.pad(p, (left, W - left - p.shape[2], top, H - top - p.shape[1]), value=1.0)
        field_ = field_ * p
    return (base * field_).clamp(0.0, 1.0)


def to_tensor(images) -> torch.Tensor:
    """(N, H, W, 3) numpy images -> (N, 3, H, W) float tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_numpy(images: torch.Tensor) -> np.ndarray:
    return images.detach().cpu().numpy().transpose(0, 2, 3, 1)


def place_objects(
    scene: Scene,
    meshes: Sequence[Mesh],
    locations,
    model: MaterialModel,
    footprint: int = 20,
    pixel_pitch: float = 1.0,
    forbidden=None,
    converter: str = "physical",
) -> np.ndarray:
    """Composite meshes (footprint-local coordinates) onto the scene image.

    ``forbidden`` is an optional (x0, y0, x1, y1) box that no footprint may touch.
    """
    if len(meshes) != len(locations):
        raise ValueError("need one location per mesh")
    H, W = scene.size
    for x, y in locations:
        if x < 0 or y < 0 or x + footprint > W or y + footprint > H:
            raise ConstraintError(f"location {(x, y)} puts the footprint outside the image")
        if forbidden is not None and _overlap((x, y, x + footprint, y + footprint), forbidden) > 0:
            raise ConstraintError(f"location {(x, y)} overlaps the forbidden region {forbidden}")
    base = to_tensor(scene.base_image)[0].double()
    if not meshes:
        return scene.base_image.copy()
    with torch.no_grad():
        faces = meshes[0].faces
        verts = torch.stack([torch.as_tensor(np.array(m.vertices)) for m in meshes])
        patches = object_factors(verts, faces, footprint, model, pixel_pitch, converter)
        out = paste_factors(base, patches, locations)
    return to_numpy(out[None])[0].astype(np.float32)


# -- file IO -----------------------------------------------------------------------------


def save_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def save_annotations(annotations: Sequence[Annotation], path, num_adversarial: int = 0) -> None:
    doc = {"objects": [a.to_dict() for a in annotations], "num_adversarial": int(num_adversarial)}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_annotations(path) -> tuple[list[Annotation], int]:
    doc = json.loads(Path(path).read_text())
    return [Annotation.from_dict(o) for o in doc["objects"]], int(doc.get("num_adversarial", 0))


@dataclass
class ManifestEntry:
    image: str
    annotation: str
    severity: int = 0


@dataclass
class DatasetManifest:
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)
    class_names: tuple[str, ...] = CLASS_NAMES
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def load_item(self, i: int):
        e = self.entries[i]
        return load_png(self.resolve(e.image)), load_annotations(self.resolve(e.annotation))[0]

    def load_all(self):
        images, anns = [], []
        for i in range(len(self)):
            img, a = self.load_item(i)
            images.append(img)
            anns.append(a)
        return (np.stack(images) if images else np.zeros((0, 1, 1, 3), np.float32)), anns

    def with_severity(self, level: int) -> "DatasetManifest":
        return DatasetManifest(self.split, [e for e in self.entries if e.severity == level], self.class_names, self.root)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# split={manifest.split}\n")
        fh.write(f"# classes={','.join(manifest.class_names)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "annotation", "severity"])
        for e in manifest.entries:
            w.writerow([e.image, e.annotation, e.severity])


def load_manifest(path, validate: bool = True) -> DatasetManifest:
    """Load a manifest; paths inside are relative to the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    meta, rows = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k.strip()] = v.strip()
            elif line.strip():
                rows.append(line)
    reader = csv.DictReader(rows)
    entries = []
    for row in reader:
        sev = int(row["severity"])
        if not 0 <= sev <= 4:
            raise ValueError(f"{path}: severity {sev} outside 0..4")
        entries.append(ManifestEntry(row["image"], row["annotation"], sev))
    classes = tuple(meta["classes"].split(",")) if meta.get("classes") else CLASS_NAMES
    manifest = DatasetManifest(meta.get("split", "test"), entries, classes, path.parent)
    if validate:
        validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Check files and annotations; returns duplicate image paths (also warned)."""
    seen, dups = set(), []
    for e in manifest.entries:
        if e.image in seen:
            dups.append(e.image)
        seen.add(e.image)
        for rel in (e.image, e.annotation):
            if not manifest.resolve(rel).exists():
                raise FileNotFoundError(manifest.resolve(rel))
        _, n_adv = load_annotations(manifest.resolve(e.annotation))
        if n_adv != e.severity:
            raise ValueError(f"{e.annotation}: {n_adv} adversarial objects but severity {e.severity}")
    if dups:
        warnings.warn(f"duplicate image paths in manifest: {sorted(set(dups))}", stacklevel=2)
    return dups


def write_dataset(root, split: str, images, annotations, severities=None, prefix: str = "img") -> DatasetManifest:
    """Persist images + annotations under ``root`` and write ``root/<split>.csv``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    severities = severities if severities is not None else [0] * len(images)
    entries = []
    for i, (img, anns, sev) in enumerate(zip(images, annotations, severities)):
        name = f"{prefix}_{i:05d}"
        save_png(img, root / "images" / f"{name}.png")
        save_annotations(anns, root / "annotations" / f"{name}.json", sev)
        entries.append(ManifestEntry(f"images/{name}.png", f"annotations/{name}.json", int(sev)))
    manifest = DatasetManifest(split, entries, CLASS_NAMES, root)
    save_manifest(manifest, root / f"{split}.csv")
    return manifest


def dataset_root(default=".") -> Path:
    return Path(os.environ.get(DATASET_ROOT_ENV, default))

