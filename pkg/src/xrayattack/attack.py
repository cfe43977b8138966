"""Adversarial shape polishment and the Vanilla / MeshAdv / AdvPatch comparison attacks."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .detector import ToyDetector
from .geometry import Mesh, bundled_sphere, load_mesh, perceptual_loss, projection_topology, save_mesh, thickness_map
from .physics import builtin_material
from .placement import (
    AttackRegion,
    RewardSpec,
    build_region,
    check_locations,
    place_fix,
    place_greedy,
    place_random,
    reinforce_search,
)
from .scene import Annotation, Scene, depth_factor, paste_factors, save_png, to_numpy, to_tensor

log = logging.getLogger(__name__)

BASELINES = ("xadv", "vanilla", "meshadv", "advpatch")
PLACEMENTS = ("reinforce", "fix", "random", "greedy")
PAD = 1


class CapabilityError(TypeError):
    pass


class AttackAborted(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class AttackConfig:
    lr: float = 0.1
    iterations: int = 24
    beta: float = 0.1
    num_objects: int = 4
    footprint: int = 20
    material_id: str = "iron"
    mode: str = "untargeted"
    batch_share: int = 10
    z_max: float = 8.0
    pixel_pitch: float = 1.0
    constant_area: bool = False
    margin: int | None = None
    n_grid: int = 32
    alpha: float = 0.05
    reinforce_iters: int = 200
    reinforce_lr: float = 0.1
    temperature: float = 1.0
    neg_pos_ratio: int | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.iterations < 0 or self.beta < 0 or self.num_objects < 1:
            raise ValueError("invalid attack configuration")
        if self.mode not in ("untargeted", "targeted"):
            raise ValueError(f"unknown attack mode {self.mode!r}")

    @property
    def object_footprint(self) -> int:
        """Footprint in pixels; keeps the total area of 4 default objects when ``constant_area``."""
        if not self.constant_area:
            return self.footprint
        return int(round(self.footprint * math.sqrt(4 / self.num_objects)))


@dataclass
class AttackResult:
    meshes_adv: list
    locations: list  # per image: list of (x, y)
    loss_trace: list
    images: np.ndarray
    perceptual: float
    depth_patches: np.ndarray  # (k, f+2, f+2) thickness in mm, footprint-local with a 1 px pad
    converter: str = "physical"
    material_id: str = "iron"
    footprint: int = 20
    annotations: list = field(default_factory=list)
    label: str = "xadv"
    base_images: np.ndarray | None = None


def object_size(footprint: int, z_max: float = 8.0, pixel_pitch: float = 1.0) -> np.ndarray:
    return np.array([footprint * pixel_pitch, footprint * pixel_pitch, z_max])


def to_object_frame(u, size):
    """Map normalized coordinates in [-1, 1]^3 onto the footprint box and thickness slab (mm)."""
    return (u * 0.5 + 0.5) * size


def from_object_frame(v, size):
    return v / size * 2.0 - 1.0


def initial_mesh(footprint: int, z_max: float = 8.0, pixel_pitch: float = 1.0) -> Mesh:
    """Sphere scaled to fill the footprint box in XY and the [0, z_max] slab in Z."""
    sphere = bundled_sphere()
    return Mesh(to_object_frame(sphere.vertices, object_size(footprint, z_max, pixel_pitch)), sphere.faces)


def mesh_depths(vertices: torch.Tensor, faces, footprint: int, pixel_pitch: float = 1.0) -> torch.Tensor:
    """(k, f+2, f+2) thickness maps for k meshes in footprint-local mm."""
    topo = projection_topology(faces)
    size = footprint + 2 * PAD
    origin = (-PAD * pixel_pitch, -PAD * pixel_pitch)
    return torch.stack([thickness_map(v, topo, (size, size), pixel_pitch, origin) for v in vertices])


def render(base: torch.Tensor, depths: torch.Tensor, locations, model, converter="physical", z_max=8.0):
    """Composite k depth patches into each of B images; ``locations`` is per image."""
    patches = torch.stack([depth_factor(d, model, converter, z_max) for d in depths])
    return torch.stack([paste_factors(base[b], patches, locations[b], PAD) for b in range(len(base))])


def attack_objective(detector: ToyDetector, x, annotations, mode: str, reduction: str = "mean", neg_pos_ratio=None):
    """Quantity the attacker maximizes: the detector's classification loss, or minus the background CE."""
    if mode == "untargeted":
        return detector.cls_loss(x, annotations, "untargeted", neg_pos_ratio=neg_pos_ratio, reduction=reduction)
    return -detector.cls_loss(x, annotations, "targeted", reduction=reduction)


def _check_detector(detector):
    if not hasattr(detector, "cls_loss") or not hasattr(detector, "forward"):
        raise CapabilityError("detector does not expose a differentiable classification loss")


def _base(scenes):
    return to_tensor(np.stack([s.base_image for s in scenes])).double()


def polish_shape(
    scenes: Sequence[Scene],
    locations,
    detector: ToyDetector,
    cfg: AttackConfig,
    converter: str = "physical",
    init: Mesh | None = None,
) -> AttackResult:
    """Optimize one shared group of meshes for all ``scenes`` by Adam ascent.

    ``converter`` is the imaging surrogate used during optimization; the final
    images always image the meshes through the physical converter.
    """
    _check_detector(detector)
    f = cfg.object_footprint
    k = len(locations[0])
    model = builtin_material(cfg.material_id)
    mesh0 = init or initial_mesh(f, cfg.z_max, cfg.pixel_pitch)
    faces = mesh0.faces
    size = torch.tensor(object_size(f, cfg.z_max, cfg.pixel_pitch), dtype=torch.float64)
    # free variables live in the normalized object frame, where lr and beta are unit-scale
    u0 = from_object_frame(torch.tensor(np.array(mesh0.vertices), dtype=torch.float64), size)
    ref = Mesh(u0.numpy(), faces)
    u = u0.repeat(k, 1, 1).clone().requires_grad_(True)
    base = _base(scenes)
    anns = [s.annotations for s in scenes]
    opt = torch.optim.Adam([u], lr=cfg.lr)
    trace = []

    def total(w):
        x = render(base, mesh_depths(to_object_frame(w, size), faces, f, cfg.pixel_pitch), locations, model,
                   converter, cfg.z_max)
        l_cls = attack_objective(detector, x, anns, cfg.mode, neg_pos_ratio=cfg.neg_pos_ratio)
        return l_cls - cfg.beta * perceptual_loss(w, ref).sum(), x

    for it in range(cfg.iterations):
        loss, _ = total(u)
        trace.append(float(loss.detach()))
        opt.zero_grad()
        (-loss).backward()
        if not torch.isfinite(u.grad).all():
            for g in opt.param_groups:
                g["lr"] *= 0.5
            opt.zero_grad()
            (-total(u)[0]).backward()
            if not torch.isfinite(u.grad).all():
                raise AttackAborted(f"non-finite gradient at iteration {it}", trace)
        opt.step()
        with torch.no_grad():
            u.clamp_(-1.0, 1.0)
    with torch.no_grad():
        loss, x = total(u)
        trace.append(float(loss))
        l_perc = float(perceptual_loss(u, ref).sum())
        verts = to_object_frame(u, size)
        depths = mesh_depths(verts, faces, f, cfg.pixel_pitch)
        if converter != "physical":
            x = render(base, depths, locations, model, "physical", cfg.z_max)
    meshes = [Mesh(v.numpy(), faces) for v in verts.detach()]
    return AttackResult(
        meshes, [list(map(tuple, l)) for l in locations], trace, to_numpy(x).astype(np.float32), l_perc,
        depths.numpy(), "physical", cfg.material_id, f, anns, "xadv", np.stack([s.base_image for s in scenes]),
    )


def attack_advpatch(scenes: Sequence[Scene], locations, detector: ToyDetector, cfg: AttackConfig) -> AttackResult:
    """Optimize a footprint-sized depth raster per object directly, starting from zero thickness."""
    _check_detector(detector)
    f = cfg.object_footprint
    k = len(locations[0])
    model = builtin_material(cfg.material_id)
    raster = torch.zeros((k, f, f), dtype=torch.float64, requires_grad=True)
    base = _base(scenes)
    anns = [s.annotations for s in scenes]
    opt = torch.optim.Adam([raster], lr=cfg.lr)
    trace = []

    def padded(r):
        return torch.nn.functional.pad(r, (PAD, PAD, PAD, PAD))

    for _ in range(cfg.iterations):
        x = render(base, padded(raster), locations, model, "physical", cfg.z_max)
        loss = attack_objective(detector, x, anns, cfg.mode, neg_pos_ratio=cfg.neg_pos_ratio)
        trace.append(float(loss))
        opt.zero_grad()
        (-loss).backward()
        opt.step()
        with torch.no_grad():
            raster.clamp_(0.0, cfg.z_max)
    with torch.no_grad():
        depths = padded(raster)
        x = render(base, depths, locations, model, "physical", cfg.z_max)
        trace.append(float(attack_objective(detector, x, anns, cfg.mode, neg_pos_ratio=cfg.neg_pos_ratio)))
    return AttackResult(
        [], [list(map(tuple, l)) for l in locations], trace, to_numpy(x).astype(np.float32), 0.0,
        depths.numpy(), "physical", cfg.material_id, f, anns, "advpatch", np.stack([s.base_image for s in scenes]),
    )


def attack_vanilla(scenes, locations, detector, cfg: AttackConfig) -> AttackResult:
    r = polish_shape(scenes, locations, detector, replace(cfg, iterations=0))
    r.label = "vanilla"
    return r


def attack_meshadv(scenes, locations, detector, cfg: AttackConfig) -> AttackResult:
    r = polish_shape(scenes, locations, detector, cfg, converter="constant")
    r.label = "meshadv"
    return r


# -- placement wiring ------------------------------------------------------------------------


def regions_for(scenes: Sequence[Scene], cfg: AttackConfig) -> list[AttackRegion]:
    out = []
    for s in scenes:
        if not s.annotations:
            raise ValueError("attack scenes need at least one annotated item")
        out.append(build_region(s.annotations[0], cfg.object_footprint, s.size, cfg.n_grid, cfg.margin))
    return out


def original_patches(cfg: AttackConfig, converter: str = "physical") -> torch.Tensor:
    f = cfg.object_footprint
    mesh0 = initial_mesh(f, cfg.z_max, cfg.pixel_pitch)
    with torch.no_grad():
        d = mesh_depths(torch.tensor(np.array(mesh0.vertices))[None], mesh0.faces, f, cfg.pixel_pitch)
        return depth_factor(d[0], builtin_material(cfg.material_id), converter, cfg.z_max)[None]


def sphere_loss_fn(scenes, detector, cfg: AttackConfig):
    """Per-image attack objective with original spheres at given locations."""
    base = _base(scenes)
    patch = original_patches(cfg)
    anns = [s.annotations for s in scenes]

    def fn(locs):
        with torch.no_grad():
            x = torch.stack([paste_factors(base[b], patch.expand(len(locs[b]), -1, -1, -1), locs[b], PAD)
                             for b in range(len(base))])
            return attack_objective(detector, x, anns, cfg.mode, "none", cfg.neg_pos_ratio)

    return fn


def greedy_scores(scene: Scene, region: AttackRegion, detector, cfg: AttackConfig) -> np.ndarray:
    base = _base([scene])[0]
    patch = original_patches(cfg)
    with torch.no_grad():
        x = torch.stack([paste_factors(base, patch, [tuple(g)], PAD) for g in region.grid])
        return attack_objective(detector, x, [scene.annotations] * len(x), cfg.mode, "none", cfg.neg_pos_ratio).numpy()


def choose_locations(scenes, detector, cfg: AttackConfig, placement: str, seed: int = 0):
    regions = regions_for(scenes, cfg)
    k = cfg.num_objects
    if placement == "fix":
        locs = [place_fix(r, k) for r in regions]
    elif placement == "random":
        locs = [place_random(r, k, seed=seed * 1000 + i) for i, r in enumerate(regions)]
    elif placement == "greedy":
        locs = [place_greedy(r, greedy_scores(s, r, detector, cfg), k) for s, r in zip(scenes, regions)]
    elif placement == "reinforce":
        images = _base(scenes).float()
        _, locs, _ = reinforce_search(
            images, regions, sphere_loss_fn(scenes, detector, cfg), RewardSpec(cfg.alpha),
            n_slots=k, n_iters=cfg.reinforce_iters, lr=cfg.reinforce_lr, seed=seed,
        )
    else:
        raise ValueError(f"unknown placement {placement!r}")
    for r, l in zip(regions, locs):
        check_locations(r, l)
    return locs


@dataclass
class AttackRun:
    results: list
    label: str
    config: dict

    @property
    def images(self) -> np.ndarray:
        return np.concatenate([r.images for r in self.results])

    @property
    def annotations(self) -> list:
        return [a for r in self.results for a in r.annotations]

    @property
    def locations(self) -> list:
        return [l for r in self.results for l in r.locations]

    @property
    def base_images(self) -> np.ndarray:
        return np.concatenate([r.base_images for r in self.results])


def run_attack(scenes: Sequence[Scene], detector, cfg: AttackConfig, baseline: str = "xadv",
               placement: str | None = None, seed: int = 0) -> AttackRun:
    """Attack ``scenes`` in groups of ``cfg.batch_share`` sharing one object set per group."""
    if baseline not in BASELINES:
        raise ValueError(f"unknown baseline {baseline!r}")
    placement = placement or ("reinforce" if baseline == "xadv" else "fix")
    results = []
    for g, s0 in enumerate(range(0, len(scenes), cfg.batch_share)):
        group = scenes[s0 : s0 + cfg.batch_share]
        locs = choose_locations(group, detector, cfg, placement, seed=seed + g)
        if baseline == "xadv":
            r = polish_shape(group, locs, detector, cfg)
        elif baseline == "vanilla":
            r = attack_vanilla(group, locs, detector, cfg)
        elif baseline == "meshadv":
            r = attack_meshadv(group, locs, detector, cfg)
        else:
            r = attack_advpatch(group, locs, detector, cfg)
        r.label = baseline
        results.append(r)
        log.info("group %d: %s/%s loss %.4f -> %.4f", g, baseline, placement, r.loss_trace[0], r.loss_trace[-1])
    conf = asdict(cfg) | {"baseline": baseline, "placement": placement, "seed": seed}
    return AttackRun(results, baseline, conf)


# -- persistence -------------------------------------------------------------------------------


def save_run(run: AttackRun, out_dir) -> Path:
    """Write meshes (OBJ), locations and loss traces (CSV), images (PNG) and a manifest fragment."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "meshes").mkdir(exist_ok=True)
    n = 0
    with open(out / "locations.csv", "w", newline="") as lf, open(out / "loss_trace.csv", "w", newline="") as tf:
        lw, tw = csv.writer(lf, lineterminator="\n"), csv.writer(tf, lineterminator="\n")
        lw.writerow(["image", "group", "slot", "x", "y"])
        tw.writerow(["group", "iteration", "loss"])
        for g, r in enumerate(run.results):
            for j, m in enumerate(r.meshes_adv):
                save_mesh(m, out / "meshes" / f"group{g:03d}_obj{j}.obj")
            np.save(out / "meshes" / f"group{g:03d}_depth.npy", r.depth_patches)
            for i, t in enumerate(r.loss_trace):
                tw.writerow([g, i, repr(float(t))])
            for b, locs in enumerate(r.locations):
                for j, (x, y) in enumerate(locs):
                    lw.writerow([n + b, g, j, x, y])
            n += len(r.locations)
    from .scene import write_dataset

    write_dataset(out, "attack", run.images, run.annotations, [run.config["num_objects"]] * n, prefix="adv")
    write_dataset(out, "clean", run.base_images, run.annotations, prefix="clean")
    meta = {
        "label": run.label,
        "config": run.config,
        "groups": [{"converter": r.converter, "material_id": r.material_id, "footprint": r.footprint,
                    "perceptual": r.perceptual, "label": r.label, "size": len(r.locations)} for r in run.results],
    }
    (out / "attack.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return out


def load_run(out_dir) -> AttackRun:
    from .scene import load_manifest

    out = Path(out_dir)
    if not (out / "attack.json").exists():
        raise FileNotFoundError(out / "attack.json")
    meta = json.loads((out / "attack.json").read_text())
    manifest = load_manifest(out / "attack.csv")
    images, anns = manifest.load_all()
    clean, _ = load_manifest(out / "clean.csv").load_all()
    locs: dict[int, dict[int, tuple]] = {}
    with open(out / "locations.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            locs.setdefault(int(row["image"]), {})[int(row["slot"])] = (int(row["x"]), int(row["y"]))
    traces: dict[int, list] = {}
    with open(out / "loss_trace.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            traces.setdefault(int(row["group"]), []).append(float(row["loss"]))
    results, n = [], 0
    for g, gm in enumerate(meta["groups"]):
        size = gm["size"]
        meshes = [load_mesh(p) for p in sorted((out / "meshes").glob(f"group{g:03d}_obj*.obj"))]
        results.append(AttackResult(
            meshes, [[locs[i][j] for j in sorted(locs[i])] for i in range(n, n + size)], traces.get(g, []),
            images[n : n + size], gm["perceptual"], np.load(out / "meshes" / f"group{g:03d}_depth.npy"),
            gm["converter"], gm["material_id"], gm["footprint"], anns[n : n + size], gm["label"],
            clean[n : n + size],
        ))
        n += size
    return AttackRun(results, meta["label"], meta["config"])
