"""Glue between modules: datasets as scenes, XAD-style severity sets, profiles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .attack import AttackConfig, render, run_attack
from .physics import builtin_material
from .scene import Scene, SceneSpec, generate_scenes, to_numpy, to_tensor


@dataclass(frozen=True)
class Profile:
    canvas: int = 300
    n_train: int = 2000
    n_test: int = 210
    epochs: int = 30
    footprint: int = 20


# the mini footprint keeps four objects at the same share of the image as 20 px on 300 px
PROFILES = {
    "full": Profile(),
    "mini": Profile(canvas=160, n_train=200, n_test=8, epochs=30, footprint=11),
}


def scenes_from(images, annotations) -> list[Scene]:
    return [Scene(np.asarray(img, dtype=np.float32), list(a)) for img, a in zip(images, annotations)]


def synth_split(profile: Profile, n: int, seed: int) -> list[Scene]:
    border = max(16, round(profile.canvas * 0.16))
    return generate_scenes(SceneSpec(canvas=profile.canvas, border=border), n, seed)


def severity_set(scenes, detector, cfg: AttackConfig, levels=range(5), seed: int = 0, placement="reinforce"):
    """XAD-style layouts: each scene at every severity, level k carrying the first k of its attack objects.

    Returns (images, annotations, severities) ordered layout-major.
    """
    cfg = AttackConfig(**{**cfg.__dict__, "num_objects": max(max(levels), 1)})
    run = run_attack(scenes, detector, cfg, "xadv", placement, seed=seed)
    images, anns, sev = [], [], []
    for r in run.results:
        model = builtin_material(r.material_id)
        base = to_tensor(r.base_images).double()
        depths = torch.as_tensor(np.array(r.depth_patches))
        for b in range(len(base)):
            for k in levels:
                if k == 0:
                    img = r.base_images[b]
                else:
                    with torch.no_grad():
                        img = to_numpy(render(base[b : b + 1], depths[:k], [r.locations[b][:k]], model))[0]
                images.append(np.asarray(img, dtype=np.float32))
                anns.append(r.annotations[b])
                sev.append(k)
    return np.stack(images), anns, sev
