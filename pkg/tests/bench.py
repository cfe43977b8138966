"""Shared, seed-pinned fixtures for the slower end-to-end tests.

The mini-profile detector takes about a minute to train. Set
``XRAYATTACK_TEST_CACHE`` to a directory to reuse it across sessions.
"""

from __future__ import annotations

import functools
import os
from pathlib import Path

import numpy as np
import torch

from xrayattack.detector import ToyDetector
from xrayattack.pipeline import PROFILES, synth_split

PROFILE = PROFILES["mini"]
TRAIN_SEED = 1
TEST_SEED = 2
# more test layouts than the mini profile's 8 so that a 2-point mAP gap is resolvable
N_TEST = 60


def images(scenes):
    return np.stack([s.base_image for s in scenes])


def annotations(scenes):
    return [s.annotations for s in scenes]


@functools.lru_cache(maxsize=None)
def train_scenes():
    return synth_split(PROFILE, PROFILE.n_train, TRAIN_SEED)


@functools.lru_cache(maxsize=None)
def test_scenes():
    return synth_split(PROFILE, N_TEST, TEST_SEED)


@functools.lru_cache(maxsize=None)
def detector() -> ToyDetector:
    torch.set_num_threads(1)
    cache = os.environ.get("XRAYATTACK_TEST_CACHE")
    path = Path(cache) / f"mini_detector_s{TRAIN_SEED}.pt" if cache else None
    if path is not None and path.exists():
        return ToyDetector.load(path)
    tr = train_scenes()
    det = ToyDetector(image_size=PROFILE.canvas, epochs=PROFILE.epochs, seed=0).fit(images(tr), annotations(tr))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        det.save(path)
    return det


# acceptance criterion number -> one-line verdict, printed in the terminal summary
CRITERIA: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[n] = line
    print(line)
