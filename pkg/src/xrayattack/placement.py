"""Attack regions around prohibited items and location search (REINFORCE, Fix, Random, Greedy)."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .scene import Annotation

log = logging.getLogger(__name__)


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class AttackRegion:
    """Valid top-left footprint anchors in a ring around a ground-truth box."""

    outer: tuple[int, int, int, int]
    exclusion: tuple[float, float, float, float]
    grid: np.ndarray  # (N, 2) int (x, y), row-major
    footprint: int
    image_size: tuple[int, int]  # (H, W)
    bbox: tuple[float, float, float, float] | None = None

    @property
    def n(self) -> int:
        return len(self.grid)

    def cell_geometry(self) -> np.ndarray:
        """(N, 2) per anchor: fraction of the footprint covering the item box, and distance
        from the footprint center to the box center in box half-diagonals."""
        f = self.footprint
        x0, y0, x1, y1 = self.bbox if self.bbox is not None else self.exclusion
        gx, gy = self.grid[:, 0].astype(float), self.grid[:, 1].astype(float)
        ix = np.clip(np.minimum(gx + f, x1) - np.maximum(gx, x0), 0, None)
        iy = np.clip(np.minimum(gy + f, y1) - np.maximum(gy, y0), 0, None)
        half = 0.5 * np.hypot(x1 - x0, y1 - y0)
        d = np.hypot(gx + f / 2 - (x0 + x1) / 2, gy + f / 2 - (y0 + y1) / 2) / max(half, 1e-9)
        return np.stack([ix * iy / f**2, d], 1)

    def is_valid(self, loc) -> bool:
        x, y = int(loc[0]), int(loc[1])
        H, W = self.image_size
        f = self.footprint
        if x < 0 or y < 0 or x + f > W or y + f > H:
            return False
        ex0, ey0, ex1, ey1 = self.exclusion
        return not (x < ex1 and x + f > ex0 and y < ey1 and y + f > ey0)

    def locations(self, indices) -> list[tuple[int, int]]:
        return [tuple(int(v) for v in self.grid[i]) for i in indices]


def _valid_mask(xs, ys, f, exclusion):
    ex0, ey0, ex1, ey1 = exclusion
    return ~((xs < ex1) & (xs + f > ex0) & (ys < ey1) & (ys + f > ey0))


def build_region(annotation: Annotation | Sequence[float], footprint: int, image_size, n_grid: int = 32,
                 margin: int | None = None) -> AttackRegion:
    """Ring region around ``annotation``; ``margin`` defaults to one footprint."""
    bbox = annotation.bbox if isinstance(annotation, Annotation) else tuple(annotation)
    H, W = (image_size, image_size) if np.isscalar(image_size) else tuple(image_size)
    margin = footprint if margin is None else margin
    x0, y0, x1, y1 = bbox
    w, h = x1 - x0, y1 - y0
    exclusion = (x0 + 0.25 * w, y0 + 0.25 * h, x1 - 0.25 * w, y1 - 0.25 * h)
    ox0, oy0 = max(0, int(np.floor(x0 - margin))), max(0, int(np.floor(y0 - margin)))
    ox1, oy1 = min(W, int(np.ceil(x1 + margin))), min(H, int(np.ceil(y1 + margin)))
    xmax, ymax = ox1 - footprint, oy1 - footprint
    if xmax < ox0 or ymax < oy0:
        raise RegionError("attack region is smaller than one footprint")
    # all anchors, used to check feasibility and as a fallback when lattices are too coarse
    ax, ay = np.meshgrid(np.arange(ox0, xmax + 1), np.arange(oy0, ymax + 1))
    ax, ay = ax.ravel(), ay.ravel()
    ok = _valid_mask(ax, ay, footprint, exclusion)
    if not ok.any():
        raise RegionError("no footprint fits in the ring around the excluded center")
    grid = None
    for n in range(2, max(xmax - ox0, ymax - oy0) + 3):
        gx = np.unique(np.round(np.linspace(ox0, xmax, n)).astype(int))
        gy = np.unique(np.round(np.linspace(oy0, ymax, n)).astype(int))
        px, py = np.meshgrid(gx, gy)
        px, py = px.ravel(), py.ravel()
        m = _valid_mask(px, py, footprint, exclusion)
        if m.sum() >= n_grid:
            grid = np.stack([px[m], py[m]], 1)
            break
    if grid is None:
        grid = np.stack([ax[ok], ay[ok]], 1)
    if len(grid) > n_grid:
        grid = grid[np.round(np.linspace(0, len(grid) - 1, n_grid)).astype(int)]
    return AttackRegion((ox0, oy0, ox1, oy1), exclusion, grid.astype(np.int64), footprint, (H, W), tuple(bbox))


def check_locations(region: AttackRegion, locations) -> None:
    for loc in locations:
        if not region.is_valid(loc):
            raise RegionError(f"location {tuple(loc)} is outside the region or overlaps the excluded center")


def location_spread(locations) -> float:
    """Population std of x and y over the chosen anchors, averaged over axes."""
    c = np.asarray(locations, dtype=float).reshape(-1, 2)
    return float(c.std(axis=0).mean())


# -- policy -----------------------------------------------------------------------------


class PlacementPolicy(nn.Module):
    """Scores the N grid anchors of a region for each object slot.

    A 2-layer conv encoder is sampled at every anchor's footprint center and
    joined with the anchor's geometry relative to the item box; per-slot linear
    heads (plus per-slot anchor biases) turn those features into logits. Heads
    start at zero, so the initial policy is uniform.
    """

    def __init__(self, n_grid: int = 32, n_slots: int = 4, temperature: float = 1.0, hidden: int = 8,
                 footprint: int = 20, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.encoder = nn.Sequential(
            nn.Conv2d(3, hidden, 5, stride=2, padding=2),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 5, stride=2, padding=2),
            nn.ReLU(),
        )
        with torch.no_grad():
            for p in self.encoder.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * 0.2)
        self.heads = nn.ModuleList(nn.Linear(hidden + N_GEOMETRY, 1, bias=False) for _ in range(n_slots))
        self.bias = nn.Parameter(torch.zeros(n_slots, n_grid))
        for h in self.heads:
            nn.init.zeros_(h.weight)
        self.temperature = temperature
        self.n_grid = n_grid
        self.n_slots = n_slots
        self.footprint = footprint

    def features(self, images: torch.Tensor, grids) -> torch.Tensor:
        """(B, N, hidden + 2) encoder features at each anchor's footprint center plus geometry."""
        anchors, geometry = grids
        fmap = self.encoder(images.to(self.bias.dtype))
        H, W = images.shape[2:]
        centers = anchors.to(fmap.dtype) + self.footprint / 2.0
        norm = torch.stack([centers[..., 0] / W * 2 - 1, centers[..., 1] / H * 2 - 1], -1)
        sampled = F.grid_sample(fmap, norm.unsqueeze(1), align_corners=False)  # (B, C, 1, N)
        return torch.cat([sampled[:, :, 0].transpose(1, 2), geometry.to(fmap.dtype)], -1)

    def logits(self, images: torch.Tensor, grids) -> torch.Tensor:
        """(B, slots, N) logits divided by temperature; ``grids`` comes from ``policy_inputs``."""
        phi = self.features(images, grids)
        out = torch.stack([h(phi).squeeze(-1) for h in self.heads], 1) + self.bias
        return out / max(self.temperature, 1e-8)

    def log_prob(self, images, grids, actions: torch.Tensor) -> torch.Tensor:
        """Sum over slots of log pi(action | image), shape (B,)."""
        lp = self.logits(images, grids).log_softmax(-1)
        return lp.gather(-1, actions.unsqueeze(-1)).squeeze(-1).sum(-1)

    def probs(self, images, grids) -> torch.Tensor:
        return self.logits(images, grids).softmax(-1)


N_GEOMETRY = 2


def policy_inputs(regions):
    """(anchors (B, N, 2), geometry (B, N, 2)) tensors for a batch of regions."""
    return (torch.as_tensor(np.stack([r.grid for r in regions])),
            torch.as_tensor(np.stack([r.cell_geometry() for r in regions])))


def sample_locations(policy: PlacementPolicy, image: torch.Tensor, region: AttackRegion, k: int | None = None,
                     seed: int | None = None, generator: torch.Generator | None = None):
    """Sample k slots independently from their categoricals; returns (locations, indices)."""
    k = policy.n_slots if k is None else k
    if k > region.n or k > policy.n_slots:
        raise ValueError(f"cannot sample {k} locations from {region.n} anchors / {policy.n_slots} slots")
    gen = generator or torch.Generator().manual_seed(0 if seed is None else seed)
    img = image if image.dim() == 4 else image.unsqueeze(0)
    grid = policy_inputs([region])
    with torch.no_grad():
        if policy.temperature <= 1e-6:
            t = policy.temperature
            policy.temperature = 1.0
            idx = policy.logits(img, grid)[0, :k].argmax(-1)
            policy.temperature = t
        else:
            idx = torch.multinomial(policy.probs(img, grid)[0, :k], 1, generator=gen).squeeze(-1)
    idx = idx.tolist()
    return region.locations(idx), idx


def compute_reward(cls_loss_value: float, locations, alpha: float = 0.05) -> float:
    """G = attack loss with the original shapes + alpha * location spread."""
    return float(cls_loss_value) + alpha * location_spread(locations)


@dataclass
class RewardSpec:
    alpha: float = 0.05

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass
class SearchTrace:
    rewards: list
    baselines: list
    skipped: int


def policy_gradient_step(policy, opt, images, grids, actions, advantages, mask=None) -> None:
    """One ascent step on mean(advantage * log pi(actions)) over the unmasked samples."""
    mask = torch.ones(len(actions), dtype=torch.bool) if mask is None else mask
    adv = advantages.to(policy.bias.dtype)
    logp = policy.log_prob(images, grids, actions)
    loss = -(adv * logp * mask).sum() / mask.sum().clamp_min(1)
    opt.zero_grad()
    loss.backward()
    opt.step()


def reinforce_search(
    images: torch.Tensor,
    regions: Sequence[AttackRegion],
    loss_fn: Callable[[list[list[tuple[int, int]]]], torch.Tensor],
    spec: RewardSpec = RewardSpec(),
    n_slots: int = 4,
    n_iters: int = 200,
    lr: float = 0.1,
    decay: float = 0.9,
    seed: int = 0,
    policy: PlacementPolicy | None = None,
    normalize: bool = True,
):
    """Train a placement policy by REINFORCE with a per-image moving-average baseline.

    Returns, per image, the policy's argmax placement or the best sampled one,
    whichever earned the higher reward.

    With ``normalize`` the advantages are scaled by their batch std, which sets
    the step size without moving the policy's fixed points.

    ``loss_fn`` maps per-image location lists to a (B,) tensor of attack losses
    with the original shapes. Returns (policy, per-image locations, trace).
    """
    B = len(images)
    n_grid = regions[0].n
    if any(r.n != n_grid for r in regions):
        raise ValueError("all regions must share the grid size")
    policy = policy or PlacementPolicy(n_grid, n_slots, footprint=regions[0].footprint, seed=seed)
    grids = policy_inputs(regions)
    opt = torch.optim.Adam(policy.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    baseline = None
    rewards, baselines, skipped = [], [], 0
    best_g = torch.full((B,), -float("inf"), dtype=torch.float64)
    best_locs: list = [None] * B
    for it in range(n_iters):
        with torch.no_grad():
            p = policy.probs(images, grids)  # (B, S, N)
            actions = torch.multinomial(p.reshape(-1, n_grid), 1, generator=gen).view(B, n_slots)
        locs = [regions[b].locations(actions[b].tolist()) for b in range(B)]
        with torch.no_grad():
            losses = loss_fn(locs).detach().double()
        G = torch.tensor([compute_reward(losses[b], locs[b], spec.alpha) for b in range(B)], dtype=torch.float64)
        finite = torch.isfinite(G)
        if not finite.all():
            skipped += int((~finite).sum())
            warnings.warn(f"iteration {it}: skipped {int((~finite).sum())} non-finite rewards", stacklevel=2)
            if skipped > 0.1 * B * n_iters:
                raise RuntimeError(f"REINFORCE aborted: {skipped} non-finite rewards")
            if not finite.any():
                continue
        G = torch.where(finite, G, torch.zeros_like(G))
        for b in torch.nonzero(finite & (G > best_g)).flatten().tolist():
            best_g[b], best_locs[b] = G[b], locs[b]
        if baseline is None:
            baseline = G.clone()
        adv = torch.where(finite, G - baseline, torch.zeros_like(G))
        if normalize and int(finite.sum()) > 1:
            adv = adv / adv[finite].std().clamp_min(1e-8)
        policy_gradient_step(policy, opt, images, grids, actions, adv, finite)
        baselines.append(float(baseline[finite].mean()))
        rewards.append(float(G[finite].mean()))
        baseline = torch.where(finite, decay * baseline + (1 - decay) * G, baseline)
    with torch.no_grad():
        mode = policy.logits(images, grids).argmax(-1)
    locs = [regions[b].locations(mode[b].tolist()) for b in range(B)]
    with torch.no_grad():
        losses = loss_fn(locs).detach().double()
    for b in range(B):
        # keep the policy's argmax unless a sampled placement scored higher
        if best_locs[b] is not None and best_g[b] > compute_reward(losses[b], locs[b], spec.alpha):
            locs[b] = best_locs[b]
    return policy, locs, SearchTrace(rewards, baselines, skipped)


# -- baselines ------------------------------------------------------------------------------


def place_fix(region: AttackRegion, k: int = 4) -> list[tuple[int, int]]:
    """Anchors nearest the ring's outer corners (TL, TR, BL, BR), then the next nearest."""
    if k > region.n:
        raise ValueError(f"k={k} exceeds the {region.n} grid anchors")
    ox0, oy0, ox1, oy1 = region.outer
    f = region.footprint
    corners = np.array([(ox0, oy0), (ox1 - f, oy0), (ox0, oy1 - f), (ox1 - f, oy1 - f)], dtype=float)
    d = np.linalg.norm(region.grid[None, :, :] - corners[:, None, :], axis=-1)  # (4, N)
    rank = np.argsort(d, axis=1, kind="stable")
    chosen: list[int] = []
    for level in range(region.n):
        for c in range(4):
            i = int(rank[c, level])
            if len(chosen) < k and i not in chosen:
                chosen.append(i)
    return region.locations(chosen)


def place_random(region: AttackRegion, k: int = 4, seed: int = 0) -> list[tuple[int, int]]:
    if k > region.n:
        raise ValueError(f"k={k} exceeds the {region.n} grid anchors")
    rng = np.random.default_rng(seed)
    return region.locations(rng.choice(region.n, size=k, replace=False))


def place_greedy(region: AttackRegion, cell_scores, k: int = 4) -> list[tuple[int, int]]:
    """Top-k cells by score (one original object per cell); ties go to the lowest index."""
    if k > region.n:
        raise ValueError(f"k={k} exceeds the {region.n} grid anchors")
    s = np.asarray(cell_scores, dtype=float)
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    return region.locations(order[:k])
