"""X-ray attenuation and the differentiable depth-to-color converter.

Each material is described by three exponential channel laws
``g(d) = a * exp(-b * d) + q`` evaluated in HSV space, where ``d`` is the
traversed thickness in millimetres. Hue is held constant per material.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

CHANNELS = ("hue", "saturation", "value")
BUILTIN_MATERIALS = ("iron", "aluminum", "plastic")
CONSTANT = "constant"


class InsufficientDataError(ValueError):
    pass


class ExtrapolationWarning(UserWarning):
    pass


def attenuate(intensity_in, mu, thickness):
    """Beer-Lambert law ``I = I0 * exp(-mu * x)``."""
    i0, mu_, x = (np.asarray(v, dtype=float) for v in (intensity_in, mu, thickness))
    if (i0 < 0).any() or (mu_ < 0).any() or (x < 0).any():
        raise ValueError("attenuate: intensity, mu and thickness must be non-negative")
    out = i0 * np.exp(-mu_ * x)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ChannelLaw:
    a: float
    b: float
    q: float

    @property
    def is_constant(self) -> bool:
        return self.b == 0.0

    def __call__(self, depth):
        if isinstance(depth, torch.Tensor):
            if self.is_constant:
                return torch.full_like(depth, self.a + self.q)
            return self.a * torch.exp(-self.b * depth) + self.q
        d = np.asarray(depth, dtype=float)
        if self.is_constant:
            return np.full_like(d, self.a + self.q)
        return self.a * np.exp(-self.b * d) + self.q

    def derivative(self, depth):
        d = np.asarray(depth, dtype=float)
        return -self.a * self.b * np.exp(-self.b * d)


@dataclass(frozen=True)
class MaterialModel:
    material_id: str
    channel_laws: tuple[ChannelLaw, ChannelLaw, ChannelLaw]
    depth_range: tuple[float, float]
    fit_quality: tuple = (CONSTANT, 1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.depth_range
        if lo < 0 or not lo < hi:
            raise ValueError(f"invalid depth_range {self.depth_range}")
        if len(self.channel_laws) != 3:
            raise ValueError("MaterialModel needs exactly three channel laws")

    @property
    def hue(self) -> float:
        law = self.channel_laws[0]
        return float(np.clip(law.a + law.q, 0.0, 1.0))

    def zero_color(self) -> np.ndarray:
        """Converter-space color of an empty (zero-thickness) pixel."""
        return np.clip([law.a + law.q for law in self.channel_laws], 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "material_id": self.material_id,
            "depth_range": [float(v) for v in self.depth_range],
            "channels": {
                name: {"a": law.a, "b": law.b, "q": law.q, "r2": quality}
                for name, law, quality in zip(CHANNELS, self.channel_laws, self.fit_quality)
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MaterialModel":
        laws, quality = [], []
        for name in CHANNELS:
            ch = doc["channels"][name]
            laws.append(ChannelLaw(float(ch["a"]), float(ch["b"]), float(ch["q"])))
            r2 = ch.get("r2", 1.0)
            quality.append(r2 if r2 == CONSTANT else float(r2))
        return cls(doc["material_id"], tuple(laws), tuple(doc["depth_range"]), tuple(quality))


def save_material(model: MaterialModel, path) -> None:
    text = json.dumps(model.to_dict(), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def load_material(path) -> MaterialModel:
    return MaterialModel.from_dict(json.loads(Path(path).read_text()))


def extrapolated(model: MaterialModel, depth) -> bool:
    """True if any non-empty depth falls outside the calibrated range."""
    if isinstance(depth, torch.Tensor):
        depth = depth.detach().cpu().numpy()
    d = np.asarray(depth)
    occupied = d[d > 0]
    lo, hi = model.depth_range
    return bool(occupied.size and ((occupied < lo).any() or (occupied > hi).any()))


def eval_material(model: MaterialModel, depth_map, warn: bool = True):
    """Evaluate the converter on a depth map; returns (..., 3) converter-space colors.

    Torch inputs keep the autograd graph; numpy inputs return numpy.
    """
    if warn and extrapolated(model, depth_map):
        warnings.warn(
            f"{model.material_id}: depths outside calibrated range {model.depth_range}",
            ExtrapolationWarning,
            stacklevel=2,
        )
    if isinstance(depth_map, torch.Tensor):
        chans = [law(depth_map).clamp(0.0, 1.0) for law in model.channel_laws]
        return torch.stack(chans, dim=-1)
    d = np.asarray(depth_map, dtype=float)
    return np.stack([np.clip(law(d), 0.0, 1.0) for law in model.channel_laws], axis=-1)


# -- color space ----------------------------------------------------------------


def hsv_to_rgb(hsv: torch.Tensor) -> torch.Tensor:
    """Differentiable HSV -> RGB on the last axis; hue in [0, 1)."""
    h, s, v = hsv.unbind(-1)
    out = []
    for n in (5.0, 3.0, 1.0):
        k = torch.remainder(n + 6.0 * h, 6.0)
        w = torch.clamp(torch.minimum(k, 4.0 - k), 0.0, 1.0)
        out.append(v - v * s * w)
    return torch.stack(out, dim=-1)


def rgb_to_hsv(rgb: torch.Tensor) -> torch.Tensor:
    r, g, b = rgb.unbind(-1)
    cmax, argmax = rgb.max(dim=-1)
    cmin = rgb.min(dim=-1).values
    delta = cmax - cmin
    safe = torch.where(delta > 0, delta, torch.ones_like(delta))
    hue = torch.where(
        argmax == 0,
        torch.remainder((g - b) / safe, 6.0),
        torch.where(argmax == 1, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    hue = torch.where(delta > 0, hue / 6.0, torch.zeros_like(hue))
    sat = torch.where(cmax > 0, delta / torch.where(cmax > 0, cmax, torch.ones_like(cmax)), torch.zeros_like(cmax))
    return torch.stack([hue, sat, cmax], dim=-1)


def color_space_convert(image, direction: str):
    """Convert between display RGB and converter HSV ('to_converter_space' / 'to_display_space')."""
    is_numpy = not isinstance(image, torch.Tensor)
    x = torch.as_tensor(np.asarray(image, dtype=np.float64)) if is_numpy else image
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ValueError("color_space_convert: channels must lie in [0, 1]")
    if direction == "to_converter_space":
        out = rgb_to_hsv(x)
    elif direction == "to_display_space":
        out = hsv_to_rgb(x)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return out.numpy() if is_numpy else out


def transmittance(model: MaterialModel, depth, warn: bool = True):
    """Per-channel multiplicative factor applied to the base image.

    The converter color is mapped to display RGB and normalized by the color of
    an empty pixel, so zero thickness multiplies by exactly one.
    """
    as_numpy = not isinstance(depth, torch.Tensor)
    d = torch.as_tensor(np.asarray(depth, dtype=np.float64)) if as_numpy else depth
    rgb = hsv_to_rgb(eval_material(model, d, warn=warn))
    # same arithmetic path as the evaluation so that d == 0 divides to exactly 1
    zero = hsv_to_rgb(eval_material(model, torch.zeros((), dtype=d.dtype), warn=False))
    factor = (rgb / zero.clamp_min(1e-6)).clamp(0.0, 1.0)
    return factor.numpy() if as_numpy else factor


# -- regression -----------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationSample:
    depth: float
    color: tuple[float, float, float]

    def __post_init__(self):
        if not math.isfinite(self.depth) or self.depth < 0:
            raise ValueError(f"invalid calibration depth {self.depth}")
        if len(self.color) != 3 or any(not 0.0 <= c <= 1.0 for c in self.color):
            raise ValueError(f"calibration color {self.color} outside [0, 1]^3")


@dataclass
class FitDiagnostics:
    converged: bool
    iterations: int
    r2: float
    history: list = field(default_factory=list)


def _log_linear_init(d: np.ndarray, y: np.ndarray) -> np.ndarray:
    order = np.argsort(d)
    d, y = d[order], y[order]
    sign = 1.0 if y[0] >= y[-1] else -1.0
    spread = max(np.ptp(y), 1e-9)
    q0 = y[-1] - sign * 0.05 * spread
    resid = sign * (y - q0)
    keep = resid > 1e-12
    if keep.sum() < 2:
        return np.array([y[0] - q0, 0.1, q0])
    slope, intercept = np.polyfit(d[keep], np.log(resid[keep]), 1)
    return np.array([sign * math.exp(intercept), max(-slope, 1e-6), q0])


def _model(p, d):
    a, b, q = p
    return a * np.exp(-b * d) + q


def _jacobian(p, d):
    a, b, _ = p
    e = np.exp(-b * d)
    return np.stack([e, -a * d * e, np.ones_like(d)], axis=1)


def fit_exponential(depths, values, max_iter: int = 200, tol: float = 1e-14):
    """Levenberg-Marquardt fit of ``a*exp(-b*d)+q``; returns (params, diagnostics)."""
    d = np.asarray(depths, dtype=float)
    y = np.asarray(values, dtype=float)
    p = _log_linear_init(d, y)
    r = y - _model(p, d)
    cost = float(r @ r)
    best_p, best_cost = p.copy(), cost
    lam = 1e-3
    converged = False
    it = 0
    history = [cost]
    for it in range(1, max_iter + 1):
        J = _jacobian(p, d)
        A = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(40):
            H = A + lam * np.diag(np.diag(A) + 1e-12)
            try:
                delta = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            p_new = p + delta
            r_new = y - _model(p_new, d)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            # no damped step reduces the cost: numerically at a minimum
            converged = True
            break
        gain = cost - cost_new
        p, r, cost = p_new, r_new, cost_new
        lam = max(lam / 10.0, 1e-12)
        history.append(cost)
        if cost < best_cost:
            best_p, best_cost = p.copy(), cost
        if cost <= tol or gain <= 1e-15 * max(cost, 1e-300) or np.abs(delta).max() < 1e-13:
            converged = True
            break
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - best_cost / ss_tot if ss_tot > 0 else 1.0
    return best_p, FitDiagnostics(bool(converged), it, r2, history)


class ConverterRegressor(BaseEstimator, RegressorMixin):
    """Fits one exponential law per HSV channel from (depth, color) samples.

    Channels whose sample variance is below ``constant_tol`` are fitted as
    constants (b = 0).
    """

    def __init__(self, material_id: str = "custom", constant_tol: float = 1e-4, max_iter: int = 200):
        self.material_id = material_id
        self.constant_tol = constant_tol
        self.max_iter = max_iter

    def fit(self, X, y):
        d = np.asarray(X, dtype=float).reshape(-1)
        colors = np.asarray(y, dtype=float).reshape(len(d), 3)
        if len(d) < 4 or len(np.unique(d)) < 3:
            raise InsufficientDataError("insufficient distinct depths: need >= 4 samples at >= 3 depths")
        if not np.isfinite(d).all() or (d < 0).any():
            raise ValueError("depths must be finite and non-negative")
        laws, quality, diags = [], [], []
        for c in range(3):
            vals = colors[:, c]
            if vals.var() < self.constant_tol:
                laws.append(ChannelLaw(float(vals.mean()), 0.0, 0.0))
                quality.append(CONSTANT)
                diags.append(None)
                continue
            p, diag = fit_exponential(d, vals, max_iter=self.max_iter)
            if not diag.converged:
                warnings.warn(f"channel {CHANNELS[c]} did not converge (R2={diag.r2:.4f})", RuntimeWarning)
            laws.append(ChannelLaw(float(p[0]), float(p[1]), float(p[2])))
            quality.append(float(diag.r2))
            diags.append(diag)
        self.model_ = MaterialModel(
            self.material_id, tuple(laws), (float(d.min()), float(d.max())), tuple(quality)
        )
        self.diagnostics_ = diags
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return eval_material(self.model_, np.asarray(X, dtype=float).reshape(-1), warn=False)

    def score(self, X, y, sample_weight=None):
        # mean R^2 over the non-constant channels
        check_is_fitted(self, "model_")
        pred = self.predict(X)
        y = np.asarray(y, dtype=float)
        scores = []
        for c, qual in enumerate(self.model_.fit_quality):
            if qual == CONSTANT:
                continue
            ss_tot = ((y[:, c] - y[:, c].mean()) ** 2).sum()
            scores.append(1.0 - ((y[:, c] - pred[:, c]) ** 2).sum() / ss_tot)
        return float(np.mean(scores)) if scores else 1.0


def fit_converter(samples: Sequence[CalibrationSample], material_id: str = "custom", **kwargs) -> MaterialModel:
    depths = np.array([s.depth for s in samples], dtype=float)
    colors = np.array([s.color for s in samples], dtype=float).reshape(-1, 3)
    reg = ConverterRegressor(material_id=material_id, **kwargs).fit(depths, colors)
    return reg.model_


def read_samples(path) -> list[CalibrationSample]:
    """Read ``depth_mm,c1,c2,c3`` records (one header line)."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            try:
                depth, c1, c2, c3 = (float(v) for v in row)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed sample {row!r}") from exc
            out.append(CalibrationSample(depth, (c1, c2, c3)))
    return out


def write_samples(samples: Sequence[CalibrationSample], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("depth_mm,hue,saturation,value\n")
        for s in samples:
            fh.write(f"{s.depth:.4f},{s.color[0]:.6f},{s.color[1]:.6f},{s.color[2]:.6f}\n")


def _data_path(name: str) -> Path:
    return Path(str(resources.files("xrayattack") / "data" / name))


def bundled_samples_path(material: str) -> Path:
    return _data_path(f"{material}_samples.csv")


_MATERIAL_CACHE: dict[str, MaterialModel] = {}


def builtin_material(material: str) -> MaterialModel:
    """Calibrated model for a bundled material, fitted from its sample file."""
    if material not in BUILTIN_MATERIALS:
        raise KeyError(f"unknown material {material!r}; expected one of {BUILTIN_MATERIALS}")
    if material not in _MATERIAL_CACHE:
        _MATERIAL_CACHE[material] = load_material(_data_path(f"{material}.json"))
    return _MATERIAL_CACHE[material]
