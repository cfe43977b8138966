"""Regenerate the bundled calibration samples, fitted material models and sphere mesh.

The sample files are noisy synthetic analogues of scanner calibration plates:
iron at 8 thicknesses (0.2-8 mm), aluminum at 22 (1-60 mm), plastic at 6 (60-120 mm).
"""

from pathlib import Path

import numpy as np

from xrayattack.geometry import cube_sphere, save_mesh
from xrayattack.physics import CalibrationSample, fit_converter, save_material, write_samples

DATA = Path(__file__).resolve().parents[1] / "src" / "xrayattack" / "data"

# (hue, (a, b, q) saturation, (a, b, q) value, depths, noise std)
TRUTH = {
    "iron": (0.58, (-0.85, 0.35, 0.85), (0.78, 0.30, 0.21),
             [0.2, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0], 0.012),
    "aluminum": (0.30, (-0.70, 0.05, 0.70), (0.60, 0.04, 0.40),
                 list(np.round(np.linspace(1.0, 60.0, 22), 2)), 0.010),
    "plastic": (0.08, (-0.75, 0.03, 0.80), (0.35, 0.02, 0.65),
                [60.0, 72.0, 84.0, 96.0, 108.0, 120.0], 0.003),
}


def law(p, d):
    a, b, q = p
    return a * np.exp(-b * d) + q


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20230101)
    for name, (hue, sat, val, depths, sigma) in TRUTH.items():
        d = np.asarray(depths, dtype=float)
        h = hue + rng.normal(0, 0.002, len(d))
        s = law(sat, d) + rng.normal(0, sigma, len(d))
        v = law(val, d) + rng.normal(0, sigma, len(d))
        samples = [
            CalibrationSample(float(di), tuple(float(np.clip(c, 0, 1)) for c in (hi, si, vi)))
            for di, hi, si, vi in zip(d, h, s, v)
        ]
        write_samples(samples, DATA / f"{name}_samples.csv")
        from xrayattack.physics import read_samples

        model = fit_converter(read_samples(DATA / f"{name}_samples.csv"), name)
        save_material(model, DATA / f"{name}.json")
        print(name, model.fit_quality, model.channel_laws)
    save_mesh(cube_sphere(), DATA / "sphere26.obj")


if __name__ == "__main__":
    main()
