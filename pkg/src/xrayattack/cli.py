"""Command-line entry point: fit, synth, train, attack, eval, defend, export-stl, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__

log = logging.getLogger("xrayattack")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_ASSERT = 0, 2, 3, 4


class MissingArtifact(Exception):
    def __init__(self, path):
        super().__init__(str(path))
        self.path = path


class AssertionFailed(Exception):
    pass


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(p)
    return p


def _run_dir(args) -> Path:
    d = Path(args.run_dir or args.out or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _snapshot(args, run_dir: Path) -> None:
    conf = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {"tool": "xrayattack", "version": __version__, "command": args.command, "args": conf}
    (run_dir / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def _summary(run_dir: Path, name: str, metrics: dict) -> None:
    """Machine-readable summary (JSON + one-row CSV) next to the log."""
    (run_dir / f"{name}_summary.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    keys = sorted(metrics)
    (run_dir / f"{name}_summary.csv").write_text(
        ",".join(keys) + "\n" + ",".join(str(metrics[k]) for k in keys) + "\n"
    )
    for k in keys:
        log.info("%s: %s", k, metrics[k])


def _check_assertions(args, value: float) -> None:
    if getattr(args, "assert_max_map", None) is not None and not value <= args.assert_max_map:
        raise AssertionFailed(f"mAP {value:.2f} > asserted maximum {args.assert_max_map}")
    if getattr(args, "assert_min_map", None) is not None and not value >= args.assert_min_map:
        raise AssertionFailed(f"mAP {value:.2f} < asserted minimum {args.assert_min_map}")


def _profile(args):
    from .pipeline import PROFILES

    return PROFILES["mini" if args.mini else "full"]


def _load_scenes(data: Path, split: str):
    from .pipeline import scenes_from
    from .scene import load_manifest

    manifest = load_manifest(_need(data / f"{split}.csv"))
    images, anns = manifest.load_all()
    return scenes_from(images, anns)


def _attack_config(args):
    from .attack import AttackConfig

    names = {f.name for f in fields(AttackConfig)}
    kw = {k: v for k, v in vars(args).items() if k in names and v is not None}
    kw.setdefault("footprint", _profile(args).footprint)
    if getattr(args, "num_objects", None) and args.num_objects != 4:
        kw["constant_area"] = True
    return AttackConfig(**kw)


# -- commands ------------------------------------------------------------------------------------


def cmd_fit(args) -> int:
    from .physics import InsufficientDataError, fit_converter, read_samples, save_material

    samples = read_samples(_need(args.samples))
    try:
        model = fit_converter(samples, args.material)
    except InsufficientDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    save_material(model, args.out)
    print("channel      a          b          q          R2")
    for name, law, r2 in zip(("hue", "saturation", "value"), model.channel_laws, model.fit_quality):
        r2s = "constant" if law.b == 0 else f"{r2:.5f}"
        print(f"{name:<10} {law.a:>10.5f} {law.b:>10.5f} {law.q:>10.5f}   {r2s}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .pipeline import synth_split
    from .scene import write_dataset

    prof = _profile(args)
    out = _run_dir(args)
    _snapshot(args, out)
    n_train = args.n_train if args.n_train is not None else prof.n_train
    n_test = args.n_test if args.n_test is not None else prof.n_test
    counts = {}
    if args.xad:
        from .detector import ToyDetector
        from .pipeline import severity_set

        det = ToyDetector.load(_need(args.detector))
        scenes = synth_split(prof, n_test, args.seed + 1)
        imgs, anns, sev = severity_set(scenes, det, _attack_config(args), seed=args.seed)
        write_dataset(out, "xad", imgs, anns, sev, prefix="xad")
        counts["xad"] = len(imgs)
    else:
        for split, n, s in (("train", n_train, args.seed), ("test", n_test, args.seed + 1)):
            scenes = synth_split(prof, n, s)
            write_dataset(out, split, [x.base_image for x in scenes], [x.annotations for x in scenes], prefix=split)
            counts[split] = n
    _summary(out, "synth", {f"n_{k}": v for k, v in counts.items()} | {"canvas": prof.canvas})
    return EXIT_OK


def cmd_train(args) -> int:
    from .detector import ToyDetector
    from .evalkit import evaluate

    prof = _profile(args)
    out = _run_dir(args)
    _snapshot(args, out)
    data = Path(args.data)
    scenes = _load_scenes(data, "train")
    X = np.stack([s.base_image for s in scenes])
    det = ToyDetector(image_size=X.shape[1], epochs=args.epochs or prof.epochs, seed=args.seed,
                      noise_std=args.noise_std)
    det.fit(X, [s.annotations for s in scenes])
    det.save(out / "detector.pt", provenance={"defense": "none", "seed": args.seed})
    with open(out / "training_curve.csv", "w") as fh:
        fh.write("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(det.history_)))
    metrics = {"train_mAP": evaluate(det, X, [s.annotations for s in scenes]).map_overall}
    if (data / "test.csv").exists():
        test = _load_scenes(data, "test")
        metrics["test_mAP"] = evaluate(det, np.stack([s.base_image for s in test]), [s.annotations for s in test]).map_overall
    _summary(out, "train", metrics)
    return EXIT_OK


def cmd_attack(args) -> int:
    from .attack import run_attack, save_run
    from .detector import ToyDetector
    from .evalkit import evaluate

    out = _run_dir(args)
    _snapshot(args, out)
    det = ToyDetector.load(_need(args.detector))
    scenes = _load_scenes(Path(args.data), args.split)
    cfg = _attack_config(args)
    run = run_attack(scenes, det, cfg, args.baseline, args.placement, seed=args.seed)
    save_run(run, out)
    clean = evaluate(det, np.stack([s.base_image for s in scenes]), [s.annotations for s in scenes])
    adv = evaluate(det, run.images, run.annotations, setting=args.baseline)
    _summary(out, "attack", {"clean_mAP": clean.map_overall, "attack_mAP": adv.map_overall,
                             "clean_FN": clean.fn_count, "attack_FN": adv.fn_count})
    _check_assertions(args, adv.map_overall)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .attack import load_run
    from .detector import ToyDetector
    from .evalkit import evaluate, perturb_eval, write_histograms, write_report
    from .scene import load_manifest

    out = _run_dir(args)
    _snapshot(args, out)
    det = ToyDetector.load(_need(args.detector))
    if args.attack:
        run = load_run(_need(args.attack))
        report = perturb_eval(run, det, args.perturb, seed=args.seed)
    else:
        manifest = load_manifest(_need(args.manifest))
        if args.severity is not None:
            manifest = manifest.with_severity(args.severity)
        images, anns = manifest.load_all()
        label = f"severity {args.severity}" if args.severity is not None else "clean"
        report = evaluate(det, images, anns, setting=label)
    write_report([report], out / "eval_report.csv")
    write_histograms(report, out / "eval_histograms.csv")
    _summary(out, "eval", {"mAP": report.map_overall, "FN": report.fn_count, "setting": report.setting}
             | {f"AP_{c}": v for c, v in report.per_class_ap.items()})
    _check_assertions(args, report.map_overall)
    return EXIT_OK


def cmd_defend(args) -> int:
    from .detector import ToyDetector
    from .evalkit import evaluate

    out = _run_dir(args)
    _snapshot(args, out)
    det = ToyDetector.load(_need(args.detector))
    scenes = _load_scenes(Path(args.data), "train")
    X = np.stack([s.base_image for s in scenes])
    y = [s.annotations for s in scenes]
    metrics = {}
    if args.method == "augment":
        from .defense import AugmentSpec, augment_dataset

        spec = AugmentSpec(footprint=_attack_config(args).object_footprint)
        Xa, ya, _ = augment_dataset(X, y, spec, seed=args.seed)
        hard = ToyDetector(**det.get_params()).fit(Xa, ya)
        hard.provenance_ = {"defense": "augmentation", "seed": args.seed}
    elif args.method in ("xadv", "pgd"):
        from .defense import adversarial_train

        hard = adversarial_train(det, scenes, _attack_config(args), epochs=args.epochs, seed=args.seed,
                                 subset=args.subset, method=args.method)
    else:
        from .attack import load_run
        from .defense import eval_adv_detector, train_adv_detector

        run = load_run(_need(args.attack))
        adv, clean = run.images, run.base_images
        half = len(adv) // 2
        model = train_adv_detector(clean[:half], adv[:half], seed=args.seed)
        acc, auc = eval_adv_detector(model, clean[half:], adv[half:])
        _summary(out, "defend", {"ACC": acc, "AUC": auc})
        return EXIT_OK
    hard.save(out / "detector.pt")
    if (Path(args.data) / "test.csv").exists():
        test = _load_scenes(Path(args.data), "test")
        Xt, yt = np.stack([s.base_image for s in test]), [s.annotations for s in test]
        metrics["clean_mAP_vanilla"] = evaluate(det, Xt, yt).map_overall
        metrics["clean_mAP_defended"] = evaluate(hard, Xt, yt).map_overall
    _summary(out, "defend", metrics | {"method": args.method})
    return EXIT_OK


def cmd_export_stl(args) -> int:
    from .geometry import export_stl, import_stl

    src = _need(args.attack)
    out = _run_dir(args)
    meshes = sorted((src / "meshes").glob("*.obj")) if src.is_dir() else [src]
    if not meshes:
        raise MissingArtifact(src / "meshes")
    from .geometry import load_mesh

    n = 0
    for p in meshes:
        mesh = load_mesh(p)
        target = out / (p.stem + ".stl")
        export_stl(mesh, target)
        back = import_stl(target)
        back.check_closed()
        n += 1
    _summary(out, "export", {"n_meshes": n})
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for d in args.runs:
        for p in sorted(_need(d).glob("*_summary.json")):
            rows.append({"run": str(d), "summary": p.stem} | json.loads(p.read_text()))
    keys = list(dict.fromkeys(k for r in rows for k in r))
    lines = [",".join(keys)] + [",".join(str(r.get(k, "")) for k in keys) for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------------


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run-dir", default=None, help="run directory (defaults to --out)")
    p.add_argument("--config", default=None, help="JSON file of defaults; command-line flags win")
    p.add_argument("--mini", action="store_true", help="160x160 canvas, 200 train / 8 test scenes")
    p.add_argument("--workers", type=int, default=1, help="torch intra-op threads")
    p.add_argument("-v", "--verbose", action="store_true")


def _attack_flags(p):
    p.add_argument("--baseline", choices=("xadv", "vanilla", "meshadv", "advpatch"), default="xadv")
    p.add_argument("--placement", choices=("reinforce", "fix", "random", "greedy"), default=None)
    p.add_argument("--mode", choices=("untargeted", "targeted"), default=None)
    p.add_argument("--material", dest="material_id", choices=("iron", "aluminum", "plastic"), default=None)
    p.add_argument("--num-objects", type=int, choices=(1, 2, 4, 8), default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--footprint", type=int, default=None, help="object footprint in px (profile default)")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--batch-share", type=int, default=None)
    p.add_argument("--reinforce-iters", type=int, default=None)
    p.add_argument("--assert-max-map", type=float, default=None)
    p.add_argument("--assert-min-map", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xrayattack", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a material converter from calibration samples")
    p.add_argument("--samples", required=True)
    p.add_argument("--material", default="custom")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("synth", help="generate synthetic train/test scenes or an XAD-style severity set")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--xad", action="store_true", help="severity 0..4 test set (needs --detector)")
    p.add_argument("--detector", default=None)
    _attack_flags(p)
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the toy detector")
    p.add_argument("--data", required=True, help="dataset root containing train.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--noise-std", type=float, default=0.0)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack a detector on a dataset split")
    p.add_argument("--detector", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    _attack_flags(p)
    _common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="evaluate a detector on a manifest or a persisted attack")
    p.add_argument("--detector", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--attack", help="attack run directory")
    g.add_argument("--manifest", help="dataset manifest (CSV)")
    p.add_argument("--perturb", choices=("best", "change", "random"), default="best")
    p.add_argument("--severity", type=int, choices=range(5), default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--assert-max-map", type=float, default=None)
    p.add_argument("--assert-min-map", type=float, default=None)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("defend", help="augmentation, adversarial training or adversarial-image detection")
    p.add_argument("--method", choices=("augment", "xadv", "pgd", "classifier"), required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--attack", default=None, help="attack run for --method classifier")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--subset", type=int, default=100)
    _attack_flags(p)
    _common(p)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("export-stl", help="export attack meshes as binary STL")
    p.add_argument("--attack", required=True, help="attack run directory or a single OBJ")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_export_stl)

    p = sub.add_parser("report", help="collect run summaries into one table")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", default=None)
    _common(p)
    p.set_defaults(func=cmd_report)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags; values from ``--config`` override defaults but not explicit flags."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        conf = json.loads(_need(args.config).read_text())
        conf = conf.get("args", conf)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: v for k, v in conf.items() if k in known and k not in ("command", "config")})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except MissingArtifact as exc:
        print(f"error: missing artifact {exc.path}", file=sys.stderr)
        return EXIT_MISSING
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(max(1, args.workers))
    os.environ.setdefault("XRAYATTACK_SEED", str(args.seed))
    try:
        return args.func(args)
    except MissingArtifact as exc:
        print(f"error: missing artifact {exc.path}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: missing artifact {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except AssertionFailed as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
