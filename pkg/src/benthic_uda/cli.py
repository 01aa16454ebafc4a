"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from .data import (
    BASE_CROP,
    SyntheticShiftSpec,
    check_same_classes,
    compute_scaled_crop_size,
    generate_synthetic_domain_pair,
    load_manifest,
)
from .errors import ConfigError, ManifestError
from .training import (
    TrainConfig,
    evaluate,
    export_features,
    load_trained_model,
    prepare_domain_data,
    run_ablation_grid,
    run_experiment,
)

log = logging.getLogger("benthic_uda")

EXPERIMENT_KEYS = {"source", "target", "out", "train"}
# AE2000f against Tuna-sand: the conventional crop (32) differs from the formula (30)
SHR_NOTE = (0.8, 6.0, 32)


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


@dataclasses.dataclass
class ExperimentConfig:
    source: Path
    target: Path
    out: Path
    train: TrainConfig


def load_experiment_config(path, seed=None, out=None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    unknown = set(raw) - EXPERIMENT_KEYS
    if unknown:
        raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
    for key in ("source", "target"):
        if key not in raw:
            raise UsageError(f"{path}: missing required key {key!r}")
    train = dict(raw.get("train") or {})
    if seed is not None:
        train["seed"] = seed
    try:
        cfg = TrainConfig.from_dict(train)
    except (ConfigError, TypeError) as e:
        raise UsageError(f"{path}: {e}") from e

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else path.parent / p

    out_dir = Path(out) if out is not None else resolve(raw.get("out", "runs"))
    return ExperimentConfig(resolve(raw["source"]), resolve(raw["target"]), out_dir, cfg)


def _load_pair(exp: ExperimentConfig):
    try:
        source = load_manifest(exp.source)
        target = load_manifest(exp.target)
        check_same_classes(source, target)
    except (OSError, ManifestError, ConfigError) as e:
        raise UsageError(str(e)) from e
    return source, target


def cmd_gen_synthetic(args) -> int:
    try:
        spec = SyntheticShiftSpec(
            num_classes=args.classes,
            samples_per_class=args.per_class,
            resolution_ratio=args.ratio,
            blur_sigma=args.blur,
            color_shift=tuple(args.color_shift),
            seed=args.seed,
            patch_size=args.patch_size,
        ).validate()
    except ConfigError as e:
        raise UsageError(str(e)) from e
    source, target = generate_synthetic_domain_pair(spec, args.out)
    for m in (source, target):
        print(f"{m.role}: {args.out}/{m.role}/manifest.txt")
        for name, n in m.class_counts().items():
            print(f"  {name}: {n}")
    return 0


def cmd_compute_crop(args) -> int:
    try:
        crop = compute_scaled_crop_size(args.coarse, args.fine, args.base)
    except ConfigError as e:
        raise UsageError(str(e)) from e
    print(crop)
    print(f"footprint: coarse {crop * args.coarse:.2f} mm, fine {args.base * args.fine:.2f} mm")
    fine, coarse, conventional = SHR_NOTE
    if (args.fine, args.coarse, args.base) == (fine, coarse, BASE_CROP):
        print(f"note: the AE2000f/Tuna-sand pair conventionally uses {conventional}; "
              f"add 'crop-override <survey> {conventional}' to the manifest to use it")
    return 0


def cmd_train(args) -> int:
    exp = load_experiment_config(args.config, args.seed, args.out)
    source, target = _load_pair(exp)
    cell_dir = exp.out / exp.train.cell_name
    result = run_experiment(exp.train, source, target, out_dir=cell_dir)
    print(f"{exp.train.cell_name}: mean target accuracy {100 * result.final_target_accuracy:.2f}% "
          f"over {len(result.replicate_accuracies)} replicate(s)")
    print(f"results in {cell_dir}")
    return 0


def cmd_grid(args) -> int:
    exp = load_experiment_config(args.config, args.seed, args.out)
    source, target = _load_pair(exp)
    _, report = run_ablation_grid(exp.train, source, target, out_dir=exp.out, jobs=args.jobs)
    print(report, end="")
    return 0


def _load_for_eval(args):
    try:
        trained = load_trained_model(args.checkpoint)
        manifest = load_manifest(args.manifest)
    except (OSError, ValueError) as e:
        raise UsageError(str(e)) from e
    if manifest.classes != trained.classes:
        only_m = [c for c in manifest.classes if c not in trained.classes]
        only_c = [c for c in trained.classes if c not in manifest.classes]
        raise UsageError(f"class sets differ: manifest-only {only_m}, checkpoint-only {only_c}, "
                         f"manifest order {manifest.classes}, checkpoint order {trained.classes}")
    data = prepare_domain_data(manifest, trained.crop_sizes_for(manifest), trained.config.input_size)
    return trained, manifest, data


def cmd_eval(args) -> int:
    trained, manifest, data = _load_for_eval(args)
    result = evaluate(trained.model, data, manifest.num_classes, rule=trained.config.prediction_rule)
    text = json.dumps(result.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_export_features(args) -> int:
    trained, manifest, data = _load_for_eval(args)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    feats = export_features(trained.model, data, manifest.classes, args.output)
    print(f"wrote {feats.shape[0]} rows x {feats.shape[1]} features to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="benthic-uda",
                                     description="Domain adaptation toolkit for point-annotation classifiers")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic source/target survey pair")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--ratio", type=float, default=2.5, help="target mm/px divided by source mm/px")
    p.add_argument("--blur", type=float, default=1.0)
    p.add_argument("--color-shift", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("R", "G", "B"))
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default="synthetic")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("compute-crop", help="crop size for the coarser of two resolutions")
    p.add_argument("--fine", type=float, required=True, help="finer resolution, mm/pixel")
    p.add_argument("--coarse", type=float, required=True, help="coarser resolution, mm/pixel")
    p.add_argument("--base", type=int, default=BASE_CROP)
    p.set_defaults(func=cmd_compute_crop)

    for name, func, helptext in (("train", cmd_train, "train one ablation cell"),
                                 ("grid", cmd_grid, "run the full ablation grid")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="YAML experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (overrides the config)")
        if name == "grid":
            p.add_argument("--jobs", type=int, default=1, help="cells run in parallel processes")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--out", help="also write metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-features", help="write pooled features for external embedding")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("output")
    p.set_defaults(func=cmd_export_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures carry the module's diagnostic
        log.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
