"""Command line umbrella: train | attack | detect | calibrate | eval | bench.

Exit codes: 0 for a clean run, 2 when an eval battery finished with partial
failures. TAINTRADAR_SEED overrides spec/CLI seeds.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import attacks, data
from .attacks import AttackConfig, generate_patch, masked_accessory_attack, region_misleading_attack
from .calibration import choose_params, fpr_surface, load_calibration, save_calibration
from .detector import DetectionConfig, detect
from .formats import load_image, write_ppm, write_rt1
from .harness import ExperimentSpec, bench, run_experiment, _dump_entry_artifacts
from .models import TrainConfig, build_model, load_model, predict_batch, save_model, train


def _seed(default: int) -> int:
    env = os.environ.get("TAINTRADAR_SEED")
    return int(env) if env is not None else default


def _parse_range(text: str) -> tuple:
    lo, _, hi = text.partition(":")
    return (int(lo), int(hi or lo))


def _load_benign(model, directory, limit):
    ds = data.load_dataset(directory)
    x, y = ds["test_images"], ds["test_labels"]
    _, pred = predict_batch(model, x)
    keep = np.nonzero(pred == y)[0][:limit]
    return x[keep]


def cmd_make_data(args) -> int:
    images, labels = data.make_toy_dataset(n=args.n, seed=_seed(args.seed))
    n_test = int(round(args.test_fraction * args.n))
    data.save_dataset(args.out, images[n_test:], labels[n_test:], images[:n_test], labels[:n_test])
    print(f"wrote {args.n - n_test} train / {n_test} test images to {args.out}")
    return 0


def cmd_train(args) -> int:
    arch = json.loads(Path(args.arch).read_text()) if args.arch else data.default_architecture()
    ds = data.load_dataset(args.data)
    model = build_model(arch, seed=_seed(args.seed))
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                      seed=_seed(args.seed), verbose=True)
    result = train(model, (ds["train_images"], ds["train_labels"]), cfg)
    save_model(model, args.out)
    print(f"held-out accuracy {result.accuracy:.4f}; model written to {args.out}")
    return 0


def cmd_attack(args) -> int:
    model = load_model(args.model)
    ds = data.load_dataset(args.data)
    x, y = ds["test_images"], ds["test_labels"]
    _, pred = predict_batch(model, x)
    seed = _seed(args.seed)

    cfg = AttackConfig(target_label=args.target, batch_size=args.batch_size,
                       size_fraction=args.size, size_mode=args.size_mode, shape=args.shape,
                       placement=args.placement, iterations=args.iterations,
                       step_size=args.step_size, stop_probability=args.stop_probability,
                       lam=args.lam, est_variant=args.est, seed=seed)
    if args.shape == "glasses":
        source = args.source_label
        if source is None:
            labels, counts = np.unique(y[pred == y], return_counts=True)
            source = int(labels[counts.argmax()])
        pool = np.nonzero((pred == y) & (y == source))[0][:args.n_victims]
        victims = x[pool]
        mask = data.glasses_band_mask(model.input_shape[1])
        result = masked_accessory_attack(model, victims, mask, args.target, cfg)
    else:
        pool = np.nonzero((pred == y) & (y != args.target))[0][:args.n_victims]
        victims = x[pool]
        if cfg.est_variant != "none" or cfg.lam > 0:
            result = region_misleading_attack(model, victims, cfg)
        else:
            result = generate_patch(model, victims, cfg)

    out = Path(args.out)
    _dump_entry_artifacts(out, result, limit=args.dump_limit)
    print(f"SR {result.success_rate:.4f} over {victims.shape[0]} victims; artifacts in {out}")
    return 0


def _detect_config(args, model) -> DetectionConfig:
    if args.calib:
        calib = load_calibration(args.calib)
        k, dr = calib.k, calib.delta_r
    else:
        k, dr = args.k, args.dr
    mean = model.mean_image if args.fill == "mean" else None
    if args.fill == "mean" and mean is None:
        raise SystemExit("fill=mean needs a model with a .mean.rt1 sidecar")
    return DetectionConfig(k=k, delta_r=dr, fill=args.fill, fill_seed=args.fill_seed,
                           mean_image=mean)


def cmd_detect(args) -> int:
    model = load_model(args.model)
    image = load_image(args.image)
    config = _detect_config(args, model)
    report = detect(image, model, config)
    payload = report.to_dict()
    payload.update({"k": config.k, "delta_r": config.delta_r, "fill": config.fill})
    if args.report:
        Path(args.report).write_text(json.dumps(payload, indent=2) + "\n")
    if args.dump_masks:
        directory = Path(args.dump_masks)
        directory.mkdir(parents=True, exist_ok=True)
        for name, mask in [("l_est", report.l_est), ("l_taintradar", report.l_taintradar)] + \
                [(f"l_negative{i:02d}", m) for i, m in enumerate(report.l_negative)]:
            write_rt1(directory / f"{name}.rt1", mask.astype(np.float32))
            write_ppm(directory / f"{name}.ppm", mask.astype(np.float32))
    print(json.dumps(payload))
    return 0


def cmd_calibrate(args) -> int:
    model = load_model(args.model)
    benign = _load_benign(model, args.benign, args.n_benign)
    mean = model.mean_image if args.fill == "mean" else None
    base = DetectionConfig(fill=args.fill, mean_image=mean)
    surface = fpr_surface(model, benign, _parse_range(args.k_range),
                          _parse_range(args.dr_range), base)
    result = choose_params(surface, args.target_fpr)
    save_calibration(args.out, result)
    print(f"k={result.k} delta_r={result.delta_r} achieved_fpr={result.achieved_fpr:.4f} "
          f"(k_max={result.k_max}); written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    spec = ExperimentSpec.load(args.spec)
    table, failures = run_experiment(spec)
    print(f"{len(table.rows)} metric rows written under {spec.out}")
    for name, message in failures:
        print(f"PARTIAL FAILURE {name}: {message}", file=sys.stderr)
    return 2 if failures else 0


def cmd_bench(args) -> int:
    model = load_model(args.model)
    images = None
    if args.data:
        images = data.load_dataset(args.data)["test_images"][:args.n]
    mean = model.mean_image if args.fill == "mean" else None
    config = DetectionConfig(k=args.k, delta_r=args.dr, fill=args.fill, mean_image=mean)
    k_sweep = range(args.k_sweep[0], args.k_sweep[1] + 1) if args.k_sweep else None
    summary = bench(model, config, n_images=args.n, images=images, k_sweep=k_sweep)
    print(json.dumps(summary, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taintradar",
                                     description="localized-adversarial-example detection lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate the toy dataset as RT1 files")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=6000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--test-fraction", type=float, default=1.0 / 6.0, dest="test_fraction")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train a toy CNN")
    p.add_argument("--arch", help="architecture JSON (defaults to the reference net)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="generate localized adversarial objects")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--size", type=float, default=0.3)
    p.add_argument("--size-mode", choices=["single", "multiple"], default="single")
    p.add_argument("--shape", choices=["square", "star", "lightning", "glasses"], default="square")
    p.add_argument("--placement", default="rb",
                   help="rb | random | fixed:y,x")
    p.add_argument("--lambda", type=float, default=0.0, dest="lam")
    p.add_argument("--est", choices=["none", "mislead", "minimize", "target"], default="none")
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--step-size", type=float, default=0.2)
    p.add_argument("--stop-probability", type=float, default=None)
    p.add_argument("--n-victims", type=int, default=40)
    p.add_argument("--source-label", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-limit", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("detect", help="run the detector on one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="RT1 or PPM image")
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--dr", type=int, default=2)
    p.add_argument("--calib", help="calibration file overriding --k/--dr")
    p.add_argument("--fill", choices=["noise", "mean"], default="mean")
    p.add_argument("--fill-seed", type=int, default=None)
    p.add_argument("--report", help="write the report JSON here")
    p.add_argument("--dump-masks", help="directory for RT1+PPM mask dumps")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("calibrate", help="choose (K, delta_r) from benign images")
    p.add_argument("--model", required=True)
    p.add_argument("--benign", required=True, help="dataset directory")
    p.add_argument("--target-fpr", type=float, default=0.06)
    p.add_argument("--k-range", default="2:16")
    p.add_argument("--dr-range", default="1:20")
    p.add_argument("--n-benign", type=int, default=200)
    p.add_argument("--fill", choices=["noise", "mean"], default="mean")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="run an experiment spec end to end")
    p.add_argument("--spec", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="timing summary of the detector")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset directory for real images")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--dr", type=int, default=2)
    p.add_argument("--fill", choices=["noise", "mean"], default="mean")
    p.add_argument("--k-sweep", type=_parse_range, default=None,
                   help="e.g. 4:12 to report per-K marginal cost")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
