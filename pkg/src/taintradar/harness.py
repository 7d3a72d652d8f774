"""Experiment orchestration: attack batteries, metrics, voting, benchmarks.

A spec file (JSON) names the model, dataset, attack battery, detection
settings, and seed; ``run_experiment`` produces a metrics CSV, per-image
report JSON lines, ROC-style ranking-change data, and mask dumps. All
artifacts are reproducible from (spec, seed) under dataset-mean fill.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks
from .attacks import AttackConfig, generate_patch, region_misleading_attack
from .calibration import choose_params, fpr_surface, load_calibration, save_calibration
from .data import load_dataset
from .detector import DetectionConfig, detect, iou  # noqa: F401  (iou is part of this surface)
from .formats import write_ppm, write_rt1
from .models import Model, load_model, predict_batch

CSV_COLUMNS = ["setting", "target", "size", "placement", "batch_size", "shape",
               "size_mode", "lambda", "est", "n_victims", "sr", "tpr", "fpr",
               "mean_iou", "post_defense_sr"]


@dataclass
class ExperimentSpec:
    model: str
    data: str
    out: str
    seed: int = 0
    n_benign: int = 200
    battery: list = field(default_factory=list)
    detection: dict = field(default_factory=dict)   # {k, delta_r} | {calibration: path}
    fill: str = "mean"
    target_fpr: float = 0.06

    @staticmethod
    def load(path) -> "ExperimentSpec":
        raw = json.loads(Path(path).read_text())
        spec = ExperimentSpec(**raw)
        base = Path(path).parent
        for name in ("model", "data", "out"):
            value = Path(getattr(spec, name))
            if not value.is_absolute():
                setattr(spec, name, str(base / value))
        for name in ("model", "data"):
            if not Path(getattr(spec, name)).exists():
                raise FileNotFoundError(f"experiment spec references missing path: {getattr(spec, name)}")
        env_seed = os.environ.get("TAINTRADAR_SEED")
        if env_seed is not None:
            spec.seed = int(env_seed)
        return spec


@dataclass
class MetricsTable:
    rows: list = field(default_factory=list)

    def add(self, **kwargs) -> dict:
        row = {col: kwargs.get(col, "") for col in CSV_COLUMNS}
        if row["sr"] != "" and row["tpr"] != "":
            row["post_defense_sr"] = row["sr"] * (1.0 - row["tpr"])
        self.rows.append(row)
        return row

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)


def frame_vote(reports, window: int = 5) -> list:
    """Sliding strict-majority vote over per-frame verdicts.

    Accepts DetectionReports or verdict strings; windows shorter than the
    stream emit one vote per full window, a short stream emits one vote.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    verdicts = [r.verdict if hasattr(r, "verdict") else str(r) for r in reports]
    flags = [v == "adversarial" for v in verdicts]
    if not flags:
        return []
    if len(flags) < window:
        spans = [(0, len(flags))]
    else:
        spans = [(i, i + window) for i in range(len(flags) - window + 1)]
    out = []
    for a, b in spans:
        count = sum(flags[a:b])
        out.append("adversarial" if 2 * count > (b - a) else "benign")
    return out


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------

def _detection_config(spec: ExperimentSpec, model: Model, benign) -> tuple:
    det = dict(spec.detection)
    mean_image = model.mean_image if spec.fill == "mean" else None
    base = DetectionConfig(temperature=det.get("temperature", 2.0), fill=spec.fill,
                           mean_image=mean_image)
    if "calibration" in det:
        calib = load_calibration(det["calibration"])
        k, dr = calib.k, calib.delta_r
    elif "k" in det and "delta_r" in det:
        k, dr = int(det["k"]), int(det["delta_r"])
    else:
        surface = fpr_surface(model, benign, det.get("k_range", (2, 16)),
                              det.get("dr_range", (1, 20)), base)
        calib = choose_params(surface, spec.target_fpr)
        k, dr = calib.k, calib.delta_r
    return dataclasses.replace(base, k=k, delta_r=dr)


def _battery_config(entry: dict, seed: int) -> AttackConfig:
    return AttackConfig(
        target_label=int(entry.get("target", 0)),
        batch_size=int(entry.get("batch_size", 1)),
        size_fraction=float(entry.get("size", 0.3)),
        size_mode=entry.get("size_mode", "single"),
        shape=entry.get("shape", "square"),
        placement=entry.get("placement", "right-bottom"),
        iterations=int(entry.get("iterations", 300)),
        step_size=float(entry.get("step_size", 0.2)),
        stop_probability=entry.get("stop_probability"),
        lam=float(entry.get("lambda", 0.0)),
        est_variant=entry.get("est", "none"),
        est_norm=int(entry.get("est_norm", 2)),
        seed=seed)


def _entry_name(entry: dict, index: int) -> str:
    return entry.get("name", f"entry{index:02d}")


def run_experiment(spec: ExperimentSpec):
    """Execute the battery; returns (MetricsTable, failures list)."""
    out_dir = Path(spec.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(spec.model)
    data = load_dataset(spec.data)
    rng = np.random.default_rng(spec.seed)

    test_x, test_y = data["test_images"], data["test_labels"]
    _, pred = predict_batch(model, test_x)
    correct = np.nonzero(pred == test_y)[0]
    benign_idx = correct[:spec.n_benign]
    benign = test_x[benign_idx]

    config = _detection_config(spec, model, benign)
    benign_changes = np.array([detect(x, model, config).ranking_change for x in benign])
    fpr = float((benign_changes >= config.delta_r).mean())

    table = MetricsTable()
    table.add(setting="benign", n_victims=len(benign), fpr=fpr)
    roc_rows = [("benign", int(i), int(ch)) for i, ch in zip(benign_idx, benign_changes)]
    failures = []
    reports_path = out_dir / "reports.jsonl"
    report_lines = []

    for ei, entry in enumerate(spec.battery):
        name = _entry_name(entry, ei)
        try:
            acfg = _battery_config(entry, seed=spec.seed + 101 * (ei + 1))
            n_victims = int(entry.get("n_victims", 40))
            pool = correct[test_y[correct] != acfg.target_label]
            victims = test_x[pool[spec.n_benign:spec.n_benign + n_victims]] \
                if pool.size >= spec.n_benign + n_victims else test_x[pool[:n_victims]]
            if acfg.est_variant != "none" or acfg.lam > 0:
                result = region_misleading_attack(model, victims, acfg)
            else:
                result = generate_patch(model, victims, acfg)

            hits = np.nonzero(result.success)[0]
            detected = 0
            ious = []
            for i in hits:
                report = detect(result.victims[i], model, config)
                detected += report.verdict == "adversarial"
                ious.append(iou(report.l_est, result.regions[i]))
                roc_rows.append((name, int(i), int(report.ranking_change)))
                report_lines.append(json.dumps({"setting": name, "victim": int(i),
                                                **report.to_dict()}))
            tpr = detected / hits.size if hits.size else 0.0
            mean_iou = (float(np.mean(result.iou_values)) if result.iou_values is not None
                        else (float(np.mean(ious)) if ious else 0.0))
            table.add(setting=name, target=result.target_label, size=acfg.size_fraction,
                      placement=str(acfg.placement), batch_size=acfg.batch_size,
                      shape=acfg.shape, size_mode=acfg.size_mode,
                      **{"lambda": acfg.lam, "est": acfg.est_variant},
                      n_victims=len(victims), sr=result.success_rate, tpr=tpr,
                      fpr=fpr, mean_iou=mean_iou)
            _dump_entry_artifacts(out_dir / name, result)
        except Exception as exc:  # a failed entry must not sink the battery
            failures.append((name, f"{type(exc).__name__}: {exc}"))
            table.add(setting=f"{name}(FAILED)")

    table.write_csv(out_dir / "metrics.csv")
    reports_path.write_text("\n".join(report_lines) + ("\n" if report_lines else ""))
    with open(out_dir / "ranking_changes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "image", "ranking_change"])
        writer.writerows(roc_rows)
    return table, failures


def _dump_entry_artifacts(directory: Path, result, limit: int = 4) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_rt1(directory / "patch.rt1", result.patch.pattern)
    write_ppm(directory / "patch.ppm", result.patch.pattern)
    write_rt1(directory / "victims.rt1", result.victims)
    for i in range(min(limit, result.victims.shape[0])):
        write_ppm(directory / f"victim{i:02d}.ppm", result.victims[i])
        write_rt1(directory / f"region{i:02d}.rt1", result.regions[i].astype(np.float32))
    with open(directory / "result.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["victim", "success", "confidence", "g_area"])
        for i in range(result.victims.shape[0]):
            writer.writerow([i, int(result.success[i]), f"{result.confidences[i]:.6f}",
                             int(result.regions[i].sum())])


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

def bench(model: Model, config: DetectionConfig, n_images: int = 100,
          images=None, k_sweep=None) -> dict:
    """Timing summary of detect(): totals, per-pass decomposition, per-K cost."""
    if images is None:
        rng = np.random.default_rng(0)
        images = rng.uniform(0, 1, size=(n_images,) + tuple(model.input_shape)).astype(np.float32)
    images = np.asarray(images)[:n_images]

    walls, fwd, bwd = [], [], []
    for x in images:
        report = detect(x, model, config)
        assert report.forward_passes == 3 and report.backward_passes == config.k + 1
        walls.append(report.wall_time_s)
        fwd.append(report.forward_time_s / report.forward_passes)
        bwd.append(report.backward_time_s / report.backward_passes)
    summary = {
        "n_images": len(walls),
        "k": config.k,
        "mean_s": float(np.mean(walls)),
        "p50_s": float(np.percentile(walls, 50)),
        "p90_s": float(np.percentile(walls, 90)),
        "mean_forward_pass_s": float(np.mean(fwd)),
        "mean_backward_pass_s": float(np.mean(bwd)),
    }
    if k_sweep:
        per_k = {}
        for k in k_sweep:
            cfg = dataclasses.replace(config, k=int(k))
            times = [detect(x, model, cfg).wall_time_s for x in images]
            per_k[int(k)] = float(np.mean(times))
        ks = np.array(sorted(per_k))
        ts = np.array([per_k[int(k)] for k in ks])
        slope = float(np.polyfit(ks, ts, 1)[0])
        summary["per_k_mean_s"] = per_k
        summary["marginal_cost_per_k_s"] = slope
    return summary
