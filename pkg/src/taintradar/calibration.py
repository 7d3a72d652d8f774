"""Attack-agnostic selection of (K, delta_r) from benign images at a target FPR.

The surface is built from benign ranking changes only; delta_r is a pure
post-filter, so one mask cascade per image covers the whole K range.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import DetectionConfig, detect_prefix_changes
from .models import Model
from .validation import check_images

K_MAX_TOLERANCE = 0.005  # "close to the minimum FPR" quantified: 0.5 percentage points


class CalibrationError(ValueError):
    """Target FPR unachievable on the computed surface."""


@dataclass
class FprSurface:
    k_values: np.ndarray     # evaluated K values, ascending
    dr_values: np.ndarray    # evaluated delta_r values, ascending
    grid: np.ndarray         # FPR per (K, delta_r)
    benign_count: int
    changes: np.ndarray      # cached ranking change per (K, image)


@dataclass
class CalibrationResult:
    k: int
    delta_r: int
    achieved_fpr: float
    target_fpr: float
    k_max: int

    def to_text(self) -> str:
        return "".join(f"{key} = {value}\n" for key, value in [
            ("k", self.k), ("delta_r", self.delta_r),
            ("achieved_fpr", self.achieved_fpr), ("target_fpr", self.target_fpr),
            ("k_max", self.k_max)])


def _as_range(rng, upper: int) -> np.ndarray:
    if isinstance(rng, (tuple, list)) and len(rng) == 2:
        values = np.arange(int(rng[0]), int(rng[1]) + 1)
    else:
        values = np.asarray(sorted(int(v) for v in rng))
    values = values[(values >= 1) & (values < upper)]
    if values.size == 0:
        raise ValueError(f"range {rng} is empty after clipping to [1, {upper})")
    return values


def fpr_surface(model: Model, benign_images, k_range, dr_range,
                config: DetectionConfig = None) -> FprSurface:
    """FPR grid over (K, delta_r) from per-image ranking changes."""
    config = config or DetectionConfig()
    benign_images = check_images(benign_images, model.input_shape,
                                 name="benign images", batched=True)
    if benign_images.shape[0] == 0:
        raise ValueError("empty benign set")
    ks = _as_range(k_range, model.num_classes)
    drs = _as_range(dr_range, model.num_classes)
    changes = np.empty((ks.size, benign_images.shape[0]), dtype=np.int64)
    for i in range(benign_images.shape[0]):
        per_k = detect_prefix_changes(benign_images[i], model, config, ks)
        for ki, k in enumerate(ks):
            changes[ki, i] = per_k[int(k)]
    grid = (changes[:, None, :] >= drs[None, :, None]).mean(axis=2)
    return FprSurface(k_values=ks, dr_values=drs, grid=grid,
                      benign_count=benign_images.shape[0], changes=changes)


def choose_params(surface: FprSurface, target_fpr: float) -> CalibrationResult:
    """Smallest delta_r meeting the target among K <= k_max; ties take larger K.

    k_max is the largest K whose best (min over delta_r) FPR is within 0.5
    percentage points of the global best, trading a low benign FPR against
    the larger K that keeps the adversarial intersection findable.
    """
    best_per_k = surface.grid.min(axis=1)
    k_mask = best_per_k <= best_per_k.min() + K_MAX_TOLERANCE
    k_max = int(surface.k_values[np.nonzero(k_mask)[0].max()])

    best = None
    for ki, k in enumerate(surface.k_values):
        if k > k_max:
            continue
        for di, dr in enumerate(surface.dr_values):
            if surface.grid[ki, di] <= target_fpr:
                key = (dr, -k)
                if best is None or key < best[0]:
                    best = (key, int(k), int(dr), float(surface.grid[ki, di]))
                break  # FPR is non-increasing in delta_r: first hit is the smallest dr
    if best is None:
        attainable = surface.grid[surface.k_values <= k_max].min()
        raise CalibrationError(
            f"target FPR {target_fpr:.4f} unachievable; best attainable is {attainable:.4f}")
    _, k, dr, achieved = best
    return CalibrationResult(k=k, delta_r=dr, achieved_fpr=achieved,
                             target_fpr=float(target_fpr), k_max=k_max)


def save_calibration(path, result: CalibrationResult) -> None:
    Path(path).write_text(result.to_text())


def load_calibration(path) -> CalibrationResult:
    fields = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        return CalibrationResult(k=int(fields["k"]), delta_r=int(fields["delta_r"]),
                                 achieved_fpr=float(fields["achieved_fpr"]),
                                 target_fpr=float(fields["target_fpr"]),
                                 k_max=int(fields["k_max"]))
    except KeyError as exc:
        raise CalibrationError(f"{path}: missing calibration field {exc}")
