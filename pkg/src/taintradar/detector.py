"""Critical-region estimation and the five-pass ranking-change detector.

Pipeline per input: forward (1) -> critical-region backward (2) -> fill and
forward on the intermediate image (3) -> one backward per top-K suppressed
label for the negative masks (4) -> intersect, fill, final forward (5). The
verdict compares the original label's ranking drop against a threshold.
Every detection therefore costs exactly 3 forward and K+1 backward passes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from . import engine
from .models import Model, Prediction, predict, predict_batch, rankings
from .validation import check_images, check_mask


@dataclass
class DetectionConfig:
    k: int = 9
    delta_r: int = 2
    temperature: float = 2.0
    binarize_threshold: float = 0.15
    fill: str = "mean"              # "mean" or "noise"
    fill_seed: Optional[int] = None
    mean_image: Optional[np.ndarray] = None

    def validate(self, num_classes: int) -> None:
        if not 1 <= self.k < num_classes:
            raise ValueError(f"top-K must satisfy 1 <= K < m={num_classes}, got {self.k}")
        if not 1 <= self.delta_r < num_classes:
            raise ValueError(f"delta_r must satisfy 1 <= dR < m={num_classes}, got {self.delta_r}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.fill not in ("mean", "noise"):
            raise ValueError(f"fill must be 'mean' or 'noise', got {self.fill!r}")


@dataclass
class DetectionReport:
    verdict: str                      # "benign" | "adversarial"
    label: int
    rank_after: int
    ranking_change: int
    l_est: np.ndarray                 # bool (H, W)
    l_negative: list                  # K bool masks
    l_taintradar: np.ndarray          # bool (H, W)
    top_k_labels: np.ndarray
    top_k_deltas: np.ndarray
    forward_passes: int
    backward_passes: int
    wall_time_s: float
    forward_time_s: float
    backward_time_s: float
    fill_seed: Optional[int]
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "label": int(self.label),
            "rank_after": int(self.rank_after),
            "ranking_change": int(self.ranking_change),
            "top_k_labels": [int(v) for v in self.top_k_labels],
            "top_k_deltas": [float(v) for v in self.top_k_deltas],
            "l_est_area": int(self.l_est.sum()),
            "l_taintradar_area": int(self.l_taintradar.sum()),
            "forward_passes": int(self.forward_passes),
            "backward_passes": int(self.backward_passes),
            "wall_time_s": float(self.wall_time_s),
            "forward_time_s": float(self.forward_time_s),
            "backward_time_s": float(self.backward_time_s),
            "fill_seed": self.fill_seed,
            "degenerate": bool(self.degenerate),
        }


class _Passes:
    __slots__ = ("forward", "backward", "forward_time", "backward_time")

    def __init__(self):
        self.forward = 0
        self.backward = 0
        self.forward_time = 0.0
        self.backward_time = 0.0


# ---------------------------------------------------------------------------
# Mask algebra
# ---------------------------------------------------------------------------

def binarize(heatmap, threshold: float = 0.15) -> np.ndarray:
    """Threshold a (normalized) heatmap into a boolean mask."""
    return np.asarray(heatmap) >= threshold


def upsample_map(heatmap, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsample of a 2-d map to input resolution (values, no tape)."""
    h = np.asarray(heatmap, dtype=np.float64)
    r = engine._interp_matrix(h.shape[0], out_h)
    c = engine._interp_matrix(h.shape[1], out_w)
    return r @ h @ c.T


def heat_to_mask(heatmap, out_hw, threshold: float) -> np.ndarray:
    """Upsample the pre-binarization heatmap, then threshold."""
    return binarize(upsample_map(heatmap, out_hw[0], out_hw[1]), threshold)


def intersect(masks) -> np.ndarray:
    masks = list(masks)
    out = masks[0].copy()
    for m in masks[1:]:
        out &= m
    return out


def mask_union(a, b) -> np.ndarray:
    return a | b


def mask_area(mask) -> int:
    return int(np.asarray(mask).sum())


def iou(e, g) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    e = check_mask(e, name="estimated mask")
    g = check_mask(g, name="reference mask")
    if e.shape != g.shape:
        raise ValueError(f"mask resolution mismatch: {e.shape} vs {g.shape}")
    union = mask_area(e | g)
    if union == 0:
        return 0.0
    return mask_area(e & g) / union


# ---------------------------------------------------------------------------
# Critical-region estimation
# ---------------------------------------------------------------------------

def estimation_loss(p, c: int):
    """Negated cross-entropy against the predicted one-hot: log p_c, on tape."""
    if isinstance(p, engine.Tensor) and p.data.ndim == 2:
        return engine.log(engine.pick_rows(p, [int(c)]))
    return engine.log(engine.pick(p, int(c)))


def _estimation_alpha(prediction: Prediction, config: DetectionConfig,
                      passes: _Passes = None):
    """Feature-map weights: GAP of the estimation-loss gradient at the tap."""
    p = engine.softmax_with_temperature(prediction.z, config.temperature)
    loss = estimation_loss(p, prediction.label)
    t0 = time.perf_counter()
    grads = engine.backward(prediction.tape, loss)
    if passes is not None:
        passes.backward += 1
        passes.backward_time += time.perf_counter() - t0
    ga = grads.array(prediction.feats)[0]
    return ga.mean(axis=(1, 2))


def _weighted_heat(feature_maps: np.ndarray, alpha: np.ndarray) -> tuple:
    """ReLU(sum_k alpha_k A^k), max-normalized; returns (heat, degenerate)."""
    heat = np.maximum(np.tensordot(alpha, feature_maps, axes=1), 0.0)
    peak = heat.max()
    if peak <= 0:
        return np.zeros_like(heat), True
    return heat / peak, False


def critical_region(prediction: Prediction, config: DetectionConfig,
                    passes: _Passes = None) -> tuple:
    """Estimated critical region: (normalized heatmap, input-resolution mask)."""
    alpha = _estimation_alpha(prediction, config, passes)
    heat, degenerate = _weighted_heat(prediction.feature_maps, alpha)
    h, w = _input_hw(prediction)
    if degenerate:
        return heat, np.zeros((h, w), dtype=bool)
    return heat, heat_to_mask(heat, (h, w), config.binarize_threshold)


def _input_hw(prediction: Prediction) -> tuple:
    shape = prediction.tape.nodes[0].value.shape  # the recorded input leaf (1,C,H,W)
    return shape[2], shape[3]


def negative_mask(prediction: Prediction, label: int, config: DetectionConfig,
                  passes: _Passes = None) -> np.ndarray:
    """Region suppressing ``label``: negated-weight counterfactual mask."""
    root = engine.pick_rows(prediction.z, [int(label)])
    t0 = time.perf_counter()
    grads = engine.backward(prediction.tape, root)
    if passes is not None:
        passes.backward += 1
        passes.backward_time += time.perf_counter() - t0
    ga = grads.array(prediction.feats)[0]
    alpha = ga.mean(axis=(1, 2))
    heat, degenerate = _weighted_heat(prediction.feature_maps, -alpha)
    h, w = _input_hw(prediction)
    if degenerate:
        return np.zeros((h, w), dtype=bool)
    return heat_to_mask(heat, (h, w), config.binarize_threshold)


def fill_region(image, mask, pattern, rng: np.random.Generator = None) -> np.ndarray:
    """Replace masked pixels: 'noise' draws fresh uniform [0,1], else a CHW fill image."""
    img = np.array(image, copy=True)
    mask = check_mask(mask, shape=img.shape[1:], name="fill mask")
    if isinstance(pattern, str):
        if pattern != "noise":
            raise ValueError(f"unknown fill pattern {pattern!r}")
        rng = rng or np.random.default_rng()
        img[:, mask] = rng.uniform(0.0, 1.0, size=(img.shape[0], int(mask.sum()))).astype(img.dtype)
    else:
        fill = np.asarray(pattern, dtype=img.dtype)
        if fill.shape != img.shape:
            raise ValueError(f"fill image shape {fill.shape} does not match image {img.shape}")
        img[:, mask] = fill[:, mask]
    return img


def top_k_suppressed(z_before, z_after, k: int, exclude: int) -> np.ndarray:
    """The k labels (excluding the predicted one) whose logits rose most."""
    zb, za = np.asarray(z_before), np.asarray(z_after)
    if zb.shape != za.shape or zb.ndim != 1:
        raise ValueError(f"logit vectors must match in shape, got {zb.shape} vs {za.shape}")
    if not 1 <= k <= zb.size - 1:
        raise ValueError(f"K must lie in [1, m-1] = [1, {zb.size - 1}], got {k}")
    delta = za - zb
    candidates = [i for i in range(zb.size) if i != exclude]
    candidates.sort(key=lambda i: (-delta[i], i))
    return np.array(candidates[:k], dtype=np.int64)


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def _resolve_fill(config: DetectionConfig):
    """Returns (pattern, rng, seed): the per-call fill source."""
    if config.fill == "mean":
        if config.mean_image is None:
            raise ValueError("dataset-mean fill requested but no mean image configured")
        return config.mean_image, None, None
    seed = config.fill_seed
    if seed is None:
        seed = int(np.random.default_rng().integers(0, 2 ** 31 - 1))
    return "noise", np.random.default_rng(seed), seed


def detect(image, model: Model, config: DetectionConfig) -> DetectionReport:
    """Run the five-pass pipeline and flag the input if the original label's
    rank drops by at least delta_r after the intersected region is removed."""
    config.validate(model.num_classes)
    image = check_images(image, model.input_shape, name="image")
    pattern, rng, seed = _resolve_fill(config)
    passes = _Passes()
    start = time.perf_counter()

    pred = _timed_predict(model, image, passes)                         # pass 1
    label = pred.label

    _, l_est = critical_region(pred, config, passes)                    # pass 2
    intermediate = fill_region(image, l_est, pattern, rng)
    pred_int = _timed_predict(model, intermediate, passes)              # pass 3

    labels = top_k_suppressed(pred.logits, pred_int.logits, config.k, exclude=label)
    deltas = pred_int.logits[labels] - pred.logits[labels]
    negatives = [negative_mask(pred_int, int(l), config, passes) for l in labels]  # pass 4
    final_mask = intersect(negatives)

    final_image = fill_region(image, final_mask, pattern, rng)
    pred_final = _timed_predict(model, final_image, passes)             # pass 5

    rank_after = int(rankings(pred_final.probs).rank_of[label])
    change = rank_after - 1
    verdict = "adversarial" if change >= config.delta_r else "benign"
    return DetectionReport(
        verdict=verdict, label=label, rank_after=rank_after, ranking_change=change,
        l_est=l_est, l_negative=negatives, l_taintradar=final_mask,
        top_k_labels=labels, top_k_deltas=deltas,
        forward_passes=passes.forward, backward_passes=passes.backward,
        wall_time_s=time.perf_counter() - start,
        forward_time_s=passes.forward_time, backward_time_s=passes.backward_time,
        fill_seed=seed, degenerate=not l_est.any())


def _timed_predict(model, image, passes: _Passes) -> Prediction:
    t0 = time.perf_counter()
    pred = predict(model, image)
    passes.forward += 1
    passes.forward_time += time.perf_counter() - t0
    return pred


def detect_prefix_changes(image, model: Model, config: DetectionConfig, ks) -> dict:
    """Ranking change per K, sharing one mask cascade (calibration fast path).

    Top-K label lists are nested by construction, so the K negative masks for
    the largest requested K cover every smaller K as a prefix. Identical to
    per-K ``detect`` results under deterministic fill.
    """
    ks = sorted(int(k) for k in ks)
    k_top = ks[-1]
    DetectionConfig(k=k_top, delta_r=1, temperature=config.temperature,
                    fill=config.fill).validate(model.num_classes)
    image = check_images(image, model.input_shape, name="image")
    pattern, rng, _ = _resolve_fill(config)

    pred = predict(model, image)
    label = pred.label
    _, l_est = critical_region(pred, config)
    intermediate = fill_region(image, l_est, pattern, rng)
    pred_int = predict(model, intermediate)
    labels = top_k_suppressed(pred.logits, pred_int.logits, k_top, exclude=label)
    negatives = [negative_mask(pred_int, int(l), config) for l in labels]

    changes = {}
    running = negatives[0].copy()
    j = 1
    for k in ks:
        while j < k:
            running &= negatives[j]
            j += 1
        final_image = fill_region(image, running, pattern, rng)
        z, _ = model.forward(final_image[None])
        probs = engine.softmax_with_temperature(engine.Tensor(z.data[0]), 1.0).data
        changes[k] = int(rankings(probs).rank_of[label]) - 1
    return changes


# ---------------------------------------------------------------------------
# Removal-curve diagnostic
# ---------------------------------------------------------------------------

@dataclass
class RemovalCurve:
    removed: np.ndarray   # pixels removed at each step (0, s, 2s, ...)
    rank: np.ndarray      # rank of the original label after each step


def removal_curve(image, model: Model, step_pixels: int = 100,
                  config: DetectionConfig = None) -> RemovalCurve:
    """Zero-fill the most important pixels in steps, tracking the label's rank.

    Importance is the upsampled pre-binarization heatmap; the order is fixed
    once from the original image. Ranks may oscillate; no monotonicity is
    implied.
    """
    config = config or DetectionConfig()
    image = check_images(image, model.input_shape, name="image")
    pred = predict(model, image)
    alpha = _estimation_alpha(pred, config)
    heat, _ = _weighted_heat(pred.feature_maps, alpha)
    h, w = image.shape[1], image.shape[2]
    importance = upsample_map(heat, h, w).reshape(-1)
    order = np.argsort(-importance, kind="stable")

    steps = (h * w) // step_pixels
    removed = [0]
    ranks = [int(rankings(pred.probs).rank_of[pred.label])]
    current = image.copy().reshape(image.shape[0], -1)
    for s in range(steps):
        chunk = order[s * step_pixels:(s + 1) * step_pixels]
        current[:, chunk] = 0.0
        z, _ = model.forward(current.reshape(image.shape)[None])
        probs = engine.softmax_with_temperature(engine.Tensor(z.data[0]), 1.0).data
        removed.append((s + 1) * step_pixels)
        ranks.append(int(rankings(probs).rank_of[pred.label]))
    return RemovalCurve(removed=np.array(removed), rank=np.array(ranks))


# ---------------------------------------------------------------------------
# Differentiable (pre-binarization) region estimators for adaptive attacks
# ---------------------------------------------------------------------------

def soft_heatmap(z: engine.Tensor, feats: engine.Tensor, label: int,
                 config: DetectionConfig, out_hw: tuple) -> engine.Tensor:
    """On-tape normalized, upsampled estimation heatmap (Binarize omitted).

    The GAP weights are computed by an inner backward pass and enter the
    recorded graph as constants; everything downstream stays differentiable.
    """
    tape = z.tape
    p = engine.softmax_with_temperature(z, config.temperature)
    loss = estimation_loss(p, label)
    alpha = engine.backward(tape, loss).array(feats)[0].mean(axis=(1, 2))
    return _soft_from_alpha(feats, alpha, out_hw)


def soft_negative_heatmap(z: engine.Tensor, feats: engine.Tensor, label: int,
                          out_hw: tuple) -> engine.Tensor:
    root = engine.pick_rows(z, [int(label)])
    alpha = engine.backward(z.tape, root).array(feats)[0].mean(axis=(1, 2))
    return _soft_from_alpha(feats, -alpha, out_hw)


def _soft_from_alpha(feats: engine.Tensor, alpha, out_hw) -> engine.Tensor:
    maps = engine.reshape(feats, feats.shape[1:])  # (1,K,Hf,Wf) -> (K,Hf,Wf)
    heat = engine.relu(engine.channel_weighted_sum(maps, alpha))
    peak = engine.add_scalar(engine.tmax(heat), 1e-12)
    return engine.bilinear_upsample(engine.div(heat, peak), out_hw[0], out_hw[1])


# ---------------------------------------------------------------------------
# Estimator wrapper
# ---------------------------------------------------------------------------

class TaintRadar(BaseEstimator):
    """Detector with benign-only calibration behind a fit/predict surface.

    ``fit(X)`` calibrates (K, delta_r) against ``target_fpr`` on benign images
    unless both are pinned; ``predict(X)`` returns 1 for flagged inputs and
    ``decision_function(X)`` the raw ranking changes.
    """

    def __init__(self, model=None, k=None, delta_r=None, temperature=2.0,
                 binarize_threshold=0.15, fill="mean", fill_seed=None,
                 target_fpr=0.06, k_range=(2, 16), dr_range=(1, 20)):
        self.model = model
        self.k = k
        self.delta_r = delta_r
        self.temperature = temperature
        self.binarize_threshold = binarize_threshold
        self.fill = fill
        self.fill_seed = fill_seed
        self.target_fpr = target_fpr
        self.k_range = k_range
        self.dr_range = dr_range

    def _model(self) -> Model:
        model = self.model
        if hasattr(model, "model_"):
            model = model.model_
        if not isinstance(model, Model):
            raise ValueError("TaintRadar needs a trained Model (or fitted CnnClassifier)")
        return model

    def _mean_image(self, model):
        if self.fill != "mean":
            return None
        if model.mean_image is None:
            raise ValueError("fill='mean' needs a model with a stored mean image")
        return model.mean_image

    def config(self) -> DetectionConfig:
        k = getattr(self, "k_", self.k)
        dr = getattr(self, "delta_r_", self.delta_r)
        if k is None or dr is None:
            raise RuntimeError("TaintRadar is not fitted and no (k, delta_r) were given")
        model = self._model()
        return DetectionConfig(k=int(k), delta_r=int(dr), temperature=self.temperature,
                               binarize_threshold=self.binarize_threshold,
                               fill=self.fill, fill_seed=self.fill_seed,
                               mean_image=self._mean_image(model))

    def fit(self, X, y=None):
        model = self._model()
        if self.k is not None and self.delta_r is not None:
            self.k_, self.delta_r_ = int(self.k), int(self.delta_r)
            return self
        from .calibration import choose_params, fpr_surface
        X = check_images(X, model.input_shape, name="benign images", batched=True)
        if y is not None:
            _, pred = predict_batch(model, X)
            X = X[pred == np.asarray(y)]
        base = DetectionConfig(temperature=self.temperature,
                               binarize_threshold=self.binarize_threshold,
                               fill=self.fill, fill_seed=self.fill_seed,
                               mean_image=self._mean_image(model))
        self.surface_ = fpr_surface(model, X, self.k_range, self.dr_range, base)
        self.calibration_ = choose_params(self.surface_, self.target_fpr)
        self.k_ = self.calibration_.k
        self.delta_r_ = self.calibration_.delta_r
        return self

    def report(self, image) -> DetectionReport:
        return detect(image, self._model(), self.config())

    def decision_function(self, X):
        model = self._model()
        cfg = self.config()
        X = check_images(X, model.input_shape, name="images", batched=True)
        return np.array([detect(x, model, cfg).ranking_change for x in X])

    def predict(self, X):
        cfg = self.config()
        return (self.decision_function(X) >= cfg.delta_r).astype(np.int64)
