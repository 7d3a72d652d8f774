"""TaintRadar: critical-region detection of localized adversarial examples.

A desk-scale laboratory covering the full loop: a tape-based CNN engine,
trainable toy classifiers, localized patch / accessory / adaptive attacks,
the five-pass critical-region detector, benign-only parameter calibration,
and an experiment harness behind the ``taintradar`` CLI.
"""

from .engine import (Adam, Tape, Tensor, backward, finite_difference_gradient,
                     forward_primitive, replay, softmax_with_temperature)
from .models import (CnnClassifier, Model, Prediction, RankingView, TrainConfig,
                     build_model, load_model, predict, rankings, save_model, train)
from .detector import (DetectionConfig, DetectionReport, TaintRadar, critical_region,
                       detect, estimation_loss, fill_region, iou, negative_mask,
                       removal_curve, top_k_suppressed)
from .attacks import (AttackConfig, AttackResult, PatchSpec, apply_patch, bpda_attack,
                      generate_patch, masked_accessory_attack, ranking_manipulation_attack,
                      region_misleading_attack)
from .calibration import CalibrationResult, FprSurface, choose_params, fpr_surface
from .harness import ExperimentSpec, MetricsTable, bench, frame_vote, run_experiment

__version__ = "0.1.0"

__all__ = [
    "Adam", "Tape", "Tensor", "backward", "finite_difference_gradient",
    "forward_primitive", "replay", "softmax_with_temperature",
    "CnnClassifier", "Model", "Prediction", "RankingView", "TrainConfig",
    "build_model", "load_model", "predict", "rankings", "save_model", "train",
    "DetectionConfig", "DetectionReport", "TaintRadar", "critical_region",
    "detect", "estimation_loss", "fill_region", "iou", "negative_mask",
    "removal_curve", "top_k_suppressed",
    "AttackConfig", "AttackResult", "PatchSpec", "apply_patch", "bpda_attack",
    "generate_patch", "masked_accessory_attack", "ranking_manipulation_attack",
    "region_misleading_attack",
    "CalibrationResult", "FprSurface", "choose_params", "fpr_surface",
    "ExperimentSpec", "MetricsTable", "bench", "frame_vote", "run_experiment",
]
