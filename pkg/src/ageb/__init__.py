"""Attention gradient-based erosion backdoor toolkit for small ViTs."""

from .gradmap import ErosionMask, GradientMap, mask_from_gradient, pixel_gradient_map, random_mask
from .harness import AblationCell, ExperimentMetrics, TrainSpec, evaluate, run_ablation, synth_dataset, train
from .poison import Dataset, PoisonManifest, PoisonSpec, poison_dataset, select_victims, triggered_test_set
from .trigger import StructuringElement, TriggerConfig, apply_trigger, erode_rgb, stealth_metrics
from .vit import AttentionRecord, ViTConfig, ViTParams, forward, init_params, load_params, loss_backward, save_params, sgd_step

__version__ = "0.1.0"

__all__ = [
    "AblationCell",
    "AttentionRecord",
    "Dataset",
    "ErosionMask",
    "ExperimentMetrics",
    "GradientMap",
    "PoisonManifest",
    "PoisonSpec",
    "StructuringElement",
    "TrainSpec",
    "TriggerConfig",
    "ViTConfig",
    "ViTParams",
    "apply_trigger",
    "erode_rgb",
    "evaluate",
    "forward",
    "init_params",
    "load_params",
    "loss_backward",
    "mask_from_gradient",
    "pixel_gradient_map",
    "poison_dataset",
    "random_mask",
    "run_ablation",
    "save_params",
    "select_victims",
    "sgd_step",
    "stealth_metrics",
    "synth_dataset",
    "train",
    "triggered_test_set",
]
