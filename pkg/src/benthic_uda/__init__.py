"""Unsupervised domain adaptation for point-annotation image classifiers.

Resolution-matched patch scaling, the SymmNet dual-head adversarial losses
and TKPF bilinear pooling, with a synthetic two-survey benchmark.
"""

from .bilinear_pooling import TKPFConfig, tkpf_parameter_count, tkpf_pool
from .data import (
    DatasetManifest,
    SyntheticShiftSpec,
    compute_scaled_crop_size,
    generate_synthetic_domain_pair,
    load_manifest,
)
from .losses import DualHeadOutput, combine_objectives, lambda_schedule
from .model import BackboneSpec, SymmNet
from .training import TrainConfig, run_ablation_grid, run_experiment

__version__ = "0.1.0"
