"""Cross-modality image translation with conditional diffusion, desk scale.

A small laboratory for the visible/infrared translation recipe: a
denoising diffusion model conditioned on a high-pass filtered view of
the source image and steered between modalities by an indicator
embedding with classifier-free guidance, plus a noise-robust
re-identification training loop for learning from the translated
(pseudo-labeled) stream.

The package is organized by pipeline stage:

- synthdata: procedural two-modality datasets with ground-truth pairs
- conditioning: high-pass condition and low-pass reference filters
- schedule: diffusion noise schedule and the forward process
- denoiser: the conditional UNet and checkpoint format
- trainer: denoising objective and training loop
- sampler: DDPM/DDIM sampling, guidance, translation entry points
- labels: noise-robust classification losses (GCE, smoothed targets)
- evalkit: retrieval metrics, modality gap, identity preservation
- config: one config tree for every stage, with seed derivation
- cli: command-line pipeline driver
"""

from .conditioning import FilterConfig, condition_for, high_pass_condition, low_pass_reference
from .config import RunConfig, load_run_config, save_run_config, toy_run_config
from .data import DatasetManifest, DiffusionDataset, ImageBatch, ModalityIndicator
from .denoiser import (
    DenoiserConfig,
    DenoiserParams,
    init_params,
    load_checkpoint,
    parameter_count,
    predict_eps,
    save_checkpoint,
)
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .evalkit import (
    EmbeddingSet,
    LabeledImages,
    ReidConfig,
    RetrievalResult,
    ToyClassifier,
    cmc_map,
    gap_features,
    identity_preservation,
    identity_preservation_scores,
    load_classifier,
    modality_gap,
    modality_score,
    save_classifier,
    symmetric_label_noise,
    train_reid,
)
from .labels import GceConfig, LsrConfig, ce_loss, gce_loss, lsr_loss, lsr_smooth, mixed_objective
from .sampler import (
    SamplerConfig,
    ddim_sample,
    ddpm_sample,
    guided_eps,
    partial_noise_translate,
    translate,
)
from .schedule import NoiseSchedule, ScheduleConfig, forward_noise, mean_from_eps
from .synthdata import (
    IdentitySpec,
    build_eval_dataset,
    build_single_modality_dataset,
    generate_identity,
    load_directory_dataset,
    render,
    write_dataset,
)
from .trainer import TrainConfig, Trainer, sample_step_inputs, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DatasetManifest",
    "DenoiserConfig",
    "DenoiserParams",
    "DiffusionDataset",
    "EmbeddingSet",
    "FilterConfig",
    "GceConfig",
    "IdentitySpec",
    "ImageBatch",
    "LabeledImages",
    "LsrConfig",
    "ModalityIndicator",
    "NoiseSchedule",
    "ReidConfig",
    "RetrievalResult",
    "RunConfig",
    "SamplerConfig",
    "ScheduleConfig",
    "ToyClassifier",
    "TrainConfig",
    "Trainer",
    "TrainingDiverged",
    "build_eval_dataset",
    "build_single_modality_dataset",
    "ce_loss",
    "cmc_map",
    "condition_for",
    "ddim_sample",
    "ddpm_sample",
    "forward_noise",
    "gap_features",
    "gce_loss",
    "generate_identity",
    "guided_eps",
    "high_pass_condition",
    "identity_preservation",
    "identity_preservation_scores",
    "init_params",
    "load_checkpoint",
    "load_classifier",
    "load_directory_dataset",
    "load_run_config",
    "low_pass_reference",
    "lsr_loss",
    "lsr_smooth",
    "mean_from_eps",
    "mixed_objective",
    "modality_gap",
    "modality_score",
    "parameter_count",
    "partial_noise_translate",
    "predict_eps",
    "render",
    "sample_step_inputs",
    "save_checkpoint",
    "save_classifier",
    "save_run_config",
    "symmetric_label_noise",
    "toy_run_config",
    "train",
    "train_reid",
    "translate",
    "write_dataset",
]
