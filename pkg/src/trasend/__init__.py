"""Multimodal human activity recognition with self-attention.

A numpy-only stack: a small reverse-mode autodiff engine
(:mod:`trasend.autodiff`), frequency-domain preprocessing of sensor windows
(:mod:`trasend.preprocess`), four architectures sharing one convolutional
template (:mod:`trasend.model`), leave-one-user-out training and metrics
(:mod:`trasend.train`), output-layer personalisation
(:mod:`trasend.personalize`), and data / checkpoint / CLI plumbing.
"""
from .autodiff import FEATURE_EXTRACTOR, OUTPUT_LAYER, GradTape, ModelParams, Parameter, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SyntheticSpec, extract_samples, generate_synthetic_dataset, load_dataset_csv
from .model import Model, ModelConfig
from .personalize import permuted_label_validation, personalize_run
from .preprocess import AugmentationSpec, PreprocessConfig, PreprocessedSample, SensorRecording
from .train import EvalReport, TrainConfig, leave_one_user_out, macro_f1, train

__version__ = "0.1.0"

__all__ = [
    "FEATURE_EXTRACTOR", "OUTPUT_LAYER", "GradTape", "ModelParams", "Parameter", "Tensor",
    "load_checkpoint", "save_checkpoint",
    "SyntheticSpec", "extract_samples", "generate_synthetic_dataset", "load_dataset_csv",
    "Model", "ModelConfig",
    "permuted_label_validation", "personalize_run",
    "AugmentationSpec", "PreprocessConfig", "PreprocessedSample", "SensorRecording",
    "EvalReport", "TrainConfig", "leave_one_user_out", "macro_f1", "train",
]
