"""Decoding emotional brain states from fMRI volumes.

Voxel selection by one-way ANOVA, Procrustes hyperalignment into a shared
voxel space, numpy convolutional networks (a 1-D CNN on aligned voxel
vectors and a 3-D bottleneck residual network on whole volumes) and the
evaluation protocols around them.
"""
from .anova import AnovaSelector, f_scores, select_top_m
from .evaluation import (
    MetricsReport,
    PipelineAConfig,
    PipelineBConfig,
    bootstrap_balance,
    compute_metrics,
    loocv_folds,
    metrics_from_confusion,
    run_pipeline_a,
    run_pipeline_b,
    split_random,
)
from .exceptions import (
    BrainStateError,
    DegenerateInputError,
    FormatError,
    InsufficientDataError,
    NumericalError,
    StateError,
)
from .hyperalign import Hyperaligner, IdentityAligner, procrustes_rotation
from .io import SynthSpec, load_dataset, synth_generate
from .linalg import svd
from .models import ConvNetClassifier, ModelAConfig, ModelBConfig, build_model_a, build_model_b

__version__ = "0.1.0"
