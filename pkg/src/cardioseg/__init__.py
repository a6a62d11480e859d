"""Multi-disease-aware training and occlusion preprocessing for cardiac MR segmentation."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    Case4D,
    DiseaseDataset,
    Manifest,
    SliceSample,
    build_disease_datasets,
    read_case,
    resize_to,
    restructure_case,
    write_case,
)
from .estimator import MultiDiseaseSegmenter  # noqa: E402
from .masks import MaskSpec, OcclusionMasker, apply_mask, gaussian_mask, ideal_mask, sample_center  # noqa: E402
from .metrics import MetricsTable, cross_validate, dice, evaluate, extract_contour, hausdorff  # noqa: E402
from .sampler import BatchPlan, SubBatch, mts_epoch_schedule, nts_epoch_schedule  # noqa: E402
from .segmenter import ModelConfig, forward, init_model, l1_norm  # noqa: E402
from .synth import synth_generate  # noqa: E402
from .training import RunHistory, TrainConfig, run_matrix, train_mts, train_nts  # noqa: E402

__all__ = [
    "BatchPlan",
    "Case4D",
    "DiseaseDataset",
    "Manifest",
    "MaskSpec",
    "MetricsTable",
    "ModelConfig",
    "MultiDiseaseSegmenter",
    "OcclusionMasker",
    "RunHistory",
    "SliceSample",
    "SubBatch",
    "TrainConfig",
    "apply_mask",
    "build_disease_datasets",
    "cross_validate",
    "dice",
    "evaluate",
    "extract_contour",
    "forward",
    "gaussian_mask",
    "hausdorff",
    "ideal_mask",
    "init_model",
    "l1_norm",
    "mts_epoch_schedule",
    "nts_epoch_schedule",
    "read_case",
    "resize_to",
    "restructure_case",
    "run_matrix",
    "sample_center",
    "synth_generate",
    "train_mts",
    "train_nts",
    "write_case",
]
