"""Uncertainty-based filtering and feature alignment for unsupervised domain adaptation.

The package combines MC-dropout uncertainty estimation, binned instance
sampling (BIS), a smart batch layout (SBL) over simulated ghost batch-norm
replicas, uncertain feature means (UFM), the uncertain feature loss (UFL),
and uncertainty-based filtering (UBF) into a desk-scale training pipeline
with a CLI for experiments and reports.
"""

from .datasets import (LabeledDataset, UnlabeledDataset, load_image_folder,
                       make_blob_shift, make_two_moons_shift)
from .ghost_bn import GhostBatchNorm1d
from .layout import BatchPlan, plan_baseline, plan_layout, plan_sbl
from .losses import (ClassMeans, ColdMeansError, FilterDecision, build_ufm,
                     resample_assignments, source_loss, top_k_count, ubf, ufl,
                     ufl_terms)
from .models import (ModelBundle, UncertaintyRecord, build_mlp_bundle,
                     load_checkpoint, mc_dropout_predict, predict, save_checkpoint)
from .pseudo_labels import PseudoLabelStore
from .reporting import (filtering_curve, moons_benchmark_config, project_features,
                        run_ablation, summarize_ablation)
from .sampling import (BinSpec, DEFAULT_BIN_SPEC, EmptyClassError, SampledHalf,
                       Slot, assemble_halves, group_and_sort, sample_class)
from .trainer import (AdaptationTrace, RefreshEvent, StepRecord, TrainConfig,
                      adapt, evaluate, train_source)

__all__ = [
    "AdaptationTrace", "BatchPlan", "BinSpec", "ClassMeans", "ColdMeansError",
    "DEFAULT_BIN_SPEC", "EmptyClassError", "FilterDecision", "GhostBatchNorm1d",
    "LabeledDataset", "ModelBundle", "PseudoLabelStore", "RefreshEvent",
    "SampledHalf", "Slot", "StepRecord", "TrainConfig", "UncertaintyRecord",
    "UnlabeledDataset", "adapt", "assemble_halves", "build_mlp_bundle",
    "build_ufm", "evaluate", "filtering_curve", "group_and_sort",
    "load_checkpoint", "load_image_folder", "make_blob_shift",
    "make_two_moons_shift", "mc_dropout_predict", "moons_benchmark_config",
    "plan_baseline", "plan_layout", "plan_sbl", "predict", "project_features",
    "resample_assignments", "run_ablation", "sample_class", "save_checkpoint",
    "source_loss", "summarize_ablation", "top_k_count", "train_source", "ubf",
    "ufl", "ufl_terms",
]

__version__ = "0.1.0"
