"""Saliency benchmarking for multivariate time series classifiers.

Synthetic datasets with known informative cells, small numpy classifiers
trained with a tape-based autodiff engine, common saliency estimators,
temporal saliency rescaling wrappers and a masking-degradation evaluation.
"""
from .errors import ContractError, DimensionError, FormatError, GraphError, ParameterError, TrainingError
from .evaluation import (
    EvalReport,
    SelectionSpec,
    axis_projected_pr,
    curve_areas,
    degrade_and_score,
    evaluate_maps,
    saliency_rank_distribution,
    select_top_fraction,
    weighted_precision_recall,
)
from .models import ModelSpec, TrainConfig, build_model, input_gradient, load_model, save_model, train
from .saliency import EstimatorConfig, ModelOracle, RelevanceMap, attribute
from .synthgen import DatasetSpec, generate_dataset, load_dataset, resample_cells, save_dataset
from .tensor import Graph, Tensor
from .tsr import TsrConfig, tfsr, time_relevance, tsr_feature_grouping

# the tsr() function stays in its module so ``tsrbench.tsr`` names the module

__version__ = "0.1.0"
