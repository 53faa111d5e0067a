"""Training-free multi-reference place recognition via descriptor subspaces.

Core pipeline: load or synthesize unit-norm image descriptors grouped into
places, factorize each place's stacked descriptors into an orthonormal
basis (pivoted QR or truncated SVD), then rank places for a query by its
projection magnitude. Aggregation baselines, a Recall@K evaluation harness,
and heading recovery round out the toolkit.

Scikit-learn style estimators (``SubspaceRecognizer`` and friends) are
exposed lazily to keep plain pipeline imports light.
"""

__version__ = "0.1.0"

from .errors import (
    CapabilityError,
    ConfigError,
    DataError,
    DegenerateInputError,
    DegeneratePlaceError,
    DomainError,
    EmptyMapError,
    EvaluationError,
    FormatError,
    HeadingUndefinedError,
    InputError,
    NumericError,
    ParameterError,
    PlaceMapError,
    RankError,
    ShapeError,
)
from .store import (
    Coordinates,
    DatasetManifest,
    DescriptorDataset,
    ImageRecord,
    dataset_from_arrays,
    load_dataset,
    normalize,
    reduce_dataset,
    reduce_dimension,
    save_dataset,
)
from .subspace import (
    PlaceMatrix,
    PlaceSubspace,
    QueryProjection,
    factor_qr,
    factor_svd,
    numerical_rank,
    place_matrix_from_rows,
    project,
    residual_brute_force,
)
from .mapping import (
    BuildStats,
    MapBuildConfig,
    MapIndex,
    ReferenceFilter,
    build_map,
    incremental_add,
    load_map,
    save_map,
)
from .matching import (
    BaselineConfig,
    BatchMatchResult,
    MatchResult,
    batch_match,
    match_dmat_avg,
    match_lse_rerank,
    match_pooling,
    match_subspace,
    match_sum_desc,
    write_results_jsonl,
)
from .evaluation import (
    EvalReport,
    EvalRow,
    GroundTruthSpec,
    condition_pair_filters,
    evaluate_strategies,
    recall_at_k,
    recall_values,
    sweep_dimension,
    sweep_rank,
    sweep_reference_subsets,
)
from .orientation import (
    HeadingEstimate,
    angular_error_deg,
    bias_bound,
    circular_mean_deg,
    estimate_heading_pooling,
    estimate_heading_qr,
)
from .synth import SynthConfig, generate, oracle_match

_ESTIMATORS = (
    "SubspaceRecognizer",
    "PoolingRecognizer",
    "DistanceAveragingRecognizer",
    "DescriptorSumRecognizer",
    "LogSumExpRecognizer",
    "DescriptorReducer",
)


def __getattr__(name):
    if name in _ESTIMATORS:
        from . import estimators

        return getattr(estimators, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_ESTIMATORS))
