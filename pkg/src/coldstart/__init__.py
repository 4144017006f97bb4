"""Cold-start threshold estimation for cluster-based collaborative filtering.

The package fits k-means over users' full rating histories, replays each
user's ratings as growing prefixes against the frozen centroids, and locates
the prefix length where cluster assignment stabilizes: the number of ratings
after which a new user stops being a cold-start case.
"""

from .dataset import (
    BY_ITEM_INDEX,
    BY_TIMESTAMP,
    IDENTITY_1_TO_5,
    JESTER_AFFINE,
    NormalizationScheme,
    PrefixOrdering,
    RatingEvent,
    RatingMatrix,
    build_matrix,
    export_canonical_csv,
    filter_min_ratings,
    normalize_rating,
    parse_jester,
    parse_movielens,
    prefix,
    sample_users,
)
from .errors import (
    DegenerateModelError,
    EmptyResultError,
    MethodologyError,
    NoIntersectionError,
    ParseError,
    RatingRangeError,
)
from .experiment import (
    BreakpointReport,
    IntersectionReport,
    QualityCurve,
    SuccessCurve,
    detect_breakpoint,
    quality_curve,
    regression_intersection,
    split_by_min_count,
    success_curve,
)
from .kmeans import (
    ClusterModel,
    KMeansConfig,
    assign,
    fit,
    load_model,
    n_clusters_from_coeff,
    save_model,
    sq_euclidean,
    sse,
)
from .quality import ClusterQuality, cluster_scatter, davies_bouldin, per_cluster_quality
from .recsys_eval import (
    EvalConfig,
    SweepResult,
    SweepRow,
    average_precision,
    ndcg_at_n,
    predict_score,
    sweep_coefficient,
)

__version__ = "0.1.0"

__all__ = [
    "BY_ITEM_INDEX",
    "BY_TIMESTAMP",
    "BreakpointReport",
    "ClusterModel",
    "ClusterQuality",
    "DegenerateModelError",
    "EmptyResultError",
    "EvalConfig",
    "IDENTITY_1_TO_5",
    "IntersectionReport",
    "JESTER_AFFINE",
    "KMeansConfig",
    "MethodologyError",
    "NoIntersectionError",
    "NormalizationScheme",
    "ParseError",
    "PrefixOrdering",
    "QualityCurve",
    "RatingEvent",
    "RatingMatrix",
    "RatingRangeError",
    "SuccessCurve",
    "SweepResult",
    "SweepRow",
    "assign",
    "average_precision",
    "build_matrix",
    "cluster_scatter",
    "davies_bouldin",
    "detect_breakpoint",
    "export_canonical_csv",
    "filter_min_ratings",
    "fit",
    "load_model",
    "n_clusters_from_coeff",
    "ndcg_at_n",
    "normalize_rating",
    "parse_jester",
    "parse_movielens",
    "per_cluster_quality",
    "predict_score",
    "prefix",
    "quality_curve",
    "regression_intersection",
    "sample_users",
    "save_model",
    "split_by_min_count",
    "sq_euclidean",
    "sse",
    "success_curve",
    "sweep_coefficient",
]
