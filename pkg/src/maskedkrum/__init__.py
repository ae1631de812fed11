"""Byzantine-robust aggregation on masked gradient shares."""

from .codebook import NoiseCodebook, build_codebook, equivalent_sigma, verify_codebook
from .codec import EncodedSharePair, PartialDistanceMatrix, decode_distances, encode_client_gradient, worker_pairwise_distances
from .core import (
    DimensionError,
    DistanceMatrix,
    GradientVector,
    ResilienceError,
    SystemConfig,
    ValidationError,
    clip_to_norm,
    l2_dist_sq,
)
from .leakage import LeakageReport, calibrate_sigma, estimate_variances, mi_bound
from .multikrum import (
    ScoreTable,
    SelectionResult,
    aggregate_selected,
    check_resilience_precondition,
    score_clients,
    select_top_k,
)

__version__ = "0.1.0"
