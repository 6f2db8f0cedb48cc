"""Scene-graph grounding with pairwise Markov random fields over candidate boxes."""

from .bp import BPResult, infer_marginals, log_partition, loopy_bp, nll_of_assignment, run_bp
from .estimator import SceneGrounder
from .graph import (
    CandidateSet,
    Edge,
    InvalidQueryError,
    Node,
    QueryGraph,
    SceneMRF,
    Vocabulary,
    build_scene_mrf,
    energy_of_assignment,
    validate_query,
)
from .map_inference import (
    MapResult,
    brute_force_map,
    brute_force_marginals,
    constrained_refine_mcmc,
    mplp_map,
    tree_map,
)
from .posenc import FrequencySet, encode_box, make_frequency_set, overlap_score, shift_encoding
from .trees import connected_components, is_tree, random_spanning_tree
from .world import DatasetConfig, GroundingItem, WorldConfig, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "BPResult",
    "CandidateSet",
    "DatasetConfig",
    "Edge",
    "FrequencySet",
    "GroundingItem",
    "InvalidQueryError",
    "MapResult",
    "Node",
    "QueryGraph",
    "SceneGrounder",
    "SceneMRF",
    "Vocabulary",
    "WorldConfig",
    "brute_force_map",
    "brute_force_marginals",
    "build_scene_mrf",
    "connected_components",
    "constrained_refine_mcmc",
    "encode_box",
    "energy_of_assignment",
    "generate_dataset",
    "infer_marginals",
    "is_tree",
    "log_partition",
    "loopy_bp",
    "make_frequency_set",
    "mplp_map",
    "nll_of_assignment",
    "overlap_score",
    "random_spanning_tree",
    "run_bp",
    "shift_encoding",
    "tree_map",
    "validate_query",
]
