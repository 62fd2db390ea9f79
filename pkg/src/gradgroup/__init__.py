"""Group tasks for joint training by the cosine similarity of their gradients."""

from gradgroup.errors import GradGroupError
from gradgroup.similarity import (
    GradientTrace,
    SimilarityMatrix,
    cosine,
    epoch_similarity_average,
    similarity_from_distance,
)
from gradgroup.grouping import (
    Grouping,
    GroupingResult,
    SearchConfig,
    branch_and_bound_grouping,
    exhaustive_best_grouping,
    find_best_grouping,
)

__version__ = "0.1.0"

__all__ = [
    "GradGroupError",
    "GradientTrace",
    "SimilarityMatrix",
    "cosine",
    "epoch_similarity_average",
    "similarity_from_distance",
    "Grouping",
    "GroupingResult",
    "SearchConfig",
    "branch_and_bound_grouping",
    "exhaustive_best_grouping",
    "find_best_grouping",
]
