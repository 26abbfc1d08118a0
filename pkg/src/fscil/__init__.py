"""Few-shot class-incremental learning with a cosine base model and a
squared-Euclidean complementary model trained on pseudo incremental tasks."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    LabeledSet,
    SessionStream,
    SplitConfig,
    build_session_stream,
    cumulative_test_set,
    synth_blob_source,
)
from .metrics import (  # noqa: E402
    WeightMatrix,
    cosine_scores,
    prototype,
    scaled_softmax,
    sqeuclid_scores,
)

__all__ = [
    "LabeledSet",
    "SessionStream",
    "SplitConfig",
    "WeightMatrix",
    "build_session_stream",
    "cosine_scores",
    "cumulative_test_set",
    "prototype",
    "scaled_softmax",
    "sqeuclid_scores",
    "synth_blob_source",
]
