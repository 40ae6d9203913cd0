"""Next-user prediction for information cascades.

The pipeline: cascade datasets and social edge lists (:mod:`.data`),
interval snapshots of the follow/repost graphs (:mod:`.graphs`), a small
reverse-mode autodiff engine (:mod:`.autodiff`), the graph-convolutional
cascade model with time-aware selection and masked self-attention
(:mod:`.model`), and the training plus ranking-evaluation harness
(:mod:`.training`). ``cascadenet`` on the command line drives it end to end.
"""

from .data import (
    Cascade,
    DatasetSplit,
    TimeScaler,
    Vocab,
    generate_synthetic,
    load_cascades,
    load_social_edges,
    split_dataset,
)
from .graphs import (
    HeteroSnapshot,
    SparseAdj,
    TimeIntervals,
    build_diffusion_adjacency,
    build_snapshots,
    build_social_adjacency,
    split_timeline,
)
from .autodiff import Adam, Node, backward
from .model import ModelConfig, ablate, forward_scores, init_params
from .training import (
    EvalReport,
    Model,
    TrainConfig,
    cascade_nll,
    evaluate,
    evaluate_random,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
