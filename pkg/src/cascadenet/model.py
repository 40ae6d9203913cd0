"""The cascade model: per-interval heterogeneous graph convolutions, a
time-aware selection of interval representations for each repost event,
masked multi-head self-attention over the active cascade, and a two-layer
scoring head over all users.

All forward functions build autodiff graphs; training code calls
``autodiff.backward`` on the resulting loss node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Node
from .graphs import TimeIntervals


@dataclass
class ModelConfig:
    """Hyperparameters and ablation switches.

    ``selection`` is "soft" (time-aware attention over past intervals) or
    "hard" (the single interval containing the repost time). Disabling
    ``use_graph_encoder`` skips the graph convolutions entirely and feeds
    raw user embeddings to selection.
    """

    num_users: int
    dim: int = 16
    intervals: int = 4
    heads: int = 4
    gcn_layers: int = 2
    selection: str = "soft"
    snapshot_mode: str = "cumulative"
    pair_mode: str = "consecutive"
    use_social: bool = True
    use_diffusion: bool = True
    use_graph_encoder: bool = True

    def __post_init__(self):
        if self.num_users < 1:
            raise ValueError("num_users must be positive")
        if self.dim < 1 or self.intervals < 1 or self.gcn_layers < 1:
            raise ValueError("dim, intervals and gcn_layers must be positive")
        if self.heads < 1 or self.dim // self.heads < 1:
            raise ValueError(f"need dim // heads >= 1, got dim={self.dim} heads={self.heads}")
        if self.selection not in ("soft", "hard"):
            raise ValueError(f"selection must be 'soft' or 'hard', got {self.selection!r}")
        if self.snapshot_mode not in ("cumulative", "local"):
            raise ValueError(f"bad snapshot_mode {self.snapshot_mode!r}")
        if self.pair_mode not in ("consecutive", "all_prev"):
            raise ValueError(f"bad pair_mode {self.pair_mode!r}")

    @property
    def head_dim(self) -> int:
        # floor division keeps head counts that do not divide dim usable
        return self.dim // self.heads


def param_shapes(cfg: ModelConfig):
    """Ordered name -> shape mapping for every trainable tensor."""
    d, dk = cfg.dim, cfg.head_dim
    shapes = {
        "user_emb": (cfg.num_users, d),
        "time_emb": (cfg.intervals, d),
    }
    for layer in range(cfg.gcn_layers):
        shapes[f"gcn{layer}_social_w"] = (d, d)
        shapes[f"gcn{layer}_diffusion_w"] = (d, d)
    shapes["fuse_w"] = (4 * d, d)
    for h in range(cfg.heads):
        shapes[f"attn{h}_wq"] = (d, dk)
        shapes[f"attn{h}_wk"] = (d, dk)
        shapes[f"attn{h}_wv"] = (d, dk)
    shapes["attn_wo"] = (cfg.heads * dk, d)
    shapes["head_w1"] = (d, d)
    shapes["head_b1"] = (d,)
    shapes["head_w2"] = (cfg.num_users, d)
    shapes["head_b2"] = (cfg.num_users,)
    return shapes


def init_params(cfg: ModelConfig, seed=0) -> dict:
    """Normal initialization scaled by 1/sqrt(fan_in); biases start at zero.

    fan_in is the contraction width of each tensor: the feature dimension
    for embeddings and for ``head_w2`` (applied transposed), the input width
    for everything else.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("_b1", "_b2")):
            value = np.zeros(shape)
        else:
            fan_in = shape[1] if name in ("user_emb", "time_emb", "head_w2") else shape[0]
            value = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
        params[name] = Node(value, op=name)
    return params


# --------------------------------------------------------------------------
# Graph encoding
# --------------------------------------------------------------------------

def hgcn_layer(x: Node, snapshot, w_social: Node, w_diffusion: Node, t_vec: Node):
    """One convolution over both relations of a snapshot.

    Social branch: relu(A_social @ x @ W). Repost branch adds the interval
    embedding to every user first: relu(A_repost @ (x + t) @ W).
    """
    x_social = ad.relu(ad.sparse_matmul(snapshot.social.matrix, ad.matmul(x, w_social)))
    shifted = ad.add(x, t_vec)
    x_diffusion = ad.relu(
        ad.sparse_matmul(snapshot.diffusion.matrix, ad.matmul(shifted, w_diffusion))
    )
    return x_social, x_diffusion


def fuse(x_social: Node, x_diffusion: Node, w_fuse: Node) -> Node:
    """Blend the two relation views through the four-block interaction
    [a; b; a*b; a-b] followed by a linear projection back to dim."""
    blocks = ad.concat_cols([
        x_social,
        x_diffusion,
        ad.mul(x_social, x_diffusion),
        ad.sub(x_social, x_diffusion),
    ])
    return ad.matmul(blocks, w_fuse)


def interval_representations(params: dict, snapshots, cfg: ModelConfig):
    """Encode every snapshot into a (num_users, dim) representation.

    Each interval's stack restarts from the shared user embedding table and
    shares weights with the other intervals. With the graph encoder disabled
    the raw embedding table stands in for every interval.
    """
    if not snapshots:
        raise ValueError("need at least one snapshot")
    if not cfg.use_graph_encoder:
        return [params["user_emb"]] * len(snapshots)
    reps = []
    for i, snapshot in enumerate(snapshots):
        t_vec = ad.embedding_lookup(params["time_emb"], np.array([i]))
        x = params["user_emb"]
        for layer in range(cfg.gcn_layers):
            x_social, x_diffusion = hgcn_layer(
                x, snapshot,
                params[f"gcn{layer}_social_w"],
                params[f"gcn{layer}_diffusion_w"],
                t_vec,
            )
            x = fuse(x_social, x_diffusion, params["fuse_w"])
        reps.append(x)
    return reps


# --------------------------------------------------------------------------
# Per-event selection of interval representations
# --------------------------------------------------------------------------

def _selector(rows, users, num_users, positions=None):
    """Constant (rows, num_users) CSR picking ``users[k]`` at row k.

    ``positions`` restricts which rows carry an entry; other rows stay zero.
    """
    if positions is None:
        positions = np.arange(len(users))
    data = np.ones(len(positions))
    return sp.csr_matrix(
        (data, (positions, np.asarray(users)[positions])),
        shape=(rows, num_users),
    )


def select_hard(reps, users, times_norm, intervals: TimeIntervals) -> Node:
    """Each event takes its user's row from the interval containing its
    repost time."""
    slots = np.atleast_1d(intervals.interval_of(times_norm))
    length = len(users)
    terms = []
    for j in np.unique(slots):
        positions = np.flatnonzero(slots == j)
        matrix = _selector(length, users, reps[j].shape[0], positions)
        terms.append(ad.sparse_matmul(matrix, reps[int(j)]))
    return ad.add_n(terms)


def select_soft(reps, users, times_norm, intervals: TimeIntervals,
                time_table: Node, dim: int):
    """Time-aware attention over interval representations.

    For each event, the stacked per-interval rows of its user are scored
    against the embedding of the interval containing the repost time,
    intervals that start after the repost time are switched off, and the
    softmax-weighted mixture becomes the event representation.

    Returns ``(mixed, alpha)`` where ``alpha`` has one attention row per
    event over the intervals.
    """
    times_norm = np.atleast_1d(np.asarray(times_norm, dtype=np.float64))
    slots = np.atleast_1d(intervals.interval_of(times_norm))
    length = len(users)
    n = len(reps)
    selector = _selector(length, users, reps[0].shape[0])
    per_interval = [ad.sparse_matmul(selector, reps[j]) for j in range(n)]
    query = ad.embedding_lookup(time_table, slots)
    logit_cols = [ad.row_sum(ad.mul(per_interval[j], query)) for j in range(n)]
    logits = ad.scale(ad.concat_cols(logit_cols), 1.0 / math.sqrt(dim))
    mask = np.where(
        times_norm[:, None] >= intervals.left_boundaries[None, :], 0.0, ad.MASK_OFF
    )
    alpha = ad.softmax_rows(logits, mask)
    mixed = ad.add_n([
        ad.mul(ad.slice_cols(alpha, j, j + 1), per_interval[j]) for j in range(n)
    ])
    return mixed, alpha


# --------------------------------------------------------------------------
# Sequence encoder and scoring head
# --------------------------------------------------------------------------

def causal_mask(length: int) -> np.ndarray:
    """Additive mask letting position p attend to positions q <= p only."""
    keep = np.tril(np.ones((length, length), dtype=bool))
    return np.where(keep, 0.0, ad.MASK_OFF)


def masked_self_attention(seq: Node, params: dict, cfg: ModelConfig) -> Node:
    """Causally masked multi-head self-attention, heads concatenated and
    projected back to dim."""
    mask = causal_mask(seq.shape[0])
    inv_sqrt_dk = 1.0 / math.sqrt(cfg.head_dim)
    heads = []
    for h in range(cfg.heads):
        q = ad.matmul(seq, params[f"attn{h}_wq"])
        k = ad.matmul(seq, params[f"attn{h}_wk"])
        v = ad.matmul(seq, params[f"attn{h}_wv"])
        weights = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt_dk), mask)
        heads.append(ad.matmul(weights, v))
    return ad.matmul(ad.concat_cols(heads), params["attn_wo"])


def predict_scores(z: Node, params: dict) -> Node:
    """Two-layer head mapping sequence states to per-user scores.

    Row p of the result scores the user infected at step p+1.
    """
    hidden = ad.relu(ad.add(ad.matmul(z, params["head_w1"]), params["head_b1"]))
    return ad.add(ad.matmul(hidden, ad.transpose(params["head_w2"])), params["head_b2"])


def cascade_scores(params: dict, reps, users, times_norm,
                   intervals: TimeIntervals, cfg: ModelConfig) -> Node:
    """Scores for one cascade prefix given precomputed interval
    representations; shape (len(users), num_users)."""
    users = np.asarray(users, dtype=np.int64)
    if users.size < 1:
        raise ValueError("need at least one event to score")
    if cfg.selection == "hard":
        seq = select_hard(reps, users, times_norm, intervals)
    else:
        seq, _ = select_soft(reps, users, times_norm, intervals,
                             params["time_emb"], cfg.dim)
    z = masked_self_attention(seq, params, cfg)
    return predict_scores(z, params)


def forward_scores(params: dict, snapshots, users, times_norm,
                   intervals: TimeIntervals, cfg: ModelConfig) -> Node:
    """Convenience composition: encode snapshots, then score one cascade."""
    reps = interval_representations(params, snapshots, cfg)
    return cascade_scores(params, reps, users, times_norm, intervals, cfg)


def ablate(cfg: ModelConfig) -> dict:
    """The four standard ablations of a base configuration."""
    return {
        "hard-selection": replace(cfg, selection="hard"),
        "no-social": replace(cfg, use_social=False),
        "no-diffusion": replace(cfg, use_diffusion=False),
        "embedding-only": replace(cfg, use_graph_encoder=False),
    }
