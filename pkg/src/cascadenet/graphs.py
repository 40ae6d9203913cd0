"""Interval snapshots of the heterogeneous user graph.

The diffusion timeline (normalized to [0, 1]) is cut into equal-width
intervals. Every interval gets one snapshot holding two row-normalized
adjacency matrices over the same user set: the static follow graph and a
repost graph accumulated from training cascades up to (or within) that
interval.

Conventions: the row of an entry is the destination of information flow,
so convolving ``A @ X`` aggregates a user's influencers into the user. Both
matrices carry an explicit self-loop on every user and each row sums to 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class SparseAdj:
    """Immutable weighted directed adjacency in CSR form.

    Entries are (row, col, weight) with unique (row, col) pairs and finite
    weights. Builders in this module produce row-stochastic matrices.
    """

    def __init__(self, num_rows, num_cols, rows, cols, weights):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        if not (rows.shape == cols.shape == weights.shape):
            raise ValueError("rows, cols and weights must have equal lengths")
        if rows.size:
            if rows.min() < 0 or rows.max() >= num_rows:
                raise ValueError("row index out of range")
            if cols.min() < 0 or cols.max() >= num_cols:
                raise ValueError("col index out of range")
        if not np.all(np.isfinite(weights)):
            raise ValueError("adjacency weights must be finite")
        keys = rows * num_cols + cols
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate (row, col) entries")
        self.num_rows = int(num_rows)
        self.num_cols = int(num_cols)
        self.matrix = sp.csr_matrix(
            (weights, (rows, cols)), shape=(num_rows, num_cols)
        )
        self.matrix_t = self.matrix.T.tocsr()

    @classmethod
    def from_weights(cls, num_users, weight_by_edge) -> "SparseAdj":
        """Build a square matrix from a {(row, col): weight} mapping."""
        if weight_by_edge:
            rows, cols = zip(*weight_by_edge.keys())
            weights = list(weight_by_edge.values())
        else:
            rows, cols, weights = [], [], []
        return cls(num_users, num_users, rows, cols, weights)

    @classmethod
    def identity(cls, num_users) -> "SparseAdj":
        idx = np.arange(num_users)
        return cls(num_users, num_users, idx, idx, np.ones(num_users))

    @property
    def nnz(self):
        return self.matrix.nnz

    def entries(self):
        """Yield (row, col, weight) triples in row-major order."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for k in order:
            yield int(coo.row[k]), int(coo.col[k]), float(coo.data[k])

    def entry_set(self):
        coo = self.matrix.tocoo()
        return set(zip(coo.row.tolist(), coo.col.tolist()))

    def row_sums(self):
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def toarray(self):
        return self.matrix.toarray()

    def dump(self, path):
        """Debug dump as 'row col weight' text triples."""
        with open(path, "w", encoding="utf-8") as fh:
            for row, col, weight in self.entries():
                fh.write(f"{row} {col} {weight!r}\n")


@dataclass(frozen=True)
class TimeIntervals:
    """Equal-width partition of normalized time [0, 1] into n intervals.

    Interval ``j`` (0-based) covers ``[j/n, (j+1)/n)``; the last interval is
    closed on the right so every t in [0, 1] belongs to exactly one.
    """

    boundaries: np.ndarray

    @classmethod
    def equal_width(cls, n: int) -> "TimeIntervals":
        if n < 1:
            raise ValueError(f"need at least 1 interval, got {n}")
        return cls(boundaries=np.linspace(0.0, 1.0, n + 1))

    @property
    def n(self) -> int:
        return len(self.boundaries) - 1

    @property
    def left_boundaries(self) -> np.ndarray:
        return self.boundaries[:-1]

    def interval_of(self, t):
        """Map normalized time(s) to 0-based interval indices."""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.boundaries, t, side="right") - 1
        idx = np.clip(idx, 0, self.n - 1)
        return idx if idx.ndim else int(idx)


def split_timeline(cascades, n: int) -> TimeIntervals:
    """Equal-width intervals over the normalized timeline of the cascades."""
    if n < 1:
        raise ValueError(f"need at least 1 interval, got {n}")
    if not any(len(c) for c in cascades):
        raise ValueError("cannot split a timeline with no events")
    return TimeIntervals.equal_width(n)


def _row_normalized(num_users, raw_weights) -> SparseAdj:
    """Add a unit self-loop to every user, then normalize each row to sum 1."""
    weights = dict(raw_weights)
    for u in range(num_users):
        weights[(u, u)] = weights.get((u, u), 0.0) + 1.0
    totals = np.zeros(num_users)
    for (row, _col), w in weights.items():
        totals[row] += w
    normalized = {edge: w / totals[edge[0]] for edge, w in weights.items()}
    return SparseAdj.from_weights(num_users, normalized)


def build_social_adjacency(edges, num_users) -> SparseAdj:
    """Row-normalized follow graph; row = follower, col = followee."""
    raw = {}
    for src, dst in edges:
        raw[(src, dst)] = 1.0
    return _row_normalized(num_users, raw)


def repost_pair_counts(cascades, intervals: TimeIntervals, i, mode="cumulative",
                       pair_mode="consecutive"):
    """Raw repost edge counts for snapshot ``i`` before normalization.

    For every cascade, each event pair where the later user reposts at a
    time inside the covered window contributes weight 1 to the edge
    (later user <- earlier user), keyed as (row=later, col=earlier).
    ``mode="cumulative"`` covers intervals 0..i, ``"local"`` interval i only.
    ``pair_mode`` is "consecutive" (immediate predecessor) or "all_prev"
    (every earlier user in the cascade).
    """
    if not 0 <= i < intervals.n:
        raise ValueError(f"snapshot index {i} outside [0, {intervals.n})")
    if mode not in ("cumulative", "local"):
        raise ValueError(f"mode must be 'cumulative' or 'local', got {mode!r}")
    if pair_mode not in ("consecutive", "all_prev"):
        raise ValueError(f"pair_mode must be 'consecutive' or 'all_prev', got {pair_mode!r}")
    counts = {}
    for cascade in cascades:
        slots = intervals.interval_of(cascade.times)
        for k in range(1, len(cascade)):
            j = slots[k]
            covered = j <= i if mode == "cumulative" else j == i
            if not covered:
                continue
            later = int(cascade.users[k])
            sources = range(k) if pair_mode == "all_prev" else (k - 1,)
            for s in sources:
                edge = (later, int(cascade.users[s]))
                counts[edge] = counts.get(edge, 0.0) + 1.0
    return counts


def build_diffusion_adjacency(cascades, intervals, i, num_users, mode="cumulative",
                              pair_mode="consecutive") -> SparseAdj:
    """Row-normalized repost graph for snapshot ``i`` from training cascades."""
    counts = repost_pair_counts(cascades, intervals, i, mode=mode, pair_mode=pair_mode)
    return _row_normalized(num_users, counts)


@dataclass(frozen=True)
class HeteroSnapshot:
    """The pair of relation matrices active during one time interval."""

    index: int
    social: SparseAdj
    diffusion: SparseAdj


def build_snapshots(
    train_cascades,
    social_edges,
    num_users,
    intervals: TimeIntervals,
    snapshot_mode="cumulative",
    pair_mode="consecutive",
    use_social=True,
    use_diffusion=True,
):
    """One snapshot per interval. Only training cascades contribute repost
    edges; disabling a relation substitutes the identity matrix."""
    if use_social:
        social = build_social_adjacency(social_edges, num_users)
    else:
        social = SparseAdj.identity(num_users)
    snapshots = []
    for i in range(intervals.n):
        if use_diffusion:
            diffusion = build_diffusion_adjacency(
                train_cascades, intervals, i, num_users,
                mode=snapshot_mode, pair_mode=pair_mode,
            )
        else:
            diffusion = SparseAdj.identity(num_users)
        snapshots.append(HeteroSnapshot(index=i, social=social, diffusion=diffusion))
    return snapshots
