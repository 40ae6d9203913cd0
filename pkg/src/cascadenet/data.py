"""Cascade datasets: parsing, serialization, splitting, synthesis.

File formats
------------
cascades    one cascade per line; events are space-separated ``user,timestamp``
            tokens; user ids are opaque strings without spaces or commas;
            timestamps are non-negative reals
edges       one directed edge per line as ``src dst`` (src follows dst)
vocabulary  one ``user<TAB>index`` line per user, sorted by index

Loading is strict: a malformed line raises :class:`CascadeFormatError`
naming its line number. Blank lines are skipped.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class CascadeFormatError(ValueError):
    """A data file line does not match the expected grammar."""


class EmptyDatasetError(ValueError):
    """No usable cascades were found."""


class UnknownUserError(ValueError):
    """Input references a user missing from a frozen vocabulary."""


class SynthesisError(RuntimeError):
    """The synthetic generator could not produce usable cascades."""


class Vocab:
    """Bijection between external user ids (strings) and dense indices."""

    def __init__(self):
        self._index = {}
        self._ids = []

    def __len__(self):
        return len(self._ids)

    def __contains__(self, user_id):
        return user_id in self._index

    def add(self, user_id: str) -> int:
        """Return the index of ``user_id``, assigning the next free one if new."""
        idx = self._index.get(user_id)
        if idx is None:
            idx = len(self._ids)
            self._index[user_id] = idx
            self._ids.append(user_id)
        return idx

    def index_of(self, user_id: str) -> int:
        try:
            return self._index[user_id]
        except KeyError:
            raise UnknownUserError(f"unknown user id {user_id!r}") from None

    def id_of(self, index: int) -> str:
        return self._ids[index]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for idx, user_id in enumerate(self._ids):
                fh.write(f"{user_id}\t{idx}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        vocab = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    user_id, idx = line.split("\t")
                    idx = int(idx)
                except ValueError:
                    raise CascadeFormatError(
                        f"{path}: line {lineno}: bad vocabulary entry {line!r}"
                    ) from None
                if idx != len(vocab._ids):
                    raise CascadeFormatError(
                        f"{path}: line {lineno}: vocabulary indices must be "
                        f"dense and sorted, got {idx}"
                    )
                vocab._index[user_id] = idx
                vocab._ids.append(user_id)
        return vocab


@dataclass(eq=False)
class Cascade:
    """One item's repost trace: users in non-decreasing timestamp order.

    ``users`` holds dense vocabulary indices, each appearing at most once.
    """

    users: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.users.shape != self.times.shape or self.users.ndim != 1:
            raise ValueError("users and times must be parallel 1-d arrays")
        if len(self.users) != len(set(self.users.tolist())):
            raise ValueError("a user may appear only once per cascade")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if np.any(self.times < 0):
            raise ValueError("timestamps must be non-negative")

    def __len__(self):
        return len(self.users)

    @property
    def events(self):
        return list(zip(self.users.tolist(), self.times.tolist()))

    @classmethod
    def from_events(cls, events) -> "Cascade":
        users = [u for u, _ in events]
        times = [t for _, t in events]
        return cls(np.array(users, dtype=np.int64), np.array(times, dtype=np.float64))


@dataclass
class DatasetSplit:
    """Disjoint train/valid/test partition of a cascade list."""

    train: list
    valid: list
    test: list
    seed: int


def parse_cascade_line(line: str, lineno: int, vocab: Vocab, extend: bool = True):
    """Parse one cascade line into (users, times) in file order.

    New user ids are assigned indices in first-seen order when ``extend``
    is true, otherwise an unknown id raises :class:`UnknownUserError`.
    """
    users = []
    times = []
    for token in line.split():
        user_id, sep, stamp = token.rpartition(",")
        if not sep or not user_id:
            raise CascadeFormatError(
                f"line {lineno}: token {token!r} is not 'user,timestamp'"
            )
        try:
            t = float(stamp)
        except ValueError:
            raise CascadeFormatError(
                f"line {lineno}: bad timestamp {stamp!r} in token {token!r}"
            ) from None
        if not math.isfinite(t) or t < 0:
            raise CascadeFormatError(
                f"line {lineno}: timestamp must be a non-negative real, got {stamp!r}"
            )
        if extend:
            idx = vocab.add(user_id)
        elif user_id in vocab:
            idx = vocab.index_of(user_id)
        else:
            raise UnknownUserError(f"line {lineno}: unknown user id {user_id!r}")
        users.append(idx)
        times.append(t)
    return users, times


def _canonical_events(users, times, max_len=None):
    """Sort by timestamp (stable), drop repeat users keeping the earliest
    event, then truncate to ``max_len``."""
    order = sorted(range(len(users)), key=lambda k: times[k])
    seen = set()
    events = []
    for k in order:
        if users[k] in seen:
            continue
        seen.add(users[k])
        events.append((users[k], times[k]))
    if max_len is not None:
        events = events[:max_len]
    return events


def load_cascades(path, max_len=None, vocab=None, extend=True):
    """Load a cascade file.

    Returns ``(cascades, vocab)``. Cascades shorter than two events after
    deduplication and truncation are dropped (they carry no prediction
    target). An input yielding zero cascades raises
    :class:`EmptyDatasetError`.
    """
    if vocab is None:
        vocab = Vocab()
    cascades = []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            users, times = parse_cascade_line(line, lineno, vocab, extend=extend)
            events = _canonical_events(users, times, max_len=max_len)
            if len(events) < 2:
                dropped += 1
                continue
            cascades.append(Cascade.from_events(events))
    if dropped:
        log.info("dropped %d cascade(s) shorter than 2 events", dropped)
    if not cascades:
        raise EmptyDatasetError(f"{path}: no cascades with at least 2 events")
    return cascades, vocab


def serialize_cascade(cascade: Cascade, vocab: Vocab) -> str:
    return " ".join(f"{vocab.id_of(u)},{t!r}" for u, t in cascade.events)


def save_cascades(path, cascades, vocab):
    with open(path, "w", encoding="utf-8") as fh:
        for cascade in cascades:
            fh.write(serialize_cascade(cascade, vocab) + "\n")


def load_social_edges(path, vocab, on_unknown="error"):
    """Load a directed edge file against an existing vocabulary.

    ``on_unknown`` is either ``"error"`` (default) or ``"extend"``; extending
    grows the vocabulary with edge-only users. Self-loop lines are skipped
    (counted in a single warning), duplicate edges collapse to one.
    """
    if on_unknown not in ("error", "extend"):
        raise ValueError(f"on_unknown must be 'error' or 'extend', got {on_unknown!r}")
    edges = []
    seen = set()
    self_loops = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise CascadeFormatError(
                    f"{path}: line {lineno}: expected 'src dst', got {line.strip()!r}"
                )
            src_id, dst_id = parts
            if src_id == dst_id:
                self_loops += 1
                continue
            if on_unknown == "extend":
                src, dst = vocab.add(src_id), vocab.add(dst_id)
            else:
                try:
                    src, dst = vocab.index_of(src_id), vocab.index_of(dst_id)
                except UnknownUserError as exc:
                    raise UnknownUserError(f"{path}: line {lineno}: {exc}") from None
            if (src, dst) not in seen:
                seen.add((src, dst))
                edges.append((src, dst))
    if self_loops:
        log.warning("%s: skipped %d self-loop edge line(s)", path, self_loops)
    return edges


def serialize_edges(edges, vocab) -> str:
    return "".join(f"{vocab.id_of(s)} {vocab.id_of(d)}\n" for s, d in edges)


def save_edges(path, edges, vocab):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_edges(edges, vocab))


def split_dataset(cascades, ratios=(0.8, 0.1, 0.1), seed=0) -> DatasetSplit:
    """Shuffle and partition cascades into train/valid/test.

    Valid and test sizes are floored fractions of the total; train takes the
    remainder, so the parts always sum to the input size. Deterministic for
    a fixed seed.
    """
    n = len(cascades)
    if n < 3:
        raise ValueError(f"need at least 3 cascades to split, got {n}")
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be 3 positive numbers summing to 1, got {ratios}")
    n_valid = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_valid - n_test
    perm = np.random.default_rng(seed).permutation(n)
    pick = lambda idxs: [cascades[i] for i in idxs]
    return DatasetSplit(
        train=pick(perm[:n_train]),
        valid=pick(perm[n_train : n_train + n_valid]),
        test=pick(perm[n_train + n_valid :]),
        seed=seed,
    )


@dataclass
class TimeScaler:
    """Min-max normalization of timestamps onto [0, 1].

    Fit on training events only; out-of-range timestamps (from validation or
    test traces) are clipped. A degenerate time span maps everything to 0.
    """

    t_min: float
    t_max: float

    @classmethod
    def fit(cls, cascades) -> "TimeScaler":
        if not cascades:
            raise EmptyDatasetError("cannot fit a time scaler on zero cascades")
        t_min = min(float(c.times.min()) for c in cascades)
        t_max = max(float(c.times.max()) for c in cascades)
        return cls(t_min=t_min, t_max=t_max)

    def transform(self, times):
        times = np.asarray(times, dtype=np.float64)
        span = self.t_max - self.t_min
        if span <= 0:
            return np.zeros_like(times)
        return np.clip((times - self.t_min) / span, 0.0, 1.0)

    def normalize_cascade(self, cascade: Cascade) -> Cascade:
        return Cascade(cascade.users.copy(), self.transform(cascade.times))


# --------------------------------------------------------------------------
# Synthetic corpora (independent-cascade dynamics on a random directed graph)
# --------------------------------------------------------------------------

def simulate_cascade(out_neighbors, seed_user, ic_prob, horizon, rng):
    """Run one independent-cascade simulation and return [(user, time)].

    Draw protocol (fixed so an external reference can reproduce runs
    bit-for-bit from the same generator state):

    * infections are processed in chronological order (ties cannot occur
      for continuous delays; the seed starts alone at time 0);
    * when a user's infection is processed, its out-neighbors are visited
      in ascending index order; for each, one uniform draw decides success
      against ``ic_prob``, and on success one Exp(1) draw gives the delay;
    * an attempt succeeds only if it lands within ``horizon`` and earlier
      than any previously scheduled infection of that neighbor.
    """
    infection = {seed_user: 0.0}
    heap = [(0.0, seed_user)]
    while heap:
        t, u = heapq.heappop(heap)
        if t > infection[u]:
            continue  # superseded by an earlier infection
        for v in out_neighbors.get(u, ()):
            if rng.random() < ic_prob:
                tv = t + rng.exponential(1.0)
                if tv <= horizon and tv < infection.get(v, math.inf):
                    infection[v] = tv
                    heapq.heappush(heap, (tv, v))
    return sorted(infection.items(), key=lambda item: (item[1], item[0]))


def random_directed_graph(num_users, num_edges, rng):
    """Sample ``num_edges`` distinct directed edges without self-loops.

    Rejection sampling: pairs are drawn as ``rng.integers(0, num_users,
    size=2)`` until enough distinct non-loop edges accumulate.
    """
    max_edges = num_users * (num_users - 1)
    if num_edges > max_edges:
        raise ValueError(f"{num_edges} edges requested, only {max_edges} possible")
    edges = []
    seen = set()
    while len(edges) < num_edges:
        src, dst = (int(x) for x in rng.integers(0, num_users, size=2))
        if src == dst or (src, dst) in seen:
            continue
        seen.add((src, dst))
        edges.append((src, dst))
    return edges


def generate_synthetic(
    num_users,
    num_edges,
    num_cascades,
    ic_prob,
    horizon=10.0,
    seed=0,
    max_retries=50,
):
    """Generate a reproducible corpus: (cascades, social edges).

    The social edges are the ground-truth propagation graph the cascades
    were simulated on. Each cascade starts from a uniformly drawn seed user
    at time 0; cascades that fail to reach two events are re-rolled up to
    ``max_retries`` times before raising :class:`SynthesisError`.
    """
    if num_users < 2:
        raise ValueError(f"need at least 2 users, got {num_users}")
    if not 0.0 <= ic_prob <= 1.0:
        raise ValueError(f"ic_prob must be within [0, 1], got {ic_prob}")
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    rng = np.random.default_rng(seed)
    edges = random_directed_graph(num_users, num_edges, rng)
    out_neighbors = {}
    for src, dst in edges:
        out_neighbors.setdefault(src, []).append(dst)
    for nbrs in out_neighbors.values():
        nbrs.sort()
    cascades = []
    for _ in range(num_cascades):
        for _attempt in range(max_retries):
            seed_user = int(rng.integers(0, num_users))
            events = simulate_cascade(out_neighbors, seed_user, ic_prob, horizon, rng)
            if len(events) >= 2:
                cascades.append(Cascade.from_events(events))
                break
        else:
            raise SynthesisError(
                f"could not grow a cascade past 1 event in {max_retries} tries "
                f"(ic_prob={ic_prob}, edges={num_edges})"
            )
    return cascades, edges


# --------------------------------------------------------------------------
# Prepared dataset directories (vocab + split files + metadata)
# --------------------------------------------------------------------------

SPLIT_FILES = {"train": "train.txt", "valid": "valid.txt", "test": "test.txt"}


def save_prepared_dataset(out_dir, split: DatasetSplit, vocab: Vocab, edges, meta: dict):
    """Write vocab, per-split cascade files, edge file and meta.json."""
    os.makedirs(out_dir, exist_ok=True)
    vocab.save(os.path.join(out_dir, "vocab.tsv"))
    for name, filename in SPLIT_FILES.items():
        save_cascades(os.path.join(out_dir, filename), getattr(split, name), vocab)
    save_edges(os.path.join(out_dir, "edges.txt"), edges, vocab)
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_prepared_dataset(data_dir):
    """Load a prepared dataset directory.

    Returns ``(split, vocab, edges, meta)``. The vocabulary is frozen: split
    files and the edge file may not introduce new users.
    """
    vocab = Vocab.load(os.path.join(data_dir, "vocab.tsv"))
    parts = {}
    for name, filename in SPLIT_FILES.items():
        path = os.path.join(data_dir, filename)
        cascades, _ = load_cascades(path, vocab=vocab, extend=False)
        parts[name] = cascades
    edges_path = os.path.join(data_dir, "edges.txt")
    edges = []
    if os.path.getsize(edges_path) > 0:
        edges = load_social_edges(edges_path, vocab, on_unknown="error")
    with open(os.path.join(data_dir, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    split = DatasetSplit(parts["train"], parts["valid"], parts["test"], meta.get("seed", 0))
    return split, vocab, edges, meta
