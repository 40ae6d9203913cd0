"""Training loop, ranking evaluation and checkpointing.

The training objective is the summed next-user cross entropy over steps
2..L of each cascade (scores pass through a softmax before the log), and
evaluation ranks the not-yet-infected users at every step, reporting
Hits@k and MAP@k as percentages. With one relevant user per step, MAP@k
reduces to the truncated reciprocal rank averaged over steps.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import Adam, Node, NumericsError
from .data import DatasetSplit, TimeScaler
from .graphs import TimeIntervals, build_snapshots, split_timeline
from .model import ModelConfig, ablate  # re-exported: ablations live with the config

__all__ = [
    "TrainConfig", "EvalReport", "Model", "TrainResult", "CheckpointError",
    "cascade_nll", "train", "evaluate", "evaluate_random", "report_from_scores",
    "rank_of_target", "save_checkpoint", "load_checkpoint", "ablate",
]


class CheckpointError(ValueError):
    """A checkpoint is unreadable or incompatible with the dataset."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 50
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.patience < 1 or self.epochs < 1:
            raise ValueError("batch_size, patience and epochs must be >= 1")


@dataclass
class EvalReport:
    """Ranking metrics in percent, keyed by cutoff k."""

    hits: dict
    map: dict
    num_steps: int

    def format_text(self) -> str:
        lines = [f"steps {self.num_steps}"]
        for k in sorted(self.hits):
            lines.append(f"hits@{k} {self.hits[k]:.4f}")
        for k in sorted(self.map):
            lines.append(f"map@{k} {self.map[k]:.4f}")
        return "\n".join(lines)

    def to_json(self) -> str:
        payload = {"steps": self.num_steps}
        payload.update({f"hits@{k}": self.hits[k] for k in sorted(self.hits)})
        payload.update({f"map@{k}": self.map[k] for k in sorted(self.map)})
        return json.dumps(payload, sort_keys=True)


@dataclass
class Model:
    """Everything needed to score cascades: parameters plus the frozen
    data-derived context (snapshots, intervals, time scaler)."""

    params: dict
    cfg: ModelConfig
    snapshots: list
    intervals: TimeIntervals
    scaler: TimeScaler


@dataclass
class TrainResult:
    model: Model
    adam_m: dict
    adam_v: dict
    adam_step: int
    log_lines: list
    epochs_run: int
    best_epoch: int
    initial_loss: float
    final_loss: float


def cascade_nll(scores: Node, users) -> Node:
    """Summed negative log-likelihood of the observed continuation.

    Row p of ``scores`` predicts the user at event p+1, so rows 0..L-2 are
    matched against users[1:].
    """
    users = np.asarray(users, dtype=np.int64)
    if len(users) < 2:
        raise ValueError("need a cascade of length >= 2 to compute a loss")
    if users.max() >= scores.shape[1]:
        raise ValueError(
            f"target user id {users.max()} out of range for {scores.shape[1]} users"
        )
    predicted = ad.slice_rows(scores, 0, len(users) - 1)
    return ad.softmax_nll(predicted, users[1:])


def _model_context(split: DatasetSplit, edges, cfg: ModelConfig):
    """Fit the time scaler and build snapshots from the training split only."""
    scaler = TimeScaler.fit(split.train)
    norm_train = [scaler.normalize_cascade(c) for c in split.train]
    intervals = split_timeline(norm_train, cfg.intervals)
    snapshots = build_snapshots(
        norm_train, edges, cfg.num_users, intervals,
        snapshot_mode=cfg.snapshot_mode, pair_mode=cfg.pair_mode,
        use_social=cfg.use_social, use_diffusion=cfg.use_diffusion,
    )
    return scaler, intervals, snapshots


def train(split: DatasetSplit, edges, train_cfg: TrainConfig, cfg: ModelConfig,
          log_fn=None) -> TrainResult:
    """Mini-batch Adam training with early stopping on validation Hits@10.

    Emits one log line per epoch: ``epoch loss valid_hits@10`` where the
    loss is the per-step mean training NLL. Keeps the parameters (and
    optimizer state) of the best validation epoch. Fully deterministic for
    a fixed seed.
    """
    if not split.train or not split.valid:
        raise ValueError("training requires non-empty train and valid splits")
    scaler, intervals, snapshots = _model_context(split, edges, cfg)
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(2)
    params = mdl.init_params(cfg, np.random.default_rng(seeds[0]))
    shuffle_rng = np.random.default_rng(seeds[1])
    adam = Adam(params, lr=train_cfg.lr, beta1=train_cfg.beta1,
                beta2=train_cfg.beta2)
    model = Model(params, cfg, snapshots, intervals, scaler)

    norm_train = [(c.users, scaler.transform(c.times)) for c in split.train]
    best = None  # (hits@10, epoch, params copy, adam m, adam v, adam step)
    stale_epochs = 0
    log_lines = []
    initial_loss = None
    epoch_loss = float("nan")
    epochs_run = 0

    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.permutation(len(norm_train))
        total_nll = 0.0
        total_steps = 0
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            try:
                reps = mdl.interval_representations(params, snapshots, cfg)
                losses = []
                steps = 0
                for idx in batch:
                    users, times = norm_train[idx]
                    scores = mdl.cascade_scores(params, reps, users, times, intervals, cfg)
                    losses.append(cascade_nll(scores, users))
                    steps += len(users) - 1
                loss = ad.scale(ad.add_n(losses), 1.0 / steps)
                adam.zero_grad()
                ad.backward(loss, params.values())
                adam.step()
            except NumericsError as exc:
                raise NumericsError(
                    f"training diverged at epoch {epoch}, batch {start // train_cfg.batch_size}: {exc}"
                ) from exc
            total_nll += float(loss.value) * steps
            total_steps += steps
        epoch_loss = total_nll / total_steps
        if initial_loss is None:
            initial_loss = epoch_loss
        valid_hits = evaluate(model, split.valid, ks=(10,)).hits[10]
        line = f"{epoch} {epoch_loss:.6f} {valid_hits:.4f}"
        log_lines.append(line)
        if log_fn is not None:
            log_fn(line)
        epochs_run = epoch
        if best is None or valid_hits > best[0]:
            best = (
                valid_hits, epoch,
                {k: p.value.copy() for k, p in params.items()},
                copy.deepcopy(adam.m), copy.deepcopy(adam.v), adam.step_count,
            )
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= train_cfg.patience:
                break

    _, best_epoch, best_values, best_m, best_v, best_step = best
    best_params = {k: Node(v, op=k) for k, v in best_values.items()}
    best_model = Model(best_params, cfg, snapshots, intervals, scaler)
    return TrainResult(
        model=best_model, adam_m=best_m, adam_v=best_v, adam_step=best_step,
        log_lines=log_lines, epochs_run=epochs_run, best_epoch=best_epoch,
        initial_loss=initial_loss, final_loss=epoch_loss,
    )


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def rank_of_target(scores_row, infected, target) -> int:
    """1-based rank of ``target`` among uninfected users.

    Users already in the prefix are excluded from the candidate set; ties
    break by ascending user index.
    """
    scores_row = np.asarray(scores_row, dtype=np.float64)
    candidate = np.ones(len(scores_row), dtype=bool)
    candidate[list(infected)] = False
    if not candidate[target]:
        raise ValueError("the true next user must not be masked")
    s_true = scores_row[target]
    better = np.count_nonzero(candidate & (scores_row > s_true))
    tied_earlier = np.count_nonzero(
        candidate & (scores_row == s_true) & (np.arange(len(scores_row)) < target)
    )
    return 1 + better + tied_earlier


def report_from_scores(cascades, score_fn, ks=(10, 50, 100)) -> EvalReport:
    """Build an :class:`EvalReport` from an arbitrary scorer.

    ``score_fn(cascade)`` must return an (L, num_users) array whose row p
    scores the user at event p+1. Prefix users are masked from the
    candidate set at every step; metrics are means over all scored steps,
    in percent.
    """
    hits = {k: 0.0 for k in ks}
    ap = {k: 0.0 for k in ks}
    steps = 0
    for cascade in cascades:
        scores = score_fn(cascade)
        for p in range(len(cascade) - 1):
            target = int(cascade.users[p + 1])
            rank = rank_of_target(scores[p], cascade.users[: p + 1], target)
            for k in ks:
                if rank <= k:
                    hits[k] += 1.0
                    ap[k] += 1.0 / rank
            steps += 1
    if steps == 0:
        raise ValueError("no scored steps; need cascades of length >= 2")
    return EvalReport(
        hits={k: 100.0 * hits[k] / steps for k in ks},
        map={k: 100.0 * ap[k] / steps for k in ks},
        num_steps=steps,
    )


def evaluate(model: Model, cascades, ks=(10, 50, 100)) -> EvalReport:
    """Rank the true next user at every step of every cascade."""
    reps = mdl.interval_representations(model.params, model.snapshots, model.cfg)

    def score_fn(cascade):
        times = model.scaler.transform(cascade.times)
        return mdl.cascade_scores(
            model.params, reps, cascade.users, times, model.intervals, model.cfg
        ).value

    return report_from_scores(cascades, score_fn, ks)


def evaluate_random(cascades, num_users, ks=(10, 50, 100), seed=0) -> EvalReport:
    """Baseline report from uniformly random scores (same masking rules)."""
    rng = np.random.default_rng(seed)

    def score_fn(cascade):
        return rng.random((len(cascade), num_users))

    return report_from_scores(cascades, score_fn, ks)


def predict_next(model: Model, users, times, k=10):
    """Top-k (user index, score) continuations of a raw-time prefix.

    Prefix users are excluded; ties break by ascending user index.
    """
    users = np.asarray(users, dtype=np.int64)
    times_norm = model.scaler.transform(np.asarray(times, dtype=np.float64))
    reps = mdl.interval_representations(model.params, model.snapshots, model.cfg)
    scores = mdl.cascade_scores(
        model.params, reps, users, times_norm, model.intervals, model.cfg
    ).value[-1]
    masked = scores.copy()
    masked[users] = -np.inf
    order = np.lexsort((np.arange(len(masked)), -masked))
    order = order[: min(k, len(masked) - len(users))]
    return [(int(u), float(scores[u])) for u in order]


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

_MAGIC = b"CNET"
_VERSION = 1


def save_checkpoint(path, result_or_model, adam_m=None, adam_v=None, adam_step=0):
    """Write parameters plus optimizer state to a versioned binary file.

    Layout: magic, version, length-prefixed JSON header (config, parameter
    names and shapes, optimizer step), then raw float64 buffers in header
    order: each parameter, then its first and second moment. A text manifest
    of shapes is written next to the checkpoint. Byte-identical for
    identical inputs.
    """
    if isinstance(result_or_model, TrainResult):
        model = result_or_model.model
        adam_m = result_or_model.adam_m
        adam_v = result_or_model.adam_v
        adam_step = result_or_model.adam_step
    else:
        model = result_or_model
    params = model.params
    if adam_m is None:
        adam_m = {name: np.zeros_like(p.value) for name, p in params.items()}
        adam_v = {name: np.zeros_like(p.value) for name, p in params.items()}
    names = list(params.keys())
    header = {
        "version": _VERSION,
        "config": asdict(model.cfg),
        "params": [{"name": n, "shape": list(params[n].value.shape)} for n in names],
        "adam_step": int(adam_step),
        "scaler": {"t_min": model.scaler.t_min, "t_max": model.scaler.t_max},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(params[name].value.tobytes(order="C"))
            fh.write(adam_m[name].tobytes(order="C"))
            fh.write(adam_v[name].tobytes(order="C"))
    with open(str(path) + ".manifest.txt", "w", encoding="utf-8") as fh:
        for name in names:
            shape = "x".join(str(s) for s in params[name].value.shape)
            fh.write(f"{name} {shape}\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (params, cfg, scaler, adam_m, adam_v, step)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (magic {magic!r})")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        params = {}
        adam_m = {}
        adam_v = {}
        for entry in header["params"]:
            name = entry["name"]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buffers = []
            for _ in range(3):
                raw = fh.read(count * 8)
                if len(raw) != count * 8:
                    raise CheckpointError(f"{path}: truncated buffer for {name!r}")
                buffers.append(np.frombuffer(raw, dtype=np.float64).reshape(shape).copy())
            params[name] = Node(buffers[0], op=name)
            adam_m[name] = buffers[1]
            adam_v[name] = buffers[2]
    cfg = ModelConfig(**header["config"])
    scaler = TimeScaler(**header["scaler"])
    return params, cfg, scaler, adam_m, adam_v, header["adam_step"]


def model_from_checkpoint(path, split: DatasetSplit, edges, num_users) -> Model:
    """Rebuild a runnable model: checkpoint parameters plus snapshots
    reconstructed from the dataset's training split."""
    params, cfg, scaler, _, _, _ = load_checkpoint(path)
    if cfg.num_users != num_users:
        raise CheckpointError(
            f"checkpoint was trained with num_users={cfg.num_users}, "
            f"dataset vocabulary has {num_users}"
        )
    norm_train = [scaler.normalize_cascade(c) for c in split.train]
    intervals = split_timeline(norm_train, cfg.intervals)
    snapshots = build_snapshots(
        norm_train, edges, cfg.num_users, intervals,
        snapshot_mode=cfg.snapshot_mode, pair_mode=cfg.pair_mode,
        use_social=cfg.use_social, use_diffusion=cfg.use_diffusion,
    )
    return Model(params, cfg, snapshots, intervals, scaler)
