"""Command line interface.

Subcommands: ``gen-synth`` (synthetic corpora), ``prepare`` (vocab, splits
and metadata), ``train``, ``eval`` and ``predict``. Model and training
options resolve in three layers: profile defaults, then ``--config`` file
entries, then explicit flags. Every command is deterministic for a fixed
``--seed``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as dat
from . import training as tr
from .autodiff import NumericsError
from .model import ModelConfig
from .training import TrainConfig

# "full" matches the reference experiment scale; "desk" keeps every command
# fast enough for local iteration and the test suite.
PROFILES = {
    "full": {"dim": 64, "intervals": 8, "heads": 14, "gcn_layers": 2},
    "desk": {"dim": 16, "intervals": 4, "heads": 4, "gcn_layers": 2},
}

MODEL_KEYS = {
    "dim": int, "intervals": int, "heads": int, "gcn_layers": int,
    "selection": str, "snapshot_mode": str, "pair_mode": str,
    "use_social": bool, "use_diffusion": bool, "use_graph_encoder": bool,
}
TRAIN_KEYS = {
    "lr": float, "batch_size": int, "epochs": int, "patience": int, "seed": int,
}


class CliError(ValueError):
    pass


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise CliError(f"expected a boolean, got {text!r}")


def load_config_file(path) -> dict:
    """Parse a ``key = value`` config file ('#' starts a comment)."""
    known = {**MODEL_KEYS, **TRAIN_KEYS}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}: line {lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise CliError(f"{path}: line {lineno}: unknown option {key!r}")
            kind = known[key]
            try:
                values[key] = _parse_bool(raw) if kind is bool else kind(raw)
            except ValueError as exc:
                raise CliError(f"{path}: line {lineno}: {exc}") from None
    return values


def resolve_run_config(args, num_users):
    """Merge profile, config file and explicit flags into the two configs."""
    merged = dict(PROFILES[args.profile])
    merged.update(
        {"lr": 1e-3, "batch_size": 16, "epochs": 50, "patience": 10, "seed": 0}
    )
    if getattr(args, "config", None):
        merged.update(load_config_file(args.config))
    for key in list(MODEL_KEYS) + list(TRAIN_KEYS):
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    model_cfg = ModelConfig(
        num_users=num_users,
        **{key: merged[key] for key in MODEL_KEYS if key in merged},
    )
    train_cfg = TrainConfig(**{key: merged[key] for key in TRAIN_KEYS})
    return model_cfg, train_cfg


def _add_run_options(parser):
    parser.add_argument("--profile", choices=sorted(PROFILES), default="full",
                        help="hyperparameter profile (default: full)")
    parser.add_argument("--config", help="key = value config file; flags override it")
    parser.add_argument("--dim", type=int)
    parser.add_argument("--intervals", type=int, help="number of time intervals")
    parser.add_argument("--heads", type=int)
    parser.add_argument("--gcn-layers", dest="gcn_layers", type=int)
    parser.add_argument("--selection", choices=["soft", "hard"])
    parser.add_argument("--snapshot-mode", dest="snapshot_mode",
                        choices=["cumulative", "local"])
    parser.add_argument("--pair-mode", dest="pair_mode",
                        choices=["consecutive", "all_prev"])
    parser.add_argument("--no-social", dest="use_social", action="store_const",
                        const=False, help="replace the follow graph with identity")
    parser.add_argument("--no-diffusion", dest="use_diffusion", action="store_const",
                        const=False, help="replace the repost graph with identity")
    parser.add_argument("--no-graph-encoder", dest="use_graph_encoder",
                        action="store_const", const=False,
                        help="skip graph encoding, select over raw embeddings")
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--seed", type=int)


def cmd_gen_synth(args) -> int:
    cascades, edges = dat.generate_synthetic(
        num_users=args.users, num_edges=args.edges, num_cascades=args.cascades,
        ic_prob=args.ic_prob, horizon=args.horizon, seed=args.seed,
    )
    vocab = dat.Vocab()
    for u in range(args.users):
        vocab.add(f"u{u}")
    os.makedirs(args.out, exist_ok=True)
    dat.save_cascades(os.path.join(args.out, "cascades.txt"), cascades, vocab)
    dat.save_edges(os.path.join(args.out, "edges.txt"), edges, vocab)
    mean_len = float(np.mean([len(c) for c in cascades]))
    print(f"wrote {len(cascades)} cascades (mean length {mean_len:.2f}) "
          f"and {len(edges)} edges to {args.out}")
    return 0


def cmd_prepare(args) -> int:
    cascades, vocab = dat.load_cascades(args.cascades, max_len=args.max_len or None)
    if args.edges:
        on_unknown = "error" if args.strict_edges else "extend"
        edges = dat.load_social_edges(args.edges, vocab, on_unknown=on_unknown)
    elif args.allow_no_social:
        edges = []
    else:
        raise CliError("no --edges file given; pass --allow-no-social to proceed "
                       "with a diffusion-only graph")
    split = dat.split_dataset(cascades, seed=args.seed)
    scaler = dat.TimeScaler.fit(split.train)
    meta = {
        "seed": args.seed,
        "num_users": len(vocab),
        "counts": {"train": len(split.train), "valid": len(split.valid),
                   "test": len(split.test)},
        "t_min": scaler.t_min,
        "t_max": scaler.t_max,
        "max_len": args.max_len or None,
        "has_social": bool(args.edges),
    }
    dat.save_prepared_dataset(args.out, split, vocab, edges, meta)
    print(f"prepared {len(cascades)} cascades over {len(vocab)} users into {args.out} "
          f"(train/valid/test = {len(split.train)}/{len(split.valid)}/{len(split.test)})")
    return 0


def cmd_train(args) -> int:
    split, vocab, edges, _meta = dat.load_prepared_dataset(args.data)
    model_cfg, train_cfg = resolve_run_config(args, num_users=len(vocab))
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.txt")
    with open(log_path, "w", encoding="utf-8") as log_fh:
        def log_fn(line):
            log_fh.write(line + "\n")
            print(line)

        result = tr.train(split, edges, train_cfg, model_cfg, log_fn=log_fn)
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    tr.save_checkpoint(ckpt_path, result)
    print(f"best epoch {result.best_epoch} of {result.epochs_run}; "
          f"checkpoint written to {ckpt_path}")
    return 0


def _parse_ks(text):
    try:
        ks = tuple(sorted(int(part) for part in text.split(",") if part))
    except ValueError:
        raise CliError(f"--ks expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise CliError(f"--ks expects positive integers, got {text!r}")
    return ks


def cmd_eval(args) -> int:
    split, vocab, edges, _meta = dat.load_prepared_dataset(args.data)
    model = tr.model_from_checkpoint(args.checkpoint, split, edges, len(vocab))
    cascades = getattr(split, args.split)
    report = tr.evaluate(model, cascades, ks=_parse_ks(args.ks))
    print(report.to_json() if args.json else report.format_text())
    return 0


def cmd_predict(args) -> int:
    split, vocab, edges, _meta = dat.load_prepared_dataset(args.data)
    model = tr.model_from_checkpoint(args.checkpoint, split, edges, len(vocab))
    users, times = dat.parse_cascade_line(args.cascade, 1, vocab, extend=False)
    if not users:
        raise CliError("the prefix cascade must contain at least one event")
    ranked = tr.predict_next(model, users, times, k=args.k)
    for user_idx, score in ranked:
        print(f"{vocab.id_of(user_idx)}\t{score:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascadenet",
        description="Train and evaluate next-user cascade prediction models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--edges", type=int, default=400)
    p.add_argument("--cascades", type=int, default=200)
    p.add_argument("--ic-prob", dest="ic_prob", type=float, default=0.3)
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("prepare", help="build vocab, splits and metadata")
    p.add_argument("--cascades", required=True)
    p.add_argument("--edges")
    p.add_argument("--allow-no-social", action="store_true",
                   help="proceed without a social edge file")
    p.add_argument("--strict-edges", action="store_true",
                   help="error on edge users missing from the cascades")
    p.add_argument("--max-len", dest="max_len", type=int, default=0,
                   help="truncate cascades to this many events (0 = keep all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")
    p.add_argument("--ks", default="10,50,100")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="rank continuations of a cascade prefix")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cascade", required=True,
                   help="prefix as a cascade line, e.g. 'a,0 b,5'")
    p.add_argument("-k", type=int, default=10)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (dat.CascadeFormatError, dat.EmptyDatasetError, dat.UnknownUserError,
            dat.SynthesisError, tr.CheckpointError, NumericsError, CliError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry_point():
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
