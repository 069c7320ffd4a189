"""Command line interface: ``metamf train|evaluate|export|verify``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .dataset import load_ratings, split_per_user, write_manifest
from .exceptions import CapacityError, DatasetError, MetaMFError, ShapeError
from .fedruntime import global_evaluate, init_server, make_devices, train
from .metanet import generate_model

logger = logging.getLogger("metamf")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_table(path):
    if not path:
        raise UsageError("no dataset path given (set dataset.path or pass --dataset)")
    if not Path(path).is_file():
        raise UsageError(f"dataset not found: {path}")
    return path


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {"seed": args.seed, "output_dir": getattr(args, "out", None),
                 "train.variant": args.variant, "dataset.path": args.dataset}
    if getattr(args, "max_rounds", None) is not None:
        overrides["train.max_rounds"] = args.max_rounds
    return cfg.with_overrides(**overrides)


def _prepare(cfg: RunConfig, dataset_path=None):
    path = _load_table(dataset_path or cfg.dataset.path)
    table = load_ratings(path, sep=cfg.dataset.sep, skip_header=cfg.dataset.skip_header)
    split = split_per_user(table, cfg.split_config())
    return table, split


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    table, split = _prepare(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump(), encoding="utf-8")
    write_manifest(out / "manifest.tsv", table, split, cfg.split_config())

    tcfg = cfg.train_config()
    devices = make_devices(split.shards, tcfg)
    server = init_server(cfg.model_dims(table.num_users, table.num_items), tcfg, devices)
    server, log = train(server, devices)
    log.write_csv(out / "train_log.csv")
    log.write_timing_csv(out / "timing.csv")

    mae, mse = global_evaluate(server, devices, "test")
    metrics = {"test": {"mae": mae, "mse": mse}, "rounds": server.round, "best_round": log.best_round,
               "best_valid": None if log.best_valid is None else dict(zip(("mae", "mse"), log.best_valid)),
               "seed": cfg.seed, "variant": tcfg.variant}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
    save_checkpoint(out / "checkpoint.npz", server.theta, {
        "config": cfg.to_dict(), "user_ids": list(map(str, table.user_ids)),
        "item_ids": list(map(str, table.item_ids)), "rounds": server.round, "best_round": log.best_round})
    print(f"test mae={mae!r} mse={mse!r} rounds={server.round} out={out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    theta, meta = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(meta["config"])
    table, split = _prepare(cfg, args.dataset)
    if (table.num_users, table.num_items) != (theta.dims.num_users, theta.dims.num_items):
        raise UsageError(
            f"checkpoint was trained on {theta.dims.num_users} users x {theta.dims.num_items} items, "
            f"dataset has {table.num_users} x {table.num_items}")
    if list(map(str, table.item_ids)) != meta.get("item_ids", list(map(str, table.item_ids))):
        raise UsageError("dataset item ids differ from those in the checkpoint")
    tcfg = cfg.train_config()
    devices = make_devices(split.shards, tcfg)
    server = init_server(theta.dims, tcfg)
    server.theta = theta
    mae, mse = global_evaluate(server, devices, args.chunk)
    count = sum(len(s.chunk(args.chunk)[0]) for s in split.shards)
    print(f"{args.chunk} mae={mae!r} mse={mse!r} count={count}")
    if args.out:
        Path(args.out).write_text(json.dumps({args.chunk: {"mae": mae, "mse": mse, "count": count}},
                                             indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def export_rows(theta, user_ids, item_ids, users, item):
    """Rows ``[user_id, kind, item_id, *values]`` for the given raw user ids."""
    upos = {u: k for k, u in enumerate(user_ids)}
    ipos = {v: k for k, v in enumerate(item_ids)}
    if item not in ipos:
        raise UsageError(f"unknown item id {item!r}")
    rows = []
    for uid in users:
        if uid not in upos:
            raise UsageError(f"unknown user id {uid!r}")
        phi, _ = generate_model(theta, upos[uid])
        rows.append([uid, "layer1_weight", "", *map(repr, phi.layers[0][0].ravel().tolist())])
        rows.append([uid, "item_embedding", item, *map(repr, phi.item_embeddings[:, ipos[item]].tolist())])
    return rows


def cmd_export(args) -> int:
    theta, meta = load_checkpoint(args.checkpoint)
    user_ids = meta.get("user_ids") or [str(i) for i in range(theta.dims.num_users)]
    item_ids = meta.get("item_ids") or [str(i) for i in range(theta.dims.num_items)]
    users = user_ids if args.users == "all" else [u.strip() for u in args.users.split(",") if u.strip()]
    item = args.item if args.item is not None else item_ids[0]
    rows = export_rows(theta, user_ids, item_ids, users, item)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "kind", "item_id", "values..."])
        w.writerows(rows)
    print(f"wrote {len(rows)} rows for {len(users)} users to {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_gradient_checks

    results = run_gradient_checks(seed=args.seed or 0)
    for name, ok, err in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  max_rel_err={err:.3e}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metamf", description="Federated meta matrix factorisation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=("full", "si", "sm"))
        p.add_argument("--dataset", help="ratings file (overrides dataset.path)")

    p = sub.add_parser("train", help="train and write checkpoint, log and metrics")
    common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--max-rounds", type=int, dest="max_rounds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="MAE/MSE of a checkpoint on one chunk")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--chunk", choices=("train", "valid", "test"), default="test")
    p.add_argument("--out", help="write metrics JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export", help="write generated layer-1 weights and an item embedding per user")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--users", default="all", help="comma separated raw user ids, or 'all'")
    p.add_argument("--item", help="raw item id (default: first item)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("verify", help="finite-difference checks of both backward passes")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, ShapeError, CapacityError, FileNotFoundError) as exc:
        print(f"metamf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MetaMFError as exc:
        print(f"metamf: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
