#!/usr/bin/env python3
"""
FedDAE command line: train, evaluate, stats, export-embeddings.

train writes into its output directory:
  config.resolved.json  rounds.jsonl  metrics.json  checkpoint.npz  train.log
(plus checkpoint-rNNNN.npz every --checkpoint-interval rounds, ranks.csv
and predictions.csv on request).

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import sys
import types
from dataclasses import fields, replace
from pathlib import Path
from typing import Literal, Union, get_args, get_origin, get_type_hints

# Add feddae lib to path
sys.path.insert(0, str(Path(__file__).parent / "lib"))

from checkpoint import (
    build_meta,
    check_compatible,
    collect_tensors,
    load_checkpoint,
    restore_client,
    restore_server_nets,
    save_checkpoint,
)
from client_store import ClientStore, MemoryClientStore
from dae_model import dense_row
from data_pipeline import SplitDataset, dataset_stats, load_interactions, prepare_split
from embeddings import export_user_embeddings, resolve_user, user_representations
from errors import ConfigurationError, FedDaeError
from eval_metrics import metrics_record, write_predictions_csv, write_rank_csv
from fed_runtime import ServerState, evaluate_clients, run_training
from nn_core import DenseNet
from run_config import RunConfig, resolve_run_config
from run_log import RoundReportWriter, close_file_handlers, configure_logging
from workspace import resolve_dataset_path

logger = logging.getLogger("feddae.cli")

METRICS_NAME = "metrics.json"
ROUNDS_NAME = "rounds.jsonl"
CHECKPOINT_NAME = "checkpoint.npz"
TRAIN_LOG_NAME = "train.log"
RANKS_NAME = "ranks.csv"
PREDICTIONS_NAME = "predictions.csv"


# === Argument Parsing ===


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per RunConfig field; absent flags stay absent so the config file can fill them."""
    hints = get_type_hints(RunConfig)
    for f in fields(RunConfig):
        flag = f"--{f.name.replace('_', '-')}"
        hint = hints[f.name]
        if get_origin(hint) in (Union, types.UnionType):
            (hint,) = [a for a in get_args(hint) if a is not type(None)]
        kwargs: dict = {"dest": f.name, "default": argparse.SUPPRESS}
        if hint is bool:
            kwargs["action"] = argparse.BooleanOptionalAction
        elif get_origin(hint) is Literal:
            kwargs["choices"] = list(get_args(hint))
        else:
            kwargs["type"] = hint
        parser.add_argument(flag, help=f"(default: {f.default})", **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddae-cli", description="Federated dual-encoder VAE recommender")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train in federated or central mode")
    train.add_argument("--config", type=Path, default=None, help="YAML or JSON file of RunConfig keys")
    train.add_argument("--progress", action="store_true", help="Show a progress bar over rounds")
    train.add_argument("--ranks-csv", action="store_true", help=f"Also write {RANKS_NAME}")
    train.add_argument("--save-predictions", action="store_true", help=f"Also write {PREDICTIONS_NAME}")
    _add_config_flags(train)
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser("evaluate", help="Recompute HR@K/NDCG@K from a checkpoint")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--dataset", default=None, help="Override the dataset recorded in the checkpoint")
    evaluate.add_argument("--top-k", type=int, default=None)
    evaluate.add_argument("--ranks-csv", type=Path, default=None, help="Write per-user ranks to this file")
    evaluate.set_defaults(handler=cmd_evaluate)

    stats = sub.add_parser("stats", help="Dataset statistics after binarization and filtering")
    stats.add_argument("--dataset", required=True)
    stats.add_argument("--dataset-format", default="movielens-tab", choices=["movielens-tab", "generic-csv"])
    stats.add_argument("--delimiter", default=None)
    stats.add_argument("--min-interactions", type=int, default=10)
    stats.set_defaults(handler=cmd_stats)

    export = sub.add_parser("export-embeddings", help="Write per-user item representation CSVs")
    export.add_argument("--checkpoint", type=Path, required=True)
    export.add_argument("--users", type=int, nargs="+", required=True, help="Raw user ids")
    export.add_argument("--dataset", default=None)
    export.add_argument("--output-dir", type=Path, default=None)
    export.set_defaults(handler=cmd_export_embeddings)
    return parser


# === Shared Steps ===


def _load_split(config: RunConfig) -> SplitDataset:
    path = resolve_dataset_path(config.dataset)
    mat = load_interactions(path, config.dataset_format, config.delimiter, config.min_interactions)
    logger.info("Loaded %s: %d users, %d items, %d interactions", path, mat.n_users, mat.n_items, mat.n_interactions)
    return prepare_split(mat, config.seed, config.negatives_per_positive)


def _write_checkpoint(
    path: Path, config: RunConfig, global_encoder: DenseNet, decoder: DenseNet, clients: ClientStore, round_index: int
) -> Path:
    n_clients = len(clients.ids())
    meta = build_meta(config.to_dict(), global_encoder, decoder, n_clients, round_index)
    return save_checkpoint(path, collect_tensors(global_encoder, decoder, clients), meta)


def _restore(
    checkpoint_path: Path, dataset: str | None
) -> tuple[RunConfig, SplitDataset, DenseNet, DenseNet, ClientStore]:
    ckpt = load_checkpoint(checkpoint_path)
    config = RunConfig.from_dict(ckpt.meta["config"])
    if dataset:
        config = replace(config, dataset=dataset)
    split = _load_split(config)
    check_compatible(ckpt, split.train.n_items, split.train.n_users)
    encoder, decoder = restore_server_nets(ckpt)
    clients = MemoryClientStore([restore_client(ckpt, u, split.train.rows[u]) for u in range(split.train.n_users)])
    return config, split, encoder, decoder, clients


# === Commands ===


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if hasattr(args, f.name)}
    config = resolve_run_config(args.config, overrides)
    output_dir = config.resolved_output_dir()
    configure_logging(args.log_level, output_dir / TRAIN_LOG_NAME)

    split = _load_split(config)
    if config.mode == "federated":
        config.participants_per_round(split.train.n_users)
    config.write_resolved(output_dir)
    writer = RoundReportWriter(output_dir / ROUNDS_NAME)

    def on_checkpoint(t: int, server: ServerState, clients: ClientStore) -> None:
        _write_checkpoint(
            output_dir / f"checkpoint-r{t:04d}.npz", config, server.global_encoder, server.decoder, clients, t
        )

    result = run_training(
        config,
        split,
        output_dir,
        on_report=lambda report: writer.append(report.to_record()),
        on_checkpoint=on_checkpoint,
        progress=args.progress,
    )
    server = result.server
    results = evaluate_clients(server.global_encoder, server.decoder, result.clients, split, config.fixed_weight)
    record = metrics_record(results, config.top_k, config.seed)
    (output_dir / METRICS_NAME).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_checkpoint(
        output_dir / CHECKPOINT_NAME, config, server.global_encoder, server.decoder, result.clients, server.round
    )
    train = split.train
    if args.ranks_csv:
        write_rank_csv(results, split.test_items, train.user_ids, train.item_ids, output_dir / RANKS_NAME)
    if args.save_predictions:
        if not server.predictions:
            logger.warning("No client uploaded scores; %s not written", PREDICTIONS_NAME)
        else:
            write_predictions_csv(
                server.predictions,
                train.rows,
                train.user_ids,
                train.item_ids,
                config.top_k,
                output_dir / PREDICTIONS_NAME,
            )
    result.clients.close()
    k = config.top_k
    logger.info("hr@%d=%.4f ndcg@%d=%.4f", k, record[f"hr@{k}"], k, record[f"ndcg@{k}"])
    logger.info("Outputs in %s", output_dir)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config, split, encoder, decoder, clients = _restore(args.checkpoint, args.dataset)
    results = evaluate_clients(encoder, decoder, clients, split, config.fixed_weight)
    k = args.top_k if args.top_k is not None else config.top_k
    if k < 1:
        raise ConfigurationError("top_k", f"must be >= 1, got {k}")
    if args.ranks_csv is not None:
        write_rank_csv(results, split.test_items, split.train.user_ids, split.train.item_ids, args.ranks_csv)
    print(json.dumps(metrics_record(results, k, config.seed), sort_keys=True))
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    mat = load_interactions(
        resolve_dataset_path(args.dataset), args.dataset_format, args.delimiter, args.min_interactions
    )
    print(json.dumps(dataset_stats(mat), sort_keys=True))
    return 0


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    config, split, encoder, _, clients = _restore(args.checkpoint, args.dataset)
    users = [resolve_user(split.train, raw) for raw in args.users]
    output_dir = args.output_dir or args.checkpoint.parent / "embeddings"
    for raw, u in zip(args.users, users):
        client = clients.load(u)
        reps, (w1, w2) = user_representations(encoder, client, config.fixed_weight)
        interacted = dense_row(split.train.rows[u], split.train.n_items)
        export_user_embeddings(output_dir, raw, reps, interacted, split.train.item_ids)
        logger.info("User %d gate weights: global=%.4f local=%.4f", raw, w1, w2)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except ConfigurationError as e:
        logger.error("Configuration error: %s", e)
        return 2
    except (FedDaeError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1
    finally:
        close_file_handlers()


if __name__ == "__main__":
    sys.exit(main())
