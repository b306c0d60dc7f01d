"""Command-line pipeline: generate, train, evaluate, gradcheck, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Every command echoes its fully resolved configuration
into the report it writes, and identical invocations produce byte-identical
artifacts (wall-clock timings go to stderr only).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import (
    InteractionLog,
    QueryVocabulary,
    SyntheticSpec,
    generate_synthetic,
    load_interactions,
    load_query_words,
    write_interactions,
    write_query_words,
)
from .errors import ConfigError, DataError, NumericalError
from .evaluation import evaluate_split, temporal_split
from .hypergraph import build_hypergraph
from .model import (
    ModelConfig,
    entity_counts,
    forward,
    init_parameters,
    load_snapshot,
    save_snapshot,
)
from .training import (
    Hyperparams,
    TrainBatch,
    fit,
    gradient_check,
    sample_negatives,
)

GRADCHECK_THRESHOLD = 1e-4
INTERACTIONS_FILE = "interactions.tsv"
QUERY_WORDS_FILE = "query_words.tsv"
SPLIT_RATIOS = (0.7, 0.1, 0.2)

#: Ablation grid: name, node subset, weighted propagation, interaction order.
ABLATION_VARIANTS = (
    ("up-unweighted", "up", False, 1),
    ("qp-unweighted", "qp", False, 1),
    ("uqp-unweighted", "uqp", False, 1),
    ("uqp-o1", "uqp", True, 1),
    ("uqp-o2", "uqp", True, 2),
    ("uqp-o3", "uqp", True, 3),
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems instead of argparse's 2
        raise _UsageError(f"{self.prog}: {message}")


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--d", type=int, default=32, help="embedding size")
    parser.add_argument("--layers", type=int, default=2, help="propagation layer count")
    parser.add_argument("--order", type=int, default=3, choices=(1, 2, 3),
                        help="max feature interaction order")
    parser.add_argument("--subset", default="uqp", choices=("uqp", "up", "qp"),
                        help="node kinds joined by each hyperedge")
    parser.add_argument("--unweighted", action="store_true",
                        help="plain mean aggregation instead of learned weights")
    parser.add_argument("--lam", type=float, default=0.5,
                        help="user-vs-query mix in the prediction head")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--batch-size", type=int, default=100)
    parser.add_argument("--lr", type=float, default=0.001)
    parser.add_argument("--negatives", type=int, default=10,
                        help="negative products sampled per positive")
    parser.add_argument("--patience", type=int, default=10,
                        help="epochs without validation improvement before stopping")


def _build_parser() -> _Parser:
    parser = _Parser(prog="hypersearch")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate", help="write a synthetic dataset")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--clusters", type=int, default=8)
    gen.add_argument("--users", type=int, default=300)
    gen.add_argument("--queries", type=int, default=100)
    gen.add_argument("--products", type=int, default=500)
    gen.add_argument("--vocab", type=int, default=200)
    gen.add_argument("--interactions-per-user", type=float, default=17.0)
    gen.add_argument("--intra-rate", type=float, default=0.9)
    gen.add_argument("--noise-rate", type=float, default=0.1)
    gen.add_argument("--words-per-query", type=int, default=4)
    gen.add_argument("--word-alignment", type=float, default=0.9)

    train = sub.add_parser("train", help="train on a dataset directory")
    train.add_argument("--data", required=True, help="directory with dataset files")
    train.add_argument("--snapshot", required=True, help="model snapshot output path")
    train.add_argument("--report", required=True, help="epoch report output path")
    train.add_argument("--seed", type=int, default=0)
    _add_model_flags(train)
    _add_train_flags(train)

    ev = sub.add_parser("evaluate", help="rank the test split with a snapshot")
    ev.add_argument("--data", required=True)
    ev.add_argument("--snapshot", required=True)
    ev.add_argument("--report", help="optional metrics output path")
    ev.add_argument("--k", type=int, default=10)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--seed", type=int, default=1)
    gc.add_argument("--step", type=float, default=1e-5)
    _add_model_flags(gc)
    gc.set_defaults(d=3, order=3)

    ab = sub.add_parser("ablate", help="run the model-variant grid on one split")
    ab.add_argument("--data", required=True)
    ab.add_argument("--report", help="optional report output path")
    ab.add_argument("--seed", type=int, default=0)
    ab.add_argument("--d", type=int, default=32)
    ab.add_argument("--layers", type=int, default=2)
    ab.add_argument("--lam", type=float, default=0.5)
    ab.add_argument("--k", type=int, default=10)
    _add_train_flags(ab)
    return parser


def _write_json(path: str | Path, payload: dict) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _print_json(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, indent=2))


def _resolved_config(args: argparse.Namespace) -> dict:
    resolved = {key: value for key, value in sorted(vars(args).items())}
    resolved["command"] = args.command
    return resolved


def _load_dataset(data_dir: str) -> tuple[InteractionLog, QueryVocabulary]:
    directory = Path(data_dir)
    log = load_interactions(directory / INTERACTIONS_FILE)
    vocab = load_query_words(directory / QUERY_WORDS_FILE, log.num_queries)
    return log, vocab


def _model_config(args: argparse.Namespace, order=None, subset=None, weighted=None) -> ModelConfig:
    return ModelConfig(
        embedding_dim=args.d,
        num_layers=args.layers,
        order=args.order if order is None else order,
        weighted=(not args.unweighted) if weighted is None else weighted,
        node_subset=args.subset if subset is None else subset,
        lam=args.lam,
    )


def _hyperparams(args: argparse.Namespace) -> Hyperparams:
    return Hyperparams(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        num_negatives=args.negatives,
        patience=args.patience,
    )


def _cmd_generate(args) -> int:
    spec = SyntheticSpec(
        clusters=args.clusters,
        num_users=args.users,
        num_queries=args.queries,
        num_products=args.products,
        vocab_size=args.vocab,
        interactions_per_user=args.interactions_per_user,
        intra_rate=args.intra_rate,
        noise_rate=args.noise_rate,
        words_per_query=args.words_per_query,
        word_alignment=args.word_alignment,
        seed=args.seed,
    )
    log, vocab = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(log, out / INTERACTIONS_FILE)
    write_query_words(vocab, out / QUERY_WORDS_FILE)
    _write_json(
        out / "dataset_spec.json",
        {"config": _resolved_config(args), "records": len(log), "vocab_words": vocab.num_words},
    )
    print(f"wrote {len(log)} interactions to {out}", file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    log, vocab = _load_dataset(args.data)
    train_log, valid_log, _test_log = temporal_split(log, SPLIT_RATIOS)
    config = _model_config(args)
    hyper = _hyperparams(args)
    rng = np.random.default_rng(args.seed)

    def echo(record):
        print(
            f"epoch {record.epoch}: loss={record.loss:.6f} "
            f"val_ndcg10={record.val_ndcg:.6f} ({record.seconds:.2f}s)",
            file=sys.stderr,
        )

    params, report = fit(train_log, valid_log, vocab, config, hyper, rng, on_epoch=echo)
    graph = build_hypergraph(train_log, config.node_subset)
    save_snapshot(args.snapshot, params, config, entity_counts(graph, vocab))
    payload = {"config": _resolved_config(args), **report.to_dict()}
    _write_json(args.report, payload)
    return 3 if report.diverged else 0


def _cmd_evaluate(args) -> int:
    log, vocab = _load_dataset(args.data)
    train_log, valid_log, test_log = temporal_split(log, SPLIT_RATIOS)
    params, config, counts = load_snapshot(args.snapshot)
    if counts != (log.num_users, log.num_queries, log.num_products, vocab.num_words):
        raise DataError(
            f"snapshot entity counts {tuple(counts)} do not match dataset "
            f"({log.num_users}, {log.num_queries}, {log.num_products}, {vocab.num_words})"
        )
    graph = build_hypergraph(train_log, config.node_subset)
    state = forward(graph, params, config, vocab)
    metrics = evaluate_split(state, test_log, [train_log, valid_log], config.lam, args.k)
    payload = {"config": _resolved_config(args), **metrics.to_dict()}
    _print_json(payload)
    if args.report:
        _write_json(args.report, payload)
    return 0


def _gradcheck_fixture(seed: int) -> tuple[InteractionLog, QueryVocabulary]:
    # Ten-node fixture (3 users, 3 queries, 4 products) covering all kinds;
    # the seed drives parameters and negative sampling, not the topology.
    del seed
    records = [
        (0, 0, 0, 0),
        (1, 0, 1, 60),
        (1, 1, 2, 120),
        (2, 1, 1, 180),
        (0, 2, 3, 240),
        (2, 2, 0, 300),
    ]
    log = InteractionLog.from_records(records, counts=(3, 3, 4))
    vocab = QueryVocabulary([[0, 1], [2], [3, 1]])
    return log, vocab


def run_gradcheck(
    config: ModelConfig, seed: int, step: float = 1e-5
) -> float:
    """Max relative gradient error on the built-in small graph."""
    log, vocab = _gradcheck_fixture(seed)
    graph = build_hypergraph(log, config.node_subset)
    rng = np.random.default_rng(seed)
    params = init_parameters(entity_counts(graph, vocab), config, rng)
    positives = {}
    for u, q, p in log.triples():
        positives.setdefault((u, q), set()).add(p)
    users, queries, products, labels = [], [], [], []
    for u, q, p in log.triples():
        users.append(u)
        queries.append(q)
        products.append(p)
        labels.append(1.0)
        for neg in sample_negatives((u, q, p), log.num_products, positives, 2, rng):
            users.append(u)
            queries.append(q)
            products.append(int(neg))
            labels.append(0.0)
    batch = TrainBatch(users, queries, products, labels)
    return gradient_check(graph, params, config, vocab, batch, step)


def _cmd_gradcheck(args) -> int:
    config = _model_config(args)
    error = run_gradcheck(config, args.seed, args.step)
    passed = error <= GRADCHECK_THRESHOLD
    _print_json(
        {
            "config": _resolved_config(args),
            "max_relative_error": error,
            "threshold": GRADCHECK_THRESHOLD,
            "pass": passed,
        }
    )
    return 0 if passed else 3


def _cmd_ablate(args) -> int:
    log, vocab = _load_dataset(args.data)
    train_log, valid_log, test_log = temporal_split(log, SPLIT_RATIOS)
    hyper = _hyperparams(args)
    records = []
    for name, subset, weighted, order in ABLATION_VARIANTS:
        config = ModelConfig(
            embedding_dim=args.d,
            num_layers=args.layers,
            order=order,
            weighted=weighted,
            node_subset=subset,
            lam=args.lam,
        )
        rng = np.random.default_rng(args.seed)
        params, report = fit(train_log, valid_log, vocab, config, hyper, rng)
        graph = build_hypergraph(train_log, config.node_subset)
        state = forward(graph, params, config, vocab)
        metrics = evaluate_split(state, test_log, [train_log, valid_log], config.lam, args.k)
        records.append(
            {
                "variant": name,
                "node_subset": subset,
                "weighted": weighted,
                "order": order,
                "selected_epoch": report.selected_epoch,
                **metrics.to_dict(),
            }
        )
        print(f"{name}: ndcg@{args.k}={metrics.ndcg_at_k:.4f}", file=sys.stderr)
    payload = {"config": _resolved_config(args), "variants": records}
    _print_json(payload)
    if args.report:
        _write_json(args.report, payload)
    return 0


def run(argv: list[str] | None = None) -> int:
    """Parse arguments, dispatch, and map errors to exit codes."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "generate": _cmd_generate,
            "train": _cmd_train,
            "evaluate": _cmd_evaluate,
            "gradcheck": _cmd_gradcheck,
            "ablate": _cmd_ablate,
        }[args.command]
        return handler(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())
