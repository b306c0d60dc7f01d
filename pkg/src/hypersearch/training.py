"""Negative-sampled cross-entropy training with exact analytic gradients.

Gradients are derived by hand and propagated backwards through the
prediction head, every propagation layer, and the query word pooling; a
central finite-difference check over all parameters is provided for
verification. Each optimization step runs a full-graph forward pass and
restricts the loss to the batch triples.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .data import InteractionLog, QueryVocabulary
from .errors import ConfigError, DataError, NumericalError
from .evaluation import group_positives, metrics_at_k, rank_products
from .hypergraph import KIND_ORDER, Hypergraph, NodeKind, build_hypergraph
from .model import (
    EmbeddingState,
    ModelConfig,
    ParameterSet,
    _forward_layers,
    _safe_inverse,
    _scatter_add_rows,
    _sigmoid,
    entity_counts,
    forward,
    init_parameters,
    validate_parameters,
)

#: Predictions are clamped to [PROB_EPS, 1 - PROB_EPS] inside the loss so a
#: saturated sigmoid never produces an infinite cross-entropy term.
PROB_EPS = 1e-12


@dataclass
class TrainBatch:
    """Triples entering one loss evaluation; labels mark positives (1) vs negatives (0)."""

    users: np.ndarray
    queries: np.ndarray
    products: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.queries = np.asarray(self.queries, dtype=np.int64)
        self.products = np.asarray(self.products, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        n = len(self.users)
        if not (len(self.queries) == len(self.products) == len(self.labels) == n):
            raise ValueError("batch columns have mismatched lengths")

    def __len__(self) -> int:
        return len(self.users)


def bce_loss(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Sum of per-sample binary cross-entropy terms, clamp-stabilized."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels have different lengths")
    if predictions.size and not np.isfinite(predictions).all():
        raise NumericalError("non-finite prediction in loss")
    p = np.clip(predictions, PROB_EPS, 1.0 - PROB_EPS)
    return float(-(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)).sum())


def sample_negatives(
    positive: tuple[int, int, int],
    num_products: int,
    positives_index: Mapping[tuple[int, int], frozenset[int] | set[int]],
    k: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw k products uniformly, retrying any that are positives of (u, q).

    The returned triples share the positive's user and query; draws are
    with replacement, so repeats among the k negatives are possible.
    """
    u, q, _p = positive
    taken = positives_index.get((u, q), frozenset())
    if len(taken) >= num_products:
        raise DataError(
            f"cannot sample negatives for user {u}, query {q}: "
            "every product is a training positive"
        )
    if k == 0:
        return np.empty(0, dtype=np.int64)
    taken_arr = np.fromiter(taken, dtype=np.int64, count=len(taken))
    draws = rng.integers(0, num_products, size=k)
    bad = np.isin(draws, taken_arr)
    while bad.any():
        draws[bad] = rng.integers(0, num_products, size=int(bad.sum()))
        bad = np.isin(draws, taken_arr)
    return draws


# -- gradients ---------------------------------------------------------------


def _batch_predictions(
    star: dict[NodeKind, np.ndarray], batch: TrainBatch, lam: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    au = star[NodeKind.USER][batch.users]
    aq = star[NodeKind.QUERY][batch.queries]
    ap = star[NodeKind.PRODUCT][batch.products]
    combo = lam * au + (1.0 - lam) * aq
    logits = np.einsum("ij,ij->i", combo, ap)
    return _sigmoid(logits), combo, ap, au


def batch_loss(
    graph: Hypergraph,
    params: ParameterSet,
    config: ModelConfig,
    vocab: QueryVocabulary,
    batch: TrainBatch,
) -> float:
    """Loss of the batch via a plain forward pass (no gradient machinery)."""
    validate_parameters(params, config, entity_counts(graph, vocab))
    layers, _ = _forward_layers(graph, params, config, vocab, keep_features=False)
    star = {
        kind: np.concatenate([layer[kind] for layer in layers], axis=1)
        for kind in KIND_ORDER
    }
    phat, _, _, _ = _batch_predictions(star, batch, config.lam)
    return bce_loss(phat, batch.labels)


def _feature_backward(
    grad_features: np.ndarray,
    slots: list[np.ndarray],
    order: int,
    d: int,
) -> list[np.ndarray]:
    """Push a gradient on the interaction features back onto the member slots."""
    m = len(slots)
    grads = [grad_features[:, i * d : (i + 1) * d].copy() for i in range(m)]
    col = m
    if order >= 2:
        for i, j in itertools.combinations(range(m), 2):
            block = grad_features[:, col * d : (col + 1) * d]
            col += 1
            grads[i] += block * slots[j]
            grads[j] += block * slots[i]
    if order >= 3:
        block = grad_features[:, col * d : (col + 1) * d]
        grads[0] += block * slots[1] * slots[2]
        grads[1] += block * slots[0] * slots[2]
        grads[2] += block * slots[0] * slots[1]
    return grads


def compute_gradients(
    graph: Hypergraph,
    params: ParameterSet,
    config: ModelConfig,
    vocab: QueryVocabulary,
    batch: TrainBatch,
) -> tuple[float, dict[str, np.ndarray]]:
    """Batch loss and its exact gradient for every parameter tensor.

    Gradients cover the embedding tables (word table through the query mean
    pooling) and every layer's weight matrix. Entities farther than
    num_layers hops from all batch entities receive exactly zero gradient.
    """
    counts = entity_counts(graph, vocab)
    validate_parameters(params, config, counts)
    layers, features = _forward_layers(graph, params, config, vocab, keep_features=True)
    d = config.embedding_dim
    num_layers = config.num_layers
    star = {
        kind: np.concatenate([layer[kind] for layer in layers], axis=1)
        for kind in KIND_ORDER
    }

    phat, combo, ap, _au = _batch_predictions(star, batch, config.lam)
    loss = bce_loss(phat, batch.labels)
    # d(loss)/d(logit); zero where the clamp is active.
    inside = (phat > PROB_EPS) & (phat < 1.0 - PROB_EPS)
    glogit = np.where(inside, phat - batch.labels, 0.0)

    lam = config.lam
    gstar = {kind: np.zeros_like(star[kind]) for kind in KIND_ORDER}
    _scatter_add_rows(gstar[NodeKind.USER], batch.users, (lam * glogit)[:, None] * ap)
    _scatter_add_rows(gstar[NodeKind.QUERY], batch.queries, ((1.0 - lam) * glogit)[:, None] * ap)
    _scatter_add_rows(gstar[NodeKind.PRODUCT], batch.products, glogit[:, None] * combo)

    glayers = [
        {kind: np.ascontiguousarray(gstar[kind][:, l * d : (l + 1) * d]) for kind in KIND_ORDER}
        for l in range(num_layers + 1)
    ]
    gweights = [np.zeros_like(w) for w in params.layer_weights]
    inv_deg = {k: _safe_inverse(graph.degrees[k]) for k in graph.subset}

    for level in range(num_layers, 0, -1):
        prev = layers[level - 1]
        gmessage = np.zeros((graph.num_edges, d), dtype=np.float64)
        for kind in graph.subset:
            scaled = glayers[level][kind] * inv_deg[kind][:, None]
            gmessage += scaled[graph.member_index[kind]]
        slots = [prev[kind][graph.member_index[kind]] for kind in graph.subset]
        if config.weighted:
            weight = params.layer_weights[level - 1]
            gweights[level - 1] += features[level - 1].T @ gmessage
            gfeat = gmessage @ weight.T
            gslots = _feature_backward(gfeat, slots, config.order, d)
        else:
            share = gmessage / len(graph.subset)
            gslots = [share for _ in graph.subset]
        for kind, gslot in zip(graph.subset, gslots):
            _scatter_add_rows(glayers[level - 1][kind], graph.member_index[kind], gslot)

    gword = np.zeros_like(params.word_table)
    gquery0 = glayers[0][NodeKind.QUERY]
    if vocab.flat_words.size:
        _scatter_add_rows(
            gword,
            vocab.flat_words,
            gquery0[vocab.flat_queries] / vocab.word_counts[vocab.flat_queries][:, None],
        )
    grads: dict[str, np.ndarray] = {
        "user_table": glayers[0][NodeKind.USER],
        "product_table": glayers[0][NodeKind.PRODUCT],
        "word_table": gword,
    }
    for l, gw in enumerate(gweights):
        grads[f"W{l}"] = gw
    for name, grad in grads.items():
        if grad.size and not np.isfinite(grad).all():
            raise NumericalError(f"non-finite gradient for {name}")
    return loss, grads


def finite_difference_gradients(
    graph: Hypergraph,
    params: ParameterSet,
    config: ModelConfig,
    vocab: QueryVocabulary,
    batch: TrainBatch,
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central finite differences of the batch loss over every parameter entry.

    Perturbs the given tensors in place and restores them; independent of
    the analytic backward pass (only the forward loss is evaluated).
    """
    grads: dict[str, np.ndarray] = {}
    for name, tensor in params.tensors().items():
        grad = np.zeros_like(tensor)
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            original = tensor[ix]
            tensor[ix] = original + step
            plus = batch_loss(graph, params, config, vocab, batch)
            tensor[ix] = original - step
            minus = batch_loss(graph, params, config, vocab, batch)
            tensor[ix] = original
            grad[ix] = (plus - minus) / (2.0 * step)
        grads[name] = grad
    return grads


def gradient_check(
    graph: Hypergraph,
    params: ParameterSet,
    config: ModelConfig,
    vocab: QueryVocabulary,
    batch: TrainBatch,
    step: float = 1e-5,
) -> float:
    """Max relative disagreement between analytic and finite-difference gradients.

    Relative error uses an absolute floor of 1e-3 in the denominator so
    near-zero entries are compared on an absolute scale.
    """
    _, analytic = compute_gradients(graph, params, config, vocab, batch)
    numeric = finite_difference_gradients(graph, params, config, vocab, batch, step)
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        if a.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    """Per-tensor first/second moment accumulators plus the shared step count."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_parameters(
        cls,
        params: ParameterSet,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        state = cls(learning_rate, beta1, beta2, eps)
        for name, tensor in params.tensors().items():
            state.first_moment[name] = np.zeros_like(tensor)
            state.second_moment[name] = np.zeros_like(tensor)
        return state


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to the parameters in place."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, tensor in params.tensors().items():
        if name not in grads:
            raise ValueError(f"missing gradient for {name}")
        grad = grads[name]
        if grad.shape != tensor.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        tensor -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- training loop -----------------------------------------------------------


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = 100
    batch_size: int = 100
    learning_rate: float = 0.001
    num_negatives: int = 10
    patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.num_negatives < 0:
            raise ConfigError("num_negatives must be non-negative")
        if self.patience < 1:
            raise ConfigError("patience must be positive")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_ndcg: float
    seconds: float


@dataclass
class TrainReport:
    """Per-epoch history plus the index of the selected (best-validation) epoch.

    ``seconds`` entries are wall-clock measurements and are deliberately
    left out of files written from this report, which must be reproducible
    byte for byte.
    """

    records: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int | None = None
    diverged: bool = False

    def best_val_ndcg(self) -> float | None:
        if self.selected_epoch is None:
            return None
        return next(r.val_ndcg for r in self.records if r.epoch == self.selected_epoch)

    def to_dict(self) -> dict:
        return {
            "epochs": [
                {"epoch": r.epoch, "loss": r.loss, "val_ndcg10": r.val_ndcg}
                for r in self.records
            ],
            "selected_epoch": self.selected_epoch,
            "best_val_ndcg10": self.best_val_ndcg(),
            "diverged": self.diverged,
        }


def _positives_index(log: InteractionLog) -> dict[tuple[int, int], set[int]]:
    return group_positives(log)


def _encode_triples(
    users: np.ndarray, queries: np.ndarray, products: np.ndarray, log: InteractionLog
) -> np.ndarray:
    return (users * log.num_queries + queries) * log.num_products + products


def _assemble_batch(
    log: InteractionLog,
    indices: np.ndarray,
    positive_codes: np.ndarray,
    k: int,
    rng: np.random.Generator,
) -> TrainBatch:
    """Batch of positives plus k resampled negatives each.

    Negatives are drawn uniformly over the catalog with vectorized
    retry against the encoded training positives; callers must ensure no
    (user, query) key covers the whole catalog.
    """
    users = log.users[indices]
    queries = log.queries[indices]
    products = log.products[indices]
    if k == 0:
        return TrainBatch(users, queries, products, np.ones(len(indices)))
    key_codes = (users * log.num_queries + queries) * log.num_products
    draws = rng.integers(0, log.num_products, size=(len(indices), k))
    bad = np.isin(key_codes[:, None] + draws, positive_codes)
    while bad.any():
        draws[bad] = rng.integers(0, log.num_products, size=int(bad.sum()))
        bad = np.isin(key_codes[:, None] + draws, positive_codes)
    batch_users = np.concatenate([users, np.repeat(users, k)])
    batch_queries = np.concatenate([queries, np.repeat(queries, k)])
    batch_products = np.concatenate([products, draws.ravel()])
    labels = np.concatenate([np.ones(len(indices)), np.zeros(len(indices) * k)])
    return TrainBatch(batch_users, batch_queries, batch_products, labels)


def _validation_ndcg(
    state: EmbeddingState,
    valid_keyed: dict[tuple[int, int], set[int]],
    train_keyed: Mapping[tuple[int, int], set[int]],
    lam: float,
    k: int = 10,
) -> float:
    if not valid_keyed:
        return 0.0
    ranked = [
        rank_products(
            state,
            user,
            query,
            lam,
            exclusions=train_keyed.get((user, query), set()),
            relevant=positives,
        )
        for (user, query), positives in sorted(valid_keyed.items())
    ]
    return metrics_at_k(ranked, k).ndcg_at_k


def fit(
    train_log: InteractionLog,
    valid_log: InteractionLog,
    vocab: QueryVocabulary,
    config: ModelConfig,
    hyper: Hyperparams,
    rng: np.random.Generator,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[ParameterSet, TrainReport]:
    """Train with shuffled mini-batches, returning the best-validation snapshot.

    Negatives are resampled every epoch. Validation NDCG@10 is evaluated
    after each epoch; the returned parameters are a copy taken at the epoch
    with the highest value (earliest on ties). Training stops early when
    validation fails to improve for ``hyper.patience`` epochs, and aborts
    gracefully (keeping the best snapshot so far) if the loss or any
    embedding turns non-finite.
    """
    if len(train_log) == 0:
        raise DataError("training log is empty")
    same_counts = (
        train_log.num_users == valid_log.num_users
        and train_log.num_queries == valid_log.num_queries
        and train_log.num_products == valid_log.num_products
    )
    if not same_counts:
        raise DataError("train and validation logs declare different entity counts")

    graph = build_hypergraph(train_log, config.node_subset)
    counts = entity_counts(graph, vocab)
    params = init_parameters(counts, config, rng)
    opt = AdamState.for_parameters(
        params, hyper.learning_rate, hyper.adam_beta1, hyper.adam_beta2, hyper.adam_eps
    )
    positives = _positives_index(train_log)
    if hyper.num_negatives > 0:
        saturated = max(len(ps) for ps in positives.values())
        if saturated >= train_log.num_products:
            raise DataError(
                "cannot sample negatives: a (user, query) key covers the whole catalog"
            )
    positive_codes = np.unique(
        _encode_triples(train_log.users, train_log.queries, train_log.products, train_log)
    )
    valid_keyed = group_positives(valid_log)

    report = TrainReport()
    best_params = params.copy()
    best_ndcg = -np.inf
    epochs_since_best = 0
    n = len(train_log)

    for epoch in range(1, hyper.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        total_loss = 0.0
        total_samples = 0
        diverged = False
        for start in range(0, n, hyper.batch_size):
            batch = _assemble_batch(
                train_log,
                order[start : start + hyper.batch_size],
                positive_codes,
                hyper.num_negatives,
                rng,
            )
            try:
                loss, grads = compute_gradients(graph, params, config, vocab, batch)
            except NumericalError:
                diverged = True
                break
            if not np.isfinite(loss):
                diverged = True
                break
            adam_step(params, grads, opt)
            total_loss += loss
            total_samples += len(batch)
        if diverged:
            report.diverged = True
            break

        state = forward(graph, params, config, vocab)
        val_ndcg = _validation_ndcg(state, valid_keyed, positives, config.lam)
        record = EpochRecord(
            epoch=epoch,
            loss=total_loss / total_samples,
            val_ndcg=val_ndcg,
            seconds=time.perf_counter() - started,
        )
        report.records.append(record)
        if on_epoch is not None:
            on_epoch(record)

        if val_ndcg > best_ndcg:
            best_ndcg = val_ndcg
            best_params = params.copy()
            report.selected_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= hyper.patience:
                break

    return best_params, report
