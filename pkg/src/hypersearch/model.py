"""Propagation model over the interaction hypergraph.

Layer 0 embeds entities directly: users and products from lookup tables,
queries as the mean of their word embeddings. Each further layer sends a
message through every hyperedge (node aggregation) and averages the
messages at every node (hyperedge aggregation). A node's final
representation concatenates all layer outputs, and the purchase
probability for (user, query, product) is

    sigmoid((lam * z_user + (1 - lam) * z_query) . z_product)

on those concatenated representations.

Messages are either a plain member mean (unweighted variant) or a learned
linear map of the members' interaction features: the concatenation of the
member embeddings, optionally extended with their pairwise and triple
elementwise products.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .data import QueryVocabulary
from .errors import ConfigError, DataError, NumericalError, SnapshotError
from .hypergraph import KIND_ORDER, Hypergraph, NodeKind, subset_kinds

SNAPSHOT_FORMAT = "hypersearch-model"
SNAPSHOT_VERSION = 1


class EntityCounts(NamedTuple):
    num_users: int
    num_queries: int
    num_products: int
    num_words: int


def entity_counts(graph: Hypergraph, vocab: QueryVocabulary) -> EntityCounts:
    if vocab.num_queries != graph.counts[NodeKind.QUERY]:
        raise ConfigError(
            f"vocabulary covers {vocab.num_queries} queries, "
            f"graph has {graph.counts[NodeKind.QUERY]}"
        )
    return EntityCounts(
        graph.counts[NodeKind.USER],
        graph.counts[NodeKind.QUERY],
        graph.counts[NodeKind.PRODUCT],
        vocab.num_words,
    )


def feature_block_count(num_members: int, order: int) -> int:
    """Number of length-d blocks in the interaction feature vector."""
    if num_members not in (2, 3):
        raise ConfigError(f"hyperedges have 2 or 3 members, got {num_members}")
    if order not in (1, 2, 3):
        raise ConfigError(f"interaction order must be 1, 2, or 3, got {order}")
    if order == 3 and num_members == 2:
        raise ConfigError("order 3 needs three members (no triple product for pairs)")
    blocks = num_members
    if order >= 2:
        blocks += num_members * (num_members - 1) // 2
    if order >= 3:
        blocks += 1
    return blocks


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 32
    num_layers: int = 2
    order: int = 1
    weighted: bool = True
    node_subset: str = "uqp"
    lam: float = 0.5

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be positive")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be non-negative")
        if self.order not in (1, 2, 3):
            raise ConfigError("order must be 1, 2, or 3")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must be in [0, 1]")
        subset = subset_kinds(self.node_subset)
        if self.order > 1 and not self.weighted:
            raise ConfigError("interaction orders above 1 require weighted propagation")
        feature_block_count(len(subset), self.order)  # validates order vs subset

    @property
    def subset(self) -> tuple[NodeKind, ...]:
        return subset_kinds(self.node_subset)

    @property
    def feature_blocks(self) -> int:
        return feature_block_count(len(self.subset), self.order)

    def weight_shape(self) -> tuple[int, int]:
        return (self.feature_blocks * self.embedding_dim, self.embedding_dim)


@dataclass
class ParameterSet:
    """Trainable tensors: embedding tables plus per-layer message weights."""

    user_table: np.ndarray
    product_table: np.ndarray
    word_table: np.ndarray
    layer_weights: list[np.ndarray] = field(default_factory=list)

    def tensors(self) -> dict[str, np.ndarray]:
        """Live references to every tensor, keyed by a stable name."""
        out = {
            "user_table": self.user_table,
            "product_table": self.product_table,
            "word_table": self.word_table,
        }
        for l, w in enumerate(self.layer_weights):
            out[f"W{l}"] = w
        return out

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            self.user_table.copy(),
            self.product_table.copy(),
            self.word_table.copy(),
            [w.copy() for w in self.layer_weights],
        )


def init_parameters(
    counts: EntityCounts, config: ModelConfig, rng: np.random.Generator
) -> ParameterSet:
    """Draw fresh parameters: tables Xavier-uniform, weights Kaiming-uniform.

    Draw order is fixed (user, product, word tables, then weights by layer)
    so a seeded generator reproduces parameters bit for bit.
    """

    def xavier(rows: int, cols: int) -> np.ndarray:
        limit = math.sqrt(6.0 / (rows + cols)) if rows + cols else 0.0
        return rng.uniform(-limit, limit, size=(rows, cols))

    def kaiming(rows: int, cols: int) -> np.ndarray:
        bound = math.sqrt(3.0 / rows)
        return rng.uniform(-bound, bound, size=(rows, cols))

    d = config.embedding_dim
    user_table = xavier(counts.num_users, d)
    product_table = xavier(counts.num_products, d)
    word_table = xavier(counts.num_words, d)
    weights = []
    if config.weighted:
        rows, cols = config.weight_shape()
        weights = [kaiming(rows, cols) for _ in range(config.num_layers)]
    return ParameterSet(user_table, product_table, word_table, weights)


def validate_parameters(
    params: ParameterSet, config: ModelConfig, counts: EntityCounts
) -> None:
    """Check every tensor shape against the configuration; raise ConfigError."""
    d = config.embedding_dim
    expected = {
        "user_table": (counts.num_users, d),
        "product_table": (counts.num_products, d),
        "word_table": (counts.num_words, d),
    }
    for name, shape in expected.items():
        tensor = getattr(params, name)
        if tensor.shape != shape:
            raise ConfigError(f"{name} has shape {tensor.shape}, expected {shape}")
    expected_layers = config.num_layers if config.weighted else 0
    if len(params.layer_weights) != expected_layers:
        raise ConfigError(
            f"expected {expected_layers} weight matrices, got {len(params.layer_weights)}"
        )
    if config.weighted:
        w_shape = config.weight_shape()
        for l, w in enumerate(params.layer_weights):
            if w.shape != w_shape:
                raise ConfigError(f"W{l} has shape {w.shape}, expected {w_shape}")


# -- forward pass -----------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def query_embedding(word_table: np.ndarray, word_ids: Sequence[int]) -> np.ndarray:
    """Mean of the query's word embeddings; rejects empty word lists."""
    if len(word_ids) == 0:
        raise DataError("query has no words; its embedding is undefined")
    return word_table[np.asarray(word_ids, dtype=np.int64)].mean(axis=0)


def _scatter_add_rows(out: np.ndarray, indices: np.ndarray, values: np.ndarray) -> None:
    """out[indices] += values with duplicate indices accumulated.

    Sort-and-segment formulation of ``np.add.at``; deterministic and much
    faster for wide rows.
    """
    if len(indices) == 0:
        return
    order = np.argsort(indices, kind="stable")
    sorted_idx = indices[order]
    sorted_vals = values[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(sorted_idx))[0] + 1])
    out[sorted_idx[starts]] += np.add.reduceat(sorted_vals, starts, axis=0)


def _query_matrix(word_table: np.ndarray, vocab: QueryVocabulary) -> np.ndarray:
    d = word_table.shape[1]
    out = np.zeros((vocab.num_queries, d), dtype=np.float64)
    _scatter_add_rows(out, vocab.flat_queries, word_table[vocab.flat_words])
    out /= vocab.word_counts[:, None]
    return out


def _edge_feature_matrix(slot_mats: Sequence[np.ndarray], order: int) -> np.ndarray:
    """Stack member embeddings and their elementwise interaction products.

    Block layout, fixed: the members in canonical slot order, then every
    pairwise product (slot-index pairs in lexicographic order), then the
    triple product. Lower orders are prefixes of higher ones.
    """
    m = len(slot_mats)
    rows, d = slot_mats[0].shape
    blocks = feature_block_count(m, order) if order > 1 else m
    out = np.empty((rows, blocks * d), dtype=np.float64)

    def block(i: int) -> np.ndarray:
        return out[:, i * d : (i + 1) * d]

    for i, mat in enumerate(slot_mats):
        block(i)[:] = mat
    col = m
    pair_cols: dict[tuple[int, int], int] = {}
    if order >= 2:
        for i, j in itertools.combinations(range(m), 2):
            np.multiply(slot_mats[i], slot_mats[j], out=block(col))
            pair_cols[(i, j)] = col
            col += 1
    if order >= 3:
        np.multiply(block(pair_cols[(0, 1)]), slot_mats[2], out=block(col))
    return out


def interaction_features(
    member_embeddings: Sequence[np.ndarray], order: int
) -> np.ndarray:
    """Interaction feature vector for one hyperedge's members."""
    feature_block_count(len(member_embeddings), order)
    mats = [np.asarray(m, dtype=np.float64).reshape(1, -1) for m in member_embeddings]
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise ConfigError("member embeddings have mismatched dimensions")
    return _edge_feature_matrix(mats, order)[0]


def node_aggregate(
    member_embeddings: Sequence[np.ndarray],
    order: int,
    weighted: bool,
    weight: np.ndarray | None = None,
) -> np.ndarray:
    """Message carried by one hyperedge.

    Weighted: interaction features times the layer's weight matrix.
    Unweighted: plain elementwise mean of the members (order must be 1).
    """
    mats = [np.asarray(m, dtype=np.float64) for m in member_embeddings]
    for i, m in enumerate(mats):
        if not np.isfinite(m).all():
            raise NumericalError(f"node_aggregate: non-finite embedding in slot {i}")
    if not weighted:
        if order != 1:
            raise ConfigError("unweighted aggregation supports order 1 only")
        return np.mean(mats, axis=0)
    if weight is None:
        raise ConfigError("weighted aggregation needs a weight matrix")
    features = interaction_features(mats, order)
    if weight.shape[0] != features.shape[0]:
        raise ConfigError(
            f"weight rows {weight.shape[0]} do not match feature length {features.shape[0]}"
        )
    return features @ weight


def hyperedge_aggregate(messages: Sequence[np.ndarray], embedding_dim: int) -> np.ndarray:
    """Mean of a node's incident-edge messages; zero vector for isolated nodes."""
    if len(messages) == 0:
        return np.zeros(embedding_dim, dtype=np.float64)
    return np.sum(messages, axis=0) / len(messages)


@dataclass
class EmbeddingState:
    """Per-layer embeddings and their concatenation for every node."""

    layers: list[dict[NodeKind, np.ndarray]]
    star: dict[NodeKind, np.ndarray]

    @property
    def num_layers(self) -> int:
        return len(self.layers) - 1

    @property
    def embedding_dim(self) -> int:
        return self.layers[0][NodeKind.USER].shape[1]

    def count(self, kind: NodeKind) -> int:
        return self.star[kind].shape[0]

    def star_vector(self, kind: NodeKind, index: int) -> np.ndarray:
        return self.star[kind][index]


def _safe_inverse(values: np.ndarray) -> np.ndarray:
    out = np.zeros(values.shape, dtype=np.float64)
    nz = values > 0
    out[nz] = 1.0 / values[nz]
    return out


def _check_layer_finite(layer: dict[NodeKind, np.ndarray], level: int) -> None:
    for kind in KIND_ORDER:
        arr = layer[kind]
        if arr.size and not np.isfinite(arr).all():
            row = int(np.nonzero(~np.isfinite(arr).all(axis=1))[0][0])
            raise NumericalError(
                f"non-finite embedding for {kind.value} {row} at layer {level}"
            )


def _forward_layers(
    graph: Hypergraph,
    params: ParameterSet,
    config: ModelConfig,
    vocab: QueryVocabulary,
    keep_features: bool,
) -> tuple[list[dict[NodeKind, np.ndarray]], list[np.ndarray]]:
    layer0 = {
        NodeKind.USER: np.asarray(params.user_table, dtype=np.float64),
        NodeKind.QUERY: _query_matrix(params.word_table, vocab),
        NodeKind.PRODUCT: np.asarray(params.product_table, dtype=np.float64),
    }
    layers = [layer0]
    features: list[np.ndarray] = []
    inv_deg = {k: _safe_inverse(graph.degrees[k]) for k in graph.subset}
    d = config.embedding_dim
    for level in range(1, config.num_layers + 1):
        prev = layers[-1]
        _check_layer_finite(prev, level - 1)
        slots = [prev[kind][graph.member_index[kind]] for kind in graph.subset]
        if config.weighted:
            feat = _edge_feature_matrix(slots, config.order)
            messages = feat @ params.layer_weights[level - 1]
            if keep_features:
                features.append(feat)
        else:
            messages = np.mean(slots, axis=0)
        nxt: dict[NodeKind, np.ndarray] = {}
        for kind in KIND_ORDER:
            out = np.zeros((graph.counts[kind], d), dtype=np.float64)
            if kind in graph.subset:
                _scatter_add_rows(out, graph.member_index[kind], messages)
                out *= inv_deg[kind][:, None]
            nxt[kind] = out
        layers.append(nxt)
    _check_layer_finite(layers[-1], config.num_layers)
    return layers, features


def forward(
    graph: Hypergraph,
    params: ParameterSet,
    config: ModelConfig,
    vocab: QueryVocabulary,
) -> EmbeddingState:
    """Run the full propagation and return every node's representation.

    Pure function of its inputs; all nodes are updated simultaneously per
    layer, each layer reading only the previous one.
    """
    validate_parameters(params, config, entity_counts(graph, vocab))
    layers, _ = _forward_layers(graph, params, config, vocab, keep_features=False)
    star = {
        kind: np.concatenate([layer[kind] for layer in layers], axis=1)
        for kind in KIND_ORDER
    }
    return EmbeddingState(layers, star)


def predict(
    state: EmbeddingState, user: int, query: int, product: int, lam: float
) -> float:
    """Purchase probability for one (user, query, product) triple."""
    for kind, index in (
        (NodeKind.USER, user),
        (NodeKind.QUERY, query),
        (NodeKind.PRODUCT, product),
    ):
        if not 0 <= index < state.count(kind):
            raise DataError(f"unknown {kind.value} index {index}")
    combo = lam * state.star[NodeKind.USER][user] + (1.0 - lam) * state.star[
        NodeKind.QUERY
    ][query]
    return float(_sigmoid(combo @ state.star[NodeKind.PRODUCT][product]))


def score_products(
    state: EmbeddingState, user: int, query: int, lam: float
) -> np.ndarray:
    """Predicted probability for every product under one (user, query) pair."""
    if not 0 <= user < state.count(NodeKind.USER):
        raise DataError(f"unknown user index {user}")
    if not 0 <= query < state.count(NodeKind.QUERY):
        raise DataError(f"unknown query index {query}")
    combo = lam * state.star[NodeKind.USER][user] + (1.0 - lam) * state.star[
        NodeKind.QUERY
    ][query]
    return _sigmoid(state.star[NodeKind.PRODUCT] @ combo)


# -- snapshots ---------------------------------------------------------------


def _tensor_payload(tensor: np.ndarray) -> dict:
    return {"shape": list(tensor.shape), "data": tensor.ravel().tolist()}


def _tensor_from_payload(payload: dict, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in payload["shape"])
        data = np.asarray(payload["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError):
        raise SnapshotError(f"malformed tensor payload for {name}") from None
    if data.size != int(np.prod(shape)):
        raise SnapshotError(f"{name}: data length does not match shape {shape}")
    tensor = data.reshape(shape)
    if not np.isfinite(tensor).all():
        raise SnapshotError(f"{name}: non-finite entries")
    return tensor


def save_snapshot(
    path: str | Path,
    params: ParameterSet,
    config: ModelConfig,
    counts: EntityCounts,
) -> None:
    """Write a self-describing JSON snapshot (config, counts, tensors).

    Output bytes are deterministic for identical inputs.
    """
    payload = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "config": {
            "embedding_dim": config.embedding_dim,
            "num_layers": config.num_layers,
            "order": config.order,
            "weighted": config.weighted,
            "node_subset": config.node_subset,
            "lam": config.lam,
        },
        "counts": counts._asdict(),
        "parameters": {
            "user_table": _tensor_payload(params.user_table),
            "product_table": _tensor_payload(params.product_table),
            "word_table": _tensor_payload(params.word_table),
            "layer_weights": [_tensor_payload(w) for w in params.layer_weights],
        },
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_snapshot(path: str | Path) -> tuple[ParameterSet, ModelConfig, EntityCounts]:
    """Read a snapshot, failing on any shape or configuration mismatch."""
    path = Path(path)
    if not path.exists():
        raise SnapshotError(f"missing snapshot: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"{path}: not valid JSON ({exc})") from None
    if payload.get("format") != SNAPSHOT_FORMAT:
        raise SnapshotError(f"{path}: unrecognized snapshot format")
    try:
        config = ModelConfig(**payload["config"])
        counts = EntityCounts(**payload["counts"])
        tensors = payload["parameters"]
        params = ParameterSet(
            _tensor_from_payload(tensors["user_table"], "user_table"),
            _tensor_from_payload(tensors["product_table"], "product_table"),
            _tensor_from_payload(tensors["word_table"], "word_table"),
            [
                _tensor_from_payload(w, f"W{l}")
                for l, w in enumerate(tensors["layer_weights"])
            ],
        )
    except SnapshotError:
        raise
    except (KeyError, TypeError) as exc:
        raise SnapshotError(f"{path}: missing or malformed field ({exc})") from None
    except ConfigError as exc:
        raise SnapshotError(f"{path}: invalid configuration ({exc})") from None
    try:
        validate_parameters(params, config, counts)
    except ConfigError as exc:
        raise SnapshotError(f"{path}: {exc}") from None
    return params, config, counts
