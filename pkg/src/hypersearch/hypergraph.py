"""Typed hypergraph over user/query/product interactions.

Every distinct interaction becomes one hyperedge connecting its entities,
so the ternary relation is kept lossless (a collapsed pairwise graph would
forget which query mediated a purchase). All declared entities stay in the
node set, which means cold entities are present with degree zero.

Instances are immutable after construction and safe to share across
readers; build them with :func:`build_hypergraph`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import ConfigError, DataError


class NodeKind(enum.Enum):
    USER = "user"
    QUERY = "query"
    PRODUCT = "product"


#: Canonical kind order; hyperedge member slots always follow it.
KIND_ORDER: tuple[NodeKind, ...] = (NodeKind.USER, NodeKind.QUERY, NodeKind.PRODUCT)

#: Short codes accepted wherever a node-kind subset is configured.
SUBSET_CODES: dict[str, tuple[NodeKind, ...]] = {
    "uqp": KIND_ORDER,
    "up": (NodeKind.USER, NodeKind.PRODUCT),
    "qp": (NodeKind.QUERY, NodeKind.PRODUCT),
}


class NodeId(NamedTuple):
    kind: NodeKind
    index: int


@dataclass(frozen=True)
class Hyperedge:
    """Members of one interaction, in canonical (user, query, product) order."""

    members: tuple[NodeId, ...]

    @property
    def degree(self) -> int:
        return len(self.members)


def subset_kinds(node_subset: str | Iterable[NodeKind]) -> tuple[NodeKind, ...]:
    """Canonicalize a node-kind subset given as a code string or an iterable.

    Raises ConfigError for unknown codes, unknown kinds, or subsets with
    fewer than two kinds (a hyperedge needs at least two members).
    """
    if isinstance(node_subset, str):
        try:
            return SUBSET_CODES[node_subset]
        except KeyError:
            raise ConfigError(f"unknown node subset {node_subset!r}") from None
    requested = set(node_subset)
    if not requested.issubset(set(KIND_ORDER)):
        raise ConfigError("node subset contains unknown kinds")
    kinds = tuple(k for k in KIND_ORDER if k in requested)
    if len(kinds) < 2:
        raise ConfigError("node subset needs at least two kinds")
    return kinds


class Hypergraph:
    """Incidence structure: member indices, degrees, per-node edge lists.

    ``member_index[kind]`` holds, for each hyperedge, the entity index that
    fills that kind's slot. Kinds outside the configured subset have no
    slots; their nodes are isolated (degree zero) but remain in the node
    set.
    """

    def __init__(
        self,
        counts: dict[NodeKind, int],
        subset: tuple[NodeKind, ...],
        member_index: dict[NodeKind, np.ndarray],
    ):
        self.counts = dict(counts)
        self.subset = subset
        self.member_index = {k: np.asarray(v, dtype=np.int64) for k, v in member_index.items()}
        self.num_edges = int(len(self.member_index[subset[0]])) if subset else 0

        self.degrees: dict[NodeKind, np.ndarray] = {}
        self.incident: dict[NodeKind, list[list[int]]] = {}
        for kind in KIND_ORDER:
            n = self.counts[kind]
            if kind in self.subset:
                col = self.member_index[kind]
                self.degrees[kind] = np.bincount(col, minlength=n).astype(np.int64)
                lists: list[list[int]] = [[] for _ in range(n)]
                for edge_id, entity in enumerate(col.tolist()):
                    lists[entity].append(edge_id)
                self.incident[kind] = lists
            else:
                self.degrees[kind] = np.zeros(n, dtype=np.int64)
                self.incident[kind] = [[] for _ in range(n)]

    # -- node set -------------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return sum(self.counts.values())

    def nodes(self) -> Iterator[NodeId]:
        for kind in KIND_ORDER:
            for index in range(self.counts[kind]):
                yield NodeId(kind, index)

    def _check_node(self, v: NodeId) -> None:
        if v.kind not in self.counts or not 0 <= v.index < self.counts[v.kind]:
            raise DataError(f"unknown node {v.kind.value}:{v.index}")

    # -- incidence ------------------------------------------------------

    def hyperedge(self, edge_id: int) -> Hyperedge:
        if not 0 <= edge_id < self.num_edges:
            raise DataError(f"unknown hyperedge {edge_id}")
        members = tuple(
            NodeId(kind, int(self.member_index[kind][edge_id])) for kind in self.subset
        )
        return Hyperedge(members)

    def hyperedges(self) -> Iterator[Hyperedge]:
        for edge_id in range(self.num_edges):
            yield self.hyperedge(edge_id)

    def h(self, v: NodeId, edge_id: int) -> int:
        """Incidence indicator: 1 if the hyperedge contains the node."""
        self._check_node(v)
        if not 0 <= edge_id < self.num_edges:
            raise DataError(f"unknown hyperedge {edge_id}")
        if v.kind not in self.subset:
            return 0
        return int(self.member_index[v.kind][edge_id] == v.index)

    def degree(self, v: NodeId) -> int:
        self._check_node(v)
        return int(self.degrees[v.kind][v.index])

    def incident_edge_ids(self, v: NodeId) -> list[int]:
        """Ids of hyperedges containing ``v``, in edge insertion order."""
        self._check_node(v)
        return list(self.incident[v.kind][v.index])

    def incident_edges(self, v: NodeId) -> list[Hyperedge]:
        return [self.hyperedge(e) for e in self.incident_edge_ids(v)]

    def neighbors(self, v: NodeId) -> set[NodeId]:
        """Nodes sharing at least one hyperedge with ``v``, excluding ``v``."""
        self._check_node(v)
        out: set[NodeId] = set()
        for edge_id in self.incident[v.kind][v.index]:
            out.update(self.hyperedge(edge_id).members)
        out.discard(v)
        return out


def build_hypergraph(log, node_subset: str | Iterable[NodeKind] = "uqp") -> Hypergraph:
    """Build the interaction hypergraph from a log.

    Interactions are projected onto ``node_subset`` and deduplicated; each
    distinct projected tuple yields one hyperedge, ordered by first
    occurrence in the log. Repeated interactions collapse to a single
    hyperedge (the relation is a set, not a multiset).
    """
    kinds = subset_kinds(node_subset)
    counts = {
        NodeKind.USER: log.num_users,
        NodeKind.QUERY: log.num_queries,
        NodeKind.PRODUCT: log.num_products,
    }
    columns = {
        NodeKind.USER: log.users,
        NodeKind.QUERY: log.queries,
        NodeKind.PRODUCT: log.products,
    }
    for kind in KIND_ORDER:
        col = np.asarray(columns[kind])
        bad = np.nonzero((col < 0) | (col >= counts[kind]))[0]
        if bad.size:
            pos = int(bad[0])
            raise DataError(
                f"record {pos}: {kind.value} index {int(col[pos])} "
                f"outside [0, {counts[kind]})"
            )

    if len(log) == 0:
        members = {k: np.empty(0, dtype=np.int64) for k in kinds}
        return Hypergraph(counts, kinds, members)

    stacked = np.stack([np.asarray(columns[k], dtype=np.int64) for k in kinds], axis=1)
    _, first_seen = np.unique(stacked, axis=0, return_index=True)
    keep = np.sort(first_seen)
    members = {kind: stacked[keep, j] for j, kind in enumerate(kinds)}
    return Hypergraph(counts, kinds, members)
