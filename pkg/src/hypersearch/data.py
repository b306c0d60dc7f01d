"""Interaction-log and query-word ingestion plus a synthetic data generator.

File formats (plain text, LF line endings, zero-based decimal indices):

* ``interactions.tsv`` -- one record per line,
  ``user<TAB>query<TAB>product<TAB>timestamp``. An optional first line
  ``#counts U Q P`` declares entity counts; otherwise counts are inferred
  as max index + 1.
* ``query_words.tsv`` -- one line per query,
  ``query<TAB>space-separated word indices``. Every query must appear with
  at least one word. Vocabulary size is max word index + 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class InteractionLog:
    """Ordered (user, query, product, timestamp) records with entity counts."""

    users: np.ndarray
    queries: np.ndarray
    products: np.ndarray
    timestamps: np.ndarray
    num_users: int
    num_queries: int
    num_products: int

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.queries = np.asarray(self.queries, dtype=np.int64)
        self.products = np.asarray(self.products, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n = len(self.users)
        if not (len(self.queries) == len(self.products) == len(self.timestamps) == n):
            raise DataError("interaction columns have mismatched lengths")
        for name, col, limit in (
            ("user", self.users, self.num_users),
            ("query", self.queries, self.num_queries),
            ("product", self.products, self.num_products),
        ):
            bad = np.nonzero((col < 0) | (col >= limit))[0]
            if bad.size:
                pos = int(bad[0])
                raise DataError(
                    f"record {pos}: {name} index {int(col[pos])} outside [0, {limit})"
                )
        if n and self.timestamps.min() < 0:
            pos = int(np.nonzero(self.timestamps < 0)[0][0])
            raise DataError(f"record {pos}: negative timestamp")

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[tuple[int, int, int, int]]:
        for i in range(len(self)):
            yield self.record(i)

    def record(self, i: int) -> tuple[int, int, int, int]:
        return (
            int(self.users[i]),
            int(self.queries[i]),
            int(self.products[i]),
            int(self.timestamps[i]),
        )

    def triples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.users.tolist(), self.queries.tolist(), self.products.tolist()))

    def take(self, indices: np.ndarray) -> "InteractionLog":
        """New log with the selected records, keeping entity counts."""
        indices = np.asarray(indices, dtype=np.int64)
        return InteractionLog(
            self.users[indices],
            self.queries[indices],
            self.products[indices],
            self.timestamps[indices],
            self.num_users,
            self.num_queries,
            self.num_products,
        )

    @classmethod
    def from_records(
        cls,
        records: Sequence[tuple[int, int, int, int]],
        counts: tuple[int, int, int] | None = None,
    ) -> "InteractionLog":
        arr = np.asarray(records, dtype=np.int64).reshape(-1, 4)
        if counts is None:
            counts = tuple(
                int(arr[:, j].max()) + 1 if len(arr) else 0 for j in range(3)
            )
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], *counts)


@dataclass
class QueryVocabulary:
    """Per-query word-index lists; every list non-empty.

    Flat index arrays (one row per query-word occurrence) are precomputed
    for vectorized mean pooling and its gradient.
    """

    words: list[list[int]]
    num_words: int = field(init=False)
    flat_queries: np.ndarray = field(init=False, repr=False)
    flat_words: np.ndarray = field(init=False, repr=False)
    word_counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        flat_q: list[int] = []
        flat_w: list[int] = []
        max_word = -1
        for q, word_list in enumerate(self.words):
            if not word_list:
                raise DataError(f"query {q}: empty word list")
            for w in word_list:
                if w < 0:
                    raise DataError(f"query {q}: negative word index")
                flat_q.append(q)
                flat_w.append(w)
                max_word = max(max_word, w)
        self.num_words = max_word + 1
        self.flat_queries = np.asarray(flat_q, dtype=np.int64)
        self.flat_words = np.asarray(flat_w, dtype=np.int64)
        self.word_counts = np.asarray([len(ws) for ws in self.words], dtype=np.float64)

    @property
    def num_queries(self) -> int:
        return len(self.words)


# -- loaders and writers --------------------------------------------------


def load_interactions(path: str | Path, min_interactions: int = 0) -> InteractionLog:
    """Parse an interactions TSV file.

    ``min_interactions`` > 1 applies core filtering (see
    :func:`core_filter`) after loading.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    declared: tuple[int, int, int] | None = None
    rows: list[tuple[int, int, int, int]] = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if lineno == 1 and len(parts) == 4 and parts[0] == "counts":
                    try:
                        declared = (int(parts[1]), int(parts[2]), int(parts[3]))
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: malformed counts header") from None
                    continue
                raise DataError(f"{path}:{lineno}: unexpected comment line")
            fields = line.split("\t")
            if len(fields) != 4:
                raise DataError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}"
                )
            try:
                rows.append(tuple(int(f) for f in fields))  # type: ignore[arg-type]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer field") from None

    try:
        log = InteractionLog.from_records(rows, counts=declared)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
    if min_interactions > 1:
        log = core_filter(log, min_interactions)
    return log


def write_interactions(log: InteractionLog, path: str | Path) -> None:
    """Write the canonical interactions file (explicit counts header)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        handle.write(f"#counts {log.num_users} {log.num_queries} {log.num_products}\n")
        for u, q, p, t in log:
            handle.write(f"{u}\t{q}\t{p}\t{t}\n")


def load_query_words(path: str | Path, num_queries: int) -> QueryVocabulary:
    """Parse the query-word file; every query in [0, num_queries) must appear."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    words: dict[int, list[int]] = {}
    with path.open("r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise DataError(f"{path}:{lineno}: expected 'query<TAB>words'")
            try:
                q = int(fields[0])
                word_list = [int(w) for w in fields[1].split()]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer field") from None
            if not word_list:
                raise DataError(f"{path}:{lineno}: query {q} has no words")
            if q in words:
                raise DataError(f"{path}:{lineno}: duplicate entry for query {q}")
            if not 0 <= q < num_queries:
                raise DataError(f"{path}:{lineno}: query index {q} outside [0, {num_queries})")
            words[q] = word_list
    missing = [q for q in range(num_queries) if q not in words]
    if missing:
        raise DataError(f"{path}: no words for query {missing[0]}")
    return QueryVocabulary([words[q] for q in range(num_queries)])


def write_query_words(vocab: QueryVocabulary, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        for q, word_list in enumerate(vocab.words):
            handle.write(f"{q}\t{' '.join(str(w) for w in word_list)}\n")


def core_filter(log: InteractionLog, min_count: int) -> InteractionLog:
    """Drop records of entities with fewer than ``min_count`` interactions.

    Iterates to a fixpoint, since removing records lowers other entities'
    counts. Entity ids and declared counts are preserved; filtered-out
    entities simply become isolated. ``min_count`` <= 1 is the identity.
    """
    if min_count <= 1:
        return log
    keep = np.arange(len(log))
    while True:
        users = log.users[keep]
        queries = log.queries[keep]
        products = log.products[keep]
        ok = (
            (np.bincount(users, minlength=log.num_users)[users] >= min_count)
            & (np.bincount(queries, minlength=log.num_queries)[queries] >= min_count)
            & (np.bincount(products, minlength=log.num_products)[products] >= min_count)
        )
        if ok.all():
            break
        keep = keep[ok]
        if keep.size == 0:
            break
    return log.take(keep)


# -- synthetic generator ---------------------------------------------------


#: Each cluster's products are partitioned into SUBPOOLS taste pools; every
#: user and every query is attached to one pool of its cluster. An
#: intra-cluster purchase comes from the user's pool, the query's pool, or
#: the whole cluster with these mixture weights. Entities sharing a pool
#: share preferences, so the within-cluster signal is recoverable from
#: neighbors rather than only from each entity's own sparse history.
USER_FOCUS = 0.4
QUERY_FOCUS = 0.4
SUBPOOLS = 6


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-cluster generator settings.

    Users, queries, products, and words each get a latent cluster. Every
    interaction slot is an intra-cluster event with probability
    ``intra_rate`` (query drawn from the user's cluster, product from
    within the cluster as described above), a uniform cross-cluster event
    with probability ``noise_rate``, and is dropped otherwise. Query words
    align with the query's cluster with probability ``word_alignment``.
    """

    clusters: int = 8
    num_users: int = 300
    num_queries: int = 100
    num_products: int = 500
    vocab_size: int = 200
    interactions_per_user: float = 17.0
    intra_rate: float = 0.9
    noise_rate: float = 0.1
    words_per_query: int = 4
    word_alignment: float = 0.9
    seed: int = 0

    def __post_init__(self):
        for name in ("intra_rate", "noise_rate", "word_alignment"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.intra_rate <= self.noise_rate:
            raise ConfigError("intra_rate must exceed noise_rate (no planted signal)")
        if self.intra_rate + self.noise_rate > 1.0 + 1e-12:
            raise ConfigError("intra_rate + noise_rate must not exceed 1")
        smallest = min(self.num_users, self.num_queries, self.num_products, self.vocab_size)
        if not 1 <= self.clusters <= smallest:
            raise ConfigError(
                f"clusters must be in [1, {smallest}] for these entity counts"
            )
        if self.words_per_query < 1:
            raise ConfigError("words_per_query must be at least 1")
        if self.interactions_per_user <= 0:
            raise ConfigError("interactions_per_user must be positive")


def _balanced_clusters(rng: np.random.Generator, n: int, clusters: int) -> np.ndarray:
    # Balanced assignment keeps every cluster non-empty for n >= clusters.
    return rng.permutation(np.arange(n, dtype=np.int64) % clusters)


def planted_clusters(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    """Latent cluster assignments the generator plants (user/query/product/word).

    Deterministic for a given spec; reproduces exactly the assignments used
    by :func:`generate_synthetic` with the same spec.
    """
    rng = np.random.default_rng(spec.seed)
    return {
        "user": _balanced_clusters(rng, spec.num_users, spec.clusters),
        "query": _balanced_clusters(rng, spec.num_queries, spec.clusters),
        "product": _balanced_clusters(rng, spec.num_products, spec.clusters),
        "word": _balanced_clusters(rng, spec.vocab_size, spec.clusters),
    }


def generate_synthetic(spec: SyntheticSpec) -> tuple[InteractionLog, QueryVocabulary]:
    """Generate a log and query vocabulary with recoverable cluster structure.

    Records are shuffled before timestamps are assigned so a temporal split
    mixes entities across train/validation/test. Fully deterministic under
    ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    assign = {
        "user": _balanced_clusters(rng, spec.num_users, spec.clusters),
        "query": _balanced_clusters(rng, spec.num_queries, spec.clusters),
        "product": _balanced_clusters(rng, spec.num_products, spec.clusters),
        "word": _balanced_clusters(rng, spec.vocab_size, spec.clusters),
    }
    queries_by_cluster = [
        np.nonzero(assign["query"] == c)[0] for c in range(spec.clusters)
    ]
    products_by_cluster = [
        np.nonzero(assign["product"] == c)[0] for c in range(spec.clusters)
    ]
    words_by_cluster = [np.nonzero(assign["word"] == c)[0] for c in range(spec.clusters)]

    # Taste pools: a partition of each cluster's products, with every user
    # and query attached to one pool of its own cluster.
    pools = min(SUBPOOLS, min(len(pool) for pool in products_by_cluster))
    pool_products = [
        [cluster[g::pools] for g in range(pools)] for cluster in products_by_cluster
    ]
    user_pool = rng.integers(0, pools, size=spec.num_users)
    query_pool = rng.integers(0, pools, size=spec.num_queries)

    users: list[np.ndarray] = []
    queries: list[np.ndarray] = []
    products: list[np.ndarray] = []
    slots = rng.poisson(spec.interactions_per_user, size=spec.num_users)
    for u in range(spec.num_users):
        n = int(slots[u])
        if n == 0:
            continue
        c = int(assign["user"][u])
        roll = rng.random(n)
        intra = int((roll < spec.intra_rate).sum())
        noise = int((roll < spec.intra_rate + spec.noise_rate).sum()) - intra
        q_pool = queries_by_cluster[c]
        p_pool = products_by_cluster[c]
        q_intra = q_pool[rng.integers(0, len(q_pool), size=intra)]
        p_intra = np.empty(intra, dtype=np.int64)
        source = rng.random(intra)
        for i in range(intra):
            if source[i] < USER_FOCUS:
                pool = pool_products[c][int(user_pool[u])]
            elif source[i] < USER_FOCUS + QUERY_FOCUS:
                pool = pool_products[c][int(query_pool[q_intra[i]])]
            else:
                pool = p_pool
            p_intra[i] = pool[rng.integers(0, len(pool))]
        q_noise = rng.integers(0, spec.num_queries, size=noise)
        p_noise = rng.integers(0, spec.num_products, size=noise)
        users.append(np.full(intra + noise, u, dtype=np.int64))
        queries.append(np.concatenate([q_intra, q_noise]))
        products.append(np.concatenate([p_intra, p_noise]))

    if users:
        all_u = np.concatenate(users)
        all_q = np.concatenate(queries)
        all_p = np.concatenate(products)
    else:
        all_u = all_q = all_p = np.empty(0, dtype=np.int64)
    order = rng.permutation(len(all_u))
    timestamps = np.arange(len(all_u), dtype=np.int64) * 60
    log = InteractionLog(
        all_u[order],
        all_q[order],
        all_p[order],
        timestamps,
        spec.num_users,
        spec.num_queries,
        spec.num_products,
    )

    word_lists: list[list[int]] = []
    for q in range(spec.num_queries):
        c = int(assign["query"][q])
        pool = words_by_cluster[c]
        aligned = rng.random(spec.words_per_query) < spec.word_alignment
        picks: list[int] = []
        for keep_cluster in aligned:
            if keep_cluster:
                picks.append(int(pool[rng.integers(0, len(pool))]))
            else:
                picks.append(int(rng.integers(0, spec.vocab_size)))
        word_lists.append(picks)
    vocab = QueryVocabulary(word_lists)
    return log, vocab
