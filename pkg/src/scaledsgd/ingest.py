"""Ratings ingestion and ranking-triple construction.

The collaborative-filtering pipeline is: load a ratings CSV into a sparse
user-item structure, measure item-item cosine similarity on demand, sample
labeled ranking triples (i, j, k) with y = 1 iff item i is more similar to
j than to k, and split them into disjoint train/test sets. Similarities
are computed lazily over co-rating users; the dense item-item matrix is
never materialized.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .losses import TripleSample


class ParseError(Exception):
    """A ratings line could not be parsed; the message names the line."""


class DuplicateRating(Exception):
    """The same (user, item) pair was rated twice."""


class EmptyColumn(Exception):
    """An item has no ratings, so similarities against it are undefined."""


class InsufficientTriples(Exception):
    """The source cannot yield the requested number of distinct labeled triples."""


@dataclass
class SparseRatings:
    """Ratings as (user, item, value) entries over densely reindexed ids."""

    n_users: int
    n_items: int
    entries: list[tuple[int, int, float]]
    _item_maps: list[dict[int, float]] | None = field(default=None, repr=False)
    _item_norms: np.ndarray | None = field(default=None, repr=False)

    def item_map(self, i: int) -> dict[int, float]:
        """Ratings of item i keyed by user, built lazily for all items."""
        if self._item_maps is None:
            maps = [dict() for _ in range(self.n_items)]
            for u, it, v in self.entries:
                maps[it][u] = v
            self._item_maps = maps
            self._item_norms = np.array(
                [math.sqrt(sum(v * v for v in m.values())) for m in maps]
            )
        return self._item_maps[int(i)]


def load_ratings_csv(path) -> SparseRatings:
    """Parse a `userId,movieId,rating,timestamp` CSV into SparseRatings.

    The first line is a header and is skipped; the timestamp column is
    ignored. User and item ids are reindexed densely in order of first
    appearance. Raises ParseError with the offending line number, or
    DuplicateRating on a repeated (user, item) pair.
    """
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    entries: list[tuple[int, int, float]] = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            raise ParseError(f"{path}: line 1: missing header")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 3:
                raise ParseError(f"{path}: line {lineno}: expected at least 3 fields")
            uid, mid = parts[0].strip(), parts[1].strip()
            try:
                rating = float(parts[2])
            except ValueError:
                raise ParseError(
                    f"{path}: line {lineno}: bad rating field {parts[2]!r}"
                ) from None
            if not math.isfinite(rating):
                raise ParseError(f"{path}: line {lineno}: non-finite rating")
            u = users.setdefault(uid, len(users))
            it = items.setdefault(mid, len(items))
            if (u, it) in seen:
                raise DuplicateRating(f"{path}: line {lineno}: duplicate rating ({uid}, {mid})")
            seen.add((u, it))
            entries.append((u, it, rating))
    return SparseRatings(n_users=len(users), n_items=len(items), entries=entries)


def cosine_similarity(G: SparseRatings, i: int, j: int) -> float:
    """Cosine of the rating columns of items i and j.

    Computed as a sparse dot product over co-rating users; nonnegative for
    nonnegative ratings. Raises EmptyColumn when either item has no ratings.
    """
    mi = G.item_map(i)
    mj = G.item_map(j)
    if not mi or not mj:
        empty = i if not mi else j
        raise EmptyColumn(f"item {empty} has no ratings")
    if i == j:
        return 1.0
    if len(mj) < len(mi):
        mi, mj = mj, mi
    dot = 0.0
    for u, v in mi.items():
        w = mj.get(u)
        if w is not None:
            dot += v * w
    return dot / (float(G._item_norms[i]) * float(G._item_norms[j]))


class _SimilarityCache:
    """Bounded memo of pairwise similarities; evicts wholesale when full."""

    def __init__(self, limit: int = 1_000_000):
        self.limit = limit
        self.store: dict[tuple[int, int], float] = {}

    def get(self, G: SparseRatings, a: int, b: int) -> float:
        key = (a, b) if a <= b else (b, a)
        val = self.store.get(key)
        if val is None:
            val = cosine_similarity(G, a, b)
            if len(self.store) >= self.limit:
                self.store.clear()
            self.store[key] = val
        return val


def build_triples(
    G: SparseRatings, count: int, seed: int = 0, max_attempts: int | None = None
) -> list[TripleSample]:
    """Sample ``count`` distinct labeled ranking triples from a ratings set.

    Draws (i, j, k) uniformly from the item cube, computes the two
    similarities on demand, and keeps the triple only when they differ
    (ties, typically two unrated pairs, carry no ranking signal, and items
    with no ratings are skipped). Sampling is without replacement in the
    sense that an ordered triple is kept at most once.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    d = G.n_items
    rng = np.random.default_rng(seed)
    cache = _SimilarityCache()
    seen: set[tuple[int, int, int]] = set()
    out: list[TripleSample] = []
    budget = max_attempts if max_attempts is not None else max(1000, 100 * count)
    attempts = 0
    while len(out) < count:
        if attempts >= budget:
            raise InsufficientTriples(
                f"found {len(out)} of {count} requested triples in {attempts} draws"
            )
        remaining = budget - attempts
        block = int(min(max(64, 2 * (count - len(out))), remaining))
        draws = rng.integers(0, d, size=(block, 3))
        attempts += block
        for i, j, k in draws:
            if j == k:
                continue
            key = (int(i), int(j), int(k))
            if key in seen:
                continue
            try:
                sim_ij = cache.get(G, key[0], key[1])
                sim_ik = cache.get(G, key[0], key[2])
            except EmptyColumn:
                continue
            if sim_ij == sim_ik:
                continue
            seen.add(key)
            out.append(TripleSample(key[0], key[1], key[2], int(sim_ij > sim_ik)))
            if len(out) == count:
                break
    return out


def build_triples_from_matrix(
    M: np.ndarray, count: int, seed: int = 0, max_attempts: int | None = None
) -> list[TripleSample]:
    """Sample labeled ranking triples directly from a dense similarity matrix.

    Same sampling, tie-skipping and dedup rules as build_triples, with
    M[i, j] read in place of a cosine similarity. Used for synthetic
    ground truths where the item-item matrix is known exactly.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    d = M.shape[0]
    rng = np.random.default_rng(seed)
    seen: set[tuple[int, int, int]] = set()
    out: list[TripleSample] = []
    budget = max_attempts if max_attempts is not None else max(1000, 100 * count)
    attempts = 0
    while len(out) < count:
        if attempts >= budget:
            raise InsufficientTriples(
                f"found {len(out)} of {count} requested triples in {attempts} draws"
            )
        remaining = budget - attempts
        block = int(min(max(64, 2 * (count - len(out))), remaining))
        draws = rng.integers(0, d, size=(block, 3))
        attempts += block
        for i, j, k in draws:
            if j == k:
                continue
            key = (int(i), int(j), int(k))
            if key in seen:
                continue
            sim_ij = M[key[0], key[1]]
            sim_ik = M[key[0], key[2]]
            if sim_ij == sim_ik:
                continue
            seen.add(key)
            out.append(TripleSample(key[0], key[1], key[2], int(sim_ij > sim_ik)))
            if len(out) == count:
                break
    return out


def split(
    omega: list[TripleSample], n_train: int, n_test: int, seed: int = 0
) -> tuple[list[TripleSample], list[TripleSample]]:
    """Disjoint uniformly random train/test subsets of the stated sizes."""
    if n_train < 0 or n_test < 0:
        raise ValueError("split sizes must be nonnegative")
    if n_train + n_test > len(omega):
        raise ValueError(
            f"cannot split {len(omega)} triples into {n_train} + {n_test}"
        )
    perm = np.random.default_rng(seed).permutation(len(omega))
    train = [omega[t] for t in perm[:n_train]]
    test = [omega[t] for t in perm[n_train : n_train + n_test]]
    return train, test


def write_triples(path, triples) -> None:
    """Write triples as stable text: one `i j k y` record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(f"{t.i} {t.j} {t.k} {t.y}\n")


def read_triples(path) -> list[TripleSample]:
    """Read a triple file written by write_triples."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError(f"{path}: line {lineno}: expected `i j k y`")
            try:
                i, j, k, y = (int(p) for p in parts)
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-integer field") from None
            out.append(TripleSample(i, j, k, y))
    return out
