"""Query formulation, BM25 scoring, top-K retrieval, and the offline cache.

A query is the feature part of the target row with OR semantics: every pool
document sharing at least one non-stopped feature value is a candidate.
Candidates are gathered from the posting-list union and scored once
(candidate-at-a-time); ties are broken by ascending sample id and the
target's own row is always excluded to prevent label leakage.

Term frequency is 1/0 equality for single-value fields and Jaccard overlap
for multi-value fields.  The inverse document frequency is the classic
log-odds form and may go negative for features in more than half the pool;
it is kept as-is (stop-fields already remove the pathological fields).
"""

from __future__ import annotations

import io
import math
import struct
from collections import Counter
from dataclasses import dataclass
from heapq import nsmallest
from typing import Optional

import numpy as np

from .dataset import Sample, Table
from .errors import ConfigError, DataError, FormatError, StaleCacheError
from .index import (InvertedIndex, RankingParams, posting, read_doc_record,
                    write_doc_record, _bitmap, _unbitmap)

CACHE_MAGIC = b"RIMCCH"
CACHE_VERSION = 1


@dataclass(frozen=True)
class Query:
    """F feature slots copied from the target plus its id for self-exclusion."""

    slots: tuple
    target_id: int
    exclude_id: Optional[int]


@dataclass(frozen=True)
class Neighbor:
    sample_id: int
    score: float
    slots: tuple
    label: float
    label_class: Optional[int]


RetrievedSet = tuple  # tuple[Neighbor, ...], descending score, ties by id


def make_query(target: Sample) -> Query:
    for v in target.slots:
        if isinstance(v, float):
            raise DataError(
                f"sample {target.sample_id} has an undiscretized numeric slot"
            )
    return Query(target.slots, target.sample_id, target.sample_id)


def term_frequency(query_slot, doc_slot) -> float:
    """Per-field match signal: 1/0 for single values, Jaccard for value sets."""
    if isinstance(query_slot, frozenset) or isinstance(doc_slot, frozenset):
        inter = len(query_slot & doc_slot)
        union = len(query_slot | doc_slot)
        return inter / union if union else 0.0
    return 1.0 if query_slot == doc_slot else 0.0


def idf(index: InvertedIndex, query_slot) -> float:
    """log((N - N(c) + 0.5) / (N(c) + 0.5)); a multi-value slot uses the
    arithmetic mean of its values' document frequencies."""
    if isinstance(query_slot, frozenset):
        if not query_slot:
            return 0.0
        n_c = sum(index.doc_freq(fid) for fid in query_slot) / len(query_slot)
    else:
        n_c = index.doc_freq(query_slot)
    n = index.n_pool
    return math.log((n - n_c + 0.5) / (n_c + 0.5))


def _tf_fraction(tf: float, k1: float) -> float:
    # every document has exactly F fields, so the length norm collapses to k1;
    # at tf == 1 the fraction is exactly 1.0 and the field term equals its IDF
    return tf * (k1 + 1.0) / (tf + k1)


def bm25_score(query: Query, doc: Sample, index: InvertedIndex,
               params: RankingParams = RankingParams()) -> float:
    score = 0.0
    for slot in range(index.n_fields):
        if slot in index.stop_fields:
            continue
        tf = term_frequency(query.slots[slot], doc.slots[slot])
        if tf == 0.0:
            continue
        score += idf(index, query.slots[slot]) * _tf_fraction(tf, params.k1)
    return score


def _matches(query: Query, doc: Sample, index: InvertedIndex) -> bool:
    for slot in range(index.n_fields):
        if slot in index.stop_fields:
            continue
        q, d = query.slots[slot], doc.slots[slot]
        if isinstance(q, frozenset):
            if q & d:
                return True
        elif q == d:
            return True
    return False


def _neighbor(doc: Sample, score: float) -> Neighbor:
    return Neighbor(doc.sample_id, score, doc.slots, doc.label, doc.label_class)


def _select_top(scores: dict, index: InvertedIndex, k: int,
                exclude: frozenset) -> RetrievedSet:
    items = ((sid, sc) for sid, sc in scores.items() if sid not in exclude)
    top = nsmallest(k, items, key=lambda t: (-t[1], t[0]))
    return tuple(_neighbor(index.docs[sid], sc) for sid, sc in top)


def retrieve_topk(index: InvertedIndex, query: Query, k: int,
                  params: RankingParams = RankingParams(),
                  extra_exclude: frozenset = frozenset()) -> RetrievedSet:
    """Top k candidates by BM25 (score desc, sample id asc).

    Candidates are the union of the query features' postings; scoring visits
    each candidate once per matching field, so the work is bounded by the
    posting lengths rather than the pool size.  `extra_exclude` supports the
    k-fold protocol where a target must not retrieve from its own fold.
    """
    if k < 1:
        raise ConfigError(f"retrieval size must be >= 1, got {k}")
    k1 = params.k1
    scores: dict[int, float] = {}
    for slot in range(index.n_fields):
        if slot in index.stop_fields:
            continue
        v = query.slots[slot]
        if isinstance(v, frozenset):
            if not v:
                continue
            m = len(v)
            slot_idf = idf(index, v)
            overlap: Counter = Counter()
            for fid in sorted(v):
                for sid in posting(index, fid):
                    overlap[int(sid)] += 1
            for sid, inter in overlap.items():
                union = m + len(index.docs[sid].slots[slot]) - inter
                contrib = slot_idf * _tf_fraction(inter / union, k1)
                scores[sid] = scores.get(sid, 0.0) + contrib
        else:
            plist = index.postings.get(v)
            if plist is None:
                continue
            w = idf(index, v)  # tf == 1 makes the field term exactly the IDF
            for sid in plist:
                sid = int(sid)
                scores[sid] = scores.get(sid, 0.0) + w
    exclude = extra_exclude if query.exclude_id is None else \
        extra_exclude | {query.exclude_id}
    return _select_top(scores, index, k, exclude)


def exhaustive_topk(index: InvertedIndex, query: Query, k: int,
                    params: RankingParams = RankingParams(),
                    extra_exclude: frozenset = frozenset()) -> RetrievedSet:
    """Score every pool document directly; the slow reference for --oracle."""
    exclude = extra_exclude if query.exclude_id is None else \
        extra_exclude | {query.exclude_id}
    scores = {}
    for sid in sorted(index.docs):
        if sid in exclude:
            continue
        doc = index.docs[sid]
        if _matches(query, doc, index):
            scores[sid] = bm25_score(query, doc, index, params)
    top = nsmallest(k, scores.items(), key=lambda t: (-t[1], t[0]))
    return tuple(_neighbor(index.docs[sid], sc) for sid, sc in top)


def retrieve_random(pool: Table, k: int, seed: int,
                    exclude_id: Optional[int] = None) -> RetrievedSet:
    """Seeded uniform sample without replacement; scores are all zero."""
    if k < 1:
        raise ConfigError(f"retrieval size must be >= 1, got {k}")
    eligible = [s for s in pool.samples if s.sample_id != exclude_id]
    if not eligible:
        return ()
    rng = np.random.default_rng(seed)
    take = min(k, len(eligible))
    picked = rng.choice(len(eligible), size=take, replace=False)
    chosen = sorted((eligible[i] for i in picked), key=lambda s: s.sample_id)
    return tuple(_neighbor(s, 0.0) for s in chosen)


def retrieve_filtered(index: InvertedIndex, query: Query, k: int,
                      filter_slot: int,
                      params: RankingParams = RankingParams(),
                      extra_exclude: frozenset = frozenset()) -> RetrievedSet:
    """retrieve_topk restricted to documents sharing the target's value in
    `filter_slot` (e.g. only the same user's rows)."""
    v = query.slots[filter_slot]
    values = sorted(v) if isinstance(v, frozenset) else [v]
    allowed: set[int] = set()
    for fid in values:
        allowed.update(int(s) for s in posting(index, fid))
    if not allowed:
        return ()
    full = retrieve_topk(index, query, len(index.docs) or 1, params, extra_exclude)
    kept = [n for n in full if n.sample_id in allowed]
    return tuple(kept[:k])


@dataclass(frozen=True)
class CacheProvenance:
    index_fingerprint: int
    k: int
    mode: str
    k1: float
    b: float


class RetrievalCache:
    """Precomputed target id -> retrieved set, valid only for one provenance."""

    def __init__(self, provenance: CacheProvenance, n_fields: int,
                 multi_fields: frozenset, entries: dict):
        self.provenance = provenance
        self.n_fields = n_fields
        self.multi_fields = multi_fields
        self.entries = entries


def precompute_cache(index: InvertedIndex, targets: Table, k: int, mode: str,
                     params: RankingParams = RankingParams(),
                     filter_slot: Optional[int] = None,
                     seed: int = 0,
                     exclude_of=None) -> RetrievalCache:
    """Run retrieval offline for every target.

    `mode` is one of ``bm25``, ``random``, ``filtered``; `exclude_of` maps a
    sample id to extra excluded ids (the k-fold protocol).
    """
    if mode == "filtered" and filter_slot is None:
        raise ConfigError("filtered mode needs filter_slot")
    tag = {"bm25": "bm25", "random": f"random:{seed}",
           "filtered": f"filtered:{filter_slot}"}.get(mode)
    if tag is None:
        raise ConfigError(f"unknown retrieval mode {mode!r}")
    prov = CacheProvenance(index.fingerprint(), k, tag, params.k1, params.b)
    entries = {}
    pool_table = None
    for s in targets.samples:
        extra = frozenset() if exclude_of is None else exclude_of(s.sample_id)
        if mode == "random":
            if pool_table is None:
                pool_table = Table(targets.schema, targets.vocab,
                                   [index.docs[sid] for sid in sorted(index.docs)])
            entries[s.sample_id] = retrieve_random(
                pool_table, k, _per_target_seed(seed, s.sample_id), s.sample_id
            )
        elif mode == "filtered":
            entries[s.sample_id] = retrieve_filtered(
                index, make_query(s), k, filter_slot, params, extra
            )
        else:
            entries[s.sample_id] = retrieve_topk(
                index, make_query(s), k, params, extra
            )
    return RetrievalCache(prov, index.n_fields, index.multi_fields, entries)


def _per_target_seed(base_seed: int, sample_id: int) -> int:
    return (base_seed * 0x9E3779B1 + sample_id) % (2 ** 63)


def cache_lookup(cache: RetrievalCache, target_id: int) -> Optional[RetrievedSet]:
    """The cached retrieved set, or None when the target was never cached."""
    return cache.entries.get(target_id)


def check_provenance(cache: RetrievalCache, index: InvertedIndex, k: int,
                     mode_tag: str, params: RankingParams) -> None:
    expected = CacheProvenance(index.fingerprint(), k, mode_tag,
                               params.k1, params.b)
    if cache.provenance != expected:
        raise StaleCacheError(
            f"cache provenance {cache.provenance} != expected {expected}"
        )


class BM25Source:
    """Live top-k retrieval; `exclude_of` maps sample id -> extra excluded ids
    (the k-fold protocol bars a target's own fold)."""

    def __init__(self, index: InvertedIndex, k: int,
                 params: RankingParams = RankingParams(), exclude_of=None):
        self.index = index
        self.k = k
        self.params = params
        self.exclude_of = exclude_of

    def neighbors_for(self, sample) -> RetrievedSet:
        extra = frozenset() if self.exclude_of is None else \
            self.exclude_of(sample.sample_id)
        return retrieve_topk(self.index, make_query(sample), self.k,
                             self.params, extra)


class FilteredSource:
    def __init__(self, index: InvertedIndex, k: int, filter_slot: int,
                 params: RankingParams = RankingParams(), exclude_of=None):
        self.index = index
        self.k = k
        self.filter_slot = filter_slot
        self.params = params
        self.exclude_of = exclude_of

    def neighbors_for(self, sample) -> RetrievedSet:
        extra = frozenset() if self.exclude_of is None else \
            self.exclude_of(sample.sample_id)
        return retrieve_filtered(self.index, make_query(sample), self.k,
                                 self.filter_slot, self.params, extra)


class RandomSource:
    def __init__(self, pool: Table, k: int, base_seed: int):
        self.pool = pool
        self.k = k
        self.base_seed = base_seed

    def neighbors_for(self, sample) -> RetrievedSet:
        return retrieve_random(self.pool, self.k,
                               _per_target_seed(self.base_seed, sample.sample_id),
                               sample.sample_id)


class CachedSource:
    def __init__(self, cache: RetrievalCache):
        self.cache = cache

    def neighbors_for(self, sample) -> RetrievedSet:
        hit = cache_lookup(self.cache, sample.sample_id)
        if hit is None:
            raise DataError(f"sample {sample.sample_id} not in retrieval cache")
        return hit


class EmptySource:
    """Retrieval disabled: the model falls back to zero aggregates."""

    def neighbors_for(self, sample) -> RetrievedSet:
        return ()


def serialize_cache(cache: RetrievalCache) -> bytes:
    out = io.BytesIO()
    out.write(CACHE_MAGIC)
    out.write(struct.pack("<B", CACHE_VERSION))
    p = cache.provenance
    tag = p.mode.encode()
    out.write(struct.pack("<QIH", p.index_fingerprint, p.k, len(tag)))
    out.write(tag)
    out.write(struct.pack("<ddI", p.k1, p.b, cache.n_fields))
    out.write(_bitmap(cache.multi_fields, cache.n_fields))
    out.write(struct.pack("<Q", len(cache.entries)))
    for tid in sorted(cache.entries):
        neighbors = cache.entries[tid]
        out.write(struct.pack("<QH", tid, len(neighbors)))
        for n in neighbors:
            out.write(struct.pack("<d", n.score))
            write_doc_record(
                out, Sample(n.sample_id, n.slots, n.label, n.label_class),
                cache.multi_fields,
            )
    return out.getvalue()


def save_cache(cache: RetrievalCache, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_cache(cache))


def load_cache(path) -> RetrievalCache:
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    try:
        if buf.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
            raise FormatError("not a RIMCCH file (bad magic)")
        (version,) = struct.unpack("<B", buf.read(1))
        if version != CACHE_VERSION:
            raise FormatError(f"unsupported RIMCCH version {version}")
        fp, k, tag_len = struct.unpack("<QIH", buf.read(14))
        tag = buf.read(tag_len).decode()
        k1, b, n_fields = struct.unpack("<ddI", buf.read(20))
        multi = _unbitmap(buf.read((n_fields + 7) // 8), n_fields)
        (n_targets,) = struct.unpack("<Q", buf.read(8))
        entries = {}
        for _ in range(n_targets):
            tid, n = struct.unpack("<QH", buf.read(10))
            neighbors = []
            for _ in range(n):
                (score,) = struct.unpack("<d", buf.read(8))
                doc = read_doc_record(buf, n_fields, multi)
                neighbors.append(
                    Neighbor(doc.sample_id, score, doc.slots, doc.label,
                             doc.label_class)
                )
            entries[tid] = tuple(neighbors)
        return RetrievalCache(CacheProvenance(fp, k, tag, k1, b),
                              n_fields, multi, entries)
    except struct.error:
        raise FormatError("truncated RIMCCH file")
