"""Feature-based inverted index over a retrieval pool.

Each pool row is a document; every feature value it carries (each value of a
multi-value slot separately) appends the row's sample id to that feature's
posting list.  Fields whose most frequent value covers too large a share of
the pool are stop-fields: excluded from postings and from query scoring.

On disk the index is the canonical ``RIMIDX`` format: magic + version,
little-endian header (document count, field count, feature count, stop-field
bitmap, multi-value-field bitmap), per-feature records sorted by feature id
(id, document frequency, delta-encoded posting), then the document section
(per document: sample id, label, label class, per-field slots) which scoring
needs for Jaccard term frequencies and neighbor labels.
"""

from __future__ import annotations

import hashlib
import io
import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .dataset import MCAT, NUM, Sample, Table
from .errors import DataError, FormatError

MAGIC = b"RIMIDX"
VERSION = 1


@dataclass(frozen=True)
class RankingParams:
    """Okapi free parameters; the document-length ratio is structurally 1
    because every document has exactly F fields."""

    k1: float = 1.2
    b: float = 0.75


_EMPTY_POSTING = np.empty(0, dtype=np.int64)


class InvertedIndex:
    def __init__(self, n_pool: int, n_fields: int, stop_fields: frozenset,
                 multi_fields: frozenset, postings: dict, docs: dict):
        self.n_pool = n_pool
        self.n_fields = n_fields
        self.stop_fields = stop_fields
        self.multi_fields = multi_fields
        self.postings = postings      # feature id -> sorted np.int64 sample ids
        self.docs = docs              # sample id -> Sample
        self._fingerprint = None

    def doc_freq(self, feature: int) -> int:
        p = self.postings.get(feature)
        return 0 if p is None else len(p)

    def fingerprint(self) -> int:
        """64-bit content hash used for cache provenance."""
        if self._fingerprint is None:
            digest = hashlib.sha256(serialize_index(self)).digest()
            self._fingerprint = struct.unpack("<Q", digest[:8])[0]
        return self._fingerprint


def detect_stop_fields(pool: Table, max_df_ratio: float) -> frozenset:
    """Feature fields whose most frequent value appears in more than
    `max_df_ratio` of the pool documents (gender-like fields)."""
    if not pool.samples:
        raise DataError("cannot detect stop fields on an empty pool")
    n = len(pool.samples)
    stopped = []
    for slot in range(pool.n_features):
        counts = Counter()
        for s in pool.samples:
            v = s.slots[slot]
            if isinstance(v, frozenset):
                counts.update(v)
            else:
                counts[v] += 1
        if counts and max(counts.values()) / n > max_df_ratio:
            stopped.append(slot)
    return frozenset(stopped)


def subsample_pool(pool: Table, limit: int, seed: int) -> Table:
    """Optional seeded uniform cap on the pool size before indexing."""
    if len(pool.samples) <= limit:
        return pool
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(pool.samples), size=limit, replace=False)
    return pool.with_samples([pool.samples[i] for i in sorted(picked)])


def build_index(pool: Table, stop_fields: frozenset = frozenset()) -> InvertedIndex:
    """O(F * |pool|) construction: append every sample to the posting list of
    each non-stopped feature value it carries."""
    for slot in range(pool.n_features):
        if pool.schema.feature_kind(slot) == NUM and slot not in pool.numeric_bins:
            raise DataError(
                f"numeric field {pool.schema.feature_name(slot)!r} must be "
                "discretized before indexing"
            )
    lists: dict[int, list[int]] = {}
    docs: dict[int, Sample] = {}
    for s in pool.samples:
        docs[s.sample_id] = s
        for slot, v in enumerate(s.slots):
            if slot in stop_fields:
                continue
            if isinstance(v, frozenset):
                for fid in v:
                    lists.setdefault(fid, []).append(s.sample_id)
            else:
                lists.setdefault(v, []).append(s.sample_id)
    postings = {
        fid: np.sort(np.asarray(ids, dtype=np.int64)) for fid, ids in lists.items()
    }
    multi = frozenset(
        slot for slot in range(pool.n_features)
        if pool.schema.feature_kind(slot) == MCAT
    )
    return InvertedIndex(len(pool.samples), pool.n_features, stop_fields,
                         multi, postings, docs)


def posting(index: InvertedIndex, feature: int) -> np.ndarray:
    """Sorted sample ids containing the feature; empty for unseen or stopped."""
    return index.postings.get(feature, _EMPTY_POSTING)


def _write_slots(out, sample: Sample, multi_fields: frozenset) -> None:
    for slot, v in enumerate(sample.slots):
        if slot in multi_fields:
            ids = sorted(v)
            out.write(struct.pack("<H", len(ids)))
            out.write(struct.pack(f"<{len(ids)}I", *ids) if ids else b"")
        else:
            out.write(struct.pack("<I", v))


def _read_slots(buf, n_fields: int, multi_fields: frozenset) -> tuple:
    slots = []
    for slot in range(n_fields):
        if slot in multi_fields:
            (m,) = struct.unpack("<H", buf.read(2))
            slots.append(frozenset(struct.unpack(f"<{m}I", buf.read(4 * m)) if m else ()))
        else:
            slots.append(struct.unpack("<I", buf.read(4))[0])
    return tuple(slots)


def write_doc_record(out, sample: Sample, multi_fields: frozenset) -> None:
    out.write(struct.pack("<Qdi", sample.sample_id, sample.label,
                          -1 if sample.label_class is None else sample.label_class))
    _write_slots(out, sample, multi_fields)


def read_doc_record(buf, n_fields: int, multi_fields: frozenset) -> Sample:
    sid, label, cls = struct.unpack("<Qdi", buf.read(20))
    slots = _read_slots(buf, n_fields, multi_fields)
    return Sample(sid, slots, label, None if cls < 0 else cls, None)


def _bitmap(fields: frozenset, n_fields: int) -> bytes:
    bits = bytearray((n_fields + 7) // 8)
    for f in fields:
        bits[f // 8] |= 1 << (f % 8)
    return bytes(bits)


def _unbitmap(raw: bytes, n_fields: int) -> frozenset:
    return frozenset(
        f for f in range(n_fields) if raw[f // 8] & (1 << (f % 8))
    )


def serialize_index(index: InvertedIndex) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<B", VERSION))
    out.write(struct.pack("<QII", index.n_pool, index.n_fields, len(index.postings)))
    out.write(_bitmap(index.stop_fields, index.n_fields))
    out.write(_bitmap(index.multi_fields, index.n_fields))
    for fid in sorted(index.postings):
        ids = index.postings[fid]
        out.write(struct.pack("<II", fid, len(ids)))
        deltas = np.diff(ids, prepend=np.int64(0))
        out.write(deltas.astype("<u8").tobytes())
    out.write(struct.pack("<Q", len(index.docs)))
    for sid in sorted(index.docs):
        write_doc_record(out, index.docs[sid], index.multi_fields)
    return out.getvalue()


def save_index(index: InvertedIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_index(index))


def deserialize_index(raw: bytes) -> InvertedIndex:
    buf = io.BytesIO(raw)
    try:
        if buf.read(len(MAGIC)) != MAGIC:
            raise FormatError("not a RIMIDX file (bad magic)")
        (version,) = struct.unpack("<B", buf.read(1))
        if version != VERSION:
            raise FormatError(f"unsupported RIMIDX version {version}")
        n_pool, n_fields, n_feats = struct.unpack("<QII", buf.read(16))
        nbytes = (n_fields + 7) // 8
        stop_fields = _unbitmap(buf.read(nbytes), n_fields)
        multi_fields = _unbitmap(buf.read(nbytes), n_fields)
        postings = {}
        for _ in range(n_feats):
            fid, length = struct.unpack("<II", buf.read(8))
            deltas = np.frombuffer(buf.read(8 * length), dtype="<u8", count=length)
            if deltas.size != length:
                raise FormatError("truncated posting list")
            postings[fid] = np.cumsum(deltas.astype(np.int64))
        (n_docs,) = struct.unpack("<Q", buf.read(8))
        docs = {}
        for _ in range(n_docs):
            s = read_doc_record(buf, n_fields, multi_fields)
            docs[s.sample_id] = s
        return InvertedIndex(n_pool, n_fields, stop_fields, multi_fields,
                             postings, docs)
    except struct.error:
        raise FormatError("truncated RIMIDX file")


def load_index(path) -> InvertedIndex:
    with open(path, "rb") as fh:
        return deserialize_index(fh.read())
