"""Tabular ingestion: typed tables, feature vocabulary, discretization, splits.

A table is loaded from a comma-separated file whose header declares each
column as ``name:kind[:bins]`` with kinds ``cat``, ``mcat``, ``num``,
``label``, ``ts``, ``id``.  Multi-value cells use ``|`` between values.
Categorical tokens are mapped to dense feature ids through a shared
:class:`FeatureVocab`; numeric columns stay raw until
:func:`discretize_numeric` turns them into equal-frequency bin features.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .errors import ConfigError, DataError, DataWarning, ParseError, SchemaError

CAT = "cat"
MCAT = "mcat"
NUM = "num"
LABEL = "label"
TS = "ts"
ID = "id"

_KINDS = {CAT, MCAT, NUM, LABEL, TS, ID}
FEATURE_KINDS = {CAT, MCAT, NUM}

MISSING_TOKEN = ""
MULTI_SEP = "|"

# a slot is a single feature id, a set of ids, or a raw (not yet binned) float
Slot = Union[int, frozenset, float]


@dataclass(frozen=True)
class Field:
    name: str
    kind: str
    bins: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise SchemaError(f"unknown field kind {self.kind!r} for {self.name!r}")
        if self.kind == NUM and self.bins < 2:
            raise SchemaError(f"numeric field {self.name!r} needs bins >= 2")


class Schema:
    """Ordered column descriptors; feature fields are the cat/mcat/num columns."""

    def __init__(self, fields: Iterable[Field]):
        self.fields = tuple(fields)
        labels = [f for f in self.fields if f.kind == LABEL]
        if len(labels) != 1:
            raise SchemaError(f"exactly one label field required, got {len(labels)}")
        if sum(f.kind == TS for f in self.fields) > 1:
            raise SchemaError("at most one timestamp field")
        if sum(f.kind == ID for f in self.fields) > 1:
            raise SchemaError("at most one sample-id field")
        self.feature_fields = tuple(
            i for i, f in enumerate(self.fields) if f.kind in FEATURE_KINDS
        )
        if not self.feature_fields:
            raise SchemaError("at least one feature field required")
        self.label_col = next(i for i, f in enumerate(self.fields) if f.kind == LABEL)
        self.ts_col = next((i for i, f in enumerate(self.fields) if f.kind == TS), None)
        self.id_col = next((i for i, f in enumerate(self.fields) if f.kind == ID), None)

    @property
    def n_features(self) -> int:
        return len(self.feature_fields)

    def feature_kind(self, slot: int) -> str:
        """Kind of the slot-th feature field (slots index feature fields only)."""
        return self.fields[self.feature_fields[slot]].kind

    def feature_name(self, slot: int) -> str:
        return self.fields[self.feature_fields[slot]].name

    def feature_bins(self, slot: int) -> int:
        return self.fields[self.feature_fields[slot]].bins

    def feature_slot(self, name: str) -> int:
        for s in range(self.n_features):
            if self.feature_name(s) == name:
                return s
        raise ConfigError(f"no feature field named {name!r}")

    @classmethod
    def from_header(cls, cells: list[str]) -> "Schema":
        fields = []
        for cell in cells:
            parts = cell.split(":")
            if len(parts) == 2:
                fields.append(Field(parts[0], parts[1]))
            elif len(parts) == 3:
                try:
                    bins = int(parts[2])
                except ValueError:
                    raise SchemaError(f"bad bin count in header cell {cell!r}")
                fields.append(Field(parts[0], parts[1], bins))
            else:
                raise SchemaError(f"bad header cell {cell!r}, want name:kind[:bins]")
        return cls(fields)

    @classmethod
    def from_json(cls, path) -> "Schema":
        spec = json.loads(Path(path).read_text())
        return cls(
            Field(f["name"], f["kind"], int(f.get("bins", 0))) for f in spec["fields"]
        )

    def header_cells(self) -> list[str]:
        cells = []
        for f in self.fields:
            cells.append(f"{f.name}:{f.kind}:{f.bins}" if f.kind == NUM else f"{f.name}:{f.kind}")
        return cells

    def __eq__(self, other):
        return isinstance(other, Schema) and self.fields == other.fields


class FeatureVocab:
    """Bijection (feature slot, raw token) <-> dense feature id in [0, V)."""

    def __init__(self):
        self._id_of: dict[tuple[int, str], int] = {}
        self._entry_of: list[tuple[int, str]] = []

    def __len__(self) -> int:
        return len(self._entry_of)

    @property
    def size(self) -> int:
        return len(self._entry_of)

    def add(self, slot: int, token: str) -> int:
        key = (slot, token)
        fid = self._id_of.get(key)
        if fid is None:
            fid = len(self._entry_of)
            self._id_of[key] = fid
            self._entry_of.append(key)
        return fid

    def id_of(self, slot: int, token: str) -> int:
        try:
            return self._id_of[(slot, token)]
        except KeyError:
            raise KeyError(f"unknown token {token!r} in feature field {slot}")

    def entry_of(self, fid: int) -> tuple[int, str]:
        return self._entry_of[fid]

    def slot_of(self, fid: int) -> int:
        return self._entry_of[fid][0]

    def token_of(self, fid: int) -> str:
        return self._entry_of[fid][1]

    def to_json(self) -> str:
        return json.dumps({"entries": [[s, t] for s, t in self._entry_of]})

    @classmethod
    def from_json(cls, text: str) -> "FeatureVocab":
        vocab = cls()
        for s, t in json.loads(text)["entries"]:
            vocab.add(int(s), t)
        return vocab


@dataclass
class Sample:
    """One table row: feature slots, label, optional class id and timestamp."""

    sample_id: int
    slots: tuple  # length F; each entry is a feature id, a frozenset, or a raw float
    label: float
    label_class: Optional[int] = None
    timestamp: Optional[int] = None


class Table:
    """Immutable-after-construction collection of samples sharing one schema/vocab."""

    def __init__(self, schema: Schema, vocab: FeatureVocab, samples: list[Sample],
                 numeric_bins: Optional[dict] = None,
                 label_bins: Optional[tuple] = None):
        self.schema = schema
        self.vocab = vocab
        self.samples = samples
        # feature slot -> ascending interior bin boundaries (np.ndarray)
        self.numeric_bins = dict(numeric_bins or {})
        # (lo, hi, n_classes) once labels are discretized
        self.label_bins = label_bins

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_features(self) -> int:
        return self.schema.n_features

    def with_samples(self, samples: list[Sample]) -> "Table":
        return Table(self.schema, self.vocab, samples, self.numeric_bins, self.label_bins)

    def sample_by_id(self, sample_id: int) -> Sample:
        if not hasattr(self, "_by_id"):
            self._by_id = {s.sample_id: s for s in self.samples}
        return self._by_id[sample_id]


def _parse_cell(raw: str, slot: int, kind: str, vocab: FeatureVocab, line_no: int) -> Slot:
    if kind == CAT:
        return vocab.add(slot, raw if raw else MISSING_TOKEN)
    if kind == MCAT:
        if not raw:
            return frozenset((vocab.add(slot, MISSING_TOKEN),))
        return frozenset(vocab.add(slot, tok) for tok in raw.split(MULTI_SEP))
    # numeric, kept raw until discretization
    if not raw:
        return float("nan")
    try:
        return float(raw)
    except ValueError:
        raise DataError(f"line {line_no}: non-numeric token {raw!r} in numeric column")


def load_table(path, schema: Optional[Schema] = None,
               vocab: Optional[FeatureVocab] = None) -> Table:
    """Read a delimited file into a Table, building the vocabulary incrementally.

    The header either declares kinds itself (``name:kind[:bins]``) or, when a
    `schema` is supplied, must list exactly the schema's field names.  Passing
    an existing `vocab` extends it so several files share one id space.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row")
        if schema is None:
            schema = Schema.from_header(header)
        else:
            names = [cell.split(":")[0] for cell in header]
            if names != [f.name for f in schema.fields]:
                raise SchemaError(
                    f"{path}: header names {names} do not match schema "
                    f"{[f.name for f in schema.fields]}"
                )
        vocab = vocab if vocab is not None else FeatureVocab()
        n_cols = len(schema.fields)
        col_of_slot = schema.feature_fields
        samples: list[Sample] = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != n_cols:
                raise ParseError(
                    f"expected {n_cols} columns, got {len(row)}", line=line_no
                )
            slots = tuple(
                _parse_cell(row[col_of_slot[s]], s, schema.feature_kind(s), vocab, line_no)
                for s in range(schema.n_features)
            )
            try:
                label = float(row[schema.label_col])
            except ValueError:
                raise DataError(
                    f"line {line_no}: bad label {row[schema.label_col]!r}"
                )
            timestamp = None
            if schema.ts_col is not None:
                tok = row[schema.ts_col]
                try:
                    timestamp = int(tok)
                except ValueError:
                    raise DataError(f"line {line_no}: bad timestamp {tok!r}")
            if schema.id_col is not None:
                tok = row[schema.id_col]
                try:
                    sample_id = int(tok)
                except ValueError:
                    raise DataError(f"line {line_no}: bad sample id {tok!r}")
                if sample_id < 0:
                    raise DataError(f"line {line_no}: negative sample id {sample_id}")
            else:
                sample_id = len(samples)
            samples.append(Sample(sample_id, slots, label, None, timestamp))
    if len({s.sample_id for s in samples}) != len(samples):
        raise DataError(f"{path}: duplicate sample ids")
    return Table(schema, vocab, samples)


def save_table(table: Table, path) -> None:
    """Write a table back to its delimited form (inverse of load_table)."""
    schema = table.schema
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.header_cells())
        for s in table.samples:
            row = [""] * len(schema.fields)
            for slot_idx, col in enumerate(schema.feature_fields):
                slot = s.slots[slot_idx]
                if isinstance(slot, frozenset):
                    row[col] = MULTI_SEP.join(
                        sorted(table.vocab.token_of(fid) for fid in slot)
                    )
                elif isinstance(slot, float):
                    row[col] = "" if np.isnan(slot) else repr(slot)
                else:
                    row[col] = table.vocab.token_of(slot)
            row[schema.label_col] = repr(s.label)
            if schema.ts_col is not None:
                row[schema.ts_col] = str(s.timestamp)
            if schema.id_col is not None:
                row[schema.id_col] = str(s.sample_id)
            writer.writerow(row)


def equal_frequency_boundaries(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Interior quantile boundaries for equal-frequency binning.

    The effective bin count never exceeds the number of distinct values;
    a constant column yields zero boundaries (a single bin) with a warning.
    """
    values = np.asarray(values, dtype=np.float64)
    distinct = np.unique(values)
    if distinct.size == 1:
        warnings.warn("constant numeric column collapses to a single bin", DataWarning)
        return np.empty(0)
    n_bins = min(n_bins, distinct.size)
    qs = np.arange(1, n_bins) / n_bins
    return np.unique(np.quantile(values, qs))


def bin_of(value: float, boundaries: np.ndarray) -> int:
    """Bin id for a value; values at a boundary go right, out-of-range clamp."""
    if np.isnan(value):
        return -1  # mapped to the per-field missing sentinel by the caller
    return int(np.searchsorted(boundaries, value, side="right"))


def discretize_numeric(table: Table, slot: int,
                       boundaries: Optional[np.ndarray] = None) -> Table:
    """Replace a raw numeric feature field with equal-frequency bin features.

    Boundaries are computed from this table unless given (reuse on held-out
    data); out-of-range values clamp to the edge bins by construction of
    ``searchsorted``.  Bin ids are registered in the vocabulary as tokens
    ``bin0 .. binB-1``.
    """
    if table.schema.feature_kind(slot) != NUM:
        raise ConfigError(f"feature field {slot} is not numeric")
    raw = np.array([s.slots[slot] for s in table.samples], dtype=np.float64)
    if boundaries is None:
        present = raw[~np.isnan(raw)]
        if present.size == 0:
            raise DataError(f"numeric field {slot} has no non-missing values")
        boundaries = equal_frequency_boundaries(present, table.schema.feature_bins(slot))
    boundaries = np.asarray(boundaries, dtype=np.float64)
    n_bins = boundaries.size + 1
    bin_ids = [table.vocab.add(slot, f"bin{b}") for b in range(n_bins)]
    missing_id = table.vocab.add(slot, MISSING_TOKEN)
    new_samples = []
    for s in table.samples:
        b = bin_of(s.slots[slot], boundaries)
        fid = missing_id if b < 0 else bin_ids[b]
        slots = s.slots[:slot] + (fid,) + s.slots[slot + 1:]
        new_samples.append(replace(s, slots=slots))
    bins = dict(table.numeric_bins)
    bins[slot] = boundaries
    return Table(table.schema, table.vocab, new_samples, bins, table.label_bins)


def discretize_all_numeric(table: Table) -> Table:
    for slot in range(table.n_features):
        if table.schema.feature_kind(slot) == NUM and slot not in table.numeric_bins:
            table = discretize_numeric(table, slot)
    return table


def discretize_labels(table: Table, n_classes: int) -> Table:
    """Assign label class ids by equal-width binning over the observed range.

    Raw labels are retained (regression losses use them); class ids only feed
    the label-embedding lookup.
    """
    if n_classes < 2:
        raise ConfigError("label discretization needs at least 2 classes")
    if not table.samples:
        return Table(table.schema, table.vocab, [], table.numeric_bins,
                     (0.0, 1.0, n_classes))
    ys = np.array([s.label for s in table.samples], dtype=np.float64)
    lo, hi = float(ys.min()), float(ys.max())
    new_samples = [
        replace(s, label_class=label_class_of(s.label, lo, hi, n_classes))
        for s in table.samples
    ]
    return Table(table.schema, table.vocab, new_samples, table.numeric_bins,
                 (lo, hi, n_classes))


def label_class_of(y: float, lo: float, hi: float, n_classes: int) -> int:
    if hi <= lo:
        return 0
    cls = int((y - lo) / (hi - lo) * n_classes)
    return min(max(cls, 0), n_classes - 1)


def split_by_time(table: Table, t1: int, t2: int) -> tuple[Table, Table, Table]:
    """Partition by a global split time: pool before t1, train in [t1, t2), test after.

    Boundaries are half-open, so a timestamp equal to t1 lands in train and
    one equal to t2 lands in test.
    """
    if not t1 < t2:
        raise ConfigError(f"need t1 < t2, got {t1} >= {t2}")
    if table.schema.ts_col is None:
        raise ConfigError("global-time split requires a timestamp field")
    pool, train, test = [], [], []
    for s in table.samples:
        if s.timestamp is None:
            raise DataError(f"sample {s.sample_id} has no timestamp")
        if s.timestamp < t1:
            pool.append(s)
        elif s.timestamp < t2:
            train.append(s)
        else:
            test.append(s)
    for name, part in (("pool", pool), ("train", train), ("test", test)):
        if not part:
            warnings.warn(f"{name} partition is empty", DataWarning)
    return table.with_samples(pool), table.with_samples(train), table.with_samples(test)


@dataclass
class FoldAssignment:
    """Seeded k-fold partition of a train table for leakage-free retrieval pools."""

    n_folds: int
    seed: int
    fold_of: dict  # sample id -> fold index
    folds: tuple   # tuple of tuples of sample ids

    def pool_ids(self, fold: int) -> frozenset:
        """Sample ids a target in `fold` may retrieve from (all other folds)."""
        return frozenset(
            sid for j, ids in enumerate(self.folds) if j != fold for sid in ids
        )

    def excluded_ids(self, sample_id: int) -> frozenset:
        """Ids barred from retrieval for this target: its own fold."""
        return frozenset(self.folds[self.fold_of[sample_id]])


def split_kfold(table: Table, k: int, seed: int) -> FoldAssignment:
    """Deterministic near-equal k folds; remainder spread over the first folds."""
    n = len(table.samples)
    if k < 2:
        raise ConfigError(f"k-fold split needs k >= 2, got {k}")
    if k > n:
        raise DataError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    base, extra = divmod(n, k)
    folds, fold_of, at = [], {}, 0
    for fold in range(k):
        size = base + (1 if fold < extra else 0)
        ids = tuple(table.samples[i].sample_id for i in order[at:at + size])
        at += size
        folds.append(ids)
        for sid in ids:
            fold_of[sid] = fold
    return FoldAssignment(k, seed, fold_of, tuple(folds))
