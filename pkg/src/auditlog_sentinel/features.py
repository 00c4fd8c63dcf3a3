"""Per-process q-gram features over audit-event windows.

A log window maps to the set of contiguous q-grams (q in {1,2,3}) of its
per-process event sequences; grams never span process boundaries.  Feature
presence is binary.  Per-log gram collections and the vocabulary preserve
first-seen order so that rebuilding from the same inputs is byte-stable
(Python set iteration order is hash-salted and must not leak into outputs).
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .events import ActionKind, LogWindow, group_by_process

logger = logging.getLogger(__name__)

SUPPORTED_Q = frozenset({1, 2, 3})
DEFAULT_Q_SET = (1, 2, 3)


class FeatureFormatError(ValueError):
    """A malformed dataset or vocabulary file."""


class EventKey(NamedTuple):
    action: ActionKind
    target: str


QGram = tuple  # tuple[EventKey, ...] of length 1..3


def event_key_bytes(key: EventKey) -> bytes:
    action = key.action.value.encode("utf-8")
    target = key.target.encode("utf-8")
    return struct.pack("<I", len(action)) + action + struct.pack("<I", len(target)) + target


def qgram_bytes(gram: QGram) -> bytes:
    return b"".join(event_key_bytes(k) for k in gram)


def qgram_hash64(gram: QGram) -> int:
    """Stable 64-bit gram hash (process- and run-independent)."""
    digest = hashlib.blake2b(qgram_bytes(gram), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def extract_qgrams(
    events: Sequence,
    q_set: Iterable[int] = DEFAULT_Q_SET,
    intern: dict[EventKey, EventKey] | None = None,
) -> list[QGram]:
    """Unique contiguous q-grams of one process's time-ordered events.

    Returns first-seen order (position, then q ascending).  ``intern`` may be
    passed to share EventKey objects across calls and cut memory.
    """
    qs = sorted(set(q_set))
    if not qs or any(q not in SUPPORTED_Q for q in qs):
        raise ValueError(f"q values must be a non-empty subset of {sorted(SUPPORTED_Q)}")
    keys: list[EventKey] = []
    for event in events:
        key = EventKey(event.action, event.target)
        if intern is not None:
            key = intern.setdefault(key, key)
        keys.append(key)
    seen: dict[QGram, None] = {}
    n = len(keys)
    for i in range(n):
        for q in qs:
            if i + q <= n:
                seen[tuple(keys[i : i + q])] = None
    return list(seen)


def featurize_log(
    window: LogWindow,
    q_set: Iterable[int] = DEFAULT_Q_SET,
    intern: dict[EventKey, EventKey] | None = None,
) -> list[QGram]:
    """Union of per-process q-gram sets for one window (first-seen order)."""
    qs = tuple(sorted(set(q_set)))
    seen: dict[QGram, None] = {}
    for _, process_events in group_by_process(window).items():
        for gram in extract_qgrams(process_events, qs, intern):
            seen[gram] = None
    return list(seen)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class FeatureVocabulary:
    """Dense gram -> column index map, append-only unless frozen."""

    def __init__(self, grams: Iterable[QGram] = ()) -> None:
        self._index: dict[QGram, int] = {}
        self._grams: list[QGram] = []
        self.frozen = False
        for gram in grams:
            self.add(gram)

    def __len__(self) -> int:
        return len(self._grams)

    def __iter__(self):
        return iter(self._grams)

    def add(self, gram: QGram) -> int:
        existing = self._index.get(gram)
        if existing is not None:
            return existing
        if self.frozen:
            raise ValueError("vocabulary is frozen")
        if not 1 <= len(gram) <= 3:
            raise ValueError("grams must have 1 to 3 event keys")
        index = len(self._grams)
        self._index[gram] = index
        self._grams.append(gram)
        return index

    def lookup(self, gram: QGram) -> int | None:
        return self._index.get(gram)

    def gram(self, index: int) -> QGram:
        return self._grams[index]

    def freeze(self) -> "FeatureVocabulary":
        self.frozen = True
        return self

    def select(self, old_indices: Sequence[int]) -> "FeatureVocabulary":
        """New vocabulary whose index j is this vocabulary's old_indices[j]."""
        vocab = FeatureVocabulary(self._grams[i] for i in old_indices)
        vocab.frozen = self.frozen
        return vocab


# ---------------------------------------------------------------------------
# Sparse binary sample-by-feature matrix
# ---------------------------------------------------------------------------


class SparseBinaryMatrix:
    """M x N binary matrix stored as per-row sorted column index lists.

    Treated as immutable after construction; scipy CSR/CSC views are cached.
    """

    __slots__ = ("shape", "indptr", "indices", "_csr", "_csc")

    def __init__(
        self,
        shape: tuple[int, int],
        indptr: np.ndarray,
        indices: np.ndarray,
        validate: bool = True,
    ) -> None:
        self.shape = (int(shape[0]), int(shape[1]))
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int32)
        self._csr = None
        self._csc = None
        if validate:
            self._validate()

    def _validate(self) -> None:
        m, n = self.shape
        if m < 0 or n < 0:
            raise ValueError("negative shape")
        if len(self.indptr) != m + 1 or self.indptr[0] != 0:
            raise ValueError("bad indptr")
        if np.any(np.diff(self.indptr) < 0) or self.indptr[-1] != len(self.indices):
            raise ValueError("bad indptr")
        nnz = len(self.indices)
        if nnz:
            if self.indices.min() < 0 or self.indices.max() >= n:
                raise ValueError("column index out of range")
            if nnz > 1:
                gaps = np.diff(self.indices)
                boundary = np.zeros(nnz - 1, dtype=bool)
                starts = self.indptr[1:-1]
                starts = starts[(starts > 0) & (starts < nnz)]
                boundary[starts - 1] = True
                if np.any(gaps[~boundary] <= 0):
                    raise ValueError("row indices must be strictly increasing")

    @classmethod
    def from_rows(cls, rows: Sequence[Iterable[int]], n_cols: int) -> "SparseBinaryMatrix":
        parts = []
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        for i, row in enumerate(rows):
            arr = np.sort(np.asarray(list(row), dtype=np.int32))
            parts.append(arr)
            indptr[i + 1] = indptr[i] + len(arr)
        indices = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int32)
        return cls((len(rows), n_cols), indptr, indices)

    @classmethod
    def from_csr(cls, csr: sp.spmatrix) -> "SparseBinaryMatrix":
        csr = sp.csr_matrix(csr, copy=True)
        csr.sum_duplicates()
        csr.eliminate_zeros()
        csr.sort_indices()
        return cls(csr.shape, csr.indptr.astype(np.int64), csr.indices, validate=False)

    @property
    def n_rows(self) -> int:
        return self.shape[0]

    @property
    def n_cols(self) -> int:
        return self.shape[1]

    @property
    def nnz(self) -> int:
        return int(len(self.indices))

    @property
    def density(self) -> float:
        cells = self.shape[0] * self.shape[1]
        return self.nnz / cells if cells else 0.0

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def row_counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def column_counts(self, rows: np.ndarray | None = None) -> np.ndarray:
        """Per-column presence counts, optionally over a row subset; O(nnz)."""
        if rows is None:
            idx = self.indices
        else:
            sub = self.to_csr()[np.asarray(rows, dtype=np.int64)]
            idx = sub.indices
        return np.bincount(idx, minlength=self.n_cols).astype(np.int64)

    def to_csr(self) -> sp.csr_matrix:
        if self._csr is None:
            data = np.ones(self.nnz, dtype=np.float64)
            self._csr = sp.csr_matrix(
                (data, self.indices, self.indptr), shape=self.shape
            )
        return self._csr

    def to_csc(self) -> sp.csc_matrix:
        if self._csc is None:
            self._csc = self.to_csr().tocsc()
            self._csc.sort_indices()
        return self._csc

    def select_rows(self, rows: Sequence[int]) -> "SparseBinaryMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return SparseBinaryMatrix.from_csr(self.to_csr()[rows])

    def select_columns(self, cols: Sequence[int]) -> "SparseBinaryMatrix":
        """Column subset; new column j is old column cols[j]."""
        cols = np.asarray(cols, dtype=np.int64)
        return SparseBinaryMatrix.from_csr(self.to_csr()[:, cols])


def union_rows(
    a: SparseBinaryMatrix,
    rows_a: Sequence[int],
    b: SparseBinaryMatrix,
    rows_b: Sequence[int],
) -> SparseBinaryMatrix:
    """Elementwise OR of paired rows (row i = a[rows_a[i]] | b[rows_b[i]])."""
    if a.n_cols != b.n_cols:
        raise ValueError("column spaces differ")
    rows_a = np.asarray(rows_a, dtype=np.int64)
    rows_b = np.asarray(rows_b, dtype=np.int64)
    if len(rows_a) != len(rows_b):
        raise ValueError("row lists must pair up")
    merged = a.to_csr()[rows_a] + b.to_csr()[rows_b]
    return SparseBinaryMatrix.from_csr(merged)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class SampleMeta:
    sample_id: str
    environment: str
    family: str
    compile_year: int | None


@dataclass
class Dataset:
    matrix: SparseBinaryMatrix
    labels: np.ndarray
    meta: list[SampleMeta]

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if len(self.labels) != self.matrix.n_rows or len(self.meta) != self.matrix.n_rows:
            raise ValueError("labels/meta length must match matrix rows")
        if len(self.labels) and not np.all(np.isin(self.labels, (-1, 1))):
            raise ValueError("labels must be -1 or +1")

    @property
    def n_rows(self) -> int:
        return self.matrix.n_rows

    @property
    def n_features(self) -> int:
        return self.matrix.n_cols

    def subset(self, rows: Sequence[int]) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            matrix=self.matrix.select_rows(rows),
            labels=self.labels[rows],
            meta=[self.meta[i] for i in rows],
        )

    def rows_by_environment(self, environment: str) -> np.ndarray:
        return np.array(
            [i for i, m in enumerate(self.meta) if m.environment == environment],
            dtype=np.int64,
        )

    def malware_rows(self) -> np.ndarray:
        return np.where(self.labels == 1)[0].astype(np.int64)


def build_dataset(
    feature_sets: Sequence[Sequence[QGram]],
    labels: Sequence[int],
    meta: Sequence[SampleMeta],
    vocabulary: FeatureVocabulary | None = None,
    frozen: bool = False,
) -> tuple[Dataset, FeatureVocabulary]:
    """Binarize per-log gram collections into a dataset.

    In build mode new grams extend the vocabulary in first-seen order; in
    frozen mode unknown grams are dropped.  Row order follows input order.
    """
    if frozen and vocabulary is None:
        raise ValueError("frozen mode needs a vocabulary")
    if vocabulary is None:
        vocabulary = FeatureVocabulary()
    if not len(feature_sets) == len(labels) == len(meta):
        raise ValueError("feature_sets, labels and meta must align")
    rows: list[list[int]] = []
    for grams in feature_sets:
        row: list[int] = []
        for gram in grams:
            index = vocabulary.lookup(gram) if frozen else vocabulary.add(gram)
            if index is not None:
                row.append(index)
        rows.append(sorted(set(row)))
    matrix = SparseBinaryMatrix.from_rows(rows, len(vocabulary))
    return Dataset(matrix=matrix, labels=np.asarray(labels), meta=list(meta)), vocabulary


@dataclass(frozen=True, slots=True)
class UnderrunFilterResult:
    applied: bool
    mean: float
    std: float
    threshold: float
    removed_ids: tuple[str, ...]


def filter_underrun_logs(
    dataset: Dataset,
    environment: str = "sandbox",
    sigma: float = 2.0,
) -> tuple[Dataset, UnderrunFilterResult]:
    """Drop rows of one environment whose feature count under-runs the cohort.

    Threshold is mean - sigma*std (sample std) of per-row feature counts over
    that environment's rows; rows strictly below it are removed.  Other
    environments are never touched.  Fewer than two cohort rows: no-op.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    cohort = dataset.rows_by_environment(environment)
    if len(cohort) < 2:
        logger.warning(
            "under-run filter skipped: %d row(s) in environment %r",
            len(cohort),
            environment,
        )
        return dataset, UnderrunFilterResult(False, float("nan"), float("nan"), float("nan"), ())
    counts = dataset.matrix.row_counts()
    cohort_counts = counts[cohort].astype(np.float64)
    mean = float(cohort_counts.mean())
    std = float(cohort_counts.std(ddof=1))
    threshold = mean - sigma * std
    cohort_set = set(cohort.tolist())
    keep = [
        i
        for i in range(dataset.n_rows)
        if i not in cohort_set or counts[i] >= threshold
    ]
    removed = tuple(
        dataset.meta[i].sample_id for i in cohort if counts[i] < threshold
    )
    result = UnderrunFilterResult(True, mean, std, threshold, removed)
    if removed:
        logger.info(
            "under-run filter removed %d/%d %s rows (threshold %.2f)",
            len(removed),
            len(cohort),
            environment,
            threshold,
        )
    return dataset.subset(keep), result


# ---------------------------------------------------------------------------
# On-disk formats
# ---------------------------------------------------------------------------
#
# dataset:    header "M N density", then one row per sample:
#             label<TAB>source<TAB>family<TAB>compile_year<TAB>j1 j2 j3...
# vocabulary: index<TAB>q<TAB>action:target[|action:target...]
#
# Targets in vocabulary files escape backslash, pipe, tab and newline.

_GRAM_ESCAPES = {"\\": "\\\\", "|": "\\|", "\t": "\\t", "\n": "\\n"}
_GRAM_UNESCAPES = {"\\": "\\", "|": "|", "t": "\t", "n": "\n"}


def _escape_gram_text(text: str) -> str:
    for raw, escaped in _GRAM_ESCAPES.items():
        text = text.replace(raw, escaped)
    return text


def _split_unescaped(text: str, sep: str) -> list[str]:
    parts: list[str] = []
    buf: list[str] = []
    i = 0
    while i < len(text):
        char = text[i]
        if char == "\\" and i + 1 < len(text) and text[i + 1] in _GRAM_UNESCAPES:
            buf.append(_GRAM_UNESCAPES[text[i + 1]])
            i += 2
            continue
        if char == sep:
            parts.append("".join(buf))
            buf = []
            i += 1
            continue
        buf.append(char)
        i += 1
    parts.append("".join(buf))
    return parts


def format_gram(gram: QGram) -> str:
    return "|".join(f"{k.action.value}:{_escape_gram_text(k.target)}" for k in gram)


def parse_gram(text: str) -> QGram:
    keys = []
    for part in _split_unescaped(text, "|"):
        if ":" not in part:
            raise FeatureFormatError(f"bad gram key {part!r}")
        action_field, target = part.split(":", 1)
        try:
            action = ActionKind(action_field)
        except ValueError:
            raise FeatureFormatError(f"unknown action {action_field!r}") from None
        keys.append(EventKey(action, target))
    if not 1 <= len(keys) <= 3:
        raise FeatureFormatError("grams must have 1 to 3 event keys")
    return tuple(keys)


def write_vocabulary(vocabulary: FeatureVocabulary, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for index, gram in enumerate(vocabulary):
            fh.write(f"{index}\t{len(gram)}\t{format_gram(gram)}\n")


def read_vocabulary(path: str | Path) -> FeatureVocabulary:
    vocabulary = FeatureVocabulary()
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t", 2)
            if len(fields) != 3:
                raise FeatureFormatError(f"{path}: line {n}: expected 3 tab-separated fields")
            try:
                index = int(fields[0])
                q = int(fields[1])
                gram = parse_gram(fields[2])
            except (ValueError, FeatureFormatError) as exc:
                raise FeatureFormatError(f"{path}: line {n}: {exc}") from None
            if q != len(gram):
                raise FeatureFormatError(f"{path}: line {n}: q={q} but gram has {len(gram)} keys")
            if index != len(vocabulary):
                raise FeatureFormatError(f"{path}: line {n}: indices must be dense and ascending")
            vocabulary.add(gram)
    return vocabulary


def _meta_field(value: str, name: str) -> str:
    if "\t" in value or "\n" in value:
        raise FeatureFormatError(f"{name} may not contain tabs or newlines")
    return value


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    matrix = dataset.matrix
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{matrix.n_rows} {matrix.n_cols} {matrix.density!r}\n")
        for i in range(matrix.n_rows):
            meta = dataset.meta[i]
            year = "-" if meta.compile_year is None else str(meta.compile_year)
            indices = " ".join(str(j) for j in matrix.row(i))
            fh.write(
                f"{int(dataset.labels[i])}\t{_meta_field(meta.environment, 'source')}\t"
                f"{_meta_field(meta.family, 'family')}\t{year}\t{indices}\n"
            )


def read_dataset(path: str | Path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        fields = header.split(" ")
        if len(fields) != 3:
            raise FeatureFormatError(f"{path}: header must be 'M N density'")
        try:
            m, n, density = int(fields[0]), int(fields[1]), float(fields[2])
        except ValueError:
            raise FeatureFormatError(f"{path}: bad header {header!r}") from None
        labels: list[int] = []
        meta: list[SampleMeta] = []
        rows: list[np.ndarray] = []
        for line_no, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise FeatureFormatError(f"{path}: line {line_no}: expected 5 tab-separated fields")
            label_field, environment, family, year_field, index_field = parts
            try:
                label = int(label_field)
            except ValueError:
                raise FeatureFormatError(f"{path}: line {line_no}: bad label") from None
            if label not in (-1, 1):
                raise FeatureFormatError(f"{path}: line {line_no}: label must be -1 or 1")
            if year_field == "-":
                year: int | None = None
            else:
                try:
                    year = int(year_field)
                except ValueError:
                    raise FeatureFormatError(f"{path}: line {line_no}: bad compile year") from None
            try:
                indices = (
                    np.array([int(t) for t in index_field.split()], dtype=np.int32)
                    if index_field
                    else np.zeros(0, dtype=np.int32)
                )
            except ValueError:
                raise FeatureFormatError(f"{path}: line {line_no}: bad feature index") from None
            if np.any(np.diff(indices) <= 0):
                raise FeatureFormatError(
                    f"{path}: line {line_no}: indices must be strictly increasing"
                )
            if len(indices) and (indices[0] < 0 or int(indices[-1]) >= n):
                raise FeatureFormatError(f"{path}: line {line_no}: index out of range")
            labels.append(label)
            meta.append(
                SampleMeta(
                    sample_id=f"row{len(rows)}",
                    environment=environment,
                    family=family,
                    compile_year=year,
                )
            )
            rows.append(indices)
    if len(rows) != m:
        raise FeatureFormatError(f"{path}: expected {m} rows, found {len(rows)}")
    indptr = np.zeros(m + 1, dtype=np.int64)
    for i, row in enumerate(rows):
        indptr[i + 1] = indptr[i] + len(row)
    indices_flat = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int32)
    matrix = SparseBinaryMatrix((m, n), indptr, indices_flat)
    if abs(matrix.density - density) > 1e-9:
        raise FeatureFormatError(
            f"{path}: header density {density!r} disagrees with data ({matrix.density!r})"
        )
    return Dataset(matrix=matrix, labels=np.asarray(labels), meta=meta)
