"""Feature screening: uncentered label correlation, top-K, count prefilter."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

from .features import (
    Dataset,
    FeatureFormatError,
    FeatureVocabulary,
    QGram,
    SparseBinaryMatrix,
    qgram_bytes,
)

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 50_000


def uncentered_correlation(matrix: SparseBinaryMatrix, labels: np.ndarray) -> np.ndarray:
    """Per-column uncentered correlation with the +-1 label vector.

    c_j = (a_j . y) / (||a_j|| * ||y||), with 0 for all-zero columns.
    Computed from stored nonzeros only (O(nnz)).
    """
    if matrix.n_rows == 0:
        raise ValueError("matrix has no rows")
    labels = np.asarray(labels, dtype=np.float64)
    if len(labels) != matrix.n_rows:
        raise ValueError("labels length must match matrix rows")
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    n = matrix.n_cols
    row_lengths = np.diff(matrix.indptr)
    per_entry_labels = np.repeat(labels, row_lengths)
    numerator = np.bincount(matrix.indices, weights=per_entry_labels, minlength=n)
    counts = np.bincount(matrix.indices, minlength=n).astype(np.float64)
    y_norm = np.sqrt(float(matrix.n_rows))
    scores = np.zeros(n, dtype=np.float64)
    present = counts > 0
    scores[present] = numerator[present] / (np.sqrt(counts[present]) * y_norm)
    return scores


@dataclass(frozen=True)
class SelectionResult:
    """Top-K screen output: old column ids in new-index order, plus scores."""

    selected: np.ndarray  # old column index for each new index
    scores: np.ndarray  # correlation of each selected column
    n_original: int

    def old_to_new(self) -> dict[int, int]:
        return {int(old): new for new, old in enumerate(self.selected)}


def top_k_select(scores: np.ndarray, k: int) -> SelectionResult:
    """Keep the K columns with largest |score|; ties break to smaller index.

    New indices follow rank order (new 0 = strongest), except that k >= N is
    an identity selection preserving original column order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if k <= 0:
        raise ValueError("k must be positive")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n = len(scores)
    if k >= n:
        order = np.arange(n, dtype=np.int64)
    else:
        order = np.lexsort((np.arange(n), -np.abs(scores)))[:k].astype(np.int64)
    return SelectionResult(selected=order, scores=scores[order], n_original=n)


def apply_selection(
    dataset: Dataset,
    vocabulary: FeatureVocabulary | None,
    result: SelectionResult,
) -> tuple[Dataset, FeatureVocabulary | None]:
    """Project a dataset (and its vocabulary) onto the selected columns."""
    if result.n_original != dataset.matrix.n_cols:
        raise ValueError("selection was computed for a different column space")
    reduced = Dataset(
        matrix=dataset.matrix.select_columns(result.selected),
        labels=dataset.labels,
        meta=dataset.meta,
    )
    reduced_vocab = vocabulary.select(result.selected) if vocabulary is not None else None
    return reduced, reduced_vocab


def write_selection(result: SelectionResult, path: str | Path) -> None:
    """Selected-features file: new_index<TAB>old_index<TAB>score."""
    with open(path, "w", encoding="utf-8") as fh:
        for new_index, (old_index, score) in enumerate(zip(result.selected, result.scores)):
            fh.write(f"{new_index}\t{int(old_index)}\t{float(score)!r}\n")


def read_selection(path: str | Path, n_original: int) -> SelectionResult:
    selected: list[int] = []
    scores: list[float] = []
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FeatureFormatError(f"{path}: line {n}: expected 3 fields")
            try:
                new_index, old_index, score = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise FeatureFormatError(f"{path}: line {n}: bad field") from None
            if new_index != len(selected):
                raise FeatureFormatError(f"{path}: line {n}: new indices must be dense")
            if not 0 <= old_index < n_original:
                raise FeatureFormatError(f"{path}: line {n}: old index out of range")
            selected.append(old_index)
            scores.append(score)
    return SelectionResult(
        selected=np.asarray(selected, dtype=np.int64),
        scores=np.asarray(scores, dtype=np.float64),
        n_original=n_original,
    )


# ---------------------------------------------------------------------------
# Occurrence-count prefilter (optional, off by default)
# ---------------------------------------------------------------------------


def _hash_pair(data: bytes) -> tuple[int, int]:
    digest = hashlib.blake2b(data, digest_size=16).digest()
    return (
        int.from_bytes(digest[:8], "little"),
        int.from_bytes(digest[8:], "little"),
    )


class CountMinSketch:
    """Fixed-memory counter that may overcount but never undercounts."""

    def __init__(self, width: int = 1 << 20, depth: int = 4) -> None:
        if width < 1 or depth < 1:
            raise ValueError("width and depth must be >= 1")
        self.width = width
        self.depth = depth
        self.table = np.zeros((depth, width), dtype=np.int64)

    def _slots(self, data: bytes) -> list[int]:
        h1, h2 = _hash_pair(data)
        return [(h1 + d * h2) % self.width for d in range(self.depth)]

    def add(self, data: bytes, count: int = 1) -> None:
        for d, slot in enumerate(self._slots(data)):
            self.table[d, slot] += count

    def estimate(self, data: bytes) -> int:
        return int(min(self.table[d, slot] for d, slot in enumerate(self._slots(data))))


class ExactCounter:
    """Dict-backed counter with the same interface as the sketch."""

    def __init__(self) -> None:
        self.counts: dict[bytes, int] = {}

    def add(self, data: bytes, count: int = 1) -> None:
        self.counts[data] = self.counts.get(data, 0) + count

    def estimate(self, data: bytes) -> int:
        return self.counts.get(data, 0)


@dataclass(frozen=True)
class CounterConfig:
    mode: str = "sketch"  # "sketch" or "exact"
    width: int = 1 << 20
    depth: int = 4

    def make(self):
        if self.mode == "exact":
            return ExactCounter()
        if self.mode == "sketch":
            return CountMinSketch(self.width, self.depth)
        raise ValueError(f"unknown counter mode {self.mode!r}")


def prefilter_by_count(
    gram_stream: Sequence[QGram] | Iterable[QGram],
    threshold: int = 2,
    counter_config: CounterConfig | None = None,
) -> set[QGram]:
    """Grams whose (possibly overcounted) occurrence count reaches threshold.

    Two passes: count, then approve.  The approved set is always a superset of
    the grams whose true count reaches the threshold; in exact mode it is that
    set precisely.  The stream must be re-iterable; callers stream per-log
    deduplicated grams so counts mean "number of logs containing the gram".
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    if iter(gram_stream) is gram_stream:
        gram_stream = list(gram_stream)
    counter = (counter_config or CounterConfig()).make()
    for gram in gram_stream:
        counter.add(qgram_bytes(gram))
    approved: set[QGram] = set()
    for gram in gram_stream:
        if gram not in approved and counter.estimate(qgram_bytes(gram)) >= threshold:
            approved.add(gram)
    return approved
