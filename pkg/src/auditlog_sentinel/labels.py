"""Sample labeling: detection scores, source overrides, families, compile years.

Each sandbox sample carries a detection score s in [0, 1] (fraction of engines
that flagged it).  Source collections with known ground truth override the
score entirely.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

UNKNOWN_FAMILY = "UNKNOWN"


class LabelError(ValueError):
    """A malformed score record or an unlabelable sample."""


class SourceTag(enum.Enum):
    MAL2M = "MAL2M"
    MAL3P = "MAL3P"
    MALAPT = "MALAPT"
    UVPN = "UVPN"
    OS = "OS"
    ENTERPRISE = "ENTERPRISE"


class Label(enum.IntEnum):
    MALICIOUS = 1
    BENIGN = -1
    DROP = 0


# Collections whose provenance decides the label regardless of score.
MALICIOUS_OVERRIDES = frozenset({SourceTag.MAL3P, SourceTag.MALAPT})
BENIGN_OVERRIDES = frozenset({SourceTag.OS, SourceTag.ENTERPRISE})


@dataclass(frozen=True, slots=True)
class ScoreRecord:
    sample_id: str
    score: float
    family_label: str = ""
    compile_year: int | None = None
    verdicts: Mapping[str, bool] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.sample_id:
            raise LabelError("sample_id must be non-empty")
        if self.verdicts:
            detections = sum(1 for v in self.verdicts.values() if v)
            expected = detections / len(self.verdicts)
            if abs(self.score - expected) > 1e-9:
                raise LabelError(
                    f"score {self.score} disagrees with verdicts "
                    f"({detections}/{len(self.verdicts)})"
                )


def assign_label(
    record: ScoreRecord | None,
    source: SourceTag,
    threshold_hi: float = 0.3,
) -> Label:
    """Label one sample: source override first, then score thresholds.

    Scores of exactly 0 are benign; scores >= threshold_hi are malicious;
    the ambiguous band in between is dropped.  A missing record is only
    acceptable for override sources; otherwise the sample is dropped.
    """
    if not 0.0 < threshold_hi <= 1.0:
        raise ValueError("threshold_hi must be in (0, 1]")
    if source in MALICIOUS_OVERRIDES:
        return Label.MALICIOUS
    if source in BENIGN_OVERRIDES:
        return Label.BENIGN
    if record is None:
        return Label.DROP
    s = record.score
    if not 0.0 <= s <= 1.0:
        raise LabelError(f"score {s} outside [0, 1] for sample {record.sample_id!r}")
    if s == 0.0:
        return Label.BENIGN
    if s >= threshold_hi:
        return Label.MALICIOUS
    return Label.DROP


def extract_family(family_label: str) -> str:
    """Normalize a vendor family label into a family key.

    Case-folded; variant suffixes beyond the type.platform.family prefix are
    dropped (e.g. ``Trojan.Win32.Generic.abc`` -> ``trojan.win32.generic``).
    Empty labels map to ``UNKNOWN``.
    """
    key = family_label.strip().casefold()
    if not key:
        return UNKNOWN_FAMILY
    parts = key.split(".")
    return ".".join(parts[:3])


def family_type(family_key: str) -> str:
    """The leading component of a family key (e.g. ``trojan``)."""
    return family_key.split(".", 1)[0]


def sanitize_compile_year(
    year: int | None,
    min_year: int = 1995,
    max_year: int = 2014,
) -> int | None:
    """Pass plausible compile years; None marks the sample year-excluded."""
    if min_year > max_year:
        raise ValueError("min_year must be <= max_year")
    if year is None:
        return None
    if min_year <= year <= max_year:
        return year
    return None


# ---------------------------------------------------------------------------
# Score CSV: sample_id,s,family_label,compile_year[,<engine>...]
# ---------------------------------------------------------------------------

SCORE_COLUMNS = ("sample_id", "s", "family_label", "compile_year")
_TRUE_VERDICTS = {"1", "true"}
_FALSE_VERDICTS = {"0", "false"}


def read_score_csv(path: str | Path) -> dict[str, ScoreRecord]:
    """Load score records keyed by sample id.

    Columns past the fixed four are engine names; cells hold 0/1 verdicts
    (empty cell = engine did not scan).  An empty s column is derived from
    the verdicts when present.
    """
    records: dict[str, ScoreRecord] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LabelError(f"{path}: empty score file") from None
        if tuple(header[:4]) != SCORE_COLUMNS:
            raise LabelError(
                f"{path}: header must start with {','.join(SCORE_COLUMNS)}"
            )
        engines = header[4:]
        if len(set(engines)) != len(engines):
            raise LabelError(f"{path}: duplicate engine columns")
        for n, row in enumerate(reader, start=2):
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise LabelError(f"{path}: line {n}: expected {len(header)} columns")
            sample_id = row[0]
            if sample_id in records:
                raise LabelError(f"{path}: line {n}: duplicate sample id {sample_id!r}")
            verdicts: dict[str, bool] = {}
            for engine, cell in zip(engines, row[4:]):
                cell = cell.strip().lower()
                if not cell:
                    continue
                if cell in _TRUE_VERDICTS:
                    verdicts[engine] = True
                elif cell in _FALSE_VERDICTS:
                    verdicts[engine] = False
                else:
                    raise LabelError(
                        f"{path}: line {n}: bad verdict {cell!r} for engine {engine}"
                    )
            s_field = row[1].strip()
            if s_field:
                try:
                    score = float(s_field)
                except ValueError:
                    raise LabelError(f"{path}: line {n}: bad score {s_field!r}") from None
            elif verdicts:
                score = sum(1 for v in verdicts.values() if v) / len(verdicts)
            else:
                raise LabelError(f"{path}: line {n}: missing score")
            year_field = row[3].strip()
            if not year_field or year_field == "-":
                year: int | None = None
            else:
                try:
                    year = int(year_field)
                except ValueError:
                    raise LabelError(f"{path}: line {n}: bad compile year {year_field!r}") from None
            try:
                records[sample_id] = ScoreRecord(
                    sample_id=sample_id,
                    score=score,
                    family_label=row[2],
                    compile_year=year,
                    verdicts=verdicts,
                )
            except LabelError as exc:
                raise LabelError(f"{path}: line {n}: {exc}") from None
    return records


def write_score_csv(records: Iterable[ScoreRecord], path: str | Path) -> None:
    records = list(records)
    engines = sorted({e for r in records for e in r.verdicts})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(SCORE_COLUMNS) + engines)
        for r in records:
            year = "" if r.compile_year is None else str(r.compile_year)
            cells = [r.sample_id, repr(r.score), r.family_label, year]
            for engine in engines:
                if engine in r.verdicts:
                    cells.append("1" if r.verdicts[engine] else "0")
                else:
                    cells.append("")
            writer.writerow(cells)


def filter_by_engine(
    records: Iterable[ScoreRecord], engine: str, detected: bool
) -> set[str]:
    """Sample ids whose verdict for the named engine matches ``detected``."""
    return {
        r.sample_id
        for r in records
        if engine in r.verdicts and r.verdicts[engine] is detected
    }
