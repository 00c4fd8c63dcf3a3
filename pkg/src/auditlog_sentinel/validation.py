"""Validation battery: split plans, ROC analysis, synthetic rows, scrubbing.

Three split schemes (random k-fold over sandbox rows, compile-year time gaps,
family-disjoint folds) are each evaluated on two test sides: the held-out
sandbox rows, and synthetic enterprise-malicious rows (enterprise OR sandbox
malware) against pure enterprise rows.  Enterprise rows always train.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .features import Dataset, SampleMeta, SparseBinaryMatrix, union_rows
from .labels import family_type
from .lr import (
    CrossValidationResult,
    FitConfig,
    LogisticModel,
    PathConfig,
    cv_select_lambda,
)

logger = logging.getLogger(__name__)

SIDE_SANDBOX = "sandbox"
SIDE_SYNTHETIC = "synthetic"
DEFAULT_FPR_TARGETS = (1e-2, 1e-3)
DEFAULT_EXCLUDED_FAMILIES = ("trojan.win32.generic",)


class PlanError(ValueError):
    """A split plan that cannot be built as requested."""


# ---------------------------------------------------------------------------
# Split plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanFold:
    name: str
    train: np.ndarray
    test: np.ndarray

    def __post_init__(self) -> None:
        train = np.sort(np.asarray(self.train, dtype=np.int64))
        test = np.sort(np.asarray(self.test, dtype=np.int64))
        object.__setattr__(self, "train", train)
        object.__setattr__(self, "test", test)
        if len(np.unique(train)) != len(train) or len(np.unique(test)) != len(test):
            raise PlanError(f"fold {self.name}: duplicate row ids")
        if np.intersect1d(train, test).size:
            raise PlanError(f"fold {self.name}: train and test overlap")


@dataclass(frozen=True)
class SplitPlan:
    scheme: str
    folds: tuple[PlanFold, ...]
    params: Mapping[str, object] = field(default_factory=dict)


def _stratified_ids(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Seeded stratified fold ids over an arbitrary label vector."""
    rng = np.random.default_rng(seed)
    ids = np.empty(len(labels), dtype=np.int64)
    counter = 0
    for cls in (-1, 1):
        rows = rng.permutation(np.where(labels == cls)[0])
        for row in rows:
            ids[row] = counter % folds
            counter += 1
    return ids


def random_kfold_plan(dataset: Dataset, k: int = 10, seed: int = 0) -> SplitPlan:
    """Partition sandbox rows into k folds; enterprise rows always train."""
    if k < 2:
        raise PlanError("k must be >= 2")
    sandbox = dataset.rows_by_environment("sandbox")
    others = np.setdiff1d(np.arange(dataset.n_rows, dtype=np.int64), sandbox)
    if len(sandbox) < k:
        raise PlanError(f"only {len(sandbox)} sandbox rows for {k} folds")
    sandbox_labels = dataset.labels[sandbox]
    for cls in (-1, 1):
        if int(np.sum(sandbox_labels == cls)) < k:
            raise PlanError(
                f"sandbox rows need >= {k} samples of each class for stratified folds"
            )
    ids = _stratified_ids(sandbox_labels, k, seed)
    folds = []
    for f in range(k):
        test = sandbox[ids == f]
        train = np.concatenate([sandbox[ids != f], others])
        folds.append(PlanFold(name=f"f{f}", train=train, test=test))
    return SplitPlan(
        scheme="random", folds=tuple(folds), params={"k": k, "seed": seed}
    )


def time_gap_plan(
    dataset: Dataset,
    split_year: int,
    gaps: Iterable[int] = (0, 1, 2),
    seed: int = 0,
    benign_test_fraction: float = 0.5,
) -> SplitPlan:
    """Train on malware compiled up to the split year; test on later malware.

    One classifier is shared by all gaps: the train side is fixed and only the
    malware test side varies (test(gap) = compile_year >= split_year + gap,
    minus train rows, so boundary-year samples stay in train).  Benign sandbox
    rows are split once by seed; enterprise rows and year-less benign rows
    train.  Malware without a sanitized compile year is omitted entirely.
    """
    gaps = sorted(set(int(g) for g in gaps))
    if not gaps or gaps[0] < 0:
        raise PlanError("gaps must be non-negative")
    if not 0.0 < benign_test_fraction < 1.0:
        raise PlanError("benign_test_fraction must be in (0, 1)")
    labels = dataset.labels
    years = np.array(
        [-1 if m.compile_year is None else m.compile_year for m in dataset.meta],
        dtype=np.int64,
    )
    is_malware = labels == 1
    dated = years >= 0
    train_mal = np.where(is_malware & dated & (years <= split_year))[0]
    benign_sandbox = np.array(
        [
            i
            for i, m in enumerate(dataset.meta)
            if labels[i] == -1 and m.environment == "sandbox"
        ],
        dtype=np.int64,
    )
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(benign_sandbox)
    n_test = int(round(len(shuffled) * benign_test_fraction))
    benign_test = shuffled[:n_test]
    benign_train = shuffled[n_test:]
    others = np.array(
        [
            i
            for i, m in enumerate(dataset.meta)
            if labels[i] == -1 and m.environment != "sandbox"
        ],
        dtype=np.int64,
    )
    train = np.concatenate([train_mal, benign_train, others]).astype(np.int64)
    if len(train) == 0:
        raise PlanError("time plan: empty train side")
    train_set = set(train.tolist())
    folds = []
    for gap in gaps:
        test_mal = np.where(
            is_malware & dated & (years >= split_year + gap) & (years > split_year)
        )[0]
        test_mal = np.array(
            [i for i in test_mal if i not in train_set], dtype=np.int64
        )
        test = np.concatenate([test_mal, benign_test]).astype(np.int64)
        if len(test) == 0:
            raise PlanError(f"time plan: empty test side for gap {gap}")
        folds.append(PlanFold(name=f"gap{gap}", train=train, test=test))
    return SplitPlan(
        scheme="time",
        folds=tuple(folds),
        params={
            "split_year": split_year,
            "gaps": tuple(gaps),
            "seed": seed,
            "benign_test_fraction": benign_test_fraction,
        },
    )


def family_plan(
    dataset: Dataset,
    k: int = 10,
    excluded: Iterable[str] = DEFAULT_EXCLUDED_FAMILIES,
    seed: int = 0,
    benign_in_train_only: bool = False,
) -> SplitPlan:
    """Family-disjoint folds: no malware family spans a train/test boundary.

    Excluded families are dropped from the universe entirely.  Families are
    greedily size-balanced across folds (seeded order for equal sizes).
    Benign sandbox rows have no meaningful family and are split by sample id
    round-robin, unless benign_in_train_only forces them into training.
    Enterprise rows always train.
    """
    if k < 2:
        raise PlanError("k must be >= 2")
    excluded_set = {e.strip().casefold() for e in excluded}
    universe = np.array(
        [i for i, m in enumerate(dataset.meta) if m.family not in excluded_set],
        dtype=np.int64,
    )
    labels = dataset.labels
    families: dict[str, list[int]] = {}
    benign_sandbox: list[int] = []
    always_train: list[int] = []
    for i in universe.tolist():
        meta = dataset.meta[i]
        if labels[i] == 1:
            families.setdefault(meta.family, []).append(i)
        elif meta.environment == "sandbox":
            benign_sandbox.append(i)
        else:
            always_train.append(i)
    if len(families) < k:
        raise PlanError(f"only {len(families)} families for {k} folds")
    rng = np.random.default_rng(seed)
    names = sorted(families)
    names = [names[i] for i in rng.permutation(len(names))]
    names.sort(key=lambda name: -len(families[name]))  # stable: seeded tie order
    fold_sizes = np.zeros(k, dtype=np.int64)
    fold_families: list[list[str]] = [[] for _ in range(k)]
    for name in names:
        f = int(np.argmin(fold_sizes))
        fold_families[f].append(name)
        fold_sizes[f] += len(families[name])
    benign_folds: list[list[int]] = [[] for _ in range(k)]
    if not benign_in_train_only:
        order = rng.permutation(np.asarray(benign_sandbox, dtype=np.int64))
        for pos, row in enumerate(order.tolist()):
            benign_folds[pos % k].append(row)
        benign_train_pool: list[int] = []
    else:
        benign_train_pool = list(benign_sandbox)
    folds = []
    universe_set = set(universe.tolist())
    for f in range(k):
        test_rows = sorted(
            [row for name in fold_families[f] for row in families[name]]
            + benign_folds[f]
        )
        train_rows = sorted(universe_set - set(test_rows))
        folds.append(
            PlanFold(
                name=f"f{f}",
                train=np.asarray(train_rows, dtype=np.int64),
                test=np.asarray(test_rows, dtype=np.int64),
            )
        )
    return SplitPlan(
        scheme="family",
        folds=tuple(folds),
        params={
            "k": k,
            "excluded": tuple(sorted(excluded_set)),
            "seed": seed,
            "benign_in_train_only": benign_in_train_only,
        },
    )


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # predict positive when score >= threshold


def roc_curve(scores: np.ndarray, labels: np.ndarray) -> RocCurve:
    """Threshold sweep over distinct scores, ties grouped, no interpolation.

    Points run from (0,0) at threshold +inf to (1,1) at the minimum score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    if not np.all(np.isin(labels, (-1, 1))):
        raise ValueError("labels must be -1 or +1")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == -1))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one sample of each class")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp_cum = np.cumsum(sorted_labels == 1)
    fp_cum = np.cumsum(sorted_labels == -1)
    group_end = np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    fpr = np.concatenate([[0.0], fp_cum[group_end] / n_neg])
    tpr = np.concatenate([[0.0], tp_cum[group_end] / n_pos])
    thresholds = np.concatenate([[np.inf], sorted_scores[group_end]])
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def auc(curve: RocCurve) -> float:
    return float(np.trapezoid(curve.tpr, curve.fpr))


def tpr_at_fpr(curve: RocCurve, max_fpr: float) -> float:
    """Best TPR among curve points with FPR <= max_fpr (step semantics)."""
    if max_fpr < 0:
        raise ValueError("max_fpr must be >= 0")
    mask = curve.fpr <= max_fpr
    return float(curve.tpr[mask].max())


def threshold_at_fpr(curve: RocCurve, max_fpr: float) -> float:
    """Operating threshold: the point achieving tpr_at_fpr (lowest FPR wins)."""
    mask = curve.fpr <= max_fpr
    best = curve.tpr[mask].max()
    idx = np.nonzero(mask & (curve.tpr == best))[0][0]
    return float(curve.thresholds[idx])


# ---------------------------------------------------------------------------
# Synthetic enterprise-malicious rows and environment scrubbing
# ---------------------------------------------------------------------------


def synthesize_enterprise_malicious(
    dataset: Dataset,
    malware_rows: Sequence[int],
    enterprise_rows: Sequence[int],
) -> tuple[Dataset, list[tuple[int, int]]]:
    """OR each malware row with an enterprise row (round-robin by row id).

    Row i of the result is malware_rows[i] | enterprise_rows[i mod E], labeled
    malicious, environment "synthetic"; family and year follow the malware row.
    """
    malware_rows = np.sort(np.asarray(malware_rows, dtype=np.int64))
    enterprise_rows = np.sort(np.asarray(enterprise_rows, dtype=np.int64))
    if len(malware_rows) == 0:
        raise ValueError("no malware rows to synthesize from")
    if len(enterprise_rows) == 0:
        raise ValueError("no enterprise rows to synthesize with")
    paired = enterprise_rows[np.arange(len(malware_rows)) % len(enterprise_rows)]
    matrix = union_rows(dataset.matrix, malware_rows, dataset.matrix, paired)
    meta = []
    pairs = []
    for mal, ent in zip(malware_rows.tolist(), paired.tolist()):
        mal_meta = dataset.meta[mal]
        ent_meta = dataset.meta[ent]
        meta.append(
            SampleMeta(
                sample_id=f"syn:{mal_meta.sample_id}+{ent_meta.sample_id}",
                environment="synthetic",
                family=mal_meta.family,
                compile_year=mal_meta.compile_year,
            )
        )
        pairs.append((mal, ent))
    labels = np.ones(len(malware_rows), dtype=np.int8)
    return Dataset(matrix=matrix, labels=labels, meta=meta), pairs


def scrub_environment_features(
    model: LogisticModel,
    matrix: SparseBinaryMatrix,
    benign_sandbox_rows: Sequence[int],
    prevalence_threshold: float = 0.01,
) -> tuple[LogisticModel, np.ndarray]:
    """Zero positive weights on features prevalent in benign sandbox rows.

    A feature is scrubbed when its prevalence over the given benign sandbox
    rows strictly exceeds the threshold and its model weight is positive.
    The intercept is untouched; scrubbing twice equals scrubbing once.
    """
    rows = np.asarray(benign_sandbox_rows, dtype=np.int64)
    if len(rows) == 0:
        raise ValueError("need at least one benign sandbox row")
    if not 0.0 <= prevalence_threshold < 1.0:
        raise ValueError("prevalence_threshold must be in [0, 1)")
    counts = matrix.column_counts(rows)
    prevalence = counts / len(rows)
    removed = np.where((prevalence > prevalence_threshold) & (model.weights > 0))[0]
    weights = model.weights.copy()
    weights[removed] = 0.0
    return model.with_weights(weights), removed


# ---------------------------------------------------------------------------
# Feature importance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImportanceEntry:
    feature_index: int
    weight: float
    malware_count: int
    importance: float


@dataclass(frozen=True)
class ImportanceTable:
    entries: tuple[ImportanceEntry, ...]
    positive_weight_sum: float
    negative_weight_sum: float


def feature_importance(
    model: LogisticModel,
    matrix: SparseBinaryMatrix,
    malware_rows: Sequence[int],
) -> ImportanceTable:
    """Rank model features by occurrences-in-malware times |weight|."""
    rows = np.asarray(malware_rows, dtype=np.int64)
    counts = matrix.column_counts(rows if len(rows) else None)
    if len(rows) == 0:
        counts = np.zeros(matrix.n_cols, dtype=np.int64)
    nz = model.nonzeros()
    importance = counts[nz] * np.abs(model.weights[nz])
    order = np.lexsort((nz, -importance))
    entries = tuple(
        ImportanceEntry(
            feature_index=int(nz[i]),
            weight=float(model.weights[nz[i]]),
            malware_count=int(counts[nz[i]]),
            importance=float(importance[i]),
        )
        for i in order
    )
    weights = model.weights
    return ImportanceTable(
        entries=entries,
        positive_weight_sum=float(weights[weights > 0].sum()),
        negative_weight_sum=float(weights[weights < 0].sum()),
    )


# ---------------------------------------------------------------------------
# Evaluation harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvaluationConfig:
    cv_folds: int = 20
    path: PathConfig = PathConfig()
    fit: FitConfig = FitConfig()
    seed: int = 0
    threads: int = 1
    scrub_synthetic: bool = True
    scrub_sandbox: bool = False
    scrub_prevalence: float = 0.01
    scrub_scope: str = "train"  # "train" or "all"
    fpr_targets: tuple[float, ...] = DEFAULT_FPR_TARGETS
    compute_importance: bool = True


@dataclass(frozen=True)
class ScoreRow:
    scheme: str  # scheme token with side suffix, e.g. "random-sandbox"
    fold: str
    sample_id: str
    label: int
    score: float
    family_type: str  # "" for negatives


@dataclass(frozen=True)
class FoldEvaluation:
    fold: str
    curves: Mapping[str, RocCurve]
    tprs: Mapping[str, Mapping[float, float]]
    scrubbed: Mapping[str, tuple[int, ...]]
    chosen_lambda: float


@dataclass(frozen=True)
class TypeBreakdownRow:
    scheme: str
    type: str
    count: int
    tprs: Mapping[float, float]


@dataclass
class ValidationReport:
    scheme: str
    plan_params: Mapping[str, object]
    folds: list[FoldEvaluation]
    pooled_curves: dict[str, RocCurve]
    pooled_tprs: dict[str, dict[float, float]]
    scores: list[ScoreRow]
    per_type: list[TypeBreakdownRow]
    importance: ImportanceTable | None


def _tpr_map(curve: RocCurve, targets: Sequence[float]) -> dict[float, float]:
    return {t: tpr_at_fpr(curve, t) for t in targets}


def run_validation(
    dataset: Dataset,
    plan: SplitPlan,
    config: EvaluationConfig = EvaluationConfig(),
    model: LogisticModel | None = None,
) -> ValidationReport:
    """Train per fold (unless a fixed model is given) and score both sides."""
    enterprise_rows = dataset.rows_by_environment("enterprise")
    benign_sandbox_all = np.array(
        [
            i
            for i, m in enumerate(dataset.meta)
            if dataset.labels[i] == -1 and m.environment == "sandbox"
        ],
        dtype=np.int64,
    )
    folds: list[FoldEvaluation] = []
    score_rows: list[ScoreRow] = []
    pooled: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    for fold_ordinal, fold in enumerate(plan.folds):
        if model is not None:
            fold_model = model
        else:
            train = dataset.subset(fold.train)
            cv = cv_select_lambda(
                train.matrix,
                train.labels,
                folds=config.cv_folds,
                path=config.path,
                fit=config.fit,
                seed=config.seed + fold_ordinal,
                threads=config.threads,
            )
            fold_model = cv.model
        if config.scrub_scope == "train":
            scrub_rows = np.intersect1d(benign_sandbox_all, fold.train)
        elif config.scrub_scope == "all":
            scrub_rows = benign_sandbox_all
        else:
            raise ValueError(f"unknown scrub_scope {config.scrub_scope!r}")
        scrubbed_model = None
        removed: np.ndarray = np.zeros(0, dtype=np.int64)
        if (config.scrub_sandbox or config.scrub_synthetic) and len(scrub_rows):
            scrubbed_model, removed = scrub_environment_features(
                fold_model, dataset.matrix, scrub_rows, config.scrub_prevalence
            )
        curves: dict[str, RocCurve] = {}
        tprs: dict[str, dict[float, float]] = {}
        scrub_log: dict[str, tuple[int, ...]] = {}

        def record_side(
            side: str,
            scores: np.ndarray,
            side_labels: np.ndarray,
            sample_ids: list[str],
            families: list[str],
            side_scrubbed: bool,
        ) -> None:
            token = f"{plan.scheme}-{side}"
            curve = roc_curve(scores, side_labels)
            curves[side] = curve
            tprs[side] = _tpr_map(curve, config.fpr_targets)
            scrub_log[side] = tuple(int(j) for j in removed) if side_scrubbed else ()
            pooled.setdefault(side, []).append((scores, side_labels))
            for sid, label, score, fam in zip(
                sample_ids, side_labels.tolist(), scores.tolist(), families
            ):
                score_rows.append(
                    ScoreRow(
                        scheme=token,
                        fold=fold.name,
                        sample_id=sid,
                        label=int(label),
                        score=float(score),
                        family_type=fam,
                    )
                )

        # sandbox side: the held-out rows as they are
        sandbox_model = (
            scrubbed_model if (config.scrub_sandbox and scrubbed_model) else fold_model
        )
        test_matrix = dataset.matrix.select_rows(fold.test)
        test_scores = sandbox_model.predict_proba(test_matrix)
        test_labels = dataset.labels[fold.test].astype(np.int64)
        record_side(
            SIDE_SANDBOX,
            test_scores,
            test_labels,
            [dataset.meta[i].sample_id for i in fold.test],
            [
                family_type(dataset.meta[i].family) if dataset.labels[i] == 1 else ""
                for i in fold.test
            ],
            config.scrub_sandbox and scrubbed_model is not None,
        )

        # synthetic side: OR-composed positives vs pure enterprise negatives
        test_malware = fold.test[dataset.labels[fold.test] == 1]
        if len(enterprise_rows) and len(test_malware):
            synthetic_model = (
                scrubbed_model
                if (config.scrub_synthetic and scrubbed_model)
                else fold_model
            )
            syn, _ = synthesize_enterprise_malicious(
                dataset, test_malware, enterprise_rows
            )
            syn_scores = synthetic_model.predict_proba(syn.matrix)
            ent_matrix = dataset.matrix.select_rows(enterprise_rows)
            ent_scores = synthetic_model.predict_proba(ent_matrix)
            side_scores = np.concatenate([syn_scores, ent_scores])
            side_labels = np.concatenate(
                [
                    np.ones(len(syn_scores), dtype=np.int64),
                    -np.ones(len(ent_scores), dtype=np.int64),
                ]
            )
            sample_ids = [m.sample_id for m in syn.meta] + [
                dataset.meta[i].sample_id for i in enterprise_rows
            ]
            families = [family_type(m.family) for m in syn.meta] + [
                "" for _ in enterprise_rows
            ]
            record_side(
                SIDE_SYNTHETIC,
                side_scores,
                side_labels,
                sample_ids,
                families,
                config.scrub_synthetic and scrubbed_model is not None,
            )
        elif not len(enterprise_rows):
            logger.info("no enterprise rows; synthetic side skipped")

        folds.append(
            FoldEvaluation(
                fold=fold.name,
                curves=curves,
                tprs=tprs,
                scrubbed=scrub_log,
                chosen_lambda=float(fold_model.lam),
            )
        )

    pooled_curves: dict[str, RocCurve] = {}
    pooled_tprs: dict[str, dict[float, float]] = {}
    for side, chunks in pooled.items():
        scores = np.concatenate([c[0] for c in chunks])
        labels_side = np.concatenate([c[1] for c in chunks])
        curve = roc_curve(scores, labels_side)
        pooled_curves[side] = curve
        pooled_tprs[side] = _tpr_map(curve, config.fpr_targets)

    per_type = _type_breakdown(plan.scheme, score_rows, pooled_curves, config.fpr_targets)

    importance: ImportanceTable | None = None
    if config.compute_importance:
        if model is not None:
            importance_model = model
        else:
            importance_model = cv_select_lambda(
                dataset.matrix,
                dataset.labels,
                folds=config.cv_folds,
                path=config.path,
                fit=config.fit,
                seed=config.seed,
                threads=config.threads,
            ).model
        importance = feature_importance(
            importance_model, dataset.matrix, dataset.malware_rows()
        )

    return ValidationReport(
        scheme=plan.scheme,
        plan_params=dict(plan.params),
        folds=folds,
        pooled_curves=pooled_curves,
        pooled_tprs=pooled_tprs,
        scores=score_rows,
        per_type=per_type,
        importance=importance,
    )


def _type_breakdown(
    scheme: str,
    score_rows: Sequence[ScoreRow],
    pooled_curves: Mapping[str, RocCurve],
    targets: Sequence[float],
) -> list[TypeBreakdownRow]:
    """Per-malware-type TPR at the pooled operating thresholds of each side."""
    rows: list[TypeBreakdownRow] = []
    for side, curve in sorted(pooled_curves.items()):
        token = f"{scheme}-{side}"
        thresholds = {t: threshold_at_fpr(curve, t) for t in targets}
        by_type: dict[str, list[float]] = {}
        for row in score_rows:
            if row.scheme == token and row.label == 1:
                by_type.setdefault(row.family_type, []).append(row.score)
        for type_name in sorted(by_type):
            scores = np.asarray(by_type[type_name])
            rows.append(
                TypeBreakdownRow(
                    scheme=token,
                    type=type_name,
                    count=len(scores),
                    tprs={
                        t: float(np.mean(scores >= thresholds[t])) for t in targets
                    },
                )
            )
    return rows
