"""L1-regularized logistic regression along a warm-started lambda path.

Minimizes  sum_i log(1 + exp(-y_i (a_i . x + b))) + lambda * ||x||_1  with an
unpenalized intercept, by cyclic coordinate descent with soft thresholding on
a per-coordinate quadratic majorization (logistic curvature bounded by 1/4),
so every coordinate step decreases the true objective.  Fits report a
first-order optimality residual: |grad_j| <= lambda + tol on zero weights,
subgradient residual <= tol on active weights, |d/db| <= tol.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.special import expit

from .features import SparseBinaryMatrix

logger = logging.getLogger(__name__)


class ModelFormatError(ValueError):
    """A malformed model file."""


# ---------------------------------------------------------------------------
# Loss, gradient, prediction (vectorized; also the reference for the kernel)
# ---------------------------------------------------------------------------

MatrixLike = "SparseBinaryMatrix | sp.spmatrix | np.ndarray"


def _as_csr(matrix) -> sp.csr_matrix:
    if isinstance(matrix, SparseBinaryMatrix):
        return matrix.to_csr()
    if sp.issparse(matrix):
        return sp.csr_matrix(matrix, dtype=np.float64)
    return sp.csr_matrix(np.asarray(matrix, dtype=np.float64))


def _as_csc(matrix) -> sp.csc_matrix:
    if isinstance(matrix, SparseBinaryMatrix):
        return matrix.to_csc()
    if sp.issparse(matrix):
        return sp.csc_matrix(matrix, dtype=np.float64)
    return sp.csc_matrix(np.asarray(matrix, dtype=np.float64))


def _check_labels(labels: np.ndarray, m: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (m,):
        raise ValueError("labels length must match matrix rows")
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    if not (np.any(labels == 1.0) and np.any(labels == -1.0)):
        raise ValueError("need at least one sample of each class")
    return labels


def smooth_loss(matrix, labels, weights: np.ndarray, intercept: float) -> float:
    """Unpenalized logistic loss (sum over samples)."""
    csr = _as_csr(matrix)
    margins = np.asarray(labels, dtype=np.float64) * (csr @ weights + intercept)
    return float(np.logaddexp(0.0, -margins).sum())


def objective(matrix, labels, weights: np.ndarray, intercept: float, lam: float) -> float:
    """Penalized objective: logistic loss plus lambda * ||weights||_1."""
    return smooth_loss(matrix, labels, weights, intercept) + lam * float(
        np.abs(weights).sum()
    )


def smooth_gradient(
    matrix, labels, weights: np.ndarray, intercept: float
) -> tuple[np.ndarray, float]:
    """Gradient of the unpenalized loss w.r.t. (weights, intercept)."""
    csr = _as_csr(matrix)
    labels = np.asarray(labels, dtype=np.float64)
    z = csr @ weights + intercept
    g = expit(z) - (labels + 1.0) / 2.0
    return csr.T @ g, float(g.sum())


def mean_validation_loss(matrix, labels, weights: np.ndarray, intercept: float) -> float:
    """Per-sample unpenalized logistic loss (CV scoring)."""
    csr = _as_csr(matrix)
    labels = np.asarray(labels, dtype=np.float64)
    margins = labels * (csr @ weights + intercept)
    return float(np.logaddexp(0.0, -margins).mean())


# ---------------------------------------------------------------------------
# Model and path records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    intercept: float
    lam: float
    converged: bool = True
    n_passes: int = 0
    kkt_residual: float = float("nan")
    objective_value: float = float("nan")

    @property
    def n_features(self) -> int:
        return len(self.weights)

    def nonzeros(self) -> np.ndarray:
        return np.nonzero(self.weights)[0]

    def predict_margin(self, matrix) -> np.ndarray:
        return _as_csr(matrix) @ self.weights + self.intercept

    def predict_proba(self, matrix) -> np.ndarray:
        return expit(self.predict_margin(matrix))

    def with_weights(self, weights: np.ndarray) -> "LogisticModel":
        return replace(self, weights=weights)


@dataclass(frozen=True)
class RegularizationPath:
    lambdas: np.ndarray  # descending, lambdas[0] deactivates every feature
    models: tuple[LogisticModel, ...]


@dataclass(frozen=True)
class PathConfig:
    num_lambdas: int = 100
    lambda_min_ratio: float = 1e-4

    def __post_init__(self) -> None:
        if self.num_lambdas < 1:
            raise ValueError("num_lambdas must be >= 1")
        if not 0.0 < self.lambda_min_ratio <= 1.0:
            raise ValueError("lambda_min_ratio must be in (0, 1]")


@dataclass(frozen=True)
class FitConfig:
    update_tol: float = 1e-7  # stop when no coordinate moves more than this
    kkt_tol: float = 1e-4  # verified first-order optimality residual
    max_passes: int = 100_000

    def __post_init__(self) -> None:
        if self.update_tol <= 0 or self.kkt_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")


def lambda_max(matrix, labels) -> tuple[float, float]:
    """Smallest lambda with an all-zero weight optimum, and its intercept.

    At x = 0 the loss is minimized in b by b0 = log(n+/n-); the deactivation
    point is the max absolute coordinate of the smooth gradient there.
    """
    csr = _as_csr(matrix)
    labels = _check_labels(labels, csr.shape[0])
    m = csr.shape[0]
    n_pos = int(np.sum(labels == 1.0))
    b0 = math.log(n_pos / (m - n_pos))
    g0 = n_pos / m - (labels + 1.0) / 2.0
    grad = csr.T @ g0
    lam = float(np.max(np.abs(grad))) if csr.shape[1] else 0.0
    return lam, b0


def make_lambda_grid(lam_max: float, config: PathConfig = PathConfig()) -> np.ndarray:
    """Geometric grid from lam_max down to lam_max * lambda_min_ratio."""
    if lam_max < 0:
        raise ValueError("lam_max must be >= 0")
    if lam_max == 0.0:
        return np.zeros(1, dtype=np.float64)
    if config.num_lambdas == 1:
        return np.array([lam_max], dtype=np.float64)
    return np.geomspace(lam_max, lam_max * config.lambda_min_ratio, config.num_lambdas)


# ---------------------------------------------------------------------------
# Coordinate-descent kernel (CSC arrays; compiled, GIL-free)
# ---------------------------------------------------------------------------


@njit(inline="always")
def _sigmoid(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True, nogil=True)
def _sweep(indptr, rowidx, data, y01, lcol, lam, x, z, g, b_arr, full):
    """One coordinate pass (all or active-only) plus an intercept step.

    Each step minimizes the penalized quadratic majorizer with curvature
    lcol[j] = 0.25 * ||a_j||^2, which can only decrease the true objective.
    Returns the largest coordinate move.
    """
    n = lcol.shape[0]
    m = y01.shape[0]
    maxd = 0.0
    for j in range(n):
        xj = x[j]
        if not full and xj == 0.0:
            continue
        lj = lcol[j]
        if lj <= 0.0:
            continue
        grad = 0.0
        for k in range(indptr[j], indptr[j + 1]):
            grad += data[k] * g[rowidx[k]]
        u = lj * xj - grad
        if u > lam:
            xnew = (u - lam) / lj
        elif u < -lam:
            xnew = (u + lam) / lj
        else:
            xnew = 0.0
        d = xnew - xj
        if d != 0.0:
            x[j] = xnew
            for k in range(indptr[j], indptr[j + 1]):
                i = rowidx[k]
                zi = z[i] + data[k] * d
                z[i] = zi
                g[i] = _sigmoid(zi) - y01[i]
            if abs(d) > maxd:
                maxd = abs(d)
    gsum = 0.0
    for i in range(m):
        gsum += g[i]
    db = -gsum / (0.25 * m)
    if db != 0.0:
        b_arr[0] += db
        for i in range(m):
            zi = z[i] + db
            z[i] = zi
            g[i] = _sigmoid(zi) - y01[i]
        if abs(db) > maxd:
            maxd = abs(db)
    return maxd


@njit(cache=True, nogil=True)
def _kkt_residual(indptr, rowidx, data, lcol, lam, x, g):
    """First-order optimality residual at the current iterate (no updates)."""
    n = lcol.shape[0]
    worst = 0.0
    for j in range(n):
        if lcol[j] <= 0.0:
            continue
        grad = 0.0
        for k in range(indptr[j], indptr[j + 1]):
            grad += data[k] * g[rowidx[k]]
        if x[j] > 0.0:
            r = abs(grad + lam)
        elif x[j] < 0.0:
            r = abs(grad - lam)
        else:
            r = abs(grad) - lam
            if r < 0.0:
                r = 0.0
        if r > worst:
            worst = r
    gsum = 0.0
    for i in range(g.shape[0]):
        gsum += g[i]
    if abs(gsum) > worst:
        worst = abs(gsum)
    return worst


@njit(cache=True, nogil=True)
def _fit_kernel(indptr, rowidx, data, y01, lcol, lam, x, z, g, b_arr,
                update_tol, kkt_tol, max_passes):
    passes = 0
    converged = 0
    kkt = np.inf
    best_kkt = np.inf
    stalls = 0
    while passes < max_passes:
        maxd = _sweep(indptr, rowidx, data, y01, lcol, lam, x, z, g, b_arr, True)
        passes += 1
        if maxd >= update_tol:
            # refine the active set before the next full pass
            while passes < max_passes:
                inner = _sweep(indptr, rowidx, data, y01, lcol, lam, x, z, g, b_arr, False)
                passes += 1
                if inner < update_tol:
                    break
            continue
        kkt = _kkt_residual(indptr, rowidx, data, lcol, lam, x, g)
        if kkt <= kkt_tol:
            converged = 1
            break
        # updates are below tolerance but optimality is not met; keep going
        # unless the residual has stopped improving
        if kkt >= best_kkt - 1e-15:
            stalls += 1
            if stalls >= 2:
                break
        else:
            best_kkt = kkt
            stalls = 0
    if converged == 0:
        kkt = _kkt_residual(indptr, rowidx, data, lcol, lam, x, g)
        if kkt <= kkt_tol:
            converged = 1
    return passes, kkt, converged


def _fit_at_lambda(
    csc: sp.csc_matrix,
    y01: np.ndarray,
    lcol: np.ndarray,
    lam: float,
    x: np.ndarray,
    b: float,
    config: FitConfig,
) -> tuple[np.ndarray, float, int, float, bool]:
    m = csc.shape[0]
    z = csc @ x + b
    g = expit(z) - y01
    b_arr = np.array([b], dtype=np.float64)
    curvature = max(1.0, float(lcol.max()) if len(lcol) else 1.0, 0.25 * m)
    update_tol = min(config.update_tol, config.kkt_tol / curvature)
    passes, kkt, converged = _fit_kernel(
        csc.indptr,
        csc.indices,
        csc.data,
        y01,
        lcol,
        float(lam),
        x,
        z,
        g,
        b_arr,
        update_tol,
        config.kkt_tol,
        config.max_passes,
    )
    return x, float(b_arr[0]), int(passes), float(kkt), bool(converged)


def fit_path(
    matrix,
    labels,
    path: PathConfig | Sequence[float] = PathConfig(),
    fit: FitConfig = FitConfig(),
) -> RegularizationPath:
    """Fit the lambda path with warm restarts (descending lambda).

    A PathConfig builds the geometric grid from the data's deactivation point;
    an explicit lambda sequence is used as given (sorted descending).  A fit
    that exhausts max_passes is recorded with converged=False and the path
    continues.
    """
    csc = _as_csc(matrix)
    m = csc.shape[0]
    labels = _check_labels(labels, m)
    y01 = (labels + 1.0) / 2.0
    lam_hi, b0 = lambda_max(csc, labels)
    if isinstance(path, PathConfig):
        lambdas = make_lambda_grid(lam_hi, path)
    else:
        lambdas = np.asarray(sorted(path, reverse=True), dtype=np.float64)
        if len(lambdas) == 0:
            raise ValueError("lambda sequence is empty")
        if np.any(lambdas < 0):
            raise ValueError("lambdas must be >= 0")
    lcol = 0.25 * np.asarray(csc.multiply(csc).sum(axis=0)).ravel()
    x = np.zeros(csc.shape[1], dtype=np.float64)
    b = b0
    models: list[LogisticModel] = []
    for lam in lambdas:
        x, b, passes, kkt, converged = _fit_at_lambda(csc, y01, lcol, float(lam), x, b, fit)
        if not converged:
            logger.warning(
                "fit at lambda=%.6g not converged after %d passes (residual %.3g)",
                lam,
                passes,
                kkt,
            )
        weights = x.copy()
        models.append(
            LogisticModel(
                weights=weights,
                intercept=b,
                lam=float(lam),
                converged=converged,
                n_passes=passes,
                kkt_residual=kkt,
                objective_value=objective(csc, labels, weights, b, float(lam)),
            )
        )
    return RegularizationPath(lambdas=lambdas, models=tuple(models))


# ---------------------------------------------------------------------------
# Cross-validated lambda choice (stratified folds, one-standard-error rule)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossValidationResult:
    lambdas: np.ndarray
    mean_loss: np.ndarray
    se_loss: np.ndarray
    fold_losses: np.ndarray  # folds x lambdas
    chosen_index: int
    chosen_lambda: float
    model: LogisticModel
    fold_ids: np.ndarray = field(repr=False, default=None)


def stratified_fold_ids(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Seeded stratified fold assignment; every fold non-empty, every train
    side contains both classes (needs >= 2 samples per class)."""
    labels = np.asarray(labels)
    m = len(labels)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if folds > m:
        raise ValueError("folds must be <= sample count")
    counts = {c: int(np.sum(labels == c)) for c in (-1, 1)}
    if min(counts.values()) < 2:
        raise ValueError("each class needs at least 2 samples for stratified folds")
    rng = np.random.default_rng(seed)
    ids = np.empty(m, dtype=np.int64)
    counter = 0
    for cls in (-1, 1):
        rows = np.where(labels == cls)[0]
        rows = rng.permutation(rows)
        for row in rows:
            ids[row] = counter % folds
            counter += 1
    return ids


def _fold_losses(
    csr: sp.csr_matrix,
    labels: np.ndarray,
    fold_ids: np.ndarray,
    fold: int,
    lambdas: np.ndarray,
    fit: FitConfig,
) -> np.ndarray:
    train = fold_ids != fold
    val = ~train
    sub_path = fit_path(csr[train], labels[train], lambdas, fit)
    val_csr = csr[val]
    val_labels = labels[val]
    return np.array(
        [
            mean_validation_loss(val_csr, val_labels, mdl.weights, mdl.intercept)
            for mdl in sub_path.models
        ]
    )


def cv_select_lambda(
    matrix,
    labels,
    folds: int = 20,
    path: PathConfig = PathConfig(),
    fit: FitConfig = FitConfig(),
    seed: int = 0,
    threads: int = 1,
) -> CrossValidationResult:
    """Choose lambda by k-fold CV with the one-standard-error rule.

    The grid comes from the full data.  Per lambda the mean and standard
    error of the per-fold validation losses are computed; the chosen lambda
    is the largest one whose mean loss is within one SE of the minimum.  The
    returned model is refit on all rows at the chosen lambda.
    """
    csr = _as_csr(matrix)
    labels = _check_labels(labels, csr.shape[0])
    lam_hi, _ = lambda_max(csr, labels)
    lambdas = make_lambda_grid(lam_hi, path)
    fold_ids = stratified_fold_ids(labels, folds, seed)
    per_fold = [None] * folds

    def run(fold: int) -> None:
        per_fold[fold] = _fold_losses(csr, labels, fold_ids, fold, lambdas, fit)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, range(folds)))
    else:
        for fold in range(folds):
            run(fold)
    fold_losses = np.vstack(per_fold)
    mean_loss = fold_losses.mean(axis=0)
    se_loss = fold_losses.std(axis=0, ddof=1) / math.sqrt(folds)
    i_min = int(np.argmin(mean_loss))
    bound = mean_loss[i_min] + se_loss[i_min]
    chosen = int(np.nonzero(mean_loss <= bound)[0][0])
    final_path = fit_path(csr, labels, lambdas[: chosen + 1], fit)
    return CrossValidationResult(
        lambdas=lambdas,
        mean_loss=mean_loss,
        se_loss=se_loss,
        fold_losses=fold_losses,
        chosen_index=chosen,
        chosen_lambda=float(lambdas[chosen]),
        model=final_path.models[-1],
        fold_ids=fold_ids,
    )


# ---------------------------------------------------------------------------
# Model file: header "N b lambda", then feature_index<TAB>weight per nonzero
# ---------------------------------------------------------------------------


def write_model(model: LogisticModel, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{model.n_features} {model.intercept!r} {model.lam!r}\n")
        for j in model.nonzeros():
            fh.write(f"{int(j)}\t{float(model.weights[j])!r}\n")


def read_model(path: str | Path) -> LogisticModel:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        fields = header.split(" ")
        if len(fields) != 3:
            raise ModelFormatError(f"{path}: header must be 'N b lambda'")
        try:
            n = int(fields[0])
            intercept = float(fields[1])
            lam = float(fields[2])
        except ValueError:
            raise ModelFormatError(f"{path}: bad header {header!r}") from None
        weights = np.zeros(n, dtype=np.float64)
        seen = -1
        for line_no, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ModelFormatError(f"{path}: line {line_no}: expected index<TAB>weight")
            try:
                j = int(parts[0])
                w = float(parts[1])
            except ValueError:
                raise ModelFormatError(f"{path}: line {line_no}: bad field") from None
            if not 0 <= j < n:
                raise ModelFormatError(f"{path}: line {line_no}: index out of range")
            if j <= seen:
                raise ModelFormatError(f"{path}: line {line_no}: indices must ascend")
            seen = j
            weights[j] = w
    return LogisticModel(weights=weights, intercept=intercept, lam=lam)
