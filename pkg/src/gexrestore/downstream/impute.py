"""MCAR masking and imputation baselines (zero, mean, KNN, MICE, model)."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from ..data_io import ExpressionMatrix

log = logging.getLogger(__name__)

ZERO, MEAN, KNN, MICE, MODEL = "ZERO", "MEAN", "KNN", "MICE", "MODEL"
METHODS = (ZERO, MEAN, KNN, MICE, MODEL)


@dataclass
class McarMask:
    rate: float
    seed: int
    hidden: np.ndarray  # bool, True where a present cell was hidden


def mcar_mask(present: np.ndarray, rate: float, seed: int) -> McarMask:
    """Hide ``round(rate * n_present)`` present cells drawn uniformly at random.

    Every present cell has the same chance ``rate`` of being hidden, and the
    hidden fraction is exact up to rounding instead of binomially spread.
    """
    if not 0.0 <= rate <= 0.95:
        raise ValueError(f"MCAR rate {rate} outside [0, 0.95]")
    present = np.asarray(present, dtype=bool)
    idx = np.flatnonzero(present)
    n_hide = int(round(rate * idx.size))
    hidden = np.zeros(present.size, dtype=bool)
    hidden[np.random.default_rng(seed).choice(idx, n_hide, replace=False)] = True
    return McarMask(rate, seed, hidden.reshape(present.shape))


def apply_mcar(m: ExpressionMatrix, rate: float, seed: int) -> tuple[ExpressionMatrix, McarMask]:
    """Hide a ``rate`` fraction of the present cells, uniformly at random.

    The input matrix keeps the original values for scoring.
    """
    mask = mcar_mask(m.present, rate, seed)
    values = np.where(mask.hidden, np.nan, m.values)
    return ExpressionMatrix(list(m.sample_ids), list(m.gene_ids), values,
                            m.present & ~mask.hidden), mask


# ---------------------------------------------------------------- methods


def _column_means(X):
    obs = ~np.isnan(X)
    cnt = obs.sum(axis=0)
    if (cnt == 0).any():
        warnings.warn(f"{int((cnt == 0).sum())} column(s) fully unobserved; mean imputation uses 0")
    return np.where(cnt > 0, np.where(obs, X, 0.0).sum(axis=0) / np.maximum(cnt, 1), 0.0)


def nan_euclidean(X: np.ndarray) -> np.ndarray:
    """Pairwise distances over mutually observed columns, scaled by sqrt(d / d_obs)."""
    M = (~np.isnan(X)).astype(np.float64)
    Z = np.where(M > 0, X, 0.0)
    Z2 = Z * Z
    d2 = Z2 @ M.T + M @ Z2.T - 2.0 * (Z @ Z.T)
    cnt = M @ M.T
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = np.where(cnt > 0, np.maximum(d2, 0.0) * X.shape[1] / cnt, np.inf)
    # the expansion above leaves rounding residue on the diagonal
    d2[np.diag_indices_from(d2)] = np.where(np.diag(cnt) > 0, 0.0, np.inf)
    return np.sqrt(d2)


def impute_knn(X: np.ndarray, k: int = 10) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    miss = np.isnan(X)
    if not miss.any():
        return X.copy()
    if k < 1 or X.shape[0] < k:
        raise ValueError(f"KNN needs at least k={k} rows")
    D = nan_euclidean(X)
    np.fill_diagonal(D, np.inf)
    means = _column_means(X)
    out = X.copy()
    for i in np.flatnonzero(miss.any(axis=1)):
        order = np.argsort(D[i], kind="stable")
        for c in np.flatnonzero(miss[i]):
            donors = order[~miss[order, c] & np.isfinite(D[i, order])][:k]
            if donors.size == 0:
                log.info("KNN: no neighbor observes column %d for row %d; using column mean", c, i)
                out[i, c] = means[c]
            else:
                out[i, c] = X[donors, c].mean()
    return out


def impute_mice(X: np.ndarray, cycles: int = 10, l2: float = 1e-3) -> np.ndarray:
    """Chained ridge regressions from mean initialization (single chain)."""
    X = np.asarray(X, dtype=np.float64)
    miss = np.isnan(X)
    out = np.where(miss, _column_means(X), X)
    counts = miss.sum(axis=0)
    cols = [c for c in np.argsort(-counts, kind="stable") if 0 < counts[c] < X.shape[0]]
    p = X.shape[1]
    for _ in range(cycles):
        for c in cols:
            others = np.delete(np.arange(p), c)
            obs = ~miss[:, c]
            A = out[obs][:, others]
            y = out[obs, c]
            mu_a, mu_y = A.mean(axis=0), y.mean()
            Ac = A - mu_a
            beta = np.linalg.solve(Ac.T @ Ac + l2 * np.eye(p - 1), Ac.T @ (y - mu_y))
            out[miss[:, c], c] = mu_y + (out[miss[:, c]][:, others] - mu_a) @ beta
    return out


def impute_model(X: np.ndarray, genes: np.ndarray, model, batch_size: int = 64) -> np.ndarray:
    """Encode each row's observed genes (missing ones attention-masked), restore the rest."""
    X = np.asarray(X, dtype=np.float64)
    genes = np.asarray(genes, dtype=np.int64)
    if not np.isnan(X).any():
        return X.copy()
    G = np.broadcast_to(genes, X.shape)
    rows = np.flatnonzero(np.isnan(X).any(axis=1))
    restored = model.restore(G[rows], X[rows], genes, batch_size)
    out = X.copy()
    sub = out[rows]
    hole = np.isnan(sub)
    sub[hole] = restored[hole]
    out[rows] = sub
    return out


def impute(method: str, X, k: int = 10, cycles: int = 10, model=None, genes=None) -> np.ndarray:
    """Fill the NaN cells of ``X``; observed cells are returned unchanged."""
    X = np.asarray(X, dtype=np.float64)
    if method == ZERO:
        return np.where(np.isnan(X), 0.0, X)
    if method == MEAN:
        return np.where(np.isnan(X), _column_means(X), X)
    if method == KNN:
        return impute_knn(X, k)
    if method == MICE:
        return impute_mice(X, cycles)
    if method == MODEL:
        if model is None or genes is None:
            raise ValueError("MODEL imputation needs a trained model and gene indices")
        return impute_model(X, genes, model)
    raise ValueError(f"unknown imputation method {method!r}; expected one of {METHODS}")
