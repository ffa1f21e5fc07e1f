"""Experiment grids over the downstream evaluations, and their CSV outputs."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..data_io import SurvivalRecord
from .classify import gene_subset
from .impute import MICE, impute, mcar_mask
from .survival import DEFAULT_L2_GRID, AnchorSet, restore_anchor_expressions, survival_eval

ORIGINAL, RESTORED, BOTH = "Original", "Restored", "Both"
SURVIVAL_ARMS = (ORIGINAL, RESTORED, BOTH)

CSV_SCHEMAS = {
    "classify.csv": ("arm", "size", "repeat", "accuracy"),
    "survival.csv": ("arm", "size", "repeat", "cindex"),
    "impute.csv": ("rate", "method", "size", "repeat", "cindex"),
    "impute_mse.csv": ("rate", "method", "size", "repeat", "mse"),
    "anchors.csv": ("label", "gene_id", "rank", "cv_cindex"),
    "attention.csv": ("gene_id", "label", "score", "count"),
}


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, rows: Iterable[dict], columns: Sequence[str] | None = None) -> Path:
    """Write keyed rows sorted by their column values (order-independent output)."""
    path = Path(path)
    columns = tuple(columns or CSV_SCHEMAS[path.name])
    rows = sorted(({c: r[c] for c in columns} for r in rows),
                  key=lambda r: tuple(str(r[c]) for c in columns))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------- survival


def survival_arms(model, values, records: Sequence[SurvivalRecord], anchors: AnchorSet,
                  input_size: int = 64, repeats: int = 10, seed: int = 0,
                  arms: Sequence[str] = SURVIVAL_ARMS, l2_grid=DEFAULT_L2_GRID,
                  folds: int = 5, inner_folds: int = 3, jobs: int = 1,
                  arm_suffix: str = "") -> list[dict]:
    """Original inputs vs restored anchors vs both, on ``repeats`` input draws."""
    values = np.asarray(values, dtype=np.float64)

    def one(r):
        genes = gene_subset(values.shape[1], input_size, seed, r)
        X = values[:, genes]
        G = np.broadcast_to(genes, X.shape)
        feats = {ORIGINAL: np.where(np.isnan(X), 0.0, X)}
        if RESTORED in arms or BOTH in arms:
            feats[RESTORED] = restore_anchor_expressions(model, G, X, anchors)
            feats[BOTH] = np.concatenate([feats[ORIGINAL], feats[RESTORED]], axis=1)
        return [{"arm": arm + arm_suffix, "size": input_size, "repeat": r,
                 "cindex": survival_eval(feats[arm], records, l2_grid, folds, inner_folds,
                                         seed=seed + r).mean_cindex}
                for arm in arms]

    return [row for rows in _map(one, range(repeats), jobs) for row in rows]


def anchor_sweep(model, values, records, anchors: AnchorSet, counts=(32, 64, 128, 256, 512),
                 input_size: int = 64, repeats: int = 10, seed: int = 0, jobs: int = 1,
                 **kw) -> list[dict]:
    """Restored-arm C-index for the top-``k`` anchors, one arm label per ``k``."""
    rows = []
    for k in counts:
        if k > len(anchors.genes):
            raise ValueError(f"anchor count {k} exceeds the {len(anchors.genes)} selected anchors")
        rows += survival_arms(model, values, records, anchors.top(k), input_size, repeats, seed,
                              arms=(RESTORED,), jobs=jobs, arm_suffix=f"@{k}", **kw)
    return rows


def mean_by(rows: Iterable[dict], key: str, value: str) -> dict:
    acc: dict = {}
    for r in rows:
        acc.setdefault(r[key], []).append(float(r[value]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


# ---------------------------------------------------------------- imputation


def imputation_eval(model, values, records: Sequence[SurvivalRecord], rates=(0.01, 0.1, 0.3, 0.5),
                    methods=("ZERO", "MEAN", "KNN", "MICE", "MODEL"), sizes=(64,),
                    repeats: int = 10, seed: int = 0, k: int = 10, cycles: int = 10,
                    mice_size: int = 64, l2_grid=DEFAULT_L2_GRID, folds: int = 5,
                    inner_folds: int = 3, jobs: int = 1, with_survival: bool = True) -> list[dict]:
    """C-index of survival models on imputed inputs over the full grid.

    One row per (rate, method, size, repeat), also carrying the masked-cell
    MSE. MICE runs only at ``mice_size`` predictors. Every method of a cell
    sees the same gene subset and the same MCAR mask.
    """
    values = np.asarray(values, dtype=np.float64)
    cells = [(ri, rate, size, r) for ri, rate in enumerate(rates) for size in sizes
             for r in range(repeats)]

    def one(cell):
        ri, rate, size, r = cell
        genes = gene_subset(values.shape[1], size, seed, r)
        X = values[:, genes]
        present = ~np.isnan(X)
        mask = mcar_mask(present, rate, int(np.random.SeedSequence([seed, ri, size, r])
                                             .generate_state(1)[0]))
        Xm = np.where(mask.hidden, np.nan, X)
        out = []
        for method in methods:
            if method == MICE and size != mice_size:
                continue
            F = impute(method, Xm, k=k, cycles=cycles, model=model, genes=genes)
            mse = float(np.mean((F[mask.hidden] - X[mask.hidden]) ** 2)) if mask.hidden.any() else 0.0
            ci = (survival_eval(np.where(np.isnan(F), 0.0, F), records, l2_grid, folds,
                                inner_folds, seed=seed + r).mean_cindex
                  if with_survival else float("nan"))
            out.append({"rate": rate, "method": method, "size": size, "repeat": r,
                        "cindex": ci, "mse": mse})
        return out

    return [row for rows in _map(one, cells, jobs) for row in rows]


# ---------------------------------------------------------------- attention


def attention_expression_stats(scores: np.ndarray, values: np.ndarray) -> dict:
    """Correlation of per-gene attention with |mean z| and with z spread."""
    from scipy.stats import pearsonr, spearmanr

    ok = np.isfinite(scores)
    mean_abs = np.abs(np.nanmean(values, axis=0))[ok]
    spread = np.nanstd(values, axis=0)[ok]
    s = scores[ok]
    out = {}
    for name, v in (("abs_mean", mean_abs), ("std", spread)):
        if s.size > 2 and np.ptp(s) > 0 and np.ptp(v) > 0:
            out[name] = {"pearson": float(pearsonr(s, v)[0]), "spearman": float(spearmanr(s, v)[0])}
        else:
            out[name] = {"pearson": float("nan"), "spearman": float("nan")}
    return out
