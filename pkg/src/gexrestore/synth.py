"""Synthetic expression cohorts with known factors, classes and survival risk.

Expression follows a linear factor model ``X = F L^T + noise`` with
class-dependent factor means. Survival times are exponential with rate
``baseline_hazard * exp(risk)``, ``risk = F w``, so a Cox model on the
factors is exactly well specified. Censoring times are exponential too, with
a rate solved so the expected censored fraction equals ``censoring``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .data_io import (ExpressionMatrix, SurvivalRecord, save_expression, save_labels,
                      save_survival)


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 500
    n_genes: int = 200
    n_factors: int = 3
    loading_scale: float = 1.0
    noise_std: float = 0.5
    n_classes: int = 4
    class_sep: float = 3.0
    risk_scale: float = 1.0
    censoring: float = 0.3
    baseline_hazard: float = 0.1
    raw_offsets: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_factors <= self.n_genes:
            raise ValueError("need 1 <= n_factors <= n_genes")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 <= self.censoring < 1.0:
            raise ValueError("censoring target must lie in [0, 1)")
        if self.n_samples < 2 or self.n_classes < 1:
            raise ValueError("need n_samples >= 2 and n_classes >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthData:
    matrix: ExpressionMatrix
    labels: list[str]
    records: list[SurvivalRecord]
    factors: np.ndarray
    loadings: np.ndarray
    risk: np.ndarray
    class_index: np.ndarray
    gene_offset: np.ndarray
    gene_scale: np.ndarray


def _censor_rate(hazard: np.ndarray, target: float) -> float:
    if target == 0.0:
        return 0.0
    # expected censored fraction for rates c and h_i is mean(c / (c + h_i))
    f = lambda c: float(np.mean(c / (c + hazard))) - target
    hi = 1.0
    while f(hi) < 0:
        hi *= 2.0
    return brentq(f, 0.0, hi, xtol=1e-14)


def generate(cfg: SynthConfig) -> SynthData:
    rng = np.random.default_rng(cfg.seed)
    n, g, k = cfg.n_samples, cfg.n_genes, cfg.n_factors
    cls_idx = rng.permutation(np.arange(n) % cfg.n_classes)
    centers = rng.normal(0.0, cfg.class_sep, (cfg.n_classes, k)) if cfg.n_classes > 1 else np.zeros((1, k))
    factors = centers[cls_idx] + rng.normal(size=(n, k))
    loadings = rng.normal(0.0, cfg.loading_scale, (g, k))
    x = factors @ loadings.T
    if cfg.noise_std > 0:
        x = x + rng.normal(0.0, cfg.noise_std, (n, g))
    if cfg.raw_offsets:
        offset = rng.normal(5.0, 2.0, g)
        gscale = rng.uniform(0.5, 2.0, g)
    else:
        offset, gscale = np.zeros(g), np.ones(g)
    raw = offset + gscale * x

    w = rng.normal(size=k)
    w *= cfg.risk_scale / np.linalg.norm(w)
    fc = factors - factors.mean(axis=0)
    risk = fc @ w
    hazard = cfg.baseline_hazard * np.exp(risk)
    t_event = rng.exponential(1.0 / hazard)
    c = _censor_rate(hazard, cfg.censoring)
    t_cens = rng.exponential(1.0 / c, n) if c > 0 else np.full(n, np.inf)
    event = t_event <= t_cens
    time = np.maximum(np.minimum(t_event, t_cens), 1e-12)

    width = len(str(n - 1))
    sample_ids = [f"s{i:0{width}d}" for i in range(n)]
    gwidth = len(str(g - 1))
    gene_ids = [f"g{j:0{gwidth}d}" for j in range(g)]
    matrix = ExpressionMatrix(sample_ids, gene_ids, raw, np.ones((n, g), dtype=bool))
    labels = [f"c{c_}" for c_ in cls_idx]
    records = [SurvivalRecord(s, float(t), bool(e)) for s, t, e in zip(sample_ids, time, event)]
    return SynthData(matrix, labels, records, factors, loadings, risk, cls_idx, offset, gscale)


def write_dataset(data: SynthData, out_dir, cfg: SynthConfig | None = None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"expression": out / "expression.csv", "survival": out / "survival_records.csv",
             "labels": out / "labels.csv", "truth": out / "truth.json"}
    save_expression(data.matrix, paths["expression"])
    save_survival(data.records, paths["survival"])
    save_labels(dict(zip(data.matrix.sample_ids, data.labels)), paths["labels"])
    truth = {k: getattr(data, k).tolist() for k in
             ("factors", "loadings", "risk", "class_index", "gene_offset", "gene_scale")}
    if cfg is not None:
        truth["config"] = cfg.to_dict()
    paths["truth"].write_text(json.dumps(truth, sort_keys=True), encoding="utf-8")
    return paths
