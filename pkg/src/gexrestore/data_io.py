"""Expression and survival file I/O, normalization, filtering and splitting."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MISSING_MARKERS = {"", "na", "nan"}


class DataError(ValueError):
    """Malformed input data; message carries the offending location."""


@dataclass
class ExpressionMatrix:
    sample_ids: list[str]
    gene_ids: list[str]
    values: np.ndarray  # NaN where not present
    present: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        n, g = len(self.sample_ids), len(self.gene_ids)
        if self.values.shape != (n, g) or self.present.shape != (n, g):
            raise DataError(
                f"matrix shape {self.values.shape} / mask {self.present.shape} "
                f"does not match {n} samples x {g} genes"
            )
        _require_unique(self.sample_ids, "sample")
        _require_unique(self.gene_ids, "gene")
        if not np.isfinite(self.values[self.present]).all():
            raise DataError("non-finite value in a present cell")
        self.values = np.where(self.present, self.values, np.nan)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def rows(self, idx) -> "ExpressionMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return ExpressionMatrix(
            [self.sample_ids[i] for i in idx], list(self.gene_ids),
            self.values[idx], self.present[idx],
        )

    def columns(self, idx) -> "ExpressionMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return ExpressionMatrix(
            list(self.sample_ids), [self.gene_ids[j] for j in idx],
            self.values[:, idx], self.present[:, idx],
        )

    def equals(self, other: "ExpressionMatrix") -> bool:
        return (
            self.sample_ids == other.sample_ids
            and self.gene_ids == other.gene_ids
            and np.array_equal(self.present, other.present)
            and np.array_equal(self.values[self.present], other.values[other.present])
        )


@dataclass(frozen=True)
class SurvivalRecord:
    sample_id: str
    time: float
    event: bool

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time > 0):
            raise DataError(f"survival time must be positive, got {self.time} for {self.sample_id}")


@dataclass
class GeneStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray = field(default=None)


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.3
    pretrain_fraction_of_dev: float = 0.8
    seed: int = 0
    stratify: bool = True

    def __post_init__(self):
        for name in ("test_fraction", "pretrain_fraction_of_dev"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


def _require_unique(ids: Sequence[str], kind: str) -> None:
    seen = set()
    for s in ids:
        if s in seen:
            raise DataError(f"duplicate {kind} id {s!r}")
        seen.add(s)


def _sniff_delimiter(header: str) -> str:
    return "\t" if header.count("\t") > header.count(",") else ","


def _read_rows(path: Path):
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    delim = _sniff_delimiter(lines[0])
    return list(csv.reader(io.StringIO(text), delimiter=delim))


# ---------------------------------------------------------------- expression


def load_expression(path) -> ExpressionMatrix:
    rows = _read_rows(path)
    header = rows[0]
    if not header or header[0] != "sample_id":
        raise DataError(f"{path}:1: first column must be 'sample_id'")
    genes = header[1:]
    seen = set()
    for gname in genes:
        if gname in seen:
            raise DataError(f"{path}:1: duplicate gene column {gname!r}")
        seen.add(gname)
    sample_ids, vals, pres = [], [], []
    seen_samples = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        sid = row[0]
        if sid in seen_samples:
            raise DataError(f"{path}:{lineno}: duplicate sample id {sid!r}")
        seen_samples.add(sid)
        v = np.full(len(genes), np.nan)
        p = np.zeros(len(genes), dtype=bool)
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell.lower() in MISSING_MARKERS:
                continue
            try:
                x = float(cell)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} for {genes[j]!r}") from None
            if not math.isfinite(x):
                raise DataError(f"{path}:{lineno}: non-finite value {cell!r} for {genes[j]!r}")
            v[j] = x
            p[j] = True
        sample_ids.append(sid)
        vals.append(v)
        pres.append(p)
    values = np.array(vals).reshape(len(sample_ids), len(genes))
    present = np.array(pres, dtype=bool).reshape(len(sample_ids), len(genes))
    return ExpressionMatrix(sample_ids, genes, values, present)


def save_expression(m: ExpressionMatrix, path, delimiter: str = ",") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["sample_id", *m.gene_ids])
        for i, sid in enumerate(m.sample_ids):
            w.writerow([sid, *(repr(float(x)) if ok else "NA"
                               for x, ok in zip(m.values[i], m.present[i]))])


# ---------------------------------------------------------------- survival / labels


@dataclass
class SurvivalTable:
    records: list[SurvivalRecord]
    unmatched: list[str] = field(default_factory=list)

    def aligned(self, sample_ids: Sequence[str]) -> tuple[np.ndarray, list[SurvivalRecord]]:
        """Row indices into ``sample_ids`` and the matching records."""
        pos = {s: i for i, s in enumerate(sample_ids)}
        idx, recs = [], []
        for r in self.records:
            if r.sample_id in pos:
                idx.append(pos[r.sample_id])
                recs.append(r)
        order = np.argsort(idx, kind="stable")
        return np.asarray(idx, dtype=np.int64)[order], [recs[k] for k in order]


def load_survival(path, sample_ids: Sequence[str] | None = None) -> SurvivalTable:
    rows = _read_rows(path)
    if [c.strip() for c in rows[0]] != ["sample_id", "time", "event"]:
        raise DataError(f"{path}:1: header must be sample_id,time,event")
    known = set(sample_ids) if sample_ids is not None else None
    records, unmatched, seen = [], [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        sid, t, e = (c.strip() for c in row)
        if sid in seen:
            raise DataError(f"{path}:{lineno}: duplicate sample id {sid!r}")
        seen.add(sid)
        try:
            time = float(t)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric time {t!r}") from None
        if not (math.isfinite(time) and time > 0):
            raise DataError(f"{path}:{lineno}: time must be positive, got {t!r}")
        if e not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: event must be 0 or 1, got {e!r}")
        records.append(SurvivalRecord(sid, time, e == "1"))
        if known is not None and sid not in known:
            unmatched.append(sid)
    return SurvivalTable(records, unmatched)


def save_survival(records: Sequence[SurvivalRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "time", "event"])
        for r in records:
            w.writerow([r.sample_id, repr(float(r.time)), int(r.event)])


def load_labels(path) -> dict[str, str]:
    rows = _read_rows(path)
    if [c.strip() for c in rows[0]] != ["sample_id", "label"]:
        raise DataError(f"{path}:1: header must be sample_id,label")
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
        out[row[0].strip()] = row[1].strip()
    return out


def save_labels(labels: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label"])
        for sid, lab in labels.items():
            w.writerow([sid, lab])


def survival_arrays(records: Sequence[SurvivalRecord]) -> tuple[np.ndarray, np.ndarray]:
    return (np.array([r.time for r in records], dtype=np.float64),
            np.array([r.event for r in records], dtype=bool))


# ---------------------------------------------------------------- preprocessing


def gene_stats(m: ExpressionMatrix, rows=None, const_tol: float = 1e-8) -> GeneStats:
    """Per-gene mean and population std (divisor n) over present entries of ``rows``."""
    vals = m.values if rows is None else m.values[np.asarray(rows)]
    if vals.shape[0] == 0:
        raise ValueError("statistics subset is empty")
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.nanmean(vals, axis=0) if np.isnan(vals).any() else vals.mean(axis=0)
        cnt = (~np.isnan(vals)).sum(axis=0)
        ss = np.nansum((vals - mean) ** 2, axis=0)
        std = np.sqrt(ss / np.maximum(cnt, 1))
    mean = np.where(cnt > 0, mean, 0.0)
    std = np.where(cnt > 0, std, 0.0)
    return GeneStats(mean, std, std < const_tol)


def zscore_normalize(m: ExpressionMatrix, stats_from=None) -> tuple[ExpressionMatrix, GeneStats]:
    """Standardize each gene with statistics from the ``stats_from`` rows.

    Genes whose std is below 1e-8 are flagged ``constant`` and left as is.
    """
    st = gene_stats(m, stats_from)
    return apply_zscore(m, st), st


def apply_zscore(m: ExpressionMatrix, st: GeneStats) -> ExpressionMatrix:
    safe = np.where(st.constant, 1.0, st.std)
    shift = np.where(st.constant, 0.0, st.mean)
    z = (m.values - shift) / safe
    return ExpressionMatrix(list(m.sample_ids), list(m.gene_ids), z, m.present.copy())


def filter_low_variance(m: ExpressionMatrix, min_std: float = 0.01) -> ExpressionMatrix:
    if min_std < 0:
        raise ValueError(f"min_std must be >= 0, got {min_std}")
    if min_std == 0:
        return m
    std = gene_stats(m).std
    keep = np.flatnonzero(std >= min_std)
    if keep.size == 0:
        raise DataError(f"variance filter with min_std={min_std} removed every gene")
    return m.columns(keep)


def split(sample_ids: Sequence[str], spec: SplitSpec,
          labels: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Seeded, optionally stratified split into pretrain / pretrain_monitor / test.

    Samples are ordered by id before shuffling, so the result does not
    depend on input row order. Returned arrays index into ``sample_ids``.
    """
    order = sorted(range(len(sample_ids)), key=lambda i: sample_ids[i])
    rng = np.random.default_rng(spec.seed)
    if labels is not None and spec.stratify:
        strata: dict[str, list[int]] = {}
        for i in order:
            strata.setdefault(labels[i], []).append(i)
        for lab, members in strata.items():
            if len(members) < 2:
                raise ValueError(f"stratum {lab!r} has fewer than 2 samples")
        groups = [strata[k] for k in sorted(strata)]
    else:
        groups = [order]
    test, pre, mon = [], [], []
    for members in groups:
        perm = [members[k] for k in rng.permutation(len(members))]
        n_test = int(round(len(perm) * spec.test_fraction))
        dev = perm[n_test:]
        test.extend(perm[:n_test])
        n_pre = int(round(len(dev) * spec.pretrain_fraction_of_dev))
        pre.extend(dev[:n_pre])
        mon.extend(dev[n_pre:])
    return {"pretrain": np.array(sorted(pre), dtype=np.int64),
            "pretrain_monitor": np.array(sorted(mon), dtype=np.int64),
            "test": np.array(sorted(test), dtype=np.int64)}
