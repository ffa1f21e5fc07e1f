"""Value discretization and the learnable embedding tables."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, mul, reshape, take_rows


@dataclass(frozen=True)
class ValueBinner:
    """Uniform-width bins over the clamped range ``[lo, hi]``.

    Bins are half-open ``[edge_k, edge_k+1)``; the last bin is closed so
    ``hi`` maps to ``n_levels - 1``. With ``scheme="quantile"`` the interior
    edges are supplied by :meth:`fit_quantile` instead.
    """

    n_levels: int = 64
    lo: float = -3.0
    hi: float = 3.0
    scheme: str = "uniform"
    quantile_edges: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_levels < 2:
            raise ValueError(f"n_levels must be >= 2, got {self.n_levels}")
        if not self.lo < self.hi:
            raise ValueError(f"lo ({self.lo}) must be below hi ({self.hi})")
        if self.scheme not in ("uniform", "quantile"):
            raise ValueError(f"unknown binning scheme {self.scheme!r}")
        if self.scheme == "quantile":
            e = self.quantile_edges
            if e is None or len(e) != self.n_levels - 1 or np.any(np.diff(e) <= 0):
                raise ValueError("quantile binning needs n_levels-1 strictly ascending edges")

    @classmethod
    def fit_quantile(cls, values: np.ndarray, n_levels: int = 64,
                     lo: float = -3.0, hi: float = 3.0) -> "ValueBinner":
        v = np.clip(np.asarray(values, dtype=np.float64).ravel(), lo, hi)
        v = v[np.isfinite(v)]
        q = np.quantile(v, np.linspace(0, 1, n_levels + 1)[1:-1])
        # keep edges strictly ascending on heavily tied data
        q = np.maximum.accumulate(q + np.arange(q.size) * 1e-12)
        return cls(n_levels, lo, hi, "quantile", tuple(float(x) for x in q))

    @property
    def edges(self) -> np.ndarray:
        if self.scheme == "quantile":
            return np.asarray(self.quantile_edges)
        return self.lo + (self.hi - self.lo) * np.arange(1, self.n_levels) / self.n_levels

    def bin(self, v: float) -> int:
        if not np.isfinite(v):
            raise ValueError(f"cannot bin non-finite value {v}; missing values use the missing token")
        return int(self.bin_array(np.asarray([v]))[0])

    def bin_array(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if not np.isfinite(v).all():
            raise ValueError("cannot bin non-finite values; missing values use the missing token")
        c = np.clip(v, self.lo, self.hi)
        if self.scheme == "uniform":
            idx = np.floor((c - self.lo) / (self.hi - self.lo) * self.n_levels).astype(np.int64)
        else:
            idx = np.searchsorted(self.edges, c, side="right").astype(np.int64)
        return np.minimum(idx, self.n_levels - 1)

    def to_dict(self) -> dict:
        d = {"n_levels": self.n_levels, "lo": self.lo, "hi": self.hi, "scheme": self.scheme}
        if self.quantile_edges is not None:
            d["quantile_edges"] = list(self.quantile_edges)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ValueBinner":
        edges = d.get("quantile_edges")
        return cls(int(d["n_levels"]), float(d["lo"]), float(d["hi"]), d.get("scheme", "uniform"),
                   tuple(edges) if edges is not None else None)


class EmbeddingTables:
    """Gene, value-level, missing, cls and mask embeddings sharing one width ``d``."""

    names = ("gene_emb", "value_emb", "missing_emb", "cls_emb", "mask_emb")

    def __init__(self, vocab_size: int, d: int, n_levels: int, seed: int = 0, std: float = 0.02):
        if min(vocab_size, d, n_levels) <= 0:
            raise ValueError("table sizes must be positive")
        rng = np.random.default_rng(seed)
        self.vocab_size, self.d, self.n_levels = vocab_size, d, n_levels
        self.gene_emb = Tensor(rng.normal(0.0, std, (vocab_size, d)), requires_grad=True)
        self.value_emb = Tensor(rng.normal(0.0, std, (n_levels, d)), requires_grad=True)
        self.missing_emb = Tensor(rng.normal(0.0, std, (d,)), requires_grad=True)
        self.cls_emb = Tensor(rng.normal(0.0, std, (d,)), requires_grad=True)
        self.mask_emb = Tensor(rng.normal(0.0, std, (d,)), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in self.names}

    def _check_genes(self, genes: np.ndarray) -> None:
        if genes.size and (genes.min() < 0 or genes.max() >= self.vocab_size):
            raise IndexError(f"gene index outside vocabulary of size {self.vocab_size}")

    def embed_tokens(self, genes, levels, missing) -> Tensor:
        """Batched input tokens: gene row plus value row, or plus the missing row.

        ``levels`` entries under ``missing`` are ignored.
        """
        genes = np.asarray(genes, dtype=np.int64)
        self._check_genes(genes)
        missing = np.asarray(missing, dtype=bool)
        lv = np.where(missing, 0, np.asarray(levels, dtype=np.int64))
        g = take_rows(self.gene_emb, genes)
        v = take_rows(self.value_emb, lv)
        if missing.any():
            keep = (~missing)[..., None].astype(np.float64)
            v = add(mul(v, keep), mul(reshape(self.missing_emb, (1,) * genes.ndim + (self.d,)),
                                      missing[..., None].astype(np.float64)))
        return add(g, v)

    def embed_masked_tokens(self, genes) -> Tensor:
        genes = np.asarray(genes, dtype=np.int64)
        self._check_genes(genes)
        return add(take_rows(self.gene_emb, genes), self.mask_emb)

    def embed_gene(self, binner: ValueBinner, gene: int, value) -> np.ndarray:
        """Single-token embedding; ``value=None`` or NaN selects the missing row."""
        self._check_genes(np.asarray([gene]))
        if value is None or (isinstance(value, float) and np.isnan(value)):
            return self.gene_emb.data[gene] + self.missing_emb.data
        return self.gene_emb.data[gene] + self.value_emb.data[binner.bin(value)]

    def embed_masked(self, gene: int) -> np.ndarray:
        self._check_genes(np.asarray([gene]))
        return self.gene_emb.data[gene] + self.mask_emb.data


def init_tables(vocab_size: int, d: int, n_levels: int, seed: int = 0) -> EmbeddingTables:
    return EmbeddingTables(vocab_size, d, n_levels, seed)
