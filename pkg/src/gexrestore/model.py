"""Transformer encoder, cls-only decoder and restoration head.

Input tokens carry no positional signal: a token is ``gene_emb + value_emb``
(or ``+ missing_emb``), so the encoder is equivariant to gene order and the
cls output is order invariant. Missing tokens are removed from attention
altogether: nobody attends to them and their own states are discarded.

Each decoder token (``gene_emb + mask_emb``) attends to the encoder's cls
vector and to itself, never to other decoder tokens, so restoring gene ``g``
does not depend on which other genes are restored and cost grows linearly
with their number.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .binning import EmbeddingTables, ValueBinner
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d: int = 200
    n_layers: int = 8
    n_heads: int = 8
    ff_dim: int | None = None
    n_levels: int = 64
    decoder_layers: int | None = None
    dropout: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.ff_dim is None:
            object.__setattr__(self, "ff_dim", 4 * self.d)
        if self.decoder_layers is None:
            object.__setattr__(self, "decoder_layers", self.n_layers)
        if min(self.vocab_size, self.d, self.n_layers, self.n_heads, self.n_levels) <= 0:
            raise ValueError("model sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class EncodeOutput:
    cls_vec: np.ndarray
    token_vecs: np.ndarray
    attn: list[np.ndarray] | None = None  # per layer: heads x (|S|+1) x (|S|+1)


@dataclass
class BatchEncoding:
    cls: Tensor  # (B, d)
    tokens: Tensor  # (B, T, d), position 0 is cls
    valid: np.ndarray  # (B, T) False for missing tokens
    attn: list[np.ndarray] = field(default_factory=list)


def _linear_init(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))


class GexModel:
    def __init__(self, config: ModelConfig, binner: ValueBinner | None = None, seed: int = 0):
        if binner is None:
            binner = ValueBinner(config.n_levels)
        if binner.n_levels != config.n_levels:
            raise ValueError("binner and model disagree on n_levels")
        self.config = config
        self.binner = binner
        rng = np.random.default_rng(seed)
        self.tables = EmbeddingTables(config.vocab_size, config.d, config.n_levels,
                                      seed=int(rng.integers(2**63)))
        self.params: dict[str, Tensor] = dict(self.tables.params())
        d, ff = config.d, config.ff_dim
        for stack, n in (("enc", config.n_layers), ("dec", config.decoder_layers)):
            for i in range(n):
                p = f"{stack}{i}."
                for ln in ("ln1", "ln2") + (("ln_mem",) if stack == "dec" else ()):
                    self._add(p + ln + ".g", np.ones(d))
                    self._add(p + ln + ".b", np.zeros(d))
                for w in ("wq", "wk", "wv", "wo"):
                    self._add(p + w, _linear_init(rng, d, d))
                    self._add(p + "b" + w[1], np.zeros(d))
                self._add(p + "w1", _linear_init(rng, d, ff))
                self._add(p + "b1", np.zeros(ff))
                self._add(p + "w2", _linear_init(rng, ff, d))
                self._add(p + "b2", np.zeros(d))
            self._add(f"{stack}_lnf.g", np.ones(d))
            self._add(f"{stack}_lnf.b", np.zeros(d))
        self._add("head.w", _linear_init(rng, d, 1))
        self._add("head.b", np.zeros(1))
        self._dropout_rng = np.random.default_rng(int(rng.integers(2**63)))
        self.training = False

    def _add(self, name, arr):
        self.params[name] = Tensor(arr, requires_grad=True)

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # ------------------------------------------------------------ blocks

    def _ln(self, x, name):
        return T.layer_norm(x, self[name + ".g"], self[name + ".b"], self.config.ln_eps)

    def _dropout(self, x):
        p = self.config.dropout
        if not self.training or p == 0.0:
            return x
        keep = (self._dropout_rng.random(x.shape) >= p) / (1.0 - p)
        return T.mul(x, keep)

    def _split_heads(self, x):
        b, t, _ = x.shape
        h = self.config.n_heads
        return T.transpose(T.reshape(x, (b, t, h, self.config.d // h)), (0, 2, 1, 3))

    def _merge_heads(self, x):
        b, h, t, dh = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))

    def _proj(self, x, p, w):
        return T.add(T.matmul(x, self[p + "w" + w]), self[p + "b" + w])

    def _attention(self, p, xq, xkv, mask, capture):
        q = self._split_heads(self._proj(xq, p, "q"))
        k = self._split_heads(self._proj(xkv, p, "k"))
        v = self._split_heads(self._proj(xkv, p, "v"))
        dh = self.config.d // self.config.n_heads
        scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        attn = T.softmax_rows(scores, mask)
        if capture is not None:
            capture.append(attn.data.copy())
        out = self._merge_heads(T.matmul(self._dropout(attn), v))
        return self._proj(out, p, "o")

    def _restricted_attention(self, p, x, mem):
        """Each masked token attends to the cls memory and to itself only."""
        q = self._split_heads(self._proj(x, p, "q"))
        k_self = self._split_heads(self._proj(x, p, "k"))
        v_self = self._split_heads(self._proj(x, p, "v"))
        k_cls = self._split_heads(self._proj(mem, p, "k"))
        v_cls = self._split_heads(self._proj(mem, p, "v"))
        dh = self.config.d // self.config.n_heads
        s_cls = T.matmul(q, T.swapaxes(k_cls, -1, -2))
        s_self = T.tsum(T.mul(q, k_self), axis=-1, keepdims=True)
        attn = T.softmax_rows(T.scale(T.concat([s_cls, s_self], axis=-1), 1.0 / math.sqrt(dh)))
        attn = self._dropout(attn)
        out = T.add(T.mul(T.index(attn, (Ellipsis, slice(0, 1))), v_cls),
                    T.mul(T.index(attn, (Ellipsis, slice(1, 2))), v_self))
        return self._proj(self._merge_heads(out), p, "o")

    def _ff(self, x, p):
        hdn = T.gelu(T.add(T.matmul(x, self[p + "w1"]), self[p + "b1"]))
        return T.add(T.matmul(self._dropout(hdn), self[p + "w2"]), self[p + "b2"])

    # ------------------------------------------------------------ encoder

    def encode_batch(self, genes, values, capture_attn: bool = False) -> BatchEncoding:
        """Encode ``B`` patients with ``n`` genes each; NaN values are missing."""
        genes = np.atleast_2d(np.asarray(genes, dtype=np.int64))
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if genes.shape != values.shape or genes.shape[1] < 1:
            raise ValueError(f"genes {genes.shape} and values {values.shape} must match, n >= 1")
        srt = np.sort(genes, axis=1)
        if (srt[:, 1:] == srt[:, :-1]).any():
            raise ValueError("duplicate gene index in an encoder input set")
        B, n = genes.shape
        missing = np.isnan(values)
        levels = self.binner.bin_array(np.where(missing, 0.0, values))
        tok = self.tables.embed_tokens(genes, levels, missing)
        cls = T.broadcast_to(T.reshape(self.tables.cls_emb, (1, 1, self.config.d)),
                             (B, 1, self.config.d))
        x = T.concat([cls, tok], axis=1)
        valid = np.concatenate([np.ones((B, 1), bool), ~missing], axis=1)
        if valid.all():
            mask = None
        else:
            eye = np.eye(n + 1, dtype=bool)
            mask = (valid[:, None, :] & valid[:, :, None]) | (~valid[:, :, None] & eye)
            mask = mask[:, None, :, :]
        captured = [] if capture_attn else None
        for i in range(self.config.n_layers):
            p = f"enc{i}."
            h = self._ln(x, p + "ln1")
            x = T.add(x, self._dropout(self._attention(p, h, h, mask, captured)))
            x = T.add(x, self._dropout(self._ff(self._ln(x, p + "ln2"), p)))
        x = self._ln(x, "enc_lnf")
        return BatchEncoding(T.index(x, (slice(None), 0)), x, valid, captured or [])

    def encode(self, genes, values, capture_attn: bool = False) -> EncodeOutput:
        """Encode one patient. ``values`` entries of ``None``/NaN are missing."""
        vals = np.array([np.nan if v is None else v for v in values], dtype=np.float64)
        with T.no_grad():
            enc = self.encode_batch(np.asarray(genes)[None, :], vals[None, :], capture_attn)
        attn = [a[0] for a in enc.attn] if capture_attn else None
        tokens = enc.tokens.data[0, 1:].copy()
        tokens[~enc.valid[0, 1:]] = np.nan  # discarded states of missing genes
        return EncodeOutput(enc.cls.data[0].copy(), tokens, attn)

    # ------------------------------------------------------------ decoder

    def decode_batch(self, cls: Tensor, targets) -> Tensor:
        """Restore ``targets`` (B, m) from cls vectors (B, d); returns (B, m)."""
        targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
        cls = T.as_tensor(cls)
        if cls.ndim == 1:
            cls = T.reshape(cls, (1, -1))
        B, m = targets.shape
        if m < 1:
            raise ValueError("decode needs at least one target gene")
        if cls.shape[0] != B:
            raise ValueError(f"{cls.shape[0]} cls vectors for {B} target rows")
        mem = T.reshape(cls, (B, 1, self.config.d))
        x = self.tables.embed_masked_tokens(targets)
        for i in range(self.config.decoder_layers):
            p = f"dec{i}."
            x = T.add(x, self._dropout(self._restricted_attention(p, self._ln(x, p + "ln1"),
                                                                  self._ln(mem, p + "ln_mem"))))
            x = T.add(x, self._dropout(self._ff(self._ln(x, p + "ln2"), p)))
        x = self._ln(x, "dec_lnf")
        out = T.add(T.matmul(x, self["head.w"]), self["head.b"])
        return T.reshape(out, (B, m))

    def decode_restore(self, cls_vec, target_genes) -> np.ndarray:
        targets = np.asarray(target_genes, dtype=np.int64)
        if targets.size == 0:
            raise ValueError("decode needs at least one target gene")
        if np.unique(targets).size != targets.size:
            raise ValueError("duplicate target gene")
        with T.no_grad():
            return self.decode_batch(Tensor(np.asarray(cls_vec)[None, :]), targets[None, :]).data[0].copy()

    # ------------------------------------------------------------ helpers

    def restore(self, genes, values, targets, batch_size: int = 64) -> np.ndarray:
        """Encode each row's input set and restore its ``targets`` (no grad).

        ``targets`` is either (B, m) or a single (m,) list shared by all rows.
        """
        genes = np.atleast_2d(genes)
        values = np.atleast_2d(values)
        targets = np.asarray(targets, dtype=np.int64)
        shared = targets.ndim == 1
        out = []
        with T.no_grad():
            for lo in range(0, genes.shape[0], batch_size):
                sl = slice(lo, lo + batch_size)
                cls = self.encode_batch(genes[sl], values[sl]).cls
                tg = np.broadcast_to(targets, (cls.shape[0], targets.size)) if shared else targets[sl]
                out.append(self.decode_batch(cls, tg).data)
        return np.concatenate(out, axis=0)

    def embed(self, genes, values, batch_size: int = 64) -> np.ndarray:
        genes = np.atleast_2d(genes)
        values = np.atleast_2d(values)
        out = []
        with T.no_grad():
            for lo in range(0, genes.shape[0], batch_size):
                out.append(self.encode_batch(genes[lo:lo + batch_size],
                                             values[lo:lo + batch_size]).cls.data)
        return np.concatenate(out, axis=0)

    def copy(self) -> "GexModel":
        other = GexModel.__new__(GexModel)
        other.config, other.binner, other.training = self.config, self.binner, False
        other.tables = EmbeddingTables.__new__(EmbeddingTables)
        other.tables.vocab_size, other.tables.d, other.tables.n_levels = (
            self.config.vocab_size, self.config.d, self.config.n_levels)
        other.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        for n in EmbeddingTables.names:
            setattr(other.tables, n, other.params[n])
        other._dropout_rng = np.random.default_rng(0)
        return other


def restoration_loss(pred, truth) -> Tensor:
    """Mean squared error between restored and true values."""
    pred = T.as_tensor(pred)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return T.mse(pred, truth)


def classifier_logits(model: GexModel, head: dict[str, Tensor], genes, values) -> Tensor:
    cls = model.encode_batch(genes, values).cls
    return T.add(T.matmul(cls, head["w"]), head["b"])


def new_classifier_head(d: int, n_classes: int, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    return {"w": Tensor(_linear_init(rng, d, n_classes), requires_grad=True),
            "b": Tensor(np.zeros(n_classes), requires_grad=True)}


def fine_tune_step(model: GexModel, head: dict[str, Tensor], genes, values, labels,
                   opt) -> float:
    """One cross-entropy update of the encoder, tables and classifier head."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = head["b"].shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label outside [0, {n_classes})")
    model.training = True
    opt.zero_grad()
    loss = T.cross_entropy(classifier_logits(model, head, genes, values), labels)
    loss.backward()
    opt.step()
    model.training = False
    return loss.item()


@dataclass
class AttentionScores:
    scores: np.ndarray  # NaN where count == 0
    counts: np.ndarray
    sums: np.ndarray


def attention_weights(model: GexModel, values, genes_per_pass: int, n_passes: int,
                      seed: int = 0, rows=None, batch_size: int = 64) -> AttentionScores:
    """Per-gene mean cls attention (last layer, mean over heads).

    Each pass draws an independent gene set per sample. A gene's score is the
    mean of the attention it received over every (pass, sample) in which it
    was drawn and observed; missing tokens receive no attention and are not
    counted.
    """
    values = np.asarray(values, dtype=np.float64)
    rows = np.arange(values.shape[0]) if rows is None else np.asarray(rows)
    if rows.size == 0:
        raise ValueError("empty dataset")
    vocab = values.shape[1]
    if not 1 <= genes_per_pass <= vocab:
        raise ValueError(f"genes_per_pass must lie in [1, {vocab}]")
    rng = np.random.default_rng(seed)
    sums, counts = np.zeros(vocab), np.zeros(vocab, dtype=np.int64)
    with T.no_grad():
        for _ in range(n_passes):
            genes = np.stack([rng.choice(vocab, genes_per_pass, replace=False) for _ in rows])
            vals = np.take_along_axis(values[rows], genes, axis=1)
            for lo in range(0, rows.size, batch_size):
                g, v = genes[lo:lo + batch_size], vals[lo:lo + batch_size]
                enc = model.encode_batch(g, v, capture_attn=True)
                a = enc.attn[-1][:, :, 0, 1:].mean(axis=1)
                ok = enc.valid[:, 1:]
                np.add.at(sums, g[ok], a[ok])
                np.add.at(counts, g[ok], 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return AttentionScores(scores, counts, sums)
