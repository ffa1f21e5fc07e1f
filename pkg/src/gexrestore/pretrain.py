"""Masked restoration pretraining, two-phase schedule and checkpoint files."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import crcmod.predefined
import numpy as np

from . import tensor as T
from .binning import ValueBinner
from .model import GexModel, ModelConfig
from .optim import AdamW, AdamWState

log = logging.getLogger(__name__)

SAME_SET = "same_set"
RANDOM_SET = "random_set"

FORMAT_VERSION = 1
MAGIC = b"GEXRCKPT"
_crc64 = crcmod.predefined.mkCrcFun("crc-64-we")


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint file."""


@dataclass(frozen=True)
class PretrainConfig:
    n_gene_in: int = 512
    restore_mode: str = SAME_SET
    n_gene_out: int = 512
    epochs: int = 10_000
    phase2_epochs: int = 0
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    monitor_every: int = 1
    monitor_seed: int = 12345
    allow_overlap: bool = False

    def __post_init__(self):
        if self.restore_mode not in (SAME_SET, RANDOM_SET):
            raise ValueError(f"restore_mode must be {SAME_SET!r} or {RANDOM_SET!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.phase2_epochs < 0 or self.batch_size < 1 or self.monitor_every < 1:
            raise ValueError("phase2_epochs >= 0, batch_size >= 1 and monitor_every >= 1 required")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def phases(self) -> list[tuple[int, str, int]]:
        """(phase number, restore mode, epochs) in run order."""
        out = [(1, self.restore_mode, self.epochs)]
        if self.phase2_epochs:
            out.append((2, RANDOM_SET, self.phase2_epochs))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


PAPER_PRESET = {
    "model": {"d": 200, "n_layers": 8, "n_heads": 8, "n_levels": 64},
    "pretrain": {"n_gene_in": 512, "restore_mode": SAME_SET, "n_gene_out": 512,
                 "epochs": 10_000, "phase2_epochs": 1_500},
}
TOY_PRESET = {
    "model": {"d": 32, "n_layers": 2, "n_heads": 2, "n_levels": 32},
    "pretrain": {"n_gene_in": 128, "restore_mode": SAME_SET, "n_gene_out": 128,
                 "epochs": 60, "phase2_epochs": 0, "batch_size": 32, "lr": 1e-3},
}


@dataclass
class PretrainData:
    """Z-scored values (samples x vocab, NaN = missing) with row partitions."""

    values: np.ndarray
    train_rows: np.ndarray
    monitor_rows: np.ndarray
    gene_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.train_rows = np.asarray(self.train_rows, dtype=np.int64)
        self.monitor_rows = np.asarray(self.monitor_rows, dtype=np.int64)
        if not self.gene_ids:
            self.gene_ids = [f"g{j}" for j in range(self.values.shape[1])]


@dataclass
class Checkpoint:
    model: GexModel
    pretrain_config: PretrainConfig
    gene_ids: list[str]
    optimizer: AdamWState
    rng_state: dict
    phase: int = 1
    epoch: int = 0  # completed epochs within ``phase``
    best_monitor: float = math.inf
    best_params: dict[str, np.ndarray] = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def best_model(self) -> GexModel:
        m = self.model.copy()
        for k, v in self.best_params.items():
            m.params[k].data[...] = v
        return m

    @property
    def finished(self) -> bool:
        phases = self.pretrain_config.phases()
        last_phase, _, last_epochs = phases[-1]
        return self.phase == last_phase and self.epoch >= last_epochs


# ---------------------------------------------------------------- sampling


def sample_gene_set(rng: np.random.Generator, vocab_size: int, n: int) -> np.ndarray:
    if n > vocab_size:
        raise ValueError(f"cannot draw {n} genes from a vocabulary of {vocab_size}")
    return rng.choice(vocab_size, size=n, replace=False)


def sample_batch_sets(rng, batch: int, vocab_size: int, n_in: int, mode: str,
                      n_out: int, allow_overlap: bool) -> tuple[np.ndarray, np.ndarray]:
    """Independent input (and restore) gene draws for each patient of a batch."""
    inputs, outputs = [], []
    for _ in range(batch):
        if mode == SAME_SET:
            s = sample_gene_set(rng, vocab_size, n_in)
            inputs.append(s)
            outputs.append(s)
        elif allow_overlap:
            inputs.append(sample_gene_set(rng, vocab_size, n_in))
            outputs.append(sample_gene_set(rng, vocab_size, n_out))
        else:
            s = sample_gene_set(rng, vocab_size, n_in + n_out)
            inputs.append(s[:n_in])
            outputs.append(s[n_in:])
    return np.stack(inputs), np.stack(outputs)


def masked_mse(pred: T.Tensor, truth: np.ndarray) -> T.Tensor:
    """MSE over the finite entries of ``truth``."""
    ok = np.isfinite(truth)
    if ok.all():
        return T.mse(pred, truth)
    n = int(ok.sum())
    if n == 0:
        raise ValueError("no observed restore target in batch")
    diff = T.sub(pred, np.where(ok, truth, 0.0))
    return T.scale(T.tsum(T.mul(T.square(diff), ok.astype(np.float64))), 1.0 / n)


# ---------------------------------------------------------------- steps


def _batch_loss(model: GexModel, values: np.ndarray, rows: np.ndarray, rng, cfg: PretrainConfig,
                mode: str) -> T.Tensor:
    vocab = values.shape[1]
    n_out = cfg.n_gene_out if mode == RANDOM_SET else cfg.n_gene_in
    if mode == RANDOM_SET and not cfg.allow_overlap and cfg.n_gene_in + n_out > vocab:
        raise ValueError(f"n_gene_in + n_gene_out = {cfg.n_gene_in + n_out} exceeds vocabulary {vocab}")
    gin, gout = sample_batch_sets(rng, len(rows), vocab, cfg.n_gene_in, mode, n_out,
                                  cfg.allow_overlap)
    sub = values[rows]
    vin = np.take_along_axis(sub, gin, axis=1)
    truth = np.take_along_axis(sub, gout, axis=1)
    enc = model.encode_batch(gin, vin)
    pred = model.decode_batch(enc.cls, gout)
    return masked_mse(pred, truth)


def pretrain_step(model: GexModel, values: np.ndarray, rows, cfg: PretrainConfig,
                  rng: np.random.Generator, opt: AdamW, mode: str | None = None) -> float:
    """Sample sets, restore, and apply one AdamW update. Returns the batch loss."""
    mode = mode or cfg.restore_mode
    model.training = True
    opt.zero_grad()
    loss = _batch_loss(model, values, np.asarray(rows), rng, cfg, mode)
    val = loss.item()
    if not math.isfinite(val):
        raise NumericalError(f"non-finite restoration loss {val}; learning rate {opt.lr} is likely too high")
    loss.backward()
    opt.step()
    model.training = False
    return val


def monitor_loss(model: GexModel, values: np.ndarray, rows, cfg: PretrainConfig, mode: str,
                 batch_size: int = 64) -> float:
    """Restoration MSE on ``rows`` using a fixed sampling seed (comparable across epochs)."""
    rng = np.random.default_rng(cfg.monitor_seed)
    rows = np.asarray(rows)
    if rows.size == 0:
        raise ValueError("empty monitor split")
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, rows.size, batch_size):
            r = rows[lo:lo + batch_size]
            loss = _batch_loss(model, values, r, rng, cfg, mode).item()
            total += loss * r.size
            count += r.size
    return total / count


# ---------------------------------------------------------------- loop


def new_checkpoint(model: GexModel, cfg: PretrainConfig, gene_ids) -> Checkpoint:
    rng = np.random.default_rng(cfg.seed)
    return Checkpoint(model=model, pretrain_config=cfg, gene_ids=list(gene_ids),
                      optimizer=AdamWState(), rng_state=rng.bit_generator.state)


def _optimizer(model: GexModel, cfg: PretrainConfig, state: AdamWState) -> AdamW:
    opt = AdamW(model.params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    opt.state = state
    return opt


def pretrain(model: GexModel, data: PretrainData, cfg: PretrainConfig,
             resume: Checkpoint | None = None, stop_after_epochs: int | None = None,
             checkpoint_path=None, log_csv=None, progress=None) -> Checkpoint:
    """Run phase 1 (``cfg.restore_mode``) then, if configured, phase 2 (RANDOM_SET).

    The returned checkpoint carries the current parameters (for resuming)
    and the best-monitor parameters of the latest phase (``best_model()``).
    ``stop_after_epochs`` interrupts the run after that many epochs of this
    call; resuming the returned checkpoint continues the identical trajectory.
    """
    if data.monitor_rows.size == 0:
        raise ValueError("empty monitor split")
    if cfg.n_gene_in > data.values.shape[1]:
        raise ValueError(f"n_gene_in={cfg.n_gene_in} exceeds vocabulary {data.values.shape[1]}")
    ck = resume or new_checkpoint(model, cfg, data.gene_ids)
    model = ck.model
    rng = np.random.default_rng()
    rng.bit_generator.state = ck.rng_state
    opt = _optimizer(model, cfg, ck.optimizer)
    done_this_call = 0
    for phase, mode, n_epochs in cfg.phases():
        if phase < ck.phase:
            continue
        if phase > ck.phase:
            ck.phase, ck.epoch = phase, 0
            ck.best_monitor, ck.best_params = math.inf, {}
        while ck.epoch < n_epochs:
            if stop_after_epochs is not None and done_this_call >= stop_after_epochs:
                ck.rng_state = rng.bit_generator.state
                return ck
            order = rng.permutation(data.train_rows)
            losses, sizes = [], []
            for lo in range(0, order.size, cfg.batch_size):
                rows = order[lo:lo + cfg.batch_size]
                losses.append(pretrain_step(model, data.values, rows, cfg, rng, opt, mode))
                sizes.append(rows.size)
            ck.epoch += 1
            done_this_call += 1
            train_loss = float(np.average(losses, weights=sizes))
            entry = {"epoch": ck.epoch, "phase": phase, "train_loss": train_loss, "monitor_loss": None}
            if ck.epoch % cfg.monitor_every == 0 or ck.epoch == n_epochs:
                mon = monitor_loss(model, data.values, data.monitor_rows, cfg, mode)
                entry["monitor_loss"] = mon
                if mon < ck.best_monitor:
                    ck.best_monitor = mon
                    ck.best_params = {k: p.data.copy() for k, p in model.params.items()}
            if not T.parameters_finite(model.params.values()):
                raise NumericalError(f"non-finite parameter after epoch {ck.epoch} of phase {phase}")
            ck.log.append(entry)
            ck.rng_state = rng.bit_generator.state
            if progress is not None:
                progress(entry)
            if checkpoint_path is not None:
                save_checkpoint(ck, checkpoint_path)
            if log_csv is not None:
                write_log_csv(ck.log, log_csv)
    ck.rng_state = rng.bit_generator.state
    if not ck.best_params:
        ck.best_params = {k: p.data.copy() for k, p in model.params.items()}
    return ck


def write_log_csv(entries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "phase", "train_loss", "monitor_loss"])
        for e in entries:
            mon = "" if e["monitor_loss"] is None else repr(e["monitor_loss"])
            w.writerow([e["epoch"], e["phase"], repr(e["train_loss"]), mon])


# ---------------------------------------------------------------- serialization


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def _pack_tensors(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(a, dtype="<f8")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def _unpack_tensors(buf: bytes) -> dict[str, np.ndarray]:
    (count,) = struct.unpack_from("<I", buf, 0)
    pos, out = 4, {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) * 8
        out[name] = np.frombuffer(buf[pos:pos + size], dtype="<f8").reshape(shape).astype(np.float64)
        pos += size
    if pos != len(buf):
        raise CheckpointError("trailing bytes in tensor section")
    return out


def _rng_state_json(state: dict) -> dict:
    # PCG64 state holds 128-bit ints; store them as strings to stay JSON-portable
    s = json.loads(json.dumps(state, default=int))
    for k in ("state", "inc"):
        s["state"][k] = str(s["state"][k])
    return s


def _rng_state_from_json(s: dict) -> dict:
    s = json.loads(json.dumps(s))
    for k in ("state", "inc"):
        s["state"][k] = int(s["state"][k])
    return s


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    meta = {
        "model_config": ck.model.config.to_dict(),
        "binner": ck.model.binner.to_dict(),
        "pretrain_config": ck.pretrain_config.to_dict(),
        "phase": ck.phase,
        "epoch": ck.epoch,
        "best_monitor": None if math.isinf(ck.best_monitor) else ck.best_monitor,
        "optimizer_step": ck.optimizer.step,
        "rng_state": _rng_state_json(ck.rng_state),
        "log": ck.log,
        "extra": ck.extra,
    }
    params = {k: p.data for k, p in ck.model.params.items()}
    opt = {}
    for k in ck.optimizer.m:
        opt["m/" + k] = ck.optimizer.m[k]
        opt["v/" + k] = ck.optimizer.v[k]
    body = b"".join([
        MAGIC, struct.pack("<I", FORMAT_VERSION),
        _section(b"META", _canonical_json(meta)),
        _section(b"VOCB", "\n".join(ck.gene_ids).encode("utf-8")),
        _section(b"PARM", _pack_tensors(params)),
        _section(b"BEST", _pack_tensors(ck.best_params)),
        _section(b"OPTM", _pack_tensors(opt)),
    ])
    return body + struct.pack("<Q", _crc64(body))


def save_checkpoint(ck: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    tmp.replace(path)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 12 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    if _crc64(body) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    (version,) = struct.unpack_from("<I", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format_version {version} != supported {FORMAT_VERSION}")
    pos, sections = len(MAGIC) + 4, {}
    while pos < len(body):
        tag = body[pos:pos + 4]
        (ln,) = struct.unpack_from("<Q", body, pos + 4)
        sections[tag.decode("ascii")] = body[pos + 12:pos + 12 + ln]
        pos += 12 + ln
    missing = {"META", "VOCB", "PARM", "BEST", "OPTM"} - set(sections)
    if missing:
        raise CheckpointError(f"checkpoint lacks sections {sorted(missing)}")
    meta = json.loads(sections["META"])
    mcfg = ModelConfig.from_dict(meta["model_config"])
    model = GexModel(mcfg, ValueBinner.from_dict(meta["binner"]), seed=0)
    params = _unpack_tensors(sections["PARM"])
    if set(params) != set(model.params):
        raise CheckpointError("parameter names do not match the model configuration")
    for k, v in params.items():
        if v.shape != model.params[k].shape:
            raise CheckpointError(f"parameter {k} has shape {v.shape}, expected {model.params[k].shape}")
        model.params[k].data[...] = v
    # keep serialization order identical to the saved file
    model.params = {k: model.params[k] for k in params}
    opt_arrays = _unpack_tensors(sections["OPTM"])
    opt = AdamWState(step=meta["optimizer_step"])
    for k, v in opt_arrays.items():
        kind, name = k.split("/", 1)
        (opt.m if kind == "m" else opt.v)[name] = v
    pcfg = dict(meta["pretrain_config"])
    pcfg["betas"] = tuple(pcfg["betas"])
    vocab = sections["VOCB"].decode("utf-8")
    return Checkpoint(
        model=model, pretrain_config=PretrainConfig(**pcfg),
        gene_ids=vocab.split("\n") if vocab else [], optimizer=opt,
        rng_state=_rng_state_from_json(meta["rng_state"]), phase=meta["phase"], epoch=meta["epoch"],
        best_monitor=math.inf if meta["best_monitor"] is None else meta["best_monitor"],
        best_params=_unpack_tensors(sections["BEST"]), log=meta["log"], extra=meta.get("extra", {}),
    )


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return checkpoint_from_bytes(buf)


def with_phase2(cfg: PretrainConfig, epochs: int, n_gene_out: int | None = None) -> PretrainConfig:
    return replace(cfg, phase2_epochs=epochs, n_gene_out=n_gene_out or cfg.n_gene_out)
