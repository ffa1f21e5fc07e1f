"""Command-line entry point: ``gexrestore <subcommand> --config run.json --out DIR``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pretrain as P
from .binning import ValueBinner
from .data_io import (DataError, SplitSpec, filter_low_variance, load_expression, load_labels,
                      load_survival, split, zscore_normalize)
from .downstream import classify as C
from .downstream import pipelines as PL
from .downstream.survival import ConvergenceError, UndefinedCIndexError, select_anchor_genes
from .model import GexModel, ModelConfig, attention_weights
from .synth import SynthConfig, generate, write_dataset

log = logging.getLogger("gexrestore")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "out",
    "data": {
        "dir": None,
        "expression": None,
        "survival": None,
        "labels": None,
        "min_std": 0.01,
        "test_fraction": 0.3,
        "pretrain_fraction_of_dev": 0.8,
    },
    "model": {"d": 32, "n_layers": 2, "n_heads": 2, "ff_dim": None, "n_levels": 32,
              "decoder_layers": None, "dropout": 0.0, "binning": "uniform"},
    "pretrain": {**{k: v for k, v in P.PretrainConfig().to_dict().items() if k != "seed"},
                 "n_gene_in": 64, "n_gene_out": 64, "epochs": 60, "lr": 1e-3, "monitor_every": 5},
    "downstream": {
        "repeats": 10,
        "classify": {"arms": list(C.ARMS), "sizes": [64], "nn_epochs": 100,
                     "finetune_epochs": 10, "finetune_lr": 1e-4},
        "survival": {"anchors": 512, "anchor_folds": 5, "input_size": 64,
                     "anchor_counts": [32, 64, 128, 256, 512], "l2_grid": [0.01, 0.1, 1.0, 10.0],
                     "folds": 5, "inner_folds": 3},
        "impute": {"rates": [0.01, 0.1, 0.3, 0.5], "methods": ["ZERO", "MEAN", "KNN", "MICE", "MODEL"],
                   "sizes": [64], "k": 10, "cycles": 10, "mice_size": 64},
        "attention": {"genes_per_pass": 64, "n_passes": 10},
    },
    "synth": {k: v for k, v in SynthConfig().to_dict().items() if k != "seed"},
    "seed_streams": None,
}

STREAMS = ("synth", "split", "init", "pretrain", "classify", "survival", "impute", "attention")


def stream_seed(root: int, name: str) -> int:
    """Per-purpose seed derived from the root seed and the stream name."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def _parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like a.b.c=value")
    key, raw = item.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.split("."), val


def resolve_config(raw: dict, overrides=(), env=None) -> dict:
    """Fill defaults, apply dotted overrides and GEX_SEED, validate and derive seeds."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    for item in overrides:
        keys, val = _parse_override(item)
        node = cfg
        for i, k in enumerate(keys):
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"unknown config key {'.'.join(keys[:i + 1])!r}")
            if i == len(keys) - 1:
                node[k] = val
            else:
                node = node[k]
    env = os.environ if env is None else env
    if env.get("GEX_SEED") not in (None, ""):
        try:
            cfg["seed"] = int(env["GEX_SEED"])
        except ValueError:
            raise ConfigError(f"GEX_SEED must be an integer, got {env['GEX_SEED']!r}") from None
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("seed must be an integer")
    cfg["seed_streams"] = {name: stream_seed(cfg["seed"], name) for name in STREAMS}
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    try:
        _synth_config(cfg)
        ModelConfig(vocab_size=1, **_model_kwargs(cfg))
        _pretrain_config(cfg)
        SplitSpec(cfg["data"]["test_fraction"], cfg["data"]["pretrain_fraction_of_dev"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if cfg["model"]["binning"] not in ("uniform", "quantile"):
        raise ConfigError("model.binning must be 'uniform' or 'quantile'")
    ds = cfg["downstream"]
    bad = set(ds["classify"]["arms"]) - set(C.ARMS)
    if bad:
        raise ConfigError(f"downstream.classify.arms: unknown arm(s) {sorted(bad)}")
    bad = set(ds["impute"]["methods"]) - {"ZERO", "MEAN", "KNN", "MICE", "MODEL"}
    if bad:
        raise ConfigError(f"downstream.impute.methods: unknown method(s) {sorted(bad)}")
    if any(not 0 <= r <= 0.95 for r in ds["impute"]["rates"]):
        raise ConfigError("downstream.impute.rates must lie in [0, 0.95]")
    if not isinstance(ds["repeats"], int) or ds["repeats"] < 1:
        raise ConfigError("downstream.repeats must be a positive integer")


def _synth_config(cfg) -> SynthConfig:
    return SynthConfig(**cfg["synth"], seed=cfg["seed_streams"]["synth"])


def _model_kwargs(cfg) -> dict:
    return {k: v for k, v in cfg["model"].items() if k != "binning"}


def _pretrain_config(cfg) -> P.PretrainConfig:
    return P.PretrainConfig(**cfg["pretrain"], seed=cfg["seed_streams"]["pretrain"])


def load_config(path, overrides=(), env=None) -> dict:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from None
    return resolve_config(raw, overrides, env)


def write_resolved(cfg: dict, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.json"
    path.write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    sample_ids: list[str]
    gene_ids: list[str]
    values: np.ndarray  # z-scored, NaN = missing
    labels: np.ndarray | None
    records: list | None  # aligned with rows, None where absent
    splits: dict[str, np.ndarray]

    @property
    def dev(self) -> np.ndarray:
        return np.sort(np.concatenate([self.splits["pretrain"], self.splits["pretrain_monitor"]]))


DATA_FILES = {"expression": "expression.csv", "survival": "survival_records.csv",
              "labels": "labels.csv"}


def _data_path(cfg, out: Path, name: str, required: bool) -> Path | None:
    d = cfg["data"]
    if d[name]:
        p = Path(d[name])
    else:
        p = Path(d["dir"] or out) / DATA_FILES[name]
    if not p.exists():
        if required:
            raise ConfigError(f"data file not found: {p}")
        return None
    return p


def load_dataset(cfg, out: Path, need_labels=False, need_survival=False,
                 gene_order: list[str] | None = None) -> Dataset:
    m = load_expression(_data_path(cfg, out, "expression", True))
    m = filter_low_variance(m, cfg["data"]["min_std"])
    if gene_order is not None:
        pos = {g: j for j, g in enumerate(m.gene_ids)}
        missing = [g for g in gene_order if g not in pos]
        if missing:
            raise DataError(f"{len(missing)} checkpoint gene(s) absent from the data, e.g. {missing[0]!r}")
        m = m.columns([pos[g] for g in gene_order])
    labels = None
    lp = _data_path(cfg, out, "labels", need_labels)
    if lp is not None:
        lab = load_labels(lp)
        absent = [s for s in m.sample_ids if s not in lab]
        if absent:
            raise DataError(f"{lp}: no label for sample {absent[0]!r}")
        labels = np.array([lab[s] for s in m.sample_ids])
    records = None
    sp = _data_path(cfg, out, "survival", need_survival)
    if sp is not None:
        idx, recs = load_survival(sp, m.sample_ids).aligned(m.sample_ids)
        if idx.size != len(m.sample_ids):
            raise DataError(f"{sp}: survival missing for {len(m.sample_ids) - idx.size} sample(s)")
        records = recs
    spec = SplitSpec(cfg["data"]["test_fraction"], cfg["data"]["pretrain_fraction_of_dev"],
                     cfg["seed_streams"]["split"], stratify=labels is not None)
    splits = split(m.sample_ids, spec, list(labels) if labels is not None else None)
    dev = np.sort(np.concatenate([splits["pretrain"], splits["pretrain_monitor"]]))
    z, _ = zscore_normalize(m, dev)
    return Dataset(list(m.sample_ids), list(m.gene_ids), z.values, labels, records, splits)


def _checkpoint_path(args, out: Path) -> Path:
    return Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"


def _load_model(args, out: Path, required: bool = True):
    p = _checkpoint_path(args, out)
    if not p.exists():
        if required:
            raise ConfigError(f"checkpoint not found: {p} (run pretrain or pass --checkpoint)")
        return None, None
    ck = P.load_checkpoint(p)
    return ck.best_model(), ck.gene_ids


# ---------------------------------------------------------------- commands


def cmd_synth(cfg, args, out: Path) -> int:
    sc = _synth_config(cfg)
    paths = write_dataset(generate(sc), out, sc)
    for p in paths.values():
        log.info("wrote %s", p)
    return EXIT_OK


def cmd_pretrain(cfg, args, out: Path) -> int:
    pc = _pretrain_config(cfg)
    if args.epochs is not None:
        pc = P.PretrainConfig(**{**pc.to_dict(), "epochs": args.epochs})
    ds = load_dataset(cfg, out)
    ck_path = out / "checkpoint.bin"
    resume = None
    if args.resume:
        rp = Path(args.resume)
        if not rp.exists():
            raise ConfigError(f"resume checkpoint not found: {rp}")
        resume = P.load_checkpoint(rp)
        if resume.gene_ids != ds.gene_ids:
            raise DataError("resume checkpoint vocabulary does not match the data")
        pc = resume.pretrain_config
        model = resume.model
    else:
        binner = _binner(cfg, ds)
        model = GexModel(ModelConfig(vocab_size=len(ds.gene_ids), **_model_kwargs(cfg)), binner,
                         seed=cfg["seed_streams"]["init"])
    data = P.PretrainData(ds.values, ds.splits["pretrain"], ds.splits["pretrain_monitor"],
                          ds.gene_ids)
    ck = P.pretrain(model, data, pc, resume=resume, stop_after_epochs=args.stop_after,
                    checkpoint_path=ck_path, log_csv=out / "pretrain_log.csv",
                    progress=lambda e: log.info("phase %d epoch %d train %.4f monitor %s",
                                                e["phase"], e["epoch"], e["train_loss"],
                                                e["monitor_loss"]))
    P.save_checkpoint(ck, ck_path)
    P.write_log_csv(ck.log, out / "pretrain_log.csv")
    return EXIT_OK


def _binner(cfg, ds: Dataset) -> ValueBinner:
    n = cfg["model"]["n_levels"]
    if cfg["model"]["binning"] == "quantile":
        v = ds.values[ds.splits["pretrain"]]
        return ValueBinner.fit_quantile(v[np.isfinite(v)], n)
    return ValueBinner(n_levels=n)


def cmd_classify(cfg, args, out: Path) -> int:
    c = cfg["downstream"]["classify"]
    needs_model = any(a in (C.CLS_LINEAR, C.FINETUNE) for a in c["arms"])
    model, genes = _load_model(args, out, required=needs_model)
    ds = load_dataset(cfg, out, need_labels=True, gene_order=genes)
    ft = C.FineTuneSettings(epochs=c["finetune_epochs"], lr=c["finetune_lr"])
    rows = []
    for size in c["sizes"]:
        for arm in c["arms"]:
            res = C.classify_eval(arm, ds.values, ds.labels, ds.dev, ds.splits["test"], size,
                                  cfg["downstream"]["repeats"], model,
                                  seed=cfg["seed_streams"]["classify"],
                                  nn_epochs=c["nn_epochs"], finetune=ft)
            log.info("%s size %d accuracy %s", arm, size, res.summary())
            rows += [{"arm": arm, "size": size, "repeat": r, "accuracy": a}
                     for r, a in enumerate(res.accuracies)]
    PL.write_csv(out / "classify.csv", rows)
    return EXIT_OK


def _select_anchors(cfg, ds: Dataset, k: int):
    s = cfg["downstream"]["survival"]
    dev = ds.dev
    return select_anchor_genes(ds.values[dev], [ds.records[i] for i in dev], k=k,
                               folds=s["anchor_folds"], gene_ids=ds.gene_ids,
                               seed=cfg["seed_streams"]["survival"])


def cmd_survival(cfg, args, out: Path) -> int:
    s = cfg["downstream"]["survival"]
    model, genes = _load_model(args, out)
    ds = load_dataset(cfg, out, need_survival=True, gene_order=genes)
    k = min(max([s["anchors"], *s["anchor_counts"]]), len(ds.gene_ids))
    anchors = _select_anchors(cfg, ds, k)
    PL.write_csv(out / "anchors.csv", [
        {"label": anchors.label, "gene_id": g, "rank": r + 1, "cv_cindex": float(c_)}
        for r, (g, c_) in enumerate(zip(anchors.gene_ids, anchors.cv_cindex))])
    test = ds.splits["test"]
    recs = [ds.records[i] for i in test]
    kw = dict(input_size=s["input_size"], repeats=cfg["downstream"]["repeats"],
              seed=cfg["seed_streams"]["survival"], l2_grid=tuple(s["l2_grid"]),
              folds=s["folds"], inner_folds=s["inner_folds"], jobs=args.jobs)
    rows = PL.survival_arms(model, ds.values[test], recs, anchors.top(min(s["anchors"], k)), **kw)
    counts = [c_ for c_ in s["anchor_counts"] if c_ <= k]
    rows += PL.anchor_sweep(model, ds.values[test], recs, anchors, counts, **kw)
    for arm, v in sorted(PL.mean_by(rows, "arm", "cindex").items()):
        log.info("%s mean C-index %.4f", arm, v)
    PL.write_csv(out / "survival.csv", rows)
    return EXIT_OK


def cmd_impute(cfg, args, out: Path) -> int:
    s = cfg["downstream"]["survival"]
    im = cfg["downstream"]["impute"]
    model, genes = _load_model(args, out, required="MODEL" in im["methods"])
    ds = load_dataset(cfg, out, need_survival=True, gene_order=genes)
    test = ds.splits["test"]
    rows = PL.imputation_eval(model, ds.values[test], [ds.records[i] for i in test],
                              rates=tuple(im["rates"]), methods=tuple(im["methods"]),
                              sizes=tuple(im["sizes"]), repeats=cfg["downstream"]["repeats"],
                              seed=cfg["seed_streams"]["impute"], k=im["k"], cycles=im["cycles"],
                              mice_size=im["mice_size"], l2_grid=tuple(s["l2_grid"]), folds=s["folds"],
                              inner_folds=s["inner_folds"], jobs=args.jobs)
    PL.write_csv(out / "impute.csv", rows)
    PL.write_csv(out / "impute_mse.csv", rows)
    return EXIT_OK


def cmd_attention(cfg, args, out: Path) -> int:
    a = cfg["downstream"]["attention"]
    model, genes = _load_model(args, out)
    ds = load_dataset(cfg, out, gene_order=genes)
    groups = {"ALL": np.arange(len(ds.sample_ids))}
    if ds.labels is not None:
        groups.update({lab: np.flatnonzero(ds.labels == lab) for lab in np.unique(ds.labels)})
    rows, stats = [], []
    gpp = min(a["genes_per_pass"], len(ds.gene_ids))
    for lab, idx in groups.items():
        res = attention_weights(model, ds.values, gpp, a["n_passes"],
                                seed=cfg["seed_streams"]["attention"], rows=idx)
        rows += [{"gene_id": g, "label": lab, "score": float(s_), "count": int(c_)}
                 for g, s_, c_ in zip(ds.gene_ids, res.scores, res.counts)]
        for name, st in PL.attention_expression_stats(res.scores, ds.values[idx]).items():
            stats.append({"label": lab, "stat": name, **st})
    PL.write_csv(out / "attention.csv", rows)
    PL.write_csv(out / "attention_stats.csv", stats, ("label", "stat", "pearson", "spearman"))
    return EXIT_OK


def cmd_embed(cfg, args, out: Path) -> int:
    model, genes = _load_model(args, out)
    ds = load_dataset(cfg, out, gene_order=genes)
    test = ds.splits["test"]
    V = ds.values[test]
    G = np.broadcast_to(np.arange(V.shape[1]), V.shape)
    E = model.embed(G, V)
    cols = ["sample_id"] + [f"e{j}" for j in range(E.shape[1])]
    PL.write_csv(out / "embeddings.csv",
                 [{"sample_id": ds.sample_ids[i], **{f"e{j}": float(v) for j, v in enumerate(e)}}
                  for i, e in zip(test, E)], cols)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "classify": cmd_classify,
            "survival": cmd_survival, "impute": cmd_impute, "attention": cmd_attention,
            "embed": cmd_embed}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gexrestore", description="Gene-expression restoration experiments.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config leaf by dotted path, e.g. pretrain.lr=0.001")
        p.add_argument("--jobs", type=int, default=1, help="parallel grid cells (default 1)")
        p.add_argument("--checkpoint", help="checkpoint file (default OUT/checkpoint.bin)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "pretrain":
            p.add_argument("--resume", help="continue from this checkpoint")
            p.add_argument("--epochs", type=int, help="override pretrain.epochs")
            p.add_argument("--stop-after", type=int, help="stop after N epochs of this run")
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cfg = load_config(args.config, args.set)
        if args.out:
            cfg["output_dir"] = args.out
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        out = Path(cfg["output_dir"])
        write_resolved(cfg, out)
        return COMMANDS[args.command](cfg, args, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, P.CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (P.NumericalError, ConvergenceError, UndefinedCIndexError, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
