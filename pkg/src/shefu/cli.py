"""Command-line entry point: gen-data, train, eval, score, bench.

Configuration is a flat JSON object with dotted keys (``train.steps``,
``model.d_model`` ...). Flags override the file; the resolved config is written
next to every artifact together with its hash.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import statistics
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import bench as bench_mod
from . import dataset as ds_mod
from .embedder import Vocab
from .errors import ArtifactMismatchError, ConfigError, ContractError, DivergenceError, ParseError, SchemaError, ShefuError
from .geometry import BBox
from .model import Model, Variant, config_hash, load_checkpoint, save_checkpoint
from .train import Encoded, TrainConfig, evaluate_encoded, train, write_metrics

log = logging.getLogger("shefu")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4

_DATA_KEYS = {f.name for f in fields(ds_mod.SynthConfig)} - {"seed"}
_MODEL_KEYS = {"d_model", "layers", "heads", "ffn_mult", "dropout", "variant"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"} | {"seeds"}
_BENCH_KEYS = {"M", "N", "repeats"}
KNOWN_KEYS = (
    {"seed", "data.vocab"}
    | {f"data.{k}" for k in _DATA_KEYS}
    | {f"model.{k}" for k in _MODEL_KEYS}
    | {f"train.{k}" for k in _TRAIN_KEYS}
    | {f"bench.{k}" for k in _BENCH_KEYS}
)

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "model.d_model": 32,
    "model.layers": 2,
    "model.heads": 4,
    "model.ffn_mult": 4,
    "model.dropout": 0.1,
    "model.variant": "shefu",
    "train.seeds": 1,
    "bench.M": 100,
    "bench.N": 100,
    "bench.repeats": 3,
}


# config resolution -------------------------------------------------------------

def load_config_file(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a flat JSON object")
    unknown = sorted(set(raw) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {', '.join(unknown)}")
    return raw


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the config file, then any flag given on the command line."""
    cfg = dict(DEFAULTS)
    cfg.update(load_config_file(args.config))
    for key, value in vars(args).items():
        if key in KNOWN_KEYS and value is not None:
            cfg[key] = value
    return cfg


def section(cfg: dict[str, Any], prefix: str) -> dict[str, Any]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def synth_config(cfg: dict[str, Any]) -> ds_mod.SynthConfig:
    data = {k: v for k, v in section(cfg, "data").items() if k != "vocab"}
    try:
        return ds_mod.SynthConfig(seed=int(cfg["seed"]), **data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(cfg: dict[str, Any], seed: int) -> TrainConfig:
    t = {k: v for k, v in section(cfg, "train").items() if k != "seeds"}
    try:
        return TrainConfig(seed=seed, **t)
    except (TypeError, ContractError) as exc:
        raise ConfigError(str(exc)) from exc


def prepare_out(path: str | None, force: bool, *, required: bool = True) -> Path | None:
    if path is None:
        if required:
            raise ConfigError("--out is required")
        return None
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# commands ------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = resolve(args)
    synth = synth_config(cfg)
    vocab = None
    if cfg.get("data.vocab"):
        try:
            vocab = Vocab.load(cfg["data.vocab"])
        except FileNotFoundError as exc:
            raise ConfigError(f"vocabulary file not found: {cfg['data.vocab']}") from exc
        except ParseError as exc:
            raise ConfigError(f"{cfg['data.vocab']}: {exc}") from exc
    out = prepare_out(args.out, args.force)
    data = ds_mod.generate_synthetic(synth, vocab)
    ds_mod.save(out, data)
    sizes = {k: len(v) for k, v in data.splits.items()}
    print(json.dumps({"out": str(out), "splits": sizes, "config_hash": config_hash(data.config),
                      "checksum": ds_mod.directory_checksum(out)}, sort_keys=True))
    return EXIT_OK


def _run_config(data_dir: str, data: ds_mod.Dataset) -> dict[str, Any]:
    """The dataset a run was trained on; model and train settings are added by ``train``."""
    return {
        "data_config_hash": config_hash(data.config),
        "data_checksum": ds_mod.directory_checksum(data_dir),
    }


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve(args)
    if not args.data:
        raise ConfigError("--data is required")
    data = _load_dataset(args.data)
    dims = section(cfg, "model")
    variant = dims.pop("variant")
    n_seeds = int(cfg["train.seeds"])
    if n_seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    out = prepare_out(args.out, args.force)
    base = _run_config(args.data, data)
    reports = []
    for i in range(n_seeds):
        seed = int(cfg["seed"]) + i
        tcfg = train_config(cfg, seed)
        target = out if n_seeds == 1 else out / f"seed_{seed}"
        target.mkdir(parents=True, exist_ok=True)
        result = train(tcfg, data, variant, dims, run_config=base)
        digest = save_checkpoint(target / "checkpoint.bin", result.model.cfg, result.model.params, result.run_config)
        if digest != result.report.checksum:
            raise AssertionError("checkpoint bytes differ from the reported checksum")
        write_metrics(target / "metrics.csv", result.report.curve)
        report = {**result.report.to_json(), "run_config": {**result.run_config, "model": result.model.cfg.to_json()}}
        write_json(target / "report.json", report)
        reports.append(report)
        print(json.dumps({"seed": seed, "variant": report["variant"], "best_step": report["best_step"],
                          "best_val_accuracy": report["best_val_accuracy"], "test_accuracy": report["test_accuracy"],
                          "config_hash": report["config_hash"], "checksum": report["checksum"]}, sort_keys=True))
    if n_seeds > 1:
        accs = [r["test_accuracy"] for r in reports if r["test_accuracy"] is not None]
        agg = {
            "variant": reports[0]["variant"],
            "seeds": [r["seed"] for r in reports],
            "config_hashes": [r["config_hash"] for r in reports],
            "test_accuracy_mean": statistics.fmean(accs) if accs else None,
            "test_accuracy_std": statistics.stdev(accs) if len(accs) > 1 else 0.0,
        }
        write_json(out / "aggregate.json", agg)
        print(json.dumps(agg, sort_keys=True))
    return EXIT_OK


def _load_dataset(path: str, splits: Sequence[str] | None = None) -> ds_mod.Dataset:
    root = Path(path)
    if not (root / "features.bin").exists():
        raise ConfigError(f"{root} does not look like a dataset directory")
    try:
        return ds_mod.load(root, splits)
    except FileNotFoundError as exc:
        raise ArtifactMismatchError(f"{exc.filename}: missing dataset file") from exc


def _check_compatible(model: Model, data: ds_mod.Dataset) -> None:
    c = model.cfg
    problems = []
    if c.feature_dim != data.feature_dim:
        problems.append(f"feature_dim {c.feature_dim} vs {data.feature_dim}")
    if c.max_regions != data.max_regions:
        problems.append(f"max_regions {c.max_regions} vs {data.max_regions}")
    if c.vocab_size != len(data.vocab):
        problems.append(f"vocab_size {c.vocab_size} vs {len(data.vocab)}")
    if problems:
        raise ArtifactMismatchError("checkpoint does not match dataset: " + "; ".join(problems))


def _load_model(path: str | None) -> Model:
    if not path:
        raise ConfigError("--checkpoint is required")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args: argparse.Namespace) -> int:
    if not args.data:
        raise ConfigError("--data is required")
    model = _load_model(args.checkpoint)
    splits = args.split or ["test"]
    data = _load_dataset(args.data, splits)
    _check_compatible(model, data)
    rows = []
    for name in splits:
        samples = data.splits.get(name) or []
        if not samples:
            raise ArtifactMismatchError(f"split {name!r} is empty")
        acc = evaluate_encoded(model, Encoded.from_samples(samples, data.vocab, model.cfg))
        rows.append({"split": name, "n": len(samples), "accuracy": acc,
                     "config_hash": model.meta.get("config_hash", "")})
    for r in rows:
        print(f"{r['split']}\t{r['n']}\t{r['accuracy']!r}")
    out = prepare_out(args.out, args.force, required=False)
    if out is not None:
        write_json(out / "eval.json", rows)
    return EXIT_OK


def _region(d: dict, rid: int) -> ds_mod.RegionFeature:
    return ds_mod.RegionFeature(int(d.get("region_id", rid)), np.asarray(d["visual"], dtype=np.float32), BBox.from_json(d["bbox"]))


def _read_query(path: str, model: Model, vocab_path: str | None) -> bench_mod.SceneQuery:
    try:
        q = json.loads(Path(path).read_text())
        vocab = Vocab.load(vocab_path) if vocab_path else ds_mod.default_vocab()
        targets = [_region(r, i) for i, r in enumerate(q["targets"])]
        dests = [_region(r, 1000 + i) for i, r in enumerate(q["destinations"])]
        ctx = [_region(r, 2000 + i) for i, r in enumerate(q.get("context", []))]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ContractError) as exc:
        raise ConfigError(f"{path}: invalid query ({exc})") from exc
    if len(vocab) != model.cfg.vocab_size:
        raise ArtifactMismatchError(f"vocabulary has {len(vocab)} entries; checkpoint expects {model.cfg.vocab_size}")
    return bench_mod.SceneQuery.from_text(q["instruction"], targets, dests, ctx, vocab, model.cfg.max_tokens)


def cmd_score(args: argparse.Namespace) -> int:
    cfg = resolve(args)
    model = _load_model(args.checkpoint)
    if args.query:
        query = _read_query(args.query, model, cfg.get("data.vocab"))
    else:
        query = bench_mod.random_query(model, int(cfg["bench.M"]), int(cfg["bench.N"]), np.random.default_rng(int(cfg["seed"])))
    try:
        if model.cfg.variant.factorized and not args.brute_force:
            decision = bench_mod.score_candidates(model, query)
        else:
            decision = bench_mod.brute_force_pairs(model, query)
    except ContractError as exc:
        raise ArtifactMismatchError(str(exc)) from exc
    report = {**decision.to_json(), "config_hash": model.meta.get("config_hash", "")}
    if not decision.confident:
        log.warning("no confident pair; returning the argmax pair anyway")
    print(json.dumps(report, sort_keys=True))
    out = prepare_out(args.out, args.force, required=False)
    if out is not None:
        write_json(out / "score.json", report)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = resolve(args)
    model = _load_model(args.checkpoint)
    M, N, repeats = int(cfg["bench.M"]), int(cfg["bench.N"]), int(cfg["bench.repeats"])
    if M < 1 or N < 1 or repeats < 1:
        raise ConfigError("--M, --N and --repeats must be >= 1")
    if not model.cfg.variant.factorized:
        raise ArtifactMismatchError("benchmarking needs a factorized model")
    report = bench_mod.benchmark(model, M, N, repeats, int(cfg["seed"]))
    report["config_hash"] = model.meta.get("config_hash", "")
    print(json.dumps(report, sort_keys=True))
    out = prepare_out(args.out, args.force, required=False)
    if out is not None:
        write_json(out / "bench.json", report)
    return EXIT_OK


# parser -------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config with dotted keys")
    p.add_argument("--seed", dest="seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _sizes(text: str) -> list[int]:
    parts = [int(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated sizes")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shefu", description="Switching head/tail funnel model: data, training and scoring.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(g)
    g.add_argument("--vocab", dest="data.vocab", help="vocabulary file (one token per line)")
    g.add_argument("--n-scenes", dest="data.n_scenes", type=int)
    g.add_argument("--noise-sigma", dest="data.noise_sigma", type=float)
    g.add_argument("--feature-dim", dest="data.feature_dim", type=int)
    g.add_argument("--max-regions", dest="data.max_regions", type=int)
    g.add_argument("--max-tokens", dest="data.max_tokens", type=int)
    g.add_argument("--split-sizes", dest="data.split_sizes", type=_sizes, help="train,val,test")
    g.add_argument("--positives-per-scene", dest="data.positives_per_scene", type=int)
    g.add_argument("--negatives-per-scene", dest="data.negatives_per_scene", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant")
    _common(t)
    t.add_argument("--data", required=False, help="dataset directory")
    t.add_argument("--variant", dest="model.variant", choices=[v.value for v in Variant])
    t.add_argument("--steps", dest="train.steps", type=int)
    t.add_argument("--eval-every", dest="train.eval_every", type=int)
    t.add_argument("--batch-size", dest="train.batch_size", type=int)
    t.add_argument("--lr", dest="train.lr", type=float)
    t.add_argument("--seeds", dest="train.seeds", type=int, help="number of consecutive seeds to run")
    t.add_argument("--d-model", dest="model.d_model", type=int)
    t.add_argument("--layers", dest="model.layers", type=int)
    t.add_argument("--heads", dest="model.heads", type=int)
    t.add_argument("--dropout", dest="model.dropout", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="joint-label accuracy of a checkpoint")
    _common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--split", action="append", choices=list(ds_mod.SPLITS), help="repeat for several splits")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="pick the most likely (target, destination) pair")
    _common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--query", help="query JSON; omit to score a random query of size M x N")
    s.add_argument("--vocab", dest="data.vocab")
    s.add_argument("--M", dest="bench.M", type=int)
    s.add_argument("--N", dest="bench.N", type=int)
    s.add_argument("--brute-force", action="store_true", help="evaluate all pairs instead")
    s.set_defaults(func=cmd_score)

    b = sub.add_parser("bench", help="factorized vs brute-force timing")
    _common(b)
    b.add_argument("--checkpoint")
    b.add_argument("--M", dest="bench.M", type=int)
    b.add_argument("--N", dest="bench.N", type=int)
    b.add_argument("--repeats", dest="bench.repeats", type=int)
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ArtifactMismatchError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ConfigError, ShefuError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
