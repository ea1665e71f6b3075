"""Seeded training with summed target/destination losses, validation-based
checkpoint selection, and joint-label evaluation."""
from __future__ import annotations

import csv
import hashlib
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import Dataset, Sample, encode_samples
from .embedder import Mode, Vocab
from .errors import ContractError, DivergenceError, NumericInputError
from .heads import DESTINATION_WEIGHTS, TARGET_WEIGHTS, binarize, combine, cross_entropy, loss
from .model import Model, ModelConfig, ModelInputs, Variant, as_tensors, checkpoint_bytes, config_hash, forward, init_params
from .optim import AdamState, adam_step
from .tensor import Tape

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    eval_every: int = 2000
    batch_size: int = 8
    lr: float = 8e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.eval_every < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ContractError(f"invalid training config: {self}")


@dataclass
class RunReport:
    variant: str
    seed: int
    config_hash: str
    curve: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_val_accuracy: float = 0.0
    test_accuracy: float | None = None
    checksum: str = ""

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Encoded:
    inputs: ModelInputs
    y_targ: np.ndarray
    y_dest: np.ndarray

    @property
    def y(self) -> np.ndarray:
        return self.y_targ & self.y_dest

    def __len__(self) -> int:
        return len(self.inputs)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], vocab: Vocab, cfg: ModelConfig) -> Encoded:
        return cls(*encode_samples(samples, vocab, cfg.max_regions, cfg.max_tokens))


def build_variant(variant: Variant | str, dims: ModelConfig | Mapping, seed: int = 0) -> Model:
    """Freshly initialized model of the requested variant."""
    if isinstance(dims, ModelConfig):
        cfg = replace(dims, variant=Variant(variant))
    else:
        cfg = ModelConfig(**{**dict(dims), "variant": Variant(variant)})
    return Model(cfg, init_params(cfg, seed))


def model_config_for(ds: Dataset, **dims) -> ModelConfig:
    return ModelConfig(
        feature_dim=ds.feature_dim,
        max_regions=ds.max_regions,
        max_tokens=int(ds.config.get("max_tokens", ModelConfig.max_tokens)),
        vocab_size=len(ds.vocab),
        **dims,
    )


# objective ---------------------------------------------------------------------

def batch_loss(params, cfg: ModelConfig, batch: Encoded, *, modes: Sequence[Mode] | None = None,
               training: bool = False, rng: np.random.Generator | None = None):
    """Summed loss over the requested modes (both by default) for one batch.

    Factorized variants put λ=(1,0) on the target-mode slice and λ=(0,1) on the
    destination-mode slice; the paired baseline is trained on the joint label.
    """
    if not cfg.variant.factorized:
        (dist,) = forward(params, cfg, batch.inputs, [None], training=training, rng=rng)
        return cross_entropy(batch.y, dist)
    modes = list(modes or (Mode.TARGET, Mode.DESTINATION))
    dists = forward(params, cfg, batch.inputs, modes, training=training, rng=rng)
    total = None
    for mode, dist in zip(modes, dists):
        if mode is Mode.TARGET:
            term = loss(batch.y_targ, dist, None, None, TARGET_WEIGHTS)
        else:
            term = loss(None, None, batch.y_dest, dist, DESTINATION_WEIGHTS)
        total = term if total is None else total + term
    return total


def train_step(params: dict[str, np.ndarray], cfg: ModelConfig, batch: Encoded, state: AdamState, *,
               modes: Sequence[Mode] | None = None, rng: np.random.Generator | None = None, training: bool = True) -> float:
    """One optimizer step. Parameters the loss never reads are left out of the
    update, so their Adam moments stay untouched."""
    with Tape() as tape:
        pt = as_tensors(params, requires_grad=True)
        try:
            value = batch_loss(pt, cfg, batch, modes=modes, training=training, rng=rng)
        except NumericInputError as exc:
            raise DivergenceError(f"non-finite values at step {state.step + 1}: {exc}") from exc
    lv = value.item()
    if not np.isfinite(lv):
        raise DivergenceError(f"loss became {lv} at step {state.step + 1}")
    names = list(pt)
    touched = tape.touched(pt[n] for n in names)
    grads = tape.backward(value, {n: pt[n] for n, t in zip(names, touched) if t})
    adam_step(params, grads, state)
    return lv


# evaluation ---------------------------------------------------------------------

def predict_labels(model: Model, inputs: ModelInputs) -> dict[str, np.ndarray]:
    """Per-sample probabilities and binarized labels under the joint rule."""
    out: dict[str, list] = {}
    for lo in range(0, len(inputs), EVAL_CHUNK):
        part = inputs.take(slice(lo, lo + EVAL_CHUNK))
        if model.cfg.variant.factorized:
            p_t = model.probabilities(part, Mode.TARGET)
            p_d = model.probabilities(part, Mode.DESTINATION)
            y_t, y_d = binarize(p_t), binarize(p_d)
            cols = {"p_targ": p_t, "p_dest": p_d, "y_targ": y_t, "y_dest": y_d, "y": combine(y_t, y_d)}
        else:
            p = model.probabilities(part, None)
            cols = {"p": p, "y": binarize(p)}
        for k, v in cols.items():
            out.setdefault(k, []).append(np.atleast_1d(v))
    return {k: np.concatenate(v) for k, v in out.items()}


def joint_accuracy(predicted: np.ndarray, truth: np.ndarray) -> float:
    predicted, truth = np.asarray(predicted, bool), np.asarray(truth, bool)
    if truth.size == 0:
        raise ContractError("accuracy of an empty set")
    return float(np.mean(predicted == truth))


def evaluate_encoded(model: Model, data: Encoded) -> float:
    if len(data) == 0:
        raise ContractError("cannot evaluate an empty split")
    return joint_accuracy(predict_labels(model, data.inputs)["y"], data.y)


def evaluate(model: Model, samples: Sequence[Sample], vocab: Vocab) -> float:
    """Accuracy against the joint label y = y_targ AND y_dest."""
    if not samples:
        raise ContractError("cannot evaluate an empty split")
    return evaluate_encoded(model, Encoded.from_samples(samples, vocab, model.cfg))


def split_loss(model: Model, data: Encoded) -> float:
    total, n = 0.0, 0
    for lo in range(0, len(data), EVAL_CHUNK):
        idx = slice(lo, lo + EVAL_CHUNK)
        part = Encoded(data.inputs.take(idx), data.y_targ[idx], data.y_dest[idx])
        total += batch_loss(model._frozen, model.cfg, part).item() * len(part)
        n += len(part)
    return total / n


# training loop ------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    report: RunReport
    run_config: dict = field(default_factory=dict)


def params_checksum(cfg: ModelConfig, params: Mapping[str, np.ndarray], run_config: Mapping | None = None) -> str:
    """sha256 of the checkpoint file these parameters would be saved as."""
    return hashlib.sha256(checkpoint_bytes(cfg, params, run_config)).hexdigest()


def train(
    config: TrainConfig,
    dataset: Dataset,
    variant: Variant | str = Variant.SHEFU,
    dims: Mapping | None = None,
    *,
    run_config: Mapping | None = None,
) -> TrainResult:
    """Train one variant and return the best-validation checkpoint.

    Validation runs every ``eval_every`` steps; the earliest step with the
    highest validation accuracy wins. Test accuracy (when a test split exists)
    is measured at that step only.
    """
    if config.steps % config.eval_every:
        warnings.warn(f"steps={config.steps} is not a multiple of eval_every={config.eval_every}", stacklevel=2)
    if "train" not in dataset.splits or "val" not in dataset.splits:
        raise ContractError("training needs train and val splits")
    cfg = model_config_for(dataset, **{**dict(dims or {}), "variant": Variant(variant)})
    train_data = Encoded.from_samples(dataset.splits["train"], dataset.vocab, cfg)
    val_data = Encoded.from_samples(dataset.splits["val"], dataset.vocab, cfg)

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    batch_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])
    params = init_params(cfg, config.seed)
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    # the hash covers exactly what the checkpoint header stores
    run = {**dict(run_config or {}), "train": asdict(config)}
    report = RunReport(variant=cfg.variant.value, seed=config.seed,
                       config_hash=config_hash({"model": cfg.to_json(), "run": run}))

    best_acc, best_params = -1.0, None
    order = batch_rng.permutation(len(train_data))
    cursor = 0
    for step in range(1, config.steps + 1):
        if cursor + config.batch_size > len(order):
            order = batch_rng.permutation(len(train_data))
            cursor = 0
        idx = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size
        batch = Encoded(train_data.inputs.take(idx), train_data.y_targ[idx], train_data.y_dest[idx])
        train_step(params, cfg, batch, state, rng=drop_rng)

        if step % config.eval_every == 0:
            model = Model(cfg, params)
            acc = evaluate_encoded(model, val_data)
            vloss = split_loss(model, val_data)
            report.curve.append({"step": step, "split": "val", "accuracy": acc, "loss": vloss})
            log.info("step %d val accuracy %.4f loss %.4f", step, acc, vloss)
            if acc > best_acc:
                best_acc, best_params = acc, {k: v.copy() for k, v in params.items()}
                report.best_step, report.best_val_accuracy = step, acc
    if best_params is None:
        # fewer steps than one evaluation interval: the last state is the only checkpoint
        model = Model(cfg, params)
        acc = evaluate_encoded(model, val_data)
        report.curve.append({"step": config.steps, "split": "val", "accuracy": acc, "loss": split_loss(model, val_data)})
        best_params, report.best_step, report.best_val_accuracy = params, config.steps, acc

    best = Model(cfg, best_params, meta={"config_hash": report.config_hash})
    test = dataset.splits.get("test")
    if test:
        test_data = Encoded.from_samples(test, dataset.vocab, cfg)
        report.test_accuracy = evaluate_encoded(best, test_data)
        report.curve.append({"step": report.best_step, "split": "test", "accuracy": report.test_accuracy,
                             "loss": split_loss(best, test_data)})
    report.checksum = params_checksum(cfg, best_params, run)
    return TrainResult(best, report, run)


def best_from_curve(curve: Sequence[Mapping]) -> int:
    """Earliest step with the maximal validation accuracy."""
    val = [r for r in curve if r["split"] == "val"]
    if not val:
        raise ContractError("curve has no validation rows")
    top = max(r["accuracy"] for r in val)
    return min(r["step"] for r in val if r["accuracy"] == top)


def write_metrics(path: str | Path, curve: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "split", "accuracy", "loss"])
        for r in curve:
            w.writerow([r["step"], r["split"], repr(float(r["accuracy"])), repr(float(r["loss"]))])
