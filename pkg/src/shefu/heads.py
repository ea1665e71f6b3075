"""Switching Tail: mode-selected output heads, binarization and the masked loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor, clip, log, matmul, mul, softmax

PROB_FLOOR = 1e-7
THRESHOLD = 0.5


@dataclass(frozen=True)
class TaskWeights:
    targ: float
    dest: float

    def __post_init__(self):
        if self.targ < 0 or self.dest < 0:
            raise ContractError("task weights must be nonnegative")


TARGET_WEIGHTS = TaskWeights(1.0, 0.0)
DESTINATION_WEIGHTS = TaskWeights(0.0, 1.0)


def init_head(rng: np.random.Generator, name: str, in_dim: int) -> dict[str, np.ndarray]:
    return {
        f"head.{name}.w": rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, 2)),
        f"head.{name}.b": np.zeros(2),
    }


def predict(h_out: Tensor, params: Mapping[str, Tensor], head: str) -> Tensor:
    """Two-class distribution (B, 2) from the flattened encoder output.

    Column 1 is the probability that the candidate matches. Only the named
    head's weights are read.
    """
    w, b = params[f"head.{head}.w"], params[f"head.{head}.b"]
    n = h_out.shape[0]
    flat = h_out.reshape(n, 1, -1)
    if flat.shape[2] != w.shape[0]:
        raise ContractError(f"head {head!r} expects {w.shape[0]} inputs, got {flat.shape[2]}")
    # one GEMM per sample keeps each row's result independent of the batch
    logits = matmul(flat, w).reshape(n, 2) + b
    return softmax(logits, axis=-1)


def binarize(p) -> np.ndarray | bool:
    """p >= 0.5; the tie goes to the positive class."""
    out = np.asarray(p) >= THRESHOLD
    return bool(out) if out.ndim == 0 else out


def combine(y_targ, y_dest):
    out = np.logical_and(y_targ, y_dest)
    return bool(out) if np.ndim(out) == 0 else out


def cross_entropy(labels: np.ndarray, dist: Tensor) -> Tensor:
    """Mean negative log-likelihood of boolean labels under (B, 2) distributions."""
    d = dist.data
    if d.ndim != 2 or d.shape[1] != 2:
        raise ContractError(f"expected (B, 2) distributions, got {d.shape}")
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if labels.shape[0] != d.shape[0]:
        raise ContractError("label count does not match distribution count")
    if (d < 0).any() or (d > 1).any() or not np.allclose(d.sum(axis=1), 1.0, atol=1e-4):
        raise ContractError("invalid probability distribution")
    onehot = np.zeros(d.shape, dtype=d.dtype)
    onehot[np.arange(d.shape[0]), labels.astype(int)] = 1.0
    picked = mul(clip(dist, PROB_FLOOR, 1.0 - PROB_FLOOR), onehot).sum(axis=1)
    return log(picked).mean() * -1.0


def loss(
    y_targ: np.ndarray | None,
    p_targ: Tensor | None,
    y_dest: np.ndarray | None,
    p_dest: Tensor | None,
    weights: TaskWeights,
) -> Tensor:
    """λ_targ·CE(target) + λ_dest·CE(destination); zero-weight terms are never built."""
    total: Tensor | None = None
    for w, y, p in ((weights.targ, y_targ, p_targ), (weights.dest, y_dest, p_dest)):
        if w == 0:
            continue
        if p is None or y is None:
            raise ContractError("a weighted task needs labels and a distribution")
        term = cross_entropy(y, p) * w
        total = term if total is None else total + term
    if total is None:
        dtype = next((p.dtype for p in (p_targ, p_dest) if p is not None), np.float32)
        return Tensor(np.zeros((), dtype=dtype))
    return total
