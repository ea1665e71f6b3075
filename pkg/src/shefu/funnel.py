"""Funnel encoder: self-attention layers that max-pool their input after layer 1.

Each layer after the first halves the sequence (pairwise max over positions,
with the validity mask OR-pooled) and halves the head count, clamped at one
head. Query, key and value are all projected from the pooled input, and the
pooled input is the residual branch, so no up-sampling is needed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, PoolingUnderflowError
from .tensor import Tensor, dropout, gelu, layer_norm, matmul, mul, pool_mask, seq_max_pool, softmax

MASK_BIAS = -1e9


@dataclass(frozen=True)
class FunnelConfig:
    layers: int = 2
    d_model: int = 768
    heads: int = 12
    ffn_mult: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.d_model < 1:
            raise ConfigError("layers, heads and d_model must be >= 1")
        for a in head_schedule(self.layers, self.heads):
            if self.d_model % a:
                raise ConfigError(f"d_model={self.d_model} is not divisible by {a} heads")


def head_schedule(layers: int, heads: int) -> list[int]:
    out = [heads]
    for _ in range(layers - 1):
        out.append(max(1, out[-1] // 2))
    return out


def halving_schedule(layers: int, seq_len: int, heads: int) -> list[tuple[int, int]]:
    """(sequence length, heads) realized at each layer."""
    if layers < 1 or heads < 1:
        raise ConfigError("layers and heads must be >= 1")
    lengths = [seq_len]
    for _ in range(layers - 1):
        if lengths[-1] < 2:
            raise ConfigError(f"sequence of length {seq_len} underflows over {layers} layers")
        lengths.append(lengths[-1] // 2)
    if lengths[-1] < 1:
        raise ConfigError(f"sequence of length {seq_len} underflows over {layers} layers")
    return list(zip(lengths, head_schedule(layers, heads)))


def init_funnel(rng: np.random.Generator, cfg: FunnelConfig) -> dict[str, np.ndarray]:
    d, f = cfg.d_model, cfg.ffn_mult * cfg.d_model
    params = {}
    for layer in range(cfg.layers):
        p = f"enc.{layer}"
        for name in ("q", "k", "v", "o"):
            params[f"{p}.{name}.w"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
            params[f"{p}.{name}.b"] = np.zeros(d)
        params[f"{p}.ffn1.w"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, f))
        params[f"{p}.ffn1.b"] = np.zeros(f)
        params[f"{p}.ffn2.w"] = rng.normal(0.0, 1.0 / np.sqrt(f), (f, d))
        params[f"{p}.ffn2.b"] = np.zeros(d)
        for ln in ("ln1", "ln2"):
            params[f"{p}.{ln}.g"] = np.ones(d)
            params[f"{p}.{ln}.b"] = np.zeros(d)
    return params


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def attention_layer(
    h: Tensor,
    mask: np.ndarray,
    params: Mapping[str, Tensor],
    prefix: str,
    heads: int,
    *,
    pool: bool,
    p_drop: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray]:
    # invalid rows are zeroed so padded content never reaches valid outputs
    h = mul(h, mask[..., None].astype(h.dtype))
    if pool:
        if h.shape[1] < 2:
            raise PoolingUnderflowError(f"cannot pool a sequence of length {h.shape[1]}")
        h = seq_max_pool(h)
        mask = pool_mask(mask)
    b, s, d = h.shape

    def proj(x: Tensor, name: str) -> Tensor:
        return matmul(x, params[f"{prefix}.{name}.w"]) + params[f"{prefix}.{name}.b"]

    q = _split_heads(proj(h, "q"), heads)
    k = _split_heads(proj(h, "k"), heads)
    v = _split_heads(proj(h, "v"), heads)
    scale = 1.0 / np.sqrt(d // heads)
    bias = np.where(mask, 0.0, MASK_BIAS).astype(h.dtype)[:, None, None, :]
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * scale + bias
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, s, d)
    out = dropout(proj(ctx, "o"), p_drop, rng, training)
    h = layer_norm(h + out, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    ff = matmul(gelu(proj(h, "ffn1")), params[f"{prefix}.ffn2.w"]) + params[f"{prefix}.ffn2.b"]
    ff = dropout(ff, p_drop, rng, training)
    h = layer_norm(h + ff, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return h, mask


def encode(
    h: Tensor,
    mask: np.ndarray,
    cfg: FunnelConfig,
    params: Mapping[str, Tensor],
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Run all layers; ``trace`` (if given) receives the realized (length, heads) per layer."""
    schedule = halving_schedule(cfg.layers, h.shape[1], cfg.heads)
    for layer, (_, heads) in enumerate(schedule):
        h, mask = attention_layer(
            h, mask, params, f"enc.{layer}", heads,
            pool=layer > 0, p_drop=cfg.dropout, training=training, rng=rng,
        )
        if trace is not None:
            trace.append((h.shape[1], heads))
    return h, mask
