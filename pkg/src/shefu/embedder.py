"""Instruction tokenization, region geometry, Switching Head and input embedding."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, ParseError
from .geometry import BBox, positional_encode  # noqa: F401  (re-export)
from .tensor import Tensor, concat, dropout, embedding, layer_norm, matmul

UNK, PAD = 0, 1
UNK_TOKEN, PAD_TOKEN = "[UNK]", "[PAD]"
POS_DIM = 7

_PUNCT = re.compile(r"[^\w\s]")


class Mode(str, enum.Enum):
    TARGET = "target"
    DESTINATION = "destination"


class Vocab:
    """Token list where the line number is the id; 0 is UNK and 1 is PAD."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:2] != [UNK_TOKEN, PAD_TOKEN]:
            tokens = [UNK_TOKEN, PAD_TOKEN] + [t for t in tokens if t not in (UNK_TOKEN, PAD_TOKEN)]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ContractError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        for i, line in enumerate(lines):
            if not line or line != line.strip():
                raise ParseError(f"invalid vocabulary entry {line!r}", line=i)
        if lines[:2] != [UNK_TOKEN, PAD_TOKEN]:
            raise ParseError(f"vocabulary must start with {UNK_TOKEN} and {PAD_TOKEN}", line=0)
        return cls(lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray  # (D_l,) int64, PAD-filled
    mask: np.ndarray  # (D_l,) bool, true on real tokens

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.ids.shape[0])


def normalize_text(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def tokenize(instruction: str, vocab: Vocab, max_len: int) -> TokenSequence:
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    words = normalize_text(instruction)[:max_len]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[: len(words)] = [vocab.index.get(w, UNK) for w in words]
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(words)] = True
    return TokenSequence(ids, mask)


def detokenize(tokens: TokenSequence, vocab: Vocab) -> str:
    return " ".join(vocab.tokens[i] for i in tokens.ids[tokens.mask])


def switching_head(x_targ: np.ndarray, x_dest: np.ndarray, mode: Mode) -> tuple[np.ndarray, np.ndarray]:
    """Zero-fill the candidate the current mode does not predict.

    Inputs are region vectors (visual features concatenated with geometry),
    optionally batched along the leading axis.
    """
    if Mode(mode) is Mode.TARGET:
        return x_targ, np.zeros_like(x_dest)
    return np.zeros_like(x_targ), x_dest


def duplicate_head(x_targ: np.ndarray, x_dest: np.ndarray, mode: Mode) -> tuple[np.ndarray, np.ndarray]:
    """Ablation input: feed the mode's candidate into both slots."""
    if Mode(mode) is Mode.TARGET:
        return x_targ, x_targ
    return x_dest, x_dest


def init_embedder(rng: np.random.Generator, region_dim: int, vocab_size: int, max_len: int, d_model: int) -> dict[str, np.ndarray]:
    params = {}
    for slot in ("targ", "dest", "det"):
        params[f"emb.{slot}.w"] = rng.normal(0.0, 1.0 / np.sqrt(region_dim), (region_dim, d_model))
        params[f"emb.{slot}.b"] = np.zeros(d_model)
        params[f"emb.{slot}.ln.g"] = np.ones(d_model)
        params[f"emb.{slot}.ln.b"] = np.zeros(d_model)
    params["emb.tok"] = rng.normal(0.0, 1.0, (vocab_size, d_model))
    params["emb.pos"] = rng.normal(0.0, 0.1, (max_len, d_model))
    params["emb.txt.ln.g"] = np.ones(d_model)
    params["emb.txt.ln.b"] = np.zeros(d_model)
    return params


def _region(params: Mapping[str, Tensor], slot: str, x: np.ndarray) -> Tensor:
    p = f"emb.{slot}"
    h = matmul(Tensor(x, dtype=params[f"{p}.w"].dtype), params[f"{p}.w"]) + params[f"{p}.b"]
    return layer_norm(h, params[f"{p}.ln.g"], params[f"{p}.ln.b"])


def embed(
    params: Mapping[str, Tensor],
    x_targ: np.ndarray,
    x_dest: np.ndarray,
    context: np.ndarray,
    context_mask: np.ndarray,
    token_ids: np.ndarray,
    token_mask: np.ndarray,
    *,
    p_drop: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Build the fused input sequence and its validity mask.

    Shapes: x_targ, x_dest (B, R); context (B, K, R); context_mask (B, K);
    token_ids, token_mask (B, D_l), where R = D_f + 7. The output sequence is
    ordered [target, destination, context_1..K, tokens_1..D_l].
    """
    r = params["emb.targ.w"].shape[0]
    b = x_targ.shape[0]
    if x_targ.shape != (b, r) or x_dest.shape != (b, r) or context.ndim != 3 or context.shape[0] != b or context.shape[2] != r:
        raise ContractError(f"region inputs must have width {r}: {x_targ.shape}, {x_dest.shape}, {context.shape}")
    if token_ids.shape != token_mask.shape or token_ids.shape[0] != b:
        raise ContractError("token ids and mask must be (B, D_l)")
    if token_ids.shape[1] != params["emb.pos"].shape[0]:
        raise ContractError(f"expected {params['emb.pos'].shape[0]} token slots, got {token_ids.shape[1]}")
    if context_mask.shape != context.shape[:2]:
        raise ContractError("context mask must be (B, K)")

    def drop(t: Tensor) -> Tensor:
        return dropout(t, p_drop, rng, training)

    h_targ = drop(_region(params, "targ", x_targ[:, None, :]))
    h_dest = drop(_region(params, "dest", x_dest[:, None, :]))
    h_det = drop(_region(params, "det", context))
    h_txt = embedding(params["emb.tok"], token_ids) + params["emb.pos"]
    h_txt = drop(layer_norm(h_txt, params["emb.txt.ln.g"], params["emb.txt.ln.b"]))

    h = concat([h_targ, h_dest, h_det, h_txt], axis=1)
    always = np.ones((b, 2), dtype=bool)
    mask = np.concatenate([always, context_mask.astype(bool), token_mask.astype(bool)], axis=1)
    return h, mask
