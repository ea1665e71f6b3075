"""Model assembly: variants, parameter init, batched forward and checkpoints."""
from __future__ import annotations

import enum
import hashlib
import io
import json
import struct
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .embedder import POS_DIM, Mode, duplicate_head, embed, init_embedder, switching_head
from .errors import ArtifactMismatchError, ConfigError, SchemaError
from .funnel import FunnelConfig, encode, halving_schedule, init_funnel
from .heads import init_head, predict
from .tensor import Tensor, mul

CKPT_MAGIC = b"SHFUCKPT"
CKPT_VERSION = 1


class Variant(str, enum.Enum):
    SHEFU = "shefu"
    NO_SWITCHING_HEAD = "no_switching_head"
    NO_SWITCHING_TAIL = "no_switching_tail"
    PAIRED_BASELINE = "paired_baseline"

    @property
    def factorized(self) -> bool:
        return self is not Variant.PAIRED_BASELINE

    @property
    def heads(self) -> tuple[str, ...]:
        if self is Variant.NO_SWITCHING_TAIL:
            return ("shared",)
        if self is Variant.PAIRED_BASELINE:
            return ("joint",)
        return ("targ", "dest")

    def head_for(self, mode: Mode | None) -> str:
        if self is Variant.NO_SWITCHING_TAIL:
            return "shared"
        if self is Variant.PAIRED_BASELINE:
            return "joint"
        return "targ" if Mode(mode) is Mode.TARGET else "dest"


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 64
    max_regions: int = 10
    max_tokens: int = 16
    vocab_size: int = 646
    d_model: int = 32
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    dropout: float = 0.1
    variant: Variant = Variant.SHEFU

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if min(self.feature_dim, self.max_tokens, self.vocab_size, self.d_model) < 1 or self.max_regions < 0:
            raise ConfigError(f"invalid model dimensions: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        self.funnel  # validates head divisibility
        halving_schedule(self.layers, self.seq_len, self.heads)

    @property
    def region_dim(self) -> int:
        return self.feature_dim + POS_DIM

    @property
    def seq_len(self) -> int:
        return self.max_regions + self.max_tokens + 2

    @property
    def out_len(self) -> int:
        return halving_schedule(self.layers, self.seq_len, self.heads)[-1][0]

    @property
    def funnel(self) -> FunnelConfig:
        return FunnelConfig(self.layers, self.d_model, self.heads, self.ffn_mult, self.dropout)

    def to_json(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> ModelConfig:
        return cls(**d)


@dataclass
class ModelInputs:
    """A batch of candidate regions, context and tokens (numpy arrays).

    Region vectors are visual features concatenated with the 7-d geometry.
    """

    targ: np.ndarray  # (B, R)
    dest: np.ndarray  # (B, R)
    context: np.ndarray  # (B, K, R)
    context_mask: np.ndarray  # (B, K)
    tokens: np.ndarray  # (B, D_l)
    token_mask: np.ndarray  # (B, D_l)

    def __len__(self) -> int:
        return self.targ.shape[0]

    def take(self, idx) -> ModelInputs:
        return ModelInputs(*(a[idx] for a in self._arrays()))

    def _arrays(self):
        return (self.targ, self.dest, self.context, self.context_mask, self.tokens, self.token_mask)

    @staticmethod
    def concat(parts: Sequence[ModelInputs]) -> ModelInputs:
        return ModelInputs(*(np.concatenate(cols, axis=0) for cols in zip(*(p._arrays() for p in parts))))


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = init_embedder(rng, cfg.region_dim, cfg.vocab_size, cfg.max_tokens, cfg.d_model)
    params.update(init_funnel(rng, cfg.funnel))
    for name in cfg.variant.heads:
        params.update(init_head(rng, name, cfg.out_len * cfg.d_model))
    return {k: v.astype(np.float32) for k, v in params.items()}


def switch_inputs(cfg: ModelConfig, inputs: ModelInputs, mode: Mode | None) -> ModelInputs:
    """Apply the variant's input conditioning for one mode."""
    v = cfg.variant
    if v is Variant.PAIRED_BASELINE:
        return inputs
    fn = duplicate_head if v is Variant.NO_SWITCHING_HEAD else switching_head
    targ, dest = fn(inputs.targ, inputs.dest, mode)
    return ModelInputs(targ, dest, inputs.context, inputs.context_mask, inputs.tokens, inputs.token_mask)


def forward(
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    inputs: ModelInputs,
    modes: Sequence[Mode | None],
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> list[Tensor]:
    """One (B, 2) distribution per requested mode.

    All modes share a single trunk pass over the concatenated batch; each slice
    is then routed to its mode's head. The paired baseline ignores the mode.
    """
    switched = [switch_inputs(cfg, inputs, m) for m in modes]
    batch = switched[0] if len(switched) == 1 else ModelInputs.concat(switched)
    h, mask = embed(
        params, batch.targ, batch.dest, batch.context, batch.context_mask, batch.tokens, batch.token_mask,
        p_drop=cfg.dropout, training=training, rng=rng,
    )
    h, mask = encode(h, mask, cfg.funnel, params, training=training, rng=rng)
    h = mul(h, mask[..., None].astype(h.dtype))
    n = len(inputs)
    out = []
    for i, m in enumerate(modes):
        part = h if len(modes) == 1 else h[i * n : (i + 1) * n]
        out.append(predict(part, params, cfg.variant.head_for(m)))
    return out


def as_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


@dataclass
class Model:
    """Frozen parameters plus an instrumented forward-pass counter.

    ``probabilities`` is safe to call from several threads; each sample in a
    batch counts as one forward pass.
    """

    cfg: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._lock = threading.Lock()
        self._passes = 0
        self._frozen = as_tensors(self.params)

    @property
    def passes(self) -> int:
        return self._passes

    def reset_counter(self) -> None:
        with self._lock:
            self._passes = 0

    def probabilities(self, inputs: ModelInputs, mode: Mode | None) -> np.ndarray:
        """Positive-class probability per sample for one mode."""
        (dist,) = forward(self._frozen, self.cfg, inputs, [mode])
        with self._lock:
            self._passes += len(inputs)
        return dist.data[:, 1]

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


# checkpoints -----------------------------------------------------------------

def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def checkpoint_bytes(cfg: ModelConfig, params: Mapping[str, np.ndarray], run_config: Mapping | None = None) -> bytes:
    config = {"model": cfg.to_json(), "run": dict(run_config or {})}
    config["config_hash"] = config_hash({"model": config["model"], "run": config["run"]})
    blob = json.dumps(config, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(blob)))
    buf.write(blob)
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(path: str | Path, cfg: ModelConfig, params: Mapping[str, np.ndarray], run_config: Mapping | None = None) -> str:
    """Write a checkpoint and return its sha256."""
    data = checkpoint_bytes(cfg, params, run_config)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> Model:
    data = Path(path).read_bytes()
    view = memoryview(data)
    if data[:8] != CKPT_MAGIC:
        raise SchemaError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, n = struct.unpack_from("<II", data, 8)
        if version != CKPT_VERSION:
            raise SchemaError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        config = json.loads(bytes(view[off : off + n]))
        off += n
        params = {}
        while off < len(data):
            (ln,) = struct.unpack_from("<I", data, off)
            name = bytes(view[off + 4 : off + 4 + ln]).decode()
            off += 4 + ln
            (rank,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{rank}I", data, off + 4)
            off += 4 + 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if off + 4 * count > len(data):
                raise SchemaError(f"{path}: tensor {name!r} is truncated")
            params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
            off += 4 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path}: malformed checkpoint ({exc})") from exc
    cfg = ModelConfig.from_json(config["model"])
    expected = init_params_shapes(cfg)
    if set(expected) != set(params) or any(expected[k] != params[k].shape for k in expected):
        raise ArtifactMismatchError(f"{path}: parameters do not match the stored model config")
    return Model(cfg, params, meta=config)


def init_params_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(cfg, 0).items()}
