"""Pair selection over candidate sets: factorized M+N scoring, the M×N
brute-force oracle, and a wall-clock comparison of the two."""
from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import RegionFeature
from .embedder import Mode, TokenSequence, Vocab, tokenize
from .errors import ContractError
from .geometry import BBox
from .heads import binarize
from .model import Model, ModelInputs

CHUNK = 256


@dataclass
class SceneQuery:
    tokens: TokenSequence
    targets: list[RegionFeature]
    destinations: list[RegionFeature]
    context: list[RegionFeature] = field(default_factory=list)
    instruction: str = ""

    def __post_init__(self):
        if not self.targets or not self.destinations:
            raise ContractError("a query needs at least one target and one destination candidate")

    @classmethod
    def from_text(cls, instruction: str, targets, destinations, context, vocab: Vocab, max_tokens: int) -> SceneQuery:
        return cls(tokenize(instruction, vocab, max_tokens), list(targets), list(destinations), list(context), instruction)

    @property
    def M(self) -> int:
        return len(self.targets)

    @property
    def N(self) -> int:
        return len(self.destinations)


@dataclass
class PairDecision:
    p_targ: np.ndarray
    p_dest: np.ndarray
    y_targ: np.ndarray
    y_dest: np.ndarray
    pair: tuple[int, int]
    forward_passes: int
    pair_evaluations: int
    confident: bool

    def to_json(self) -> dict:
        return {
            "p_targ": [float(x) for x in self.p_targ],
            "p_dest": [float(x) for x in self.p_dest],
            "y_targ": [bool(x) for x in self.y_targ],
            "y_dest": [bool(x) for x in self.y_dest],
            "pair": list(self.pair),
            "forward_passes": self.forward_passes,
            "pair_evaluations": self.pair_evaluations,
            "confident": self.confident,
        }


class _Prepared:
    """Query arrays shaped for the model: candidate vectors and shared context."""

    def __init__(self, model: Model, query: SceneQuery):
        cfg = model.cfg
        k = cfg.max_regions
        if query.tokens.ids.shape[0] != cfg.max_tokens:
            raise ContractError(f"query has {query.tokens.ids.shape[0]} token slots; model expects {cfg.max_tokens}")
        self.targets = np.stack([r.vector() for r in query.targets])
        self.dests = np.stack([r.vector() for r in query.destinations])
        if self.targets.shape[1] != cfg.region_dim:
            raise ContractError(f"candidate features have width {self.targets.shape[1] - 7}; model expects {cfg.feature_dim}")
        self.ctx = np.zeros((1, k, cfg.region_dim), dtype=np.float32)
        self.ctx_mask = np.zeros((1, k), dtype=bool)
        for j, r in enumerate(query.context[:k]):
            self.ctx[0, j] = r.vector()
            self.ctx_mask[0, j] = True
        self.tok = query.tokens.ids[None, :]
        self.tok_mask = query.tokens.mask[None, :]

    def inputs(self, targ: np.ndarray, dest: np.ndarray) -> ModelInputs:
        b = targ.shape[0]
        return ModelInputs(
            targ, dest,
            np.broadcast_to(self.ctx, (b,) + self.ctx.shape[1:]),
            np.broadcast_to(self.ctx_mask, (b,) + self.ctx_mask.shape[1:]),
            np.broadcast_to(self.tok, (b,) + self.tok.shape[1:]),
            np.broadcast_to(self.tok_mask, (b,) + self.tok_mask.shape[1:]),
        )


def _run_chunks(model: Model, jobs: list, workers: int) -> list[np.ndarray]:
    def run(job):
        inputs, mode = job
        return model.probabilities(inputs, mode)

    if workers <= 1:
        return [run(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, jobs))


def _argmax(x: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(x))


def score_candidates(model: Model, query: SceneQuery, *, chunk: int = CHUNK, workers: int = 1) -> PairDecision:
    """Score M targets in target mode and N destinations in destination mode.

    The unused slot of each pass is filled with zeros; the Switching Head
    discards it anyway. ``forward_passes`` is read from the model's counter.
    """
    if not model.cfg.variant.factorized:
        raise ContractError("factorized scoring needs a model with separate target and destination modes")
    prep = _Prepared(model, query)
    jobs = []
    for lo in range(0, query.M, chunk):
        t = prep.targets[lo : lo + chunk]
        jobs.append((prep.inputs(t, np.zeros_like(t)), Mode.TARGET))
    n_targ_jobs = len(jobs)
    for lo in range(0, query.N, chunk):
        d = prep.dests[lo : lo + chunk]
        jobs.append((prep.inputs(np.zeros_like(d), d), Mode.DESTINATION))
    before = model.passes
    results = _run_chunks(model, jobs, workers)
    passes = model.passes - before
    p_targ = np.concatenate(results[:n_targ_jobs])
    p_dest = np.concatenate(results[n_targ_jobs:])
    y_targ, y_dest = np.atleast_1d(binarize(p_targ)), np.atleast_1d(binarize(p_dest))
    pair = (_argmax(p_targ), _argmax(p_dest))
    return PairDecision(p_targ, p_dest, y_targ, y_dest, pair, passes, 0, bool(y_targ.any() and y_dest.any()))


def brute_force_pairs(model: Model, query: SceneQuery, *, chunk: int = CHUNK, workers: int = 1) -> PairDecision:
    """Evaluate every (target, destination) pair.

    Factorized models run both modes on each pair (2·M·N passes) and score the
    pair by p_targ·p_dest; the paired baseline runs one joint pass per pair.
    Per-candidate probabilities are read from the first partner of each
    candidate.
    """
    prep = _Prepared(model, query)
    m, n = query.M, query.N
    ii, jj = np.divmod(np.arange(m * n), n)
    modes = (Mode.TARGET, Mode.DESTINATION) if model.cfg.variant.factorized else (None,)
    jobs, sizes = [], []
    for lo in range(0, m * n, chunk):
        i, j = ii[lo : lo + chunk], jj[lo : lo + chunk]
        inputs = prep.inputs(prep.targets[i], prep.dests[j])
        for mode in modes:
            jobs.append((inputs, mode))
        sizes.append(len(i))
    before = model.passes
    results = _run_chunks(model, jobs, workers)
    passes = model.passes - before
    pair_evals = int(sum(sizes))
    per_mode = [np.concatenate(results[k :: len(modes)]).reshape(m, n) for k in range(len(modes))]
    if len(modes) == 2:
        p_t, p_d = per_mode
        score = p_t.astype(np.float64) * p_d.astype(np.float64)
        p_targ, p_dest = p_t[:, 0], p_d[0, :]
    else:
        score = per_mode[0].astype(np.float64)
        p_targ, p_dest = score.max(axis=1).astype(np.float32), score.max(axis=0).astype(np.float32)
    flat = _argmax(score.reshape(-1))
    pair = (flat // n, flat % n)
    y_targ, y_dest = np.atleast_1d(binarize(p_targ)), np.atleast_1d(binarize(p_dest))
    confident = bool(binarize(score[pair])) if len(modes) == 1 else bool(y_targ[pair[0]] and y_dest[pair[1]])
    return PairDecision(p_targ, p_dest, y_targ, y_dest, pair, passes, pair_evals, confident)


def random_query(model: Model, M: int, N: int, rng: np.random.Generator) -> SceneQuery:
    """Query with Gaussian features, random boxes and random in-vocabulary tokens."""
    cfg = model.cfg
    if M < 1 or N < 1:
        raise ContractError("M and N must be >= 1")

    def region(rid: int) -> RegionFeature:
        x1, y1 = rng.uniform(0, 500), rng.uniform(0, 380)
        w, h = rng.uniform(20, 640 - x1), rng.uniform(20, 480 - y1)
        box = BBox(round(x1, 1), round(y1, 1), round(min(640.0, x1 + w), 1), round(min(480.0, y1 + h), 1), 640.0, 480.0)
        return RegionFeature(rid, rng.normal(0, 1, cfg.feature_dim).astype(np.float32), box)

    n_tok = int(rng.integers(1, cfg.max_tokens + 1))
    ids = np.full(cfg.max_tokens, 1, dtype=np.int64)
    ids[:n_tok] = rng.integers(2, cfg.vocab_size, n_tok) if cfg.vocab_size > 2 else 0
    mask = np.arange(cfg.max_tokens) < n_tok
    n_ctx = int(rng.integers(0, cfg.max_regions + 1))
    return SceneQuery(
        TokenSequence(ids, mask),
        [region(i) for i in range(M)],
        [region(M + i) for i in range(N)],
        [region(M + N + i) for i in range(n_ctx)],
    )


def benchmark(model: Model, M: int, N: int, repeats: int = 3, seed: int = 0, *, chunk: int = CHUNK) -> dict:
    """Median wall-clock of factorized scoring vs brute force on one random query."""
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    query = random_query(model, M, N, np.random.default_rng(seed))
    fact_ms, brute_ms = [], []
    fact = brute = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        fact = score_candidates(model, query, chunk=chunk)
        t1 = time.perf_counter()
        brute = brute_force_pairs(model, query, chunk=chunk)
        t2 = time.perf_counter()
        fact_ms.append((t1 - t0) * 1e3)
        brute_ms.append((t2 - t1) * 1e3)
    if fact.forward_passes != M + N or brute.pair_evaluations != M * N:
        raise AssertionError(f"pass counters disagree with M={M}, N={N}: {fact.forward_passes}, {brute.pair_evaluations}")
    f_med, b_med = statistics.median(fact_ms), statistics.median(brute_ms)
    return {
        "M": M,
        "N": N,
        "factorized_passes": fact.forward_passes,
        "brute_pairs": brute.pair_evaluations,
        "brute_forward_passes": brute.forward_passes,
        "factorized_ms_median": f_med,
        "brute_ms_median": b_med,
        "speedup": b_med / f_med,
        "repeats": repeats,
        "seed": seed,
        "pairs_agree": fact.pair == brute.pair,
    }


def same_pair(queries: Sequence[SceneQuery], model: Model) -> int:
    """How many queries select the same pair under both procedures."""
    return sum(score_candidates(model, q).pair == brute_force_pairs(model, q).pair for q in queries)
