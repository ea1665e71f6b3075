"""Fetch-and-carry grounding data: synthetic generation, sampling rules and file I/O.

On disk a dataset is a directory::

    manifest.json      generation config, config hash, feature dim, split sizes
    vocab.txt          one token per line, line number = id (0 UNK, 1 PAD)
    features.bin       "SHFUFEAT", u32 version, u32 D_f, u32 count,
                       then count x (u64 region_id, D_f x f32), little-endian
    train.jsonl ...    one sample per line

Only ``vocab.txt``, ``features.bin`` and the split files are required when
loading user-supplied data.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedder import POS_DIM, Vocab, normalize_text, tokenize
from .errors import ConfigError, ContractError, ParseError, SamplingExhaustedError, SchemaError
from .geometry import BBox, iou, positional_encode
from .model import ModelInputs, config_hash

FEAT_MAGIC = b"SHFUFEAT"
FEAT_VERSION = 1
SPLITS = ("train", "val", "test")
POSITIVE_IOU = 0.7
NEGATIVE_IOU = 0.3
MAX_VOCAB = 646
NEGATIVE_METHODS = ("region_swap", "instruction_swap", "both")

COLORS = ("red", "blue", "green", "yellow", "white", "black", "brown", "gray", "orange", "pink")
OBJECTS = ("cup", "bottle", "apple", "book", "pen", "plate", "bowl", "sponge",
           "soap", "remote", "mug", "vase", "phone", "box", "spoon", "towel")
FURNITURE = ("table", "chair", "shelf", "drawer", "sofa", "desk", "bed", "cabinet",
             "counter", "sink", "rack", "stool")
SIDES = ("left", "middle", "right")
_SIDE_PHRASE = {"left": "on the left", "middle": "in the middle", "right": "on the right"}
_TEMPLATES = (
    "move the {o} to the {f}",
    "put the {o} on the {f}",
    "bring the {o} to the {f}",
    "take the {o} and place it on the {f}",
    "carry the {o} over to the {f}",
)
_SUBSPACE = (len(COLORS), len(OBJECTS), len(FURNITURE), len(SIDES), 1)
ATTRIBUTE_DIMS = sum(_SUBSPACE)


def grammar_words() -> list[str]:
    words = set(COLORS) | set(OBJECTS) | set(FURNITURE)
    for phrase in _SIDE_PHRASE.values():
        words.update(phrase.split())
    for t in _TEMPLATES:
        words.update(normalize_text(t.replace("{o}", "").replace("{f}", "")))
    return sorted(words)


def default_vocab() -> Vocab:
    return Vocab(grammar_words())


# data types ------------------------------------------------------------------

@dataclass(eq=False)
class RegionFeature:
    region_id: int
    visual: np.ndarray  # (D_f,) float32
    bbox: BBox

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RegionFeature)
            and self.region_id == other.region_id
            and self.bbox == other.bbox
            and np.array_equal(self.visual, other.visual)
        )

    def vector(self) -> np.ndarray:
        """Visual features followed by the 7-d geometry."""
        return np.concatenate([self.visual, positional_encode(self.bbox)]).astype(np.float32)


@dataclass(frozen=True)
class Attributes:
    color: str
    category: str
    side: str
    furniture: bool = False

    def phrase(self) -> str:
        return f"the {self.color} {self.category} {_SIDE_PHRASE[self.side]}"

    def key(self) -> tuple[str, str, str]:
        return (self.color, self.category, self.side)


@dataclass
class SceneRegion:
    feature: RegionFeature
    attributes: Attributes | None  # None for masked regions
    item: int  # index of the physical item the detection covers
    confidence: float


@dataclass
class Scene:
    """An image pair: the target object's image and the destination's image."""

    scene_id: int
    target_image_id: int
    dest_image_id: int
    target_regions: list[SceneRegion]
    dest_regions: list[SceneRegion]
    target_gt: BBox
    dest_gt: BBox
    target_attr: Attributes
    dest_attr: Attributes
    instruction: str

    @property
    def regions(self) -> list[SceneRegion]:
        return self.target_regions + self.dest_regions


@dataclass(eq=False)
class Sample:
    id: str
    instruction: str
    target: RegionFeature
    dest: RegionFeature
    context: list[RegionFeature]
    y_targ: bool
    y_dest: bool
    target_gt: BBox
    dest_gt: BBox
    target_image_id: int = 0
    dest_image_id: int = 0
    negative_method: str | None = None

    @property
    def y(self) -> bool:
        return self.y_targ and self.y_dest

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return all(getattr(self, f) == getattr(other, f) for f in self.__dataclass_fields__)

    def replace(self, **changes) -> Sample:
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return Sample(**values)


@dataclass
class Dataset:
    splits: dict[str, list[Sample]]
    vocab: Vocab
    feature_dim: int
    max_regions: int
    config: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Dataset)
            and self.feature_dim == other.feature_dim
            and self.max_regions == other.max_regions
            and self.vocab == other.vocab
            and self.config == other.config
            and self.splits.keys() == other.splits.keys()
            and all(self.splits[k] == other.splits[k] for k in self.splits)
        )


# sampling rules ----------------------------------------------------------------

def make_positive(detections: Sequence[RegionFeature], gt: BBox) -> list[RegionFeature]:
    """Detections whose IoU with the ground truth is at least 0.7."""
    if not detections:
        raise ContractError("make_positive needs at least one detection")
    return [d for d in detections if iou(d.bbox, gt) >= POSITIVE_IOU]


def make_negative(
    sample: Sample,
    method: str,
    rng: np.random.Generator,
    *,
    target_pool: Sequence[RegionFeature] = (),
    dest_pool: Sequence[RegionFeature] = (),
    instructions: Sequence[str] = (),
) -> Sample:
    """Turn a sample into a negative by region swap, instruction swap, or both.

    A region swap replaces the target or destination candidate (side chosen at
    random among sides with an eligible region) by a detection whose IoU with
    that side's ground truth is at most 0.3, and clears that side's label. An
    instruction swap draws a donor instruction and clears both labels. Pools
    must already exclude donors that would make the cleared labels wrong.
    """
    if method == "random":
        method = NEGATIVE_METHODS[int(rng.integers(len(NEGATIVE_METHODS)))]
    if method not in NEGATIVE_METHODS:
        raise ContractError(f"unknown negative method {method!r}")
    out = sample.replace(negative_method=method)
    if method in ("region_swap", "both"):
        eligible = {
            "target": [d for d in target_pool if iou(d.bbox, sample.target_gt) <= NEGATIVE_IOU],
            "dest": [d for d in dest_pool if iou(d.bbox, sample.dest_gt) <= NEGATIVE_IOU],
        }
        sides = [s for s in ("target", "dest") if eligible[s]]
        if not sides:
            raise SamplingExhaustedError(f"{sample.id}: no region with IoU <= {NEGATIVE_IOU}")
        side = sides[int(rng.integers(len(sides)))]
        pick = eligible[side][int(rng.integers(len(eligible[side])))]
        if side == "target":
            out = out.replace(target=pick, y_targ=False)
        else:
            out = out.replace(dest=pick, y_dest=False)
    if method in ("instruction_swap", "both"):
        donors = [s for s in instructions if s != sample.instruction]
        if not donors:
            raise SamplingExhaustedError(f"{sample.id}: no donor instruction")
        out = out.replace(instruction=donors[int(rng.integers(len(donors)))], y_targ=False, y_dest=False)
    return out


def balance(samples: Sequence[Sample], rng: np.random.Generator) -> list[Sample]:
    """Subsample the majority joint-label class so counts differ by at most one.

    Retained samples keep their original order.
    """
    pos = [i for i, s in enumerate(samples) if s.y]
    neg = [i for i, s in enumerate(samples) if not s.y]
    if not pos or not neg:
        raise ContractError("balance needs at least one positive and one negative sample")
    if len(pos) > len(neg):
        pos = sorted(rng.choice(pos, size=len(neg), replace=False).tolist())
    elif len(neg) > len(pos):
        neg = sorted(rng.choice(neg, size=len(pos), replace=False).tolist())
    keep = sorted(pos + neg)
    return [samples[i] for i in keep]


# synthetic generation -----------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_scenes: int = 1099
    max_regions: int = 10
    feature_dim: int = 64
    max_tokens: int = 16
    noise_sigma: float = 0.3
    seed: int = 0
    split_sizes: tuple[int, int, int] = (4420, 642, 686)
    positives_per_scene: int = 3
    negatives_per_scene: int = 4
    image_width: int = 640
    image_height: int = 480

    def __post_init__(self):
        object.__setattr__(self, "split_sizes", tuple(int(x) for x in self.split_sizes))
        if self.feature_dim < ATTRIBUTE_DIMS:
            raise ConfigError(f"feature_dim must be >= {ATTRIBUTE_DIMS}")
        if self.n_scenes < 3 or len(self.split_sizes) != 3 or min(self.split_sizes) < 2:
            raise ConfigError("need >= 3 scenes and three splits of >= 2 samples")
        if self.noise_sigma < 0 or self.max_regions < 0 or self.max_tokens < 1:
            raise ConfigError("invalid synthetic config")

    def to_json(self) -> dict:
        d = asdict(self)
        d["split_sizes"] = list(self.split_sizes)
        return d


_OFFSETS = np.cumsum((0,) + _SUBSPACE)


def attribute_vector(attr: Attributes | None, dim: int) -> np.ndarray:
    v = np.zeros(dim, dtype=np.float64)
    if attr is None:
        return v
    v[_OFFSETS[0] + COLORS.index(attr.color)] = 1.0
    if attr.furniture:
        v[_OFFSETS[2] + FURNITURE.index(attr.category)] = 1.0
        v[_OFFSETS[4]] = 1.0
    else:
        v[_OFFSETS[1] + OBJECTS.index(attr.category)] = 1.0
    v[_OFFSETS[3] + SIDES.index(attr.side)] = 1.0
    return v


def _distractor(rng: np.random.Generator, gt: Attributes, taken: set) -> Attributes:
    cats = FURNITURE if gt.furniture else OBJECTS
    for _ in range(100):
        # change a nonempty subset of attributes so distractors share the rest
        change = rng.random(3) < 0.5
        if not change.any():
            change[int(rng.integers(3))] = True
        color = COLORS[int(rng.integers(len(COLORS)))] if change[0] else gt.color
        cat = cats[int(rng.integers(len(cats)))] if change[1] else gt.category
        side = SIDES[int(rng.integers(len(SIDES)))] if change[2] else gt.side
        a = Attributes(color, cat, side, gt.furniture)
        if a.key() not in taken:
            return a
    raise SamplingExhaustedError("could not draw a distinct distractor")


class _SceneBuilder:
    """Lays out items on a 6x2 cell grid; each horizontal third is one side."""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator, next_id: int):
        self.cfg, self.rng, self.next_id = cfg, rng, next_id
        self.cell_w = cfg.image_width / 6
        self.cell_h = cfg.image_height / 2

    def _box(self, side: str, used: set) -> BBox:
        s = SIDES.index(side)
        cells = [(c, r) for c in (2 * s, 2 * s + 1) for r in (0, 1) if (c, r) not in used]
        c, r = cells[int(self.rng.integers(len(cells)))]
        used.add((c, r))
        w = self.cell_w * self.rng.uniform(0.55, 0.9)
        h = self.cell_h * self.rng.uniform(0.55, 0.9)
        x1 = c * self.cell_w + self.rng.uniform(0, self.cell_w - w)
        y1 = r * self.cell_h + self.rng.uniform(0, self.cell_h - h)
        return self._round(x1, y1, x1 + w, y1 + h)

    def _round(self, x1, y1, x2, y2) -> BBox:
        W, H = self.cfg.image_width, self.cfg.image_height
        x1, y1 = max(0.0, round(x1, 1)), max(0.0, round(y1, 1))
        x2, y2 = min(float(W), round(x2, 1)), min(float(H), round(y2, 1))
        return BBox(x1, y1, x2, y2, float(W), float(H))

    def _jitter(self, box: BBox, lo: float, hi: float) -> BBox:
        for _ in range(200):
            dx, dy = self.rng.normal(0, 0.12 if hi > POSITIVE_IOU else 0.45, 2)
            sw, sh = np.exp(self.rng.normal(0, 0.08 if hi > POSITIVE_IOU else 0.3, 2))
            cx = (box.x1 + box.x2) / 2 + dx * box.width
            cy = (box.y1 + box.y2) / 2 + dy * box.height
            w, h = box.width * sw, box.height * sh
            try:
                cand = self._round(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            except ContractError:
                continue
            if lo <= iou(cand, box) <= hi:
                return cand
        raise SamplingExhaustedError("could not jitter a detection into the requested IoU band")

    def _feature(self, attr: Attributes | None, box: BBox) -> RegionFeature:
        v = attribute_vector(attr, self.cfg.feature_dim)
        if self.cfg.noise_sigma > 0:
            v = v + self.rng.normal(0.0, self.cfg.noise_sigma, v.shape)
        rf = RegionFeature(self.next_id, v.astype(np.float32), box)
        self.next_id += 1
        return rf

    def image(self, gt: Attributes, n_distractors: int):
        used: set = set()
        regions: list[SceneRegion] = []
        gt_box = self._box(gt.side, used)
        n_pos = int(self.rng.integers(2, 4))
        for _ in range(n_pos):
            regions.append(SceneRegion(self._feature(gt, self._jitter(gt_box, POSITIVE_IOU, 1.0)), gt, 0, float(self.rng.uniform(0.8, 1.0))))
        band = self._jitter(gt_box, NEGATIVE_IOU + 0.05, POSITIVE_IOU - 0.05)
        regions.append(SceneRegion(self._feature(gt, band), gt, 0, float(self.rng.uniform(0.3, 0.7))))
        taken = {gt.key()}
        for k in range(n_distractors):
            a = _distractor(self.rng, gt, taken)
            if sum(1 for c in used if c[0] // 2 == SIDES.index(a.side)) >= 4:
                continue
            taken.add(a.key())
            box = self._box(a.side, used)
            regions.append(SceneRegion(self._feature(a, box), a, k + 1, float(self.rng.uniform(0.5, 1.0))))
        return gt_box, regions


def _random_attr(rng: np.random.Generator, furniture: bool) -> Attributes:
    cats = FURNITURE if furniture else OBJECTS
    return Attributes(
        COLORS[int(rng.integers(len(COLORS)))],
        cats[int(rng.integers(len(cats)))],
        SIDES[int(rng.integers(len(SIDES)))],
        furniture,
    )


def make_scene(cfg: SynthConfig, scene_id: int, seed_seq: np.random.SeedSequence) -> Scene:
    rng = np.random.default_rng(seed_seq)
    builder = _SceneBuilder(cfg, rng, next_id=scene_id * 100)
    t_attr = _random_attr(rng, furniture=False)
    d_attr = _random_attr(rng, furniture=True)
    template = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
    instruction = template.format(o=t_attr.phrase()[4:], f=d_attr.phrase()[4:])
    t_gt, t_regions = builder.image(t_attr, int(rng.integers(2, 5)))
    d_gt, d_regions = builder.image(d_attr, int(rng.integers(2, 4)))
    # the carried object sits on the destination; its attributes are masked out
    w = d_gt.width * 0.4
    h = d_gt.height * 0.3
    masked = builder._round(d_gt.x1 + (d_gt.width - w) / 2, d_gt.y1, d_gt.x1 + (d_gt.width + w) / 2, d_gt.y1 + h)
    d_regions.append(SceneRegion(builder._feature(None, masked), None, -1, float(rng.uniform(0.5, 1.0))))
    return Scene(scene_id, 2 * scene_id, 2 * scene_id + 1, t_regions, d_regions, t_gt, d_gt, t_attr, d_attr, instruction)


def _context(scene: Scene, exclude: set[int], k: int) -> list[RegionFeature]:
    pool = [r for r in scene.regions if r.feature.region_id not in exclude]
    pool.sort(key=lambda r: (-r.confidence, r.feature.region_id))
    return [r.feature for r in pool[:k]]


def _scene_samples(
    cfg: SynthConfig,
    scene: Scene,
    split_scenes: Sequence[Scene],
    rng: np.random.Generator,
) -> list[Sample]:
    t_dets = [r.feature for r in scene.target_regions]
    d_dets = [r.feature for r in scene.dest_regions]
    t_pos = make_positive(t_dets, scene.target_gt)
    d_pos = make_positive(d_dets, scene.dest_gt)
    pairs = [(a, b) for a in t_pos for b in d_pos]
    order = rng.permutation(len(pairs))[: cfg.positives_per_scene]
    out = []
    for n, i in enumerate(order):
        a, b = pairs[i]
        ctx = _context(scene, {a.region_id, b.region_id}, cfg.max_regions)
        out.append(Sample(
            f"s{scene.scene_id:05d}-p{n}", scene.instruction, a, b, ctx, True, True,
            scene.target_gt, scene.dest_gt, scene.target_image_id, scene.dest_image_id,
        ))
    # donors must not describe any item in this scene, so cleared labels stay true
    t_keys = {r.attributes.key() for r in scene.target_regions if r.attributes}
    d_keys = {r.attributes.key() for r in scene.dest_regions if r.attributes}
    donors = sorted({
        s.instruction for s in split_scenes
        if s.scene_id != scene.scene_id and s.target_attr.key() not in t_keys and s.dest_attr.key() not in d_keys
    })
    t_pool = [r.feature for r in scene.target_regions if r.item > 0]
    d_pool = [r.feature for r in scene.dest_regions if r.item > 0]
    positives = list(out)
    for n in range(cfg.negatives_per_scene):
        base = positives[n % len(positives)]
        neg = make_negative(base, "random", rng, target_pool=t_pool, dest_pool=d_pool, instructions=donors)
        ctx = _context(scene, {neg.target.region_id, neg.dest.region_id}, cfg.max_regions)
        out.append(neg.replace(id=f"s{scene.scene_id:05d}-n{n}", context=ctx))
    return out


def _check_vocab(vocab: Vocab) -> None:
    missing = [w for w in grammar_words() if w not in vocab]
    if missing:
        raise ConfigError(f"vocabulary is missing generation words: {', '.join(missing)}")
    if len(vocab) > MAX_VOCAB:
        raise ConfigError(f"vocabulary has {len(vocab)} entries; the cap is {MAX_VOCAB}")


def generate_synthetic(cfg: SynthConfig, vocab: Vocab | None = None) -> Dataset:
    """Build balanced train/val/test splits from disjoint sets of scenes."""
    vocab = vocab or default_vocab()
    _check_vocab(vocab)
    root = np.random.SeedSequence(cfg.seed)
    scene_seeds = root.spawn(cfg.n_scenes)
    split_rng = np.random.default_rng(root.spawn(1)[0])
    scenes = [make_scene(cfg, i, scene_seeds[i]) for i in range(cfg.n_scenes)]

    total = sum(cfg.split_sizes)
    bounds = np.round(np.cumsum(cfg.split_sizes) / total * cfg.n_scenes).astype(int)
    starts = np.concatenate([[0], bounds[:-1]])
    splits: dict[str, list[Sample]] = {}
    for name, size, lo, hi in zip(SPLITS, cfg.split_sizes, starts, bounds):
        part = scenes[lo:hi]
        if len(part) < 2:
            raise ConfigError(f"split {name!r} got {len(part)} scenes; increase n_scenes")
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, lo, hi]))
        pool: list[Sample] = []
        for scene in part:
            pool.extend(_scene_samples(cfg, scene, part, rng))
        pool = balance(pool, split_rng)
        pos = [s for s in pool if s.y]
        neg = [s for s in pool if not s.y]
        n_pos, n_neg = (size + 1) // 2, size // 2
        if len(pos) < n_pos or len(neg) < n_neg:
            raise ConfigError(f"split {name!r} needs {size} samples but only {len(pool)} balanced ones exist; increase n_scenes")
        chosen = [pos[i] for i in sorted(split_rng.choice(len(pos), n_pos, replace=False))]
        chosen += [neg[i] for i in sorted(split_rng.choice(len(neg), n_neg, replace=False))]
        chosen = [chosen[i] for i in split_rng.permutation(len(chosen))]
        splits[name] = [s.replace(id=f"{name}-{i:05d}") for i, s in enumerate(chosen)]
    return Dataset(splits, vocab, cfg.feature_dim, cfg.max_regions, config=cfg.to_json())


# model inputs ----------------------------------------------------------------------

def encode_samples(samples: Sequence[Sample], vocab: Vocab, max_regions: int, max_tokens: int) -> tuple[ModelInputs, np.ndarray, np.ndarray]:
    """Stack samples into padded model inputs plus (y_targ, y_dest) label arrays."""
    if not samples:
        raise ContractError("no samples to encode")
    n = len(samples)
    r = samples[0].target.visual.shape[0] + POS_DIM
    targ = np.zeros((n, r), dtype=np.float32)
    dest = np.zeros((n, r), dtype=np.float32)
    ctx = np.zeros((n, max_regions, r), dtype=np.float32)
    ctx_mask = np.zeros((n, max_regions), dtype=bool)
    tok = np.zeros((n, max_tokens), dtype=np.int64)
    tok_mask = np.zeros((n, max_tokens), dtype=bool)
    for i, s in enumerate(samples):
        targ[i] = s.target.vector()
        dest[i] = s.dest.vector()
        for j, c in enumerate(s.context[:max_regions]):
            ctx[i, j] = c.vector()
            ctx_mask[i, j] = True
        ts = tokenize(s.instruction, vocab, max_tokens)
        tok[i], tok_mask[i] = ts.ids, ts.mask
    y_targ = np.array([s.y_targ for s in samples], dtype=bool)
    y_dest = np.array([s.y_dest for s in samples], dtype=bool)
    return ModelInputs(targ, dest, ctx, ctx_mask, tok, tok_mask), y_targ, y_dest


# file I/O ----------------------------------------------------------------------------

def write_features(path: Path, features: dict[int, np.ndarray], dim: int) -> None:
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<III", FEAT_VERSION, dim, len(features)))
        for rid in sorted(features):
            vec = np.ascontiguousarray(features[rid], dtype="<f4")
            if vec.shape != (dim,):
                raise SchemaError(f"region {rid}: feature length {vec.shape[0]} != D_f {dim}")
            fh.write(struct.pack("<Q", rid))
            fh.write(vec.tobytes())


def read_features(path: Path) -> tuple[int, dict[int, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != FEAT_MAGIC:
        raise SchemaError(f"{path}: not a feature blob (bad magic or header)")
    version, dim, count = struct.unpack_from("<III", data, 8)
    if version != FEAT_VERSION:
        raise SchemaError(f"{path}: unsupported feature blob version {version}")
    rec = 8 + 4 * dim
    features = {}
    off = 20
    for i in range(count):
        if off + rec > len(data):
            have = max(0, (len(data) - off - 8) // 4)
            raise SchemaError(f"{path}: feature record {i} is truncated ({have} of {dim} values present)")
        (rid,) = struct.unpack_from("<Q", data, off)
        features[rid] = np.frombuffer(data, dtype="<f4", count=dim, offset=off + 8).astype(np.float32)
        off += rec
    if off != len(data):
        raise SchemaError(f"{path}: {len(data) - off} trailing bytes; header D_f={dim} does not match the record length")
    return dim, features


def _record(s: Sample) -> dict:
    return {
        "id": s.id,
        "instruction": s.instruction,
        "target_image_id": s.target_image_id,
        "dest_image_id": s.dest_image_id,
        "target_bbox": s.target.bbox.to_json(),
        "dest_bbox": s.dest.bbox.to_json(),
        "y_targ": s.y_targ,
        "y_dest": s.y_dest,
        "context_region_ids": [c.region_id for c in s.context],
        "target_region_id": s.target.region_id,
        "dest_region_id": s.dest.region_id,
        "context_bboxes": [c.bbox.to_json() for c in s.context],
        "target_gt_bbox": s.target_gt.to_json(),
        "dest_gt_bbox": s.dest_gt.to_json(),
        "negative_method": s.negative_method,
    }


_REQUIRED = ("id", "instruction", "target_image_id", "dest_image_id", "target_bbox", "dest_bbox",
             "y_targ", "y_dest", "context_region_ids", "target_region_id", "dest_region_id", "context_bboxes")


def _parse_record(line: str, lineno: int, features: dict[int, np.ndarray]) -> Sample:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON ({exc.msg})", line=lineno) from exc
    if not isinstance(d, dict):
        raise ParseError("record is not a JSON object", line=lineno)
    missing = [k for k in _REQUIRED if k not in d]
    if missing:
        raise ParseError(f"record missing fields {missing}", line=lineno)
    try:
        def region(rid, box) -> RegionFeature:
            if rid not in features:
                raise SchemaError(f"record {d['id']!r}: region {rid} has no feature vector")
            return RegionFeature(int(rid), features[rid], BBox.from_json(box))

        if len(d["context_region_ids"]) != len(d["context_bboxes"]):
            raise ParseError("context_region_ids and context_bboxes differ in length", line=lineno)
        target = region(d["target_region_id"], d["target_bbox"])
        dest = region(d["dest_region_id"], d["dest_bbox"])
        ctx = [region(r, b) for r, b in zip(d["context_region_ids"], d["context_bboxes"])]
        return Sample(
            id=d["id"], instruction=d["instruction"], target=target, dest=dest, context=ctx,
            y_targ=bool(d["y_targ"]), y_dest=bool(d["y_dest"]),
            target_gt=BBox.from_json(d.get("target_gt_bbox") or d["target_bbox"]),
            dest_gt=BBox.from_json(d.get("dest_gt_bbox") or d["dest_bbox"]),
            target_image_id=int(d["target_image_id"]), dest_image_id=int(d["dest_image_id"]),
            negative_method=d.get("negative_method"),
        )
    except (KeyError, TypeError, ContractError) as exc:
        raise ParseError(f"invalid record ({exc})", line=lineno) from exc


def save(path: str | Path, ds: Dataset) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    features: dict[int, np.ndarray] = {}
    for samples in ds.splits.values():
        for s in samples:
            for r in (s.target, s.dest, *s.context):
                features[r.region_id] = r.visual
    write_features(root / "features.bin", features, ds.feature_dim)
    ds.vocab.save(root / "vocab.txt")
    for name, samples in ds.splits.items():
        with open(root / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for s in samples:
                fh.write(json.dumps(_record(s), sort_keys=True) + "\n")
    manifest = {
        "format": "shefu-dataset",
        "version": 1,
        "config": ds.config,
        "config_hash": config_hash(ds.config),
        "feature_dim": ds.feature_dim,
        "max_regions": ds.max_regions,
        "splits": {k: len(v) for k, v in ds.splits.items()},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load(path: str | Path, splits: Iterable[str] | None = None) -> Dataset:
    root = Path(path)
    manifest = {}
    if (root / "manifest.json").exists():
        manifest = json.loads((root / "manifest.json").read_text())
    dim, features = read_features(root / "features.bin")
    if "feature_dim" in manifest and manifest["feature_dim"] != dim:
        raise SchemaError(f"{root}: manifest D_f={manifest['feature_dim']} but feature blob D_f={dim}")
    vocab = Vocab.load(root / "vocab.txt")
    names = list(splits) if splits is not None else [s for s in (manifest.get("splits") or SPLITS) if (root / f"{s}.jsonl").exists()]
    out: dict[str, list[Sample]] = {}
    for name in names:
        samples = []
        with open(root / f"{name}.jsonl", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    samples.append(_parse_record(line, lineno, features))
        out[name] = samples
    k = manifest.get("max_regions")
    if k is None:
        k = max((len(s.context) for v in out.values() for s in v), default=0)
    return Dataset(out, vocab, dim, int(k), config=manifest.get("config", {}))


def directory_checksum(path: str | Path) -> str:
    h = hashlib.sha256()
    for f in sorted(Path(path).iterdir()):
        if f.is_file():
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()
