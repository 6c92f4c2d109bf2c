"""Procedural referring-expression data: shape scenes, queries, boxes.

A scene holds 2-5 non-overlapping shapes. The query is drawn from a small
grammar::

    NP    := "the" [size] [color] shape
    QUERY := NP | NP REL QUERY          REL := left of | right of | above | below

``difficulty`` fixes the number of relations: ``attribute`` (0),
``relational`` (1) or ``two-hop`` (2). Every emitted query is re-evaluated by
:func:`resolve` and kept only if it denotes exactly the target, with each
nested phrase denoting exactly one object.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
RELATIONS = ("left of", "right of", "above", "below")

PAD, SOS, EOS = "<pad>", "<sos>", "<eos>"
VOCAB = (PAD, SOS, EOS, "the", *SIZES, *COLORS, *SHAPES, "left", "right", "of", "above", "below")
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

RGB = {
    "red": (0.95, 0.15, 0.1),
    "green": (0.15, 0.85, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.1),
}
EXTENT = {"small": 0.12, "large": 0.19}  # half-sizes: about 2 and 3 patches across at 64 px, patch 8
RELATION_MARGIN = 0.08
DIFFICULTIES = {"attribute": 0, "relational": 1, "two-hop": 2}
MAX_TOKENS = 16


class DataError(ValueError):
    pass


class DatasetParseError(DataError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    size: str
    cx: float
    cy: float
    extent: float  # half-size in normalized units


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    objects: tuple[ObjectSpec, ...]
    target_index: int
    query: str

    def to_json(self) -> str:
        d = asdict(self)
        d["objects"] = [asdict(o) for o in self.objects]
        return json.dumps(d, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objs = tuple(ObjectSpec(**o) for o in d["objects"])
        spec = cls(seed=int(d["seed"]), objects=objs, target_index=int(d["target_index"]), query=str(d["query"]))
        if not 0 <= spec.target_index < len(objs):
            raise DataError(f"target_index {spec.target_index} out of range")
        return spec

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


@dataclass
class GroundingSample:
    pixels: np.ndarray  # [3, H, W] in [0, 1]
    tokens: np.ndarray  # [L_l] int
    gt_box: tuple[float, float, float, float]  # cx, cy, w, h normalized


# ---------------------------------------------------------------------------
# Query semantics
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Phrase:
    shape: str
    color: str | None = None
    size: str | None = None
    relation: str | None = None
    anchor: "Phrase | None" = None

    def words(self) -> list[str]:
        out = ["the"]
        if self.size:
            out.append(self.size)
        if self.color:
            out.append(self.color)
        out.append(self.shape)
        if self.relation:
            out.extend(self.relation.split())
            out.extend(self.anchor.words())
        return out

    def text(self) -> str:
        return " ".join(self.words())

    @property
    def depth(self) -> int:
        return 0 if self.anchor is None else 1 + self.anchor.depth


def relation_holds(rel: str, a: ObjectSpec, b: ObjectSpec) -> bool:
    """Whether ``a`` stands in ``rel`` to ``b`` (image y grows downward)."""
    if rel == "left of":
        return b.cx - a.cx > RELATION_MARGIN
    if rel == "right of":
        return a.cx - b.cx > RELATION_MARGIN
    if rel == "above":
        return b.cy - a.cy > RELATION_MARGIN
    if rel == "below":
        return a.cy - b.cy > RELATION_MARGIN
    raise DataError(f"unknown relation {rel!r}")


def parse_query(query: str) -> Phrase:
    words = query.split()
    phrase, rest = _parse_np(words, 0)
    if rest != len(words):
        raise DataError(f"trailing words in query {query!r}")
    return phrase


def _parse_np(words: list[str], i: int) -> tuple[Phrase, int]:
    if i >= len(words) or words[i] != "the":
        raise DataError(f"expected 'the' at word {i} in {' '.join(words)!r}")
    i += 1
    size = color = None
    if i < len(words) and words[i] in SIZES:
        size = words[i]
        i += 1
    if i < len(words) and words[i] in COLORS:
        color = words[i]
        i += 1
    if i >= len(words) or words[i] not in SHAPES:
        raise DataError(f"expected a shape at word {i} in {' '.join(words)!r}")
    shape = words[i]
    i += 1
    if i < len(words):
        two = " ".join(words[i:i + 2])
        rel = two if two in RELATIONS else (words[i] if words[i] in RELATIONS else None)
        if rel is None:
            raise DataError(f"expected a relation at word {i} in {' '.join(words)!r}")
        i += len(rel.split())
        anchor, i = _parse_np(words, i)
        return Phrase(shape, color, size, rel, anchor), i
    return Phrase(shape, color, size), i


def _attr_match(p: Phrase, o: ObjectSpec) -> bool:
    return o.shape == p.shape and (p.color is None or o.color == p.color) and (p.size is None or o.size == p.size)


def resolve(phrase: Phrase, objects: Sequence[ObjectSpec]) -> set[int]:
    """Indices of objects the phrase denotes."""
    cands = {i for i, o in enumerate(objects) if _attr_match(phrase, o)}
    if phrase.anchor is None:
        return cands
    anchors = resolve(phrase.anchor, objects)
    return {i for i in cands if any(j != i and relation_holds(phrase.relation, objects[i], objects[j]) for j in anchors)}


def is_well_formed(phrase: Phrase, objects: Sequence[ObjectSpec]) -> bool:
    """Every nested phrase must denote exactly one object."""
    p: Phrase | None = phrase
    while p is not None:
        if len(resolve(p, objects)) != 1:
            return False
        p = p.anchor
    return True


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------
def _sample_objects(rng: np.random.Generator, n: int) -> list[ObjectSpec] | None:
    objs: list[ObjectSpec] = []
    for _ in range(n):
        for _attempt in range(50):
            size = SIZES[rng.integers(len(SIZES))]
            ext = EXTENT[size]
            cx, cy = rng.uniform(ext + 0.01, 1 - ext - 0.01, size=2)
            if all(max(abs(cx - o.cx), abs(cy - o.cy)) > ext + o.extent + 0.03 for o in objs):
                objs.append(ObjectSpec(SHAPES[rng.integers(3)], COLORS[rng.integers(4)], size,
                                       round(float(cx), 4), round(float(cy), 4), ext))
                break
        else:
            return None
    return objs


def _descriptions(o: ObjectSpec) -> list[Phrase]:
    return [Phrase(o.shape, c, s) for s in (None, o.size) for c in (None, o.color)]


def _query_candidates(objects: list[ObjectSpec], target: int, depth: int) -> list[Phrase]:
    t = objects[target]
    if depth == 0:
        return [p for p in _descriptions(t) if resolve(p, objects) == {target}]
    out = []
    for j, a in enumerate(objects):
        if j == target:
            continue
        for rel in RELATIONS:
            if not relation_holds(rel, t, a):
                continue
            for anchor in _query_candidates(objects, j, depth - 1):
                for desc in _descriptions(t):
                    p = Phrase(desc.shape, desc.color, desc.size, rel, anchor)
                    if len(p.words()) + 2 <= MAX_TOKENS and resolve(p, objects) == {target} \
                            and is_well_formed(p, objects):
                        out.append(p)
    return out


def _shares_attribute(a: ObjectSpec, b: ObjectSpec) -> bool:
    return a.shape == b.shape or a.color == b.color or a.size == b.size


def make_scene(seed: int, difficulty: str = "attribute", p_ambiguous: float = 0.5,
               max_retries: int = 40) -> SceneSpec | None:
    """One scene from ``seed``; ``None`` when no valid query was found within the retry budget.

    For relational depths, with probability ``p_ambiguous`` the target's own
    attributes are chosen so that they do not single it out on their own.
    """
    if difficulty not in DIFFICULTIES:
        raise DataError(f"unknown difficulty {difficulty!r}; choose from {sorted(DIFFICULTIES)}")
    depth = DIFFICULTIES[difficulty]
    rng = np.random.default_rng(seed)
    lo = 2 + depth
    for _ in range(max_retries):
        objs = _sample_objects(rng, int(rng.integers(lo, 6)))
        if objs is None:
            continue
        target = int(rng.integers(len(objs)))
        if not any(_shares_attribute(objs[target], o) for i, o in enumerate(objs) if i != target):
            continue
        cands = _query_candidates(objs, target, depth)
        if not cands:
            continue
        if depth and rng.random() < p_ambiguous:
            hard = [p for p in cands if len(resolve(Phrase(p.shape, p.color, p.size), objs)) > 1]
            cands = hard or cands
        phrase = cands[int(rng.integers(len(cands)))]
        return SceneSpec(seed=seed, objects=tuple(objs), target_index=target, query=phrase.text())
    return None


@dataclass
class GenerationStats:
    requested: int = 0
    produced: int = 0
    skipped: int = 0


def generate(seed: int, count: int, difficulty: str = "attribute", stats: GenerationStats | None = None,
             split: int = 0) -> list[SceneSpec]:
    """``count`` scenes with per-scene seeds drawn from a range owned by ``(seed, split)``."""
    if count <= 0:
        raise DataError("count must be positive")
    stats = stats if stats is not None else GenerationStats()
    stats.requested += count
    base = (seed * 8 + split) * 10_000_000
    specs: list[SceneSpec] = []
    for offset in itertools.count():
        if len(specs) == count:
            break
        if offset >= 10_000_000:
            raise DataError("seed range exhausted")
        spec = make_scene(base + offset, difficulty)
        if spec is None:
            stats.skipped += 1
            continue
        specs.append(spec)
    stats.produced += len(specs)
    if stats.skipped:
        logger.info("generate: skipped %d unsatisfiable scene seeds", stats.skipped)
    return specs


SPLITS = {"train": 0, "val": 1, "test": 2}


def generate_splits(seed: int, counts: dict[str, int], difficulty: str,
                    stats: GenerationStats | None = None) -> dict[str, list[SceneSpec]]:
    out = {name: generate(seed, n, difficulty, stats, split=SPLITS[name]) if n > 0 else []
           for name, n in counts.items()}
    seen: dict[str, str] = {}
    for name, specs in out.items():
        for s in specs:
            h = s.digest()
            if seen.get(h, name) != name:
                raise DataError(f"scene collision between splits {seen[h]} and {name}")
            seen[h] = name
    return out


# ---------------------------------------------------------------------------
# Rendering and tokenization
# ---------------------------------------------------------------------------
def shape_mask(obj: ObjectSpec, height: int, width: int) -> np.ndarray:
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    y, x = np.meshgrid(ys, xs, indexing="ij")
    dx, dy, s = x - obj.cx, y - obj.cy, obj.extent
    if obj.shape == "circle":
        return dx * dx + dy * dy <= s * s
    if obj.shape == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if obj.shape == "triangle":
        # apex at top, base at bottom
        frac = (dy + s) / (2 * s)
        return (np.abs(dy) <= s) & (np.abs(dx) <= s * frac)
    raise DataError(f"unknown shape {obj.shape!r}")


def mask_to_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise DataError("object has no rendered pixels")
    x0, x1 = cols[0] / w, (cols[-1] + 1) / w
    y0, y1 = rows[0] / h, (rows[-1] + 1) / h
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def tokenize(query: str, max_len: int = MAX_TOKENS) -> np.ndarray:
    words = query.split()
    if len(words) > max_len - 2:
        raise DataError(f"query has {len(words)} words; at most {max_len - 2} fit")
    try:
        ids = [TOKEN_ID[SOS]] + [TOKEN_ID[w] for w in words] + [TOKEN_ID[EOS]]
    except KeyError as exc:
        raise DataError(f"word {exc.args[0]!r} not in vocabulary") from None
    return np.array(ids + [TOKEN_ID[PAD]] * (max_len - len(ids)), dtype=np.int64)


def detokenize(tokens: Iterable[int]) -> str:
    words = []
    for t in tokens:
        w = VOCAB[int(t)]
        if w == EOS:
            break
        if w not in (SOS, PAD):
            words.append(w)
    return " ".join(words)


def render(spec: SceneSpec, height: int = 64, width: int = 64, max_len: int = MAX_TOKENS) -> GroundingSample:
    img = np.zeros((3, height, width), dtype=np.float32)
    target_mask = None
    for i, obj in enumerate(spec.objects):
        m = shape_mask(obj, height, width)
        img[:, m] = np.asarray(RGB[obj.color], dtype=np.float32)[:, None]
        if i == spec.target_index:
            target_mask = m
    return GroundingSample(pixels=img, tokens=tokenize(spec.query, max_len), gt_box=mask_to_box(target_mask))


def letterbox(pixels: np.ndarray, box: tuple[float, float, float, float], size: int):
    """Scale the long edge to ``size`` (nearest neighbour) and zero-pad the short edge, centred."""
    _, h, w = pixels.shape
    s = size / max(h, w)
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    rows = np.minimum((np.arange(nh) + 0.5) * h / nh, h - 1).astype(int)
    cols = np.minimum((np.arange(nw) + 0.5) * w / nw, w - 1).astype(int)
    out = np.zeros((pixels.shape[0], size, size), dtype=pixels.dtype)
    top, left = (size - nh) // 2, (size - nw) // 2
    out[:, top:top + nh, left:left + nw] = pixels[:, rows][:, :, cols]
    cx, cy, bw, bh = box
    new_box = ((cx * nw + left) / size, (cy * nh + top) / size, bw * nw / size, bh * nh / size)
    return out, new_box


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------
def write_dataset(specs: Iterable[SceneSpec], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in specs:
            fh.write(s.to_json() + "\n")


def read_dataset(path: str | Path) -> list[SceneSpec]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(SceneSpec.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetParseError(lineno, str(exc)) from None
    return out


# ---------------------------------------------------------------------------
# Batched arrays
# ---------------------------------------------------------------------------
@dataclass
class GroundingArrays:
    pixels: np.ndarray  # [N, 3, H, W]
    tokens: np.ndarray  # [N, L]
    boxes: np.ndarray  # [N, 4]
    masks: np.ndarray  # [N, L_v]
    query_lengths: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.tokens)

    def subset(self, idx) -> "GroundingArrays":
        return GroundingArrays(self.pixels[idx], self.tokens[idx], self.boxes[idx], self.masks[idx],
                               self.query_lengths[idx])


def build_arrays(specs: Sequence[SceneSpec], height: int, width: int, patch: int,
                 max_len: int = MAX_TOKENS, dtype=np.float32) -> GroundingArrays:
    from .losses import make_patch_mask

    grid = (height // patch, width // patch)
    samples = [render(s, height, width, max_len) for s in specs]
    boxes = np.array([s.gt_box for s in samples], dtype=np.float64)
    return GroundingArrays(
        pixels=np.stack([s.pixels for s in samples]).astype(dtype),
        tokens=np.stack([s.tokens for s in samples]),
        boxes=boxes,
        masks=np.stack([make_patch_mask(b, grid) for b in boxes]).astype(dtype),
        query_lengths=np.array([len(s.query.split()) for s in specs]),
    )
