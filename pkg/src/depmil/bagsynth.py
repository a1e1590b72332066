"""Deterministic synthetic bag datasets.

Two label rules are supported:

* ``max_rule`` - the bag label is the largest pattern id among its instances,
  the classical MIL assumption.
* ``two_pattern_grade`` - the bag label is an ISUP-like grade looked up from
  the two most frequent malignant patterns, so it depends on how instances
  combine rather than on any single instance.

Randomness comes from Philox (a 64-bit counter-based generator) keyed by
``SeedSequence([seed, stream, bag_index])``; a bag's content depends only on
the recipe, the seed and its index.
"""

from __future__ import annotations

import base64
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

LABEL_RULES = ("max_rule", "two_pattern_grade")

# pattern index -> Gleason-like value used by the grade rule
GLEASON = (0, 3, 4, 5)

GRADE_TABLE = {
    (3, 3): 1,
    (3, 4): 2,
    (4, 3): 3,
    (4, 4): 4,
    (3, 5): 4,
    (5, 3): 4,
    (4, 5): 5,
    (5, 4): 5,
    (5, 5): 5,
}

TEXTURES = ("flat", "stripes", "blobs", "checker")

_STREAM_BAG = 1
_STREAM_MEANS = 2
_STREAM_SPLIT = 3


class RecipeError(ValueError):
    pass


class ForegroundError(RuntimeError):
    pass


def philox(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass
class PatternSpec:
    """Instance generators, one per pattern; pattern 0 is background/benign."""

    num_patterns: int = 4
    feature_dim: int = 16
    separation: float = 2.0
    noise: float = 0.5
    textures: tuple[str, ...] = ("flat", "stripes", "blobs", "checker")
    intensities: tuple[float, ...] = (0.70, 0.55, 0.45, 0.35)

    def __post_init__(self):
        self.textures = tuple(self.textures)
        self.intensities = tuple(float(v) for v in self.intensities)
        if self.num_patterns < 2:
            raise RecipeError("need at least two patterns")
        if self.feature_dim < self.num_patterns:
            raise RecipeError("feature_dim must be >= num_patterns so pattern means stay distinct")
        if len(self.textures) < self.num_patterns or len(self.intensities) < self.num_patterns:
            raise RecipeError("one texture and intensity per pattern required")
        if any(t not in TEXTURES for t in self.textures):
            raise RecipeError(f"unknown texture in {self.textures}; choose from {TEXTURES}")

    def means(self, seed: int) -> np.ndarray:
        """Orthogonal pattern means of norm ``separation``."""
        g = philox(seed, _STREAM_MEANS)
        q, _ = np.linalg.qr(g.standard_normal((self.feature_dim, self.num_patterns)))
        return (q.T * self.separation).astype(np.float64)


@dataclass
class BagRecipe:
    label_rule: str = "max_rule"
    count: int = 100
    k_min: int = 16
    k_max: int = 16
    presence: tuple[float, ...] | None = None
    tumor_weight: tuple[float, float] = (0.2, 1.0)
    background_weight: tuple[float, float] = (1.0, 3.0)
    seed: int = 0
    kind: str = "feature"
    patterns: PatternSpec = field(default_factory=PatternSpec)
    slide_size: int = 256
    region_size: int = 64
    tile_size: int = 32
    max_instances: int = 56
    fg_threshold: float = 0.85
    tissue_regions: tuple[int, int] = (6, 16)

    def __post_init__(self):
        if isinstance(self.patterns, dict):
            self.patterns = PatternSpec(**self.patterns)
        if self.label_rule not in LABEL_RULES:
            raise RecipeError(f"unknown label_rule {self.label_rule!r}")
        if self.kind not in ("feature", "image"):
            raise RecipeError(f"unknown instance kind {self.kind!r}")
        if not 1 <= self.k_min <= self.k_max:
            raise RecipeError(f"bad K range [{self.k_min}, {self.k_max}]")
        n_tumor = self.patterns.num_patterns - 1
        if self.presence is None:
            self.presence = (0.5,) * n_tumor
        self.presence = tuple(float(p) for p in self.presence)
        if len(self.presence) != n_tumor or any(not 0.0 <= p <= 1.0 for p in self.presence):
            raise RecipeError(
                f"presence must hold {n_tumor} probabilities in [0, 1], got {self.presence}"
            )
        for lo, hi in (self.tumor_weight, self.background_weight):
            if lo < 0 or hi < lo:
                raise RecipeError("mixture weight ranges must satisfy 0 <= lo <= hi")
        if self.tumor_weight[1] <= 0:
            raise RecipeError("tumor weights must allow a positive value")
        if self.label_rule == "two_pattern_grade" and self.patterns.num_patterns != len(GLEASON):
            raise RecipeError("two_pattern_grade needs exactly 4 patterns (benign + three malignant)")
        if self.kind == "image" and self.slide_size % self.region_size:
            raise RecipeError("slide_size must be a multiple of region_size")

    @property
    def num_classes(self) -> int:
        return 6 if self.label_rule == "two_pattern_grade" else self.patterns.num_patterns

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "BagRecipe":
        d = dict(d)
        if "patterns" in d:
            d["patterns"] = PatternSpec(**d["patterns"])
        for key in ("presence", "tumor_weight", "background_weight", "tissue_regions"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Slide:
    image: np.ndarray  # (3, S, S) float32 in [0, 1]
    pixel_patterns: np.ndarray  # (S, S) int, -1 for background
    region_patterns: np.ndarray  # (R, R) int, -1 for background


@dataclass
class Bag:
    id: int
    instances: np.ndarray
    label: int
    patterns: np.ndarray  # hidden per-instance pattern ids; diagnostics only
    slide: Slide | None = None

    @property
    def k(self) -> int:
        return len(self.instances)


# -- label rules --------------------------------------------------------------

def grade_from_patterns(pattern_ids: Iterable[int]) -> int:
    """ISUP-like grade from Gleason-valued ids (0 benign, 3/4/5 malignant).

    Primary is the most frequent malignant pattern, secondary the next one
    (or the primary again if alone); count ties go to the higher id.
    """
    counts = Counter(int(p) for p in pattern_ids if int(p) in (3, 4, 5))
    if not counts:
        return 0
    ranked = sorted(counts, key=lambda p: (-counts[p], -p))
    primary = ranked[0]
    secondary = ranked[1] if len(ranked) > 1 else primary
    return GRADE_TABLE[(primary, secondary)]


def apply_label_rule(rule: str, pattern_ids: Iterable[int]) -> int:
    ids = np.asarray(list(pattern_ids), dtype=np.int64)
    ids = ids[ids >= 0]
    if rule == "max_rule":
        return int(ids.max()) if ids.size else 0
    if rule == "two_pattern_grade":
        return grade_from_patterns(GLEASON[i] for i in ids)
    raise RecipeError(f"unknown label_rule {rule!r}")


def instance_truth(rule: str, pattern_ids: np.ndarray) -> np.ndarray:
    """Class a homogeneous bag of each instance's pattern would receive."""
    return np.array([apply_label_rule(rule, [p]) for p in np.asarray(pattern_ids)], dtype=np.int64)


# -- pattern composition ---------------------------------------------------------

def sample_composition(rng: np.random.Generator, n: int, recipe: BagRecipe) -> np.ndarray:
    """Draw ``n`` pattern ids: each tumour pattern is present with its
    ``presence`` probability and takes at least one slot; the rest are
    multinomial over background and the present patterns."""
    present = [t + 1 for t, p in enumerate(recipe.presence) if rng.random() < p]
    if not present:
        return np.zeros(n, dtype=np.int64)
    weights = [rng.uniform(*recipe.background_weight)]
    weights += [rng.uniform(*recipe.tumor_weight) for _ in present]
    weights = np.asarray(weights)
    if weights.sum() <= 0:
        weights[1:] = 1.0
    cats = np.array([0] + present)
    rng.shuffle(present)
    forced = np.array(present[:n], dtype=np.int64)
    rest = rng.choice(cats, size=n - len(forced), p=weights / weights.sum())
    ids = np.concatenate([forced, rest]).astype(np.int64)
    rng.shuffle(ids)
    return ids


# -- feature bags ----------------------------------------------------------------

def gen_feature_bags(recipe: BagRecipe) -> list[Bag]:
    if recipe.kind != "feature":
        raise RecipeError("gen_feature_bags needs a feature recipe")
    return [_feature_bag(recipe, i, recipe.patterns.means(recipe.seed)) for i in range(recipe.count)]


def _feature_bag(recipe: BagRecipe, index: int, means: np.ndarray) -> Bag:
    rng = philox(recipe.seed, _STREAM_BAG, index)
    k = int(rng.integers(recipe.k_min, recipe.k_max + 1))
    ids = sample_composition(rng, k, recipe)
    noise = rng.standard_normal((k, recipe.patterns.feature_dim))
    x = (means[ids] + recipe.patterns.noise * noise).astype(np.float32)
    return Bag(index, x, apply_label_rule(recipe.label_rule, ids), ids)


# -- image bags --------------------------------------------------------------------

def _texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "flat":
        t = np.zeros((size, size))
    elif kind == "stripes":
        t = np.sign(np.sin(2 * np.pi * (xx + yy) / 8.0 + rng.uniform(0, 2 * np.pi)))
    elif kind == "checker":
        t = np.where(((xx // 4) + (yy // 4)) % 2 == 0, 1.0, -1.0)
    else:
        t = np.full((size, size), -1.0)
        for _ in range(max(1, size * size // 96)):
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(2.0, 4.0)
            t[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = 1.0
    return t


def render_slide(recipe: BagRecipe, rng: np.random.Generator, region_patterns: np.ndarray) -> Slide:
    """Paint tissue regions with per-pattern textures on a near-white slide."""
    s, r = recipe.slide_size, recipe.region_size
    spec = recipe.patterns
    image = 1.0 - 0.03 * rng.random((3, s, s))
    pix = np.full((s, s), -1, dtype=np.int64)
    tint = np.array([1.0, 0.75, 0.9])[:, None, None]
    for (i, j), p in np.ndenumerate(region_patterns):
        if p < 0:
            continue
        tex = _texture(spec.textures[p], r, rng)
        base = spec.intensities[p] + 0.12 * tex + 0.04 * rng.standard_normal((r, r))
        image[:, i * r:(i + 1) * r, j * r:(j + 1) * r] = np.clip(base[None] * tint, 0.0, 1.0)
        pix[i * r:(i + 1) * r, j * r:(j + 1) * r] = p
    return Slide(image.astype(np.float32), pix, region_patterns)


def tile_slide(slide: Slide, tile: int, offset: tuple[int, int] = (0, 0),
               fg_threshold: float = 0.85, slide_id: int | str = "?") -> tuple[np.ndarray, np.ndarray]:
    """Cut the slide into a grid of ``tile`` x ``tile`` patches starting at
    ``offset`` (row, col) and keep those with mean intensity below the
    threshold. Returns (tiles (n, 3, t, t), majority tissue pattern per tile)."""
    oy, ox = offset
    _, h, w = slide.image.shape
    ny, nx = (h - oy) // tile, (w - ox) // tile
    if ny < 1 or nx < 1:
        raise ForegroundError(f"slide {slide_id}: offset {offset} leaves no complete tile")
    img = slide.image[:, oy:oy + ny * tile, ox:ox + nx * tile]
    tiles = img.reshape(3, ny, tile, nx, tile).transpose(1, 3, 0, 2, 4).reshape(ny * nx, 3, tile, tile)
    pix = slide.pixel_patterns[oy:oy + ny * tile, ox:ox + nx * tile]
    pix = pix.reshape(ny, tile, nx, tile).transpose(0, 2, 1, 3).reshape(ny * nx, tile * tile)
    keep = tiles.mean(axis=(1, 2, 3)) < fg_threshold
    if not keep.any():
        raise ForegroundError(f"slide {slide_id}: no foreground tiles below threshold {fg_threshold}")
    pats = []
    for row in pix[keep]:
        tissue = row[row >= 0]
        if tissue.size == 0:
            pats.append(-1)
            continue
        counts = np.bincount(tissue)
        pats.append(int(len(counts) - 1 - np.argmax(counts[::-1])))
    return np.ascontiguousarray(tiles[keep]), np.asarray(pats, dtype=np.int64)


def sample_tiles(bag: Bag, recipe: BagRecipe, rng: np.random.Generator,
                 max_instances: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Training-time view of an image bag: random grid offset, foreground
    filter, then a uniform subset of at most ``max_instances`` tiles."""
    if bag.slide is None:
        raise RecipeError("sample_tiles needs an image bag")
    k = max_instances or recipe.max_instances
    offset = tuple(int(v) for v in rng.integers(0, recipe.tile_size, size=2))
    tiles, pats = tile_slide(bag.slide, recipe.tile_size, offset, recipe.fg_threshold, bag.id)
    if len(tiles) > k:
        idx = np.sort(rng.choice(len(tiles), size=k, replace=False))
        tiles, pats = tiles[idx], pats[idx]
    return tiles, pats


def render_slide_and_tile(recipe: BagRecipe) -> list[Bag]:
    """Image bags. ``instances`` holds every foreground tile of the zero-offset
    grid (the evaluation view); training resamples via :func:`sample_tiles`."""
    if recipe.kind != "image":
        raise RecipeError("render_slide_and_tile needs an image recipe")
    return [_image_bag(recipe, i) for i in range(recipe.count)]


def _image_bag(recipe: BagRecipe, index: int) -> Bag:
    rng = philox(recipe.seed, _STREAM_BAG, index)
    n_reg = recipe.slide_size // recipe.region_size
    lo, hi = recipe.tissue_regions
    n_tissue = int(rng.integers(max(1, lo), min(hi, n_reg * n_reg) + 1))
    regions = np.full(n_reg * n_reg, -1, dtype=np.int64)
    cells = rng.choice(n_reg * n_reg, size=n_tissue, replace=False)
    regions[cells] = sample_composition(rng, n_tissue, recipe)
    regions = regions.reshape(n_reg, n_reg)
    slide = render_slide(recipe, rng, regions)
    label = apply_label_rule(recipe.label_rule, regions.ravel())
    tiles, pats = tile_slide(slide, recipe.tile_size, (0, 0), recipe.fg_threshold, index)
    return Bag(index, tiles, label, pats, slide)


def generate(recipe: BagRecipe) -> list[Bag]:
    bags = gen_feature_bags(recipe) if recipe.kind == "feature" else render_slide_and_tile(recipe)
    self_check(bags, recipe)
    return bags


def self_check(bags: Sequence[Bag], recipe: BagRecipe) -> None:
    """Recompute every label from the hidden patterns; raise on mismatch."""
    for bag in bags:
        source = bag.slide.region_patterns.ravel() if bag.slide is not None else bag.patterns
        if apply_label_rule(recipe.label_rule, source) != bag.label:
            raise AssertionError(f"bag {bag.id}: stored label {bag.label} disagrees with its patterns")


# -- splits --------------------------------------------------------------------

def kfold_split(labels: Sequence[int] | Sequence[Bag], folds: int = 5, seed: int = 0
                ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Label-stratified k-fold partition returning (train ids, val ids) pairs.

    Members of each class are shuffled and dealt round-robin; the dealing
    position carries over between classes so fold sizes differ by at most one.
    """
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if len(labels) and isinstance(labels[0], Bag):
        ids = np.array([b.id for b in labels])
        labels = [b.label for b in labels]
    else:
        ids = np.arange(len(labels))
    labels = np.asarray(labels)
    if len(labels) < folds:
        raise ValueError(f"{len(labels)} bags cannot fill {folds} folds")
    rng = philox(seed, _STREAM_SPLIT)
    assign = np.empty(len(labels), dtype=np.int64)
    pos = 0
    for c in np.unique(labels):
        members = np.nonzero(labels == c)[0]
        rng.shuffle(members)
        assign[members] = (pos + np.arange(len(members))) % folds
        pos = (pos + len(members)) % folds
    return [(np.sort(ids[assign != f]), np.sort(ids[assign == f])) for f in range(folds)]


# -- persistence ------------------------------------------------------------------

def write_manifest(path, recipe: BagRecipe) -> None:
    with open(path, "w") as fh:
        json.dump({"format": "depmil-manifest/1", "recipe": recipe.to_dict()}, fh, indent=2)


def read_manifest(path) -> BagRecipe:
    with open(path) as fh:
        doc = json.load(fh)
    return BagRecipe.from_dict(doc["recipe"])


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def write_bags_jsonl(path, bags: Iterable[Bag]) -> None:
    with open(path, "w") as fh:
        for b in bags:
            fh.write(json.dumps({
                "id": b.id,
                "label": b.label,
                "shape": list(b.instances.shape),
                "instances": _b64(b.instances),
                "patterns": b.patterns.tolist(),
            }) + "\n")


def read_bags_jsonl(path) -> list[Bag]:
    bags = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            x = np.frombuffer(base64.b64decode(d["instances"]), dtype="<f4").reshape(d["shape"])
            bags.append(Bag(d["id"], x.astype(np.float32), d["label"], np.asarray(d["patterns"])))
    return bags
