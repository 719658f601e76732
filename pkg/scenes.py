"""
Synthetic "what-where world": grounding samples with a tunable 2D-semantic
shortcut, per-object 2D/3D feature synthesis and JSON-lines datasets.

Every sample draws from its own RNG stream, derived from
(world seed, split, sample index); features use a sibling stream, so
generation and featurization are reproducible sample by sample.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import storage
from config import RELATIONS, WorldConfig
from errors import DataIOError, SceneGenerationError
from geometry import Box3

logger = logging.getLogger(__name__)

SPLIT_CODES = {"train": 0, "val": 1, "probe": 2}
_FEATURE_STREAM = 1
_CATEGORY_SIZE_STREAM = 7919
SPATIAL_RELATIONS = RELATIONS[:4]


@dataclass(frozen=True)
class SceneObject:
    category: int
    box: Box3

    def to_dict(self) -> dict:
        return {"category": int(self.category), **self.box.to_dict()}


@dataclass(frozen=True)
class Query:
    category: int
    relation: str
    anchor: Optional[Tuple[float, float, float]] = None

    def to_dict(self) -> dict:
        d = {"category": int(self.category), "relation": self.relation}
        if self.anchor is not None:
            d["anchor"] = [float(a) for a in self.anchor]
        return d


@dataclass(frozen=True)
class GroundingSample:
    objects: Tuple[SceneObject, ...]
    query: Query
    target_index: int

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def target_box(self) -> Box3:
        return self.objects[self.target_index].box

    def category_multiplicity(self) -> int:
        return sum(1 for o in self.objects if o.category == self.query.category)

    def to_dict(self) -> dict:
        return {
            "objects": [o.to_dict() for o in self.objects],
            "query": self.query.to_dict(),
            "target_index": int(self.target_index),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundingSample":
        objects = tuple(
            SceneObject(int(o["category"]), Box3(tuple(o["center"]), tuple(o["size"])))
            for o in d["objects"]
        )
        q = d["query"]
        anchor = tuple(float(a) for a in q["anchor"]) if q.get("anchor") is not None else None
        return cls(objects, Query(int(q["category"]), str(q["relation"]), anchor), int(d["target_index"]))


@dataclass
class FeatureView:
    f2d: np.ndarray  # [N, C + 2]
    f3d: np.ndarray  # [N, 6]


@dataclass
class GroundingSplit:
    name: str
    samples: List[GroundingSample]
    views: List[FeatureView] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def pairs(self) -> List[Tuple[GroundingSample, FeatureView]]:
        return list(zip(self.samples, self.views))


def sample_rng(seed: int, split: str, index: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, SPLIT_CODES[split], int(index), stream])
    return np.random.default_rng(ss)


def category_sizes(cfg: WorldConfig) -> np.ndarray:
    """Characteristic (dx, dy, dz) per category, fixed by the world seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, _CATEGORY_SIZE_STREAM]))
    return rng.uniform(cfg.size_min, cfg.size_max, size=(cfg.num_categories, 3))


def resolve_query(objects: Sequence[SceneObject], query: Query) -> List[int]:
    """Indices of every object satisfying category AND relation."""
    candidates = [i for i, o in enumerate(objects) if o.category == query.category]
    if not candidates or query.relation == "none":
        return candidates
    keys = _relation_keys(objects, candidates, query)
    best = max(keys)
    return [i for i, k in zip(candidates, keys) if k == best]


def _relation_keys(objects: Sequence[SceneObject], candidates: Sequence[int], query: Query) -> List[float]:
    """Scores where the referred object has the largest value."""
    if query.relation == "leftmost":
        return [-objects[i].box.center[0] for i in candidates]
    if query.relation == "rightmost":
        return [objects[i].box.center[0] for i in candidates]
    if query.anchor is None:
        raise SceneGenerationError(f"relation {query.relation} needs an anchor")
    anchor = np.asarray(query.anchor)
    dists = [float(np.linalg.norm(np.asarray(objects[i].box.center) - anchor)) for i in candidates]
    if query.relation == "nearest_to_anchor":
        return [-d for d in dists]
    if query.relation == "farthest_from_anchor":
        return dists
    raise SceneGenerationError(f"unknown relation {query.relation!r}")


def validate_sample(sample: GroundingSample, cfg: WorldConfig) -> None:
    n = sample.num_objects
    if n < 2:
        raise SceneGenerationError("scenes need at least 2 objects")
    if not 0 <= sample.target_index < n:
        raise SceneGenerationError(f"target_index {sample.target_index} out of range for {n} objects")
    if any(not 0 <= o.category < cfg.num_categories for o in sample.objects):
        raise SceneGenerationError("object category out of range")
    if sample.query.relation not in RELATIONS:
        raise SceneGenerationError(f"unknown relation {sample.query.relation!r}")
    if sample.objects[sample.target_index].category != sample.query.category:
        raise SceneGenerationError("target category differs from query category")
    if sample.query.relation == "none" and sample.category_multiplicity() != 1:
        raise SceneGenerationError("relation 'none' needs a unique query category")
    matches = resolve_query(sample.objects, sample.query)
    if matches != [sample.target_index]:
        raise SceneGenerationError(f"query is ambiguous or wrong: matches {matches}, target {sample.target_index}")


def _place_objects(rng: np.random.Generator, sizes: np.ndarray, cfg: WorldConfig) -> Optional[List[Box3]]:
    """Rejection-sample non-overlapping floor-standing boxes inside the unit cube."""
    boxes: List[Box3] = []
    for size in sizes:
        for _ in range(cfg.max_attempts):
            center = (
                float(rng.uniform(size[0] / 2, 1 - size[0] / 2)),
                float(rng.uniform(size[1] / 2, 1 - size[1] / 2)),
                float(size[2] / 2),
            )
            box = Box3(center, (float(size[0]), float(size[1]), float(size[2])))
            if all(not _overlaps(box, other) for other in boxes):
                boxes.append(box)
                break
        else:
            return None
    return boxes


def _overlaps(a: Box3, b: Box3) -> bool:
    return bool(np.all(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo) > 0))


def _has_margin(objects: Sequence[SceneObject], query: Query, margin: float) -> bool:
    candidates = [i for i, o in enumerate(objects) if o.category == query.category]
    if len(candidates) < 2 or query.relation == "none":
        return True
    keys = sorted(_relation_keys(objects, candidates, query), reverse=True)
    return keys[0] - keys[1] >= margin


def generate_sample(rng: np.random.Generator, cfg: WorldConfig,
                    sizes: Optional[np.ndarray] = None) -> GroundingSample:
    """
    Draw one grounding sample. With probability rho the target category is
    unique in the scene; otherwise it is shared by k >= 2 objects and only the
    spatial relation picks the target.
    """
    if sizes is None:
        sizes = category_sizes(cfg)
    C = cfg.num_categories
    # drawn once so the unique-category fraction is exactly Binomial(rho)
    shortcut = bool(rng.random() < cfg.rho)
    target_cat = int(rng.integers(C))
    others = [c for c in range(C) if c != target_cat]
    for _ in range(cfg.max_attempts):
        n = int(rng.integers(cfg.num_objects_min, cfg.num_objects_max + 1))
        if shortcut:
            k = 1
            relation = RELATIONS[int(rng.integers(len(RELATIONS)))]
        else:
            k = int(rng.integers(2, n + 1))
            relation = SPATIAL_RELATIONS[int(rng.integers(len(SPATIAL_RELATIONS)))]
        categories = [target_cat] * k + [others[int(j)] for j in rng.integers(len(others), size=n - k)]
        jitter = rng.uniform(0.9, 1.1, size=(n, 3))
        object_sizes = sizes[categories] * jitter

        boxes = _place_objects(rng, object_sizes, cfg)
        if boxes is None:
            continue
        anchor = None
        if relation in ("nearest_to_anchor", "farthest_from_anchor"):
            anchor = tuple(float(a) for a in rng.uniform(0.0, 1.0, size=3))

        order = rng.permutation(n)
        objects = tuple(SceneObject(categories[j], boxes[j]) for j in order)
        query = Query(target_cat, relation, anchor)
        if not _has_margin(objects, query, cfg.relation_margin):
            continue
        matches = resolve_query(objects, query)
        if len(matches) != 1:
            continue
        sample = GroundingSample(objects, query, matches[0])
        validate_sample(sample, cfg)
        return sample
    raise SceneGenerationError(
        f"could not generate a valid scene in {cfg.max_attempts} attempts; config too crowded?")


def quantize(values: np.ndarray, q_grid: float) -> np.ndarray:
    """Snap to the center of the q_grid cell containing each value."""
    return (np.floor(values / q_grid) + 0.5) * q_grid


def featurize(sample: GroundingSample, cfg: WorldConfig, rng: np.random.Generator) -> FeatureView:
    """
    f2d: one-hot category + grid-quantized xy position (noise on position only).
    f3d: exact center and size plus noise; no category information.
    """
    n = sample.num_objects
    C = cfg.num_categories
    centers = np.array([o.box.center for o in sample.objects], dtype=np.float64)
    sizes = np.array([o.box.size for o in sample.objects], dtype=np.float64)

    onehot = np.zeros((n, C))
    onehot[np.arange(n), [o.category for o in sample.objects]] = 1.0
    position = quantize(centers[:, :2], cfg.q_grid)
    if cfg.sigma2d > 0:
        position = position + rng.normal(0.0, cfg.sigma2d, size=position.shape)
    f2d = np.concatenate([onehot, position], axis=1)

    f3d = np.concatenate([centers, sizes], axis=1)
    if cfg.sigma3d > 0:
        f3d = f3d + rng.normal(0.0, cfg.sigma3d, size=f3d.shape)
    return FeatureView(f2d, f3d)


def generate_split(cfg: WorldConfig, split: str, count: Optional[int] = None) -> GroundingSplit:
    """Generate and featurize a split in memory."""
    if count is None:
        count = cfg.train_count if split == "train" else cfg.val_count
    sizes = category_sizes(cfg)
    samples = [generate_sample(sample_rng(cfg.seed, split, i), cfg, sizes) for i in range(count)]
    return attach_features(GroundingSplit(split, samples), cfg)


def attach_features(split: GroundingSplit, cfg: WorldConfig) -> GroundingSplit:
    split.views = [
        featurize(s, cfg, sample_rng(cfg.seed, split.name, i, _FEATURE_STREAM))
        for i, s in enumerate(split.samples)
    ]
    return split


def split_path(out_dir: str, split: str) -> str:
    return os.path.join(out_dir, f"{split}.jsonl")


def build_dataset(cfg: WorldConfig, out_dir: Optional[str] = None) -> Dict[str, GroundingSplit]:
    """Generate train and val splits; write them as JSON-lines when out_dir is given."""
    cfg.validate()
    splits = {}
    for name in ("train", "val"):
        split = generate_split(cfg, name)
        logger.info(f"Generated {len(split)} {name} samples (rho={cfg.rho}, seed={cfg.seed})")
        if out_dir is not None:
            path = split_path(out_dir, name)
            storage.write_jsonl(path, (s.to_dict() for s in split.samples))
            logger.info(f"Wrote {path}")
        splits[name] = split
    return splits


def load_split(path: str, cfg: WorldConfig, split: Optional[str] = None) -> GroundingSplit:
    """Parse a JSON-lines split, re-validate every sample and derive its features."""
    if split is None:
        stem = os.path.splitext(os.path.basename(path))[0]
        split = stem if stem in SPLIT_CODES else "probe"
    samples = []
    for line_no, record in storage.read_jsonl(path):
        try:
            sample = GroundingSample.from_dict(record)
            validate_sample(sample, cfg)
        except (KeyError, TypeError, ValueError, SceneGenerationError) as e:
            raise DataIOError(f"{path}:{line_no}: invalid sample: {e}")
        samples.append(sample)
    return attach_features(GroundingSplit(split, samples), cfg)


def load_dataset(data_dir: str, cfg: WorldConfig) -> Dict[str, GroundingSplit]:
    return {name: load_split(split_path(data_dir, name), cfg, name) for name in ("train", "val")}


# Reference solvers

def chance_baseline(samples: Sequence[GroundingSample]) -> float:
    """Random-guess accuracy: mean of 1/N over scenes."""
    if not samples:
        raise ValueError("chance baseline needs at least one sample")
    return float(np.mean([1.0 / s.num_objects for s in samples]))


def category_oracle_expected(samples: Sequence[GroundingSample]) -> float:
    """Expected accuracy of picking uniformly among objects matching the query category."""
    if not samples:
        raise ValueError("oracle needs at least one sample")
    return float(np.mean([1.0 / s.category_multiplicity() for s in samples]))


def category_oracle_pick(sample: GroundingSample, view: FeatureView, rng: np.random.Generator) -> int:
    """Category-only solver reading f2d's one-hot block."""
    cats = np.argmax(view.f2d[:, :-2], axis=1)
    matches = np.flatnonzero(cats == sample.query.category)
    return int(matches[int(rng.integers(len(matches)))])


def geometry_oracle_pick(sample: GroundingSample, view: FeatureView) -> int:
    """Resolve the query with f2d categories and f3d positions."""
    cats = np.argmax(view.f2d[:, :-2], axis=1)
    pseudo = tuple(
        SceneObject(int(c), Box3(tuple(view.f3d[i, :3]), tuple(np.abs(view.f3d[i, 3:]) + 1e-9)))
        for i, c in enumerate(cats)
    )
    matches = resolve_query(pseudo, sample.query)
    return matches[0] if matches else -1
