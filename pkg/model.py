"""
Two-encoder fusion model.

    h2    = E2D(f2d)                      per object, 2-layer MLP
    h3    = E3D(f3d)  (zeros in the shortcut pass)
    z     = Phi(h2, h3) = MLP(concat(h2, h3))
    d     = 2 ReLU layers over concat(z, embed(q))
    logit = d . w_logit,  box = (scene_center + offset, exp(log_size))

Scenes are collated into a padded SceneBatch and every per-object layer is
one matmul over all object rows of the batch. Both passes read the same
parameter tensors; nothing here copies parameters.
"""
import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
import storage
from config import RELATIONS, ModelConfig, WorldConfig, config_from_dict, config_to_dict
from errors import ConfigError, ShapeError
from geometry import Box3
from scenes import FeatureView, GroundingSample

logger = logging.getLogger(__name__)

SCENE_CENTER = 0.5
MASK_VALUE = -1e30
BOX_WIDTH = 6


def f2d_width(num_categories: int) -> int:
    return num_categories + 2


def query_width(num_categories: int) -> int:
    return num_categories + len(RELATIONS) + 3


def param_shapes(cfg: ModelConfig, num_categories: int) -> Dict[str, Tuple[int, int]]:
    shapes = {}

    def linear(name, fan_in, fan_out):
        shapes[f"{name}.w"] = (fan_in, fan_out)
        shapes[f"{name}.b"] = (1, fan_out)

    linear("e2d.l1", f2d_width(num_categories), cfg.d2d)
    linear("e2d.l2", cfg.d2d, cfg.d2d)
    linear("e3d.l1", BOX_WIDTH, cfg.d3d)
    linear("e3d.l2", cfg.d3d, cfg.d3d)
    linear("query", query_width(num_categories), cfg.dq)
    linear("fusion.l1", cfg.d2d + cfg.d3d, cfg.dh)
    linear("fusion.l2", cfg.dh, cfg.dh)
    linear("decoder.l1", cfg.dh + cfg.dq, cfg.dh)
    linear("decoder.l2", cfg.dh, cfg.dh)
    linear("head.logit", cfg.dh, 1)
    linear("head.box", cfg.dh, BOX_WIDTH)
    return shapes


class ModelParams:
    """Named float64 parameter arrays. Training updates them in place."""

    def __init__(self, arrays: Dict[str, np.ndarray], config: ModelConfig, num_categories: int):
        expected = param_shapes(config, num_categories)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ConfigError(f"parameter names do not match the model config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ConfigError(f"parameter {name}: shape {arrays[name].shape}, config expects {shape}")
        self.arrays = {name: arrays[name] for name in expected}
        self.config = config
        self.num_categories = num_categories

    @classmethod
    def init(cls, config: ModelConfig, num_categories: int) -> "ModelParams":
        """Uniform(-s, s) with s = init_scale or 1/sqrt(fan_in), from the config seed."""
        config.validate()
        rng = np.random.default_rng(np.random.SeedSequence([int(config.seed) & 0xFFFFFFFFFFFFFFFF]))
        arrays = {}
        shapes = param_shapes(config, num_categories)
        for name, shape in shapes.items():
            fan_in = shapes[name[:-1] + "w"][0]
            bound = config.init_scale if config.init_scale is not None else 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(arrays, config, num_categories)

    def names(self) -> List[str]:
        return list(self.arrays)

    def bind(self, graph: ad.Graph) -> Dict[str, ad.Tensor]:
        """Trainable leaves sharing storage with the parameter arrays."""
        return {name: graph.leaf(a) for name, a in self.arrays.items()}

    def constants(self) -> Dict[str, ad.Tensor]:
        return {name: ad.Tensor(a) for name, a in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.config, self.num_categories)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, a in self.arrays.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


@dataclass
class SceneBatch:
    sizes: np.ndarray          # [B] object counts
    n_pad: int
    f2d: np.ndarray            # [B*n_pad, C+2]
    f3d: np.ndarray            # [B*n_pad, 6]
    query: np.ndarray          # [B, Q]
    spread: np.ndarray         # [B*n_pad, B] row -> sample
    segment: np.ndarray        # [B, B*n_pad] 1 on valid rows
    pool: np.ndarray           # [B, B*n_pad] 1/n on valid rows
    logit_mask: np.ndarray     # [B, n_pad] 0 valid, MASK_VALUE padding
    targets: np.ndarray        # [B]
    target_onehot: np.ndarray  # [B, n_pad]
    target_rows: np.ndarray    # [B, B*n_pad]
    gt_boxes: np.ndarray       # [B, 6]
    sample_ids: np.ndarray     # [B] index into the source split

    @property
    def batch_size(self) -> int:
        return int(self.sizes.shape[0])

    @property
    def rows(self) -> int:
        return self.batch_size * self.n_pad

    def sample(self, b: int) -> "SceneBatch":
        """Sample b alone, with the same padding."""
        rows = slice(b * self.n_pad, (b + 1) * self.n_pad)
        one = slice(b, b + 1)
        return SceneBatch(
            self.sizes[one], self.n_pad, self.f2d[rows], self.f3d[rows], self.query[one],
            np.ones((self.n_pad, 1)), self.segment[one, rows], self.pool[one, rows], self.logit_mask[one],
            self.targets[one], self.target_onehot[one], self.target_rows[one, rows], self.gt_boxes[one],
            self.sample_ids[one],
        )


def query_features(sample: GroundingSample, num_categories: int) -> np.ndarray:
    q = np.zeros(query_width(num_categories))
    q[sample.query.category] = 1.0
    q[num_categories + RELATIONS.index(sample.query.relation)] = 1.0
    if sample.query.anchor is not None:
        q[-3:] = sample.query.anchor
    return q


def collate(pairs: Sequence[Tuple[GroundingSample, FeatureView]], num_categories: int,
            sample_ids: Optional[Sequence[int]] = None, n_max: Optional[int] = None) -> SceneBatch:
    if not pairs:
        raise ShapeError("cannot collate an empty batch")
    B = len(pairs)
    sizes = np.array([s.num_objects for s, _ in pairs])
    n_pad = int(sizes.max())
    if n_max is not None and n_pad > n_max:
        raise ShapeError(f"scene with {n_pad} objects exceeds the model's n_max={n_max}")
    M = B * n_pad
    width2d = f2d_width(num_categories)

    f2d = np.zeros((M, width2d))
    f3d = np.zeros((M, BOX_WIDTH))
    query = np.zeros((B, query_width(num_categories)))
    spread = np.zeros((M, B))
    segment = np.zeros((B, M))
    pool = np.zeros((B, M))
    logit_mask = np.full((B, n_pad), MASK_VALUE)
    targets = np.zeros(B, dtype=np.int64)
    target_onehot = np.zeros((B, n_pad))
    target_rows = np.zeros((B, M))
    gt_boxes = np.zeros((B, BOX_WIDTH))

    for b, (sample, view) in enumerate(pairs):
        n = sample.num_objects
        if view.f2d.shape != (n, width2d) or view.f3d.shape != (n, BOX_WIDTH):
            raise ShapeError(f"feature widths {view.f2d.shape}/{view.f3d.shape} do not match {n} objects "
                             f"and {num_categories} categories")
        rows = slice(b * n_pad, b * n_pad + n)
        f2d[rows] = view.f2d
        f3d[rows] = view.f3d
        query[b] = query_features(sample, num_categories)
        spread[b * n_pad:(b + 1) * n_pad, b] = 1.0
        segment[b, rows] = 1.0
        pool[b, rows] = 1.0 / n
        logit_mask[b, :n] = 0.0
        targets[b] = sample.target_index
        target_onehot[b, sample.target_index] = 1.0
        target_rows[b, b * n_pad + sample.target_index] = 1.0
        gt_boxes[b] = sample.target_box.as_array()

    ids = np.arange(B) if sample_ids is None else np.asarray(sample_ids)
    return SceneBatch(sizes, n_pad, f2d, f3d, query, spread, segment, pool, logit_mask,
                      targets, target_onehot, target_rows, gt_boxes, ids)


def collate_chunks(pairs: Sequence[Tuple[GroundingSample, FeatureView]], num_categories: int,
                   n_max: Optional[int] = None, chunk: int = 256) -> List[SceneBatch]:
    """Split a whole split into consecutive batches; sample_ids index the split."""
    if not pairs:
        raise ShapeError("cannot collate an empty split")
    return [
        collate(pairs[i:i + chunk], num_categories, range(i, min(i + chunk, len(pairs))), n_max)
        for i in range(0, len(pairs), chunk)
    ]


@dataclass
class ModelOutput:
    logits: ad.Tensor      # [B, n_pad], padding masked
    probs: ad.Tensor       # [B, n_pad]
    raw_boxes: ad.Tensor   # [B*n_pad, 6] (center offset, log size)
    boxes: ad.Tensor       # [B*n_pad, 6] (center, size)
    soft_box: ad.Tensor    # [B, 6]
    features: Dict[str, ad.Tensor]
    batch: SceneBatch
    shortcut: bool

    def sample_logits(self, b: int) -> np.ndarray:
        return self.logits.value[b, :int(self.batch.sizes[b])]

    def argmax_indices(self) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest index
        return np.argmax(self.logits.value, axis=1)


ParamSource = Union[ModelParams, Mapping[str, ad.Tensor]]


def _tensors(params: ParamSource) -> Mapping[str, ad.Tensor]:
    return params.constants() if isinstance(params, ModelParams) else params


def _linear(x: ad.Tensor, p: Mapping[str, ad.Tensor], name: str, ones: ad.Tensor) -> ad.Tensor:
    # bias rows come from a ones-column matmul; the kernel has no broadcasting
    return ad.add(ad.matmul(x, p[f"{name}.w"]), ad.matmul(ones, p[f"{name}.b"]))


def _mlp2(x: ad.Tensor, p: Mapping[str, ad.Tensor], name: str, ones: ad.Tensor) -> ad.Tensor:
    h = ad.relu(_linear(x, p, f"{name}.l1", ones))
    return _linear(h, p, f"{name}.l2", ones)


def _forward(params: ParamSource, batch: SceneBatch, shortcut: bool, stopgrad_2d: bool) -> ModelOutput:
    p = _tensors(params)
    M, B = batch.rows, batch.batch_size
    expected_2d = p["e2d.l1.w"].shape[0]
    if batch.f2d.shape[1] != expected_2d:
        raise ShapeError(f"f2d width {batch.f2d.shape[1]} does not match the model ({expected_2d})")
    ones_rows = ad.Tensor(np.ones((M, 1)))
    ones_batch = ad.Tensor(np.ones((B, 1)))

    h2 = _mlp2(ad.Tensor(batch.f2d), p, "e2d", ones_rows)
    if shortcut and stopgrad_2d:
        h2 = ad.stop_gradient(h2)
    d3d = p["e3d.l2.w"].shape[1]
    if shortcut:
        h3 = ad.Tensor(np.zeros((M, d3d)))
    else:
        h3 = _mlp2(ad.Tensor(batch.f3d), p, "e3d", ones_rows)

    fused = _mlp2(ad.concat_lastaxis(h2, h3), p, "fusion", ones_rows)

    q = ad.relu(_linear(ad.Tensor(batch.query), p, "query", ones_batch))
    q_rows = ad.matmul(ad.Tensor(batch.spread), q)

    d = ad.relu(_linear(ad.concat_lastaxis(fused, q_rows), p, "decoder.l1", ones_rows))
    d = ad.relu(_linear(d, p, "decoder.l2", ones_rows))

    logit_rows = _linear(d, p, "head.logit", ones_rows)
    logits = ad.add(ad.reshape(logit_rows, (B, batch.n_pad)), ad.Tensor(batch.logit_mask))
    probs = ad.softmax_lastaxis(logits)

    raw = _linear(d, p, "head.box", ones_rows)
    centers = ad.add(ad.slice_lastaxis(raw, 0, 3), ad.Tensor(np.full((M, 3), SCENE_CENTER)))
    sizes = ad.exp(ad.slice_lastaxis(raw, 3, 6))
    boxes = ad.concat_lastaxis(centers, sizes)

    weights = ad.matmul(ad.reshape(probs, (M, 1)), ad.Tensor(np.ones((1, BOX_WIDTH))))
    soft_box = ad.matmul(ad.Tensor(batch.segment), ad.mul(weights, boxes))

    return ModelOutput(logits, probs, raw, boxes, soft_box,
                       {"2d": h2, "3d": h3, "fused": fused}, batch, shortcut)


def forward_fused(params: ParamSource, batch: SceneBatch) -> ModelOutput:
    """Full pass: Phi(E2D(f2d), E3D(f3d)) decoded with the query."""
    return _forward(params, batch, shortcut=False, stopgrad_2d=False)


def forward_shortcut(params: ParamSource, batch: SceneBatch, stopgrad_2d: bool = False) -> ModelOutput:
    """
    2D-only pass: the 3D encoder output is replaced by zeros. With
    stopgrad_2d the 2D encoder output is wrapped in stop_gradient, so losses
    on this pass never reach E2D.
    """
    return _forward(params, batch, shortcut=True, stopgrad_2d=stopgrad_2d)


def predict_box_arrays(out: ModelOutput, mode: str = "argmax") -> np.ndarray:
    if mode == "soft":
        return out.soft_box.value.copy()
    if mode == "argmax":
        rows = np.arange(out.batch.batch_size) * out.batch.n_pad + out.argmax_indices()
        return out.boxes.value[rows].copy()
    raise ValueError(f"unknown box mode {mode!r}")


def predict_box(out: ModelOutput, mode: str = "argmax") -> List[Box3]:
    """Concrete boxes per sample: softmax-weighted (soft) or highest-logit object (argmax)."""
    return [Box3.from_array(row) for row in predict_box_arrays(out, mode)]


def _array(params: ParamSource, name: str) -> np.ndarray:
    return params.arrays[name] if isinstance(params, ModelParams) else params[name].value


def pooled_features(params: ParamSource, out: ModelOutput) -> Dict[str, np.ndarray]:
    """
    Per-sample mean of per-object features in the shared fusion space: the
    first fusion layer applied to [h2, 0], [0, h3] and [h2, h3]. Every
    population is [B, dh].
    """
    w, b = _array(params, "fusion.l1.w"), _array(params, "fusion.l1.b")
    h2, h3 = out.features["2d"].value, out.features["3d"].value
    d2d = h2.shape[1]
    rows = {"2d": h2 @ w[:d2d], "3d": h3 @ w[d2d:]}
    rows["fused"] = rows["2d"] + rows["3d"]
    # np.maximum keeps NaN
    return {name: out.batch.pool @ np.maximum(r + b, 0.0) for name, r in rows.items()}


# Checkpoints

def checkpoint_dict(params: ModelParams, world: Optional[WorldConfig] = None) -> dict:
    data = {
        "model_config": config_to_dict(params.config),
        "num_categories": params.num_categories,
        "tensors": {
            name: {"shape": list(a.shape), "data": a.reshape(-1).tolist()}
            for name, a in params.arrays.items()
        },
    }
    if world is not None:
        data["world_config"] = config_to_dict(world)
    return data


def save_checkpoint(params: ModelParams, path: str, world: Optional[WorldConfig] = None) -> None:
    storage.write_json(path, checkpoint_dict(params, world))
    logger.info(f"Saved checkpoint ({params.count()} parameters) -> {path}")


def load_checkpoint(path: str) -> Tuple[ModelParams, Optional[WorldConfig]]:
    """Load a checkpoint; shape or schema problems raise ConfigError."""
    data = storage.read_json(path)
    try:
        config = config_from_dict(ModelConfig, data["model_config"])
        num_categories = int(data["num_categories"])
        arrays = {}
        for name, entry in data["tensors"].items():
            shape = tuple(int(d) for d in entry["shape"])
            values = np.asarray(entry["data"], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise ConfigError(f"tensor {name}: {values.size} values for shape {shape}")
            if not np.all(np.isfinite(values)):
                raise ConfigError(f"tensor {name}: non-finite values")
            arrays[name] = values.reshape(shape)
        world = config_from_dict(WorldConfig, data["world_config"]) if "world_config" in data else None
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{path}: malformed checkpoint: {e}")
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}")
    try:
        params = ModelParams(arrays, config, num_categories)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}")
    return params, world
