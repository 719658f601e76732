"""
Shortcut diagnostics: the 2D-only probe and the representation-separation
index computed from pooled encoder features.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from errors import ShapeError
from geometry import acc_at, iou3d_batch
from model import (ModelOutput, ModelParams, SceneBatch, collate_chunks, forward_fused,
                   forward_shortcut, pooled_features, predict_box_arrays)
from scenes import GroundingSplit, category_oracle_expected, chance_baseline

logger = logging.getLogger(__name__)

SplitOrBatches = Union[GroundingSplit, Sequence[SceneBatch]]


def score_pass(out: ModelOutput) -> Dict[str, np.ndarray]:
    """Per-sample selection hit, argmax-box IoU and soft-box IoU."""
    gt = out.batch.gt_boxes
    return {
        "selected": out.argmax_indices() == out.batch.targets,
        "iou": iou3d_batch(predict_box_arrays(out, "argmax"), gt),
        "soft_iou": iou3d_batch(predict_box_arrays(out, "soft"), gt),
    }


def as_batches(params: ModelParams, split: SplitOrBatches) -> List[SceneBatch]:
    if isinstance(split, GroundingSplit):
        if len(split) == 0:
            raise ShapeError(f"split {split.name!r} is empty")
        return collate_chunks(split.pairs(), params.num_categories, params.config.n_max)
    batches = list(split)
    if not batches:
        raise ShapeError("split is empty")
    return batches


@dataclass
class ProbeResult:
    samples: int
    sel_acc_shortcut: float
    acc25_shortcut: float
    acc50_shortcut: float
    soft_iou_shortcut: float
    sel_acc_fused: float
    acc25_fused: float
    acc50_fused: float
    soft_iou_fused: float
    chance: float
    category_oracle: float

    @property
    def shortcut_gain(self) -> float:
        return self.sel_acc_shortcut - self.chance

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def table_rows(self) -> List[List[str]]:
        return [
            ["pass", "sel_acc", "acc25", "acc50", "soft_iou"],
            ["shortcut (2D only)", f"{self.sel_acc_shortcut:.4f}", f"{self.acc25_shortcut:.4f}",
             f"{self.acc50_shortcut:.4f}", f"{self.soft_iou_shortcut:.4f}"],
            ["fused", f"{self.sel_acc_fused:.4f}", f"{self.acc25_fused:.4f}",
             f"{self.acc50_fused:.4f}", f"{self.soft_iou_fused:.4f}"],
            ["chance E[1/N]", f"{self.chance:.4f}", "", "", ""],
            ["category oracle", f"{self.category_oracle:.4f}", "", "", ""],
        ]


def _concat_scores(outputs: List[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    return {key: np.concatenate([o[key] for o in outputs]) for key in outputs[0]}


def shortcut_probe(params: ModelParams, split: GroundingSplit) -> ProbeResult:
    """Evaluate the 2D-only pass (and the fused pass for reference) against chance."""
    batches = as_batches(params, split)
    short_scores, fused_scores = [], []
    for batch in batches:
        short_scores.append(score_pass(forward_shortcut(params, batch)))
        fused_scores.append(score_pass(forward_fused(params, batch)))
    short = _concat_scores(short_scores)
    fused = _concat_scores(fused_scores)
    result = ProbeResult(
        samples=len(split),
        sel_acc_shortcut=float(short["selected"].mean()),
        acc25_shortcut=acc_at(short["iou"], 0.25),
        acc50_shortcut=acc_at(short["iou"], 0.5),
        soft_iou_shortcut=float(short["soft_iou"].mean()),
        sel_acc_fused=float(fused["selected"].mean()),
        acc25_fused=acc_at(fused["iou"], 0.25),
        acc50_fused=acc_at(fused["iou"], 0.5),
        soft_iou_fused=float(fused["soft_iou"].mean()),
        chance=chance_baseline(split.samples),
        category_oracle=category_oracle_expected(split.samples),
    )
    logger.info(f"Probe on {result.samples} samples: shortcut sel_acc={result.sel_acc_shortcut:.4f} "
                f"vs chance {result.chance:.4f} (gain {result.shortcut_gain:+.4f})")
    return result


@dataclass
class SeparationReport:
    # centroids live in the first fusion layer's output space
    centroid_2d: np.ndarray
    centroid_3d: np.ndarray
    centroid_fused: np.ndarray
    separation_index: Optional[float]  # None when all centroids coincide

    @property
    def defined(self) -> bool:
        return self.separation_index is not None

    def as_float(self) -> float:
        return float("nan") if self.separation_index is None else self.separation_index


def separation_from_centroids(c2d: np.ndarray, c3d: np.ndarray, cfused: np.ndarray) -> Optional[float]:
    """d(fused, 2D) / (d(fused, 2D) + d(fused, 3D)); None when the denominator is 0."""
    if not (c2d.shape == c3d.shape == cfused.shape):
        raise ShapeError(f"centroid widths differ: {c2d.shape}, {c3d.shape}, {cfused.shape}")
    to_2d = float(np.linalg.norm(cfused - c2d))
    to_3d = float(np.linalg.norm(cfused - c3d))
    denom = to_2d + to_3d
    if denom == 0.0:
        return None
    return to_2d / denom


def collect_pooled_features(params: ModelParams, split: SplitOrBatches) -> Dict[str, np.ndarray]:
    """Per-sample pooled 2D, 3D and fused features in the shared fusion space: [S, dh] each."""
    parts: Dict[str, List[np.ndarray]] = {"2d": [], "3d": [], "fused": []}
    for batch in as_batches(params, split):
        for name, values in pooled_features(params, forward_fused(params, batch)).items():
            parts[name].append(values)
    return {name: np.concatenate(chunks, axis=0) for name, chunks in parts.items()}


def separation_index(params: ModelParams, split: SplitOrBatches) -> SeparationReport:
    """Where the fused centroid sits between the 2D and 3D centroids; 0 is collapse onto 2D."""
    features = collect_pooled_features(params, split)
    centroids = {name: values.mean(axis=0) for name, values in features.items()}
    index = separation_from_centroids(centroids["2d"], centroids["3d"], centroids["fused"])
    if index is None:
        logger.warning("Separation index undefined: all feature centroids coincide")
    return SeparationReport(centroids["2d"], centroids["3d"], centroids["fused"], index)
