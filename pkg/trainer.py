"""
Pull-push training loop.

Each step runs the fused pass and (for the w2r2 objective) the shortcut pass
on one tape with the same parameter leaves, backpropagates the batch-mean
total loss once and applies one optimizer update in place.
"""
import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
import scenes
import storage
from config import ModelConfig, TrainConfig, WorldConfig, config_to_dict
from diagnostics import as_batches, score_pass, separation_from_centroids
from errors import NumericError, ShapeError
from geometry import acc_at
from losses import LossBundle, alignment_loss, deterrence_terms, w2r2_losses
from model import (ModelParams, ParamSource, SceneBatch, collate, collate_chunks, forward_fused,
                   forward_shortcut, pooled_features, save_checkpoint)
from scenes import GroundingSplit

logger = logging.getLogger(__name__)

EVAL_CHUNK = 256


@dataclass
class MetricsRecord:
    step: int
    loss_align: float
    loss_deterrence: float
    loss_total: float
    acc25_fused: float
    acc50_fused: float
    acc25_shortcut: float
    acc50_shortcut: float
    sel_acc_fused: float
    sel_acc_shortcut: float
    separation_index: float  # NaN when undefined
    hinge_activation_rate: float
    soft_iou_fused: float
    soft_iou_shortcut: float

    def to_row(self) -> Dict[str, float]:
        return asdict(self)


METRIC_COLUMNS = [f.name for f in fields(MetricsRecord)]


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray]) -> None:
        for name, p in params.arrays.items():
            p -= self.lr * grads[name]


class Adam:
    def __init__(self, params: ModelParams, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        # Moment estimates
        self.m = {name: np.zeros_like(p) for name, p in params.arrays.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.arrays.items()}

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.arrays.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


Optimizer = Union[SGD, Adam]


def make_optimizer(cfg: TrainConfig, params: ModelParams) -> Optimizer:
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr)
    return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


@dataclass
class TrainState:
    params: ModelParams
    optimizer: Optimizer
    step: int
    rng: np.random.Generator


def init_state(model_cfg: ModelConfig, num_categories: int, train_cfg: TrainConfig) -> TrainState:
    params = ModelParams.init(model_cfg, num_categories)
    rng = np.random.default_rng(np.random.SeedSequence([int(train_cfg.seed) & 0xFFFFFFFFFFFFFFFF, 1]))
    return TrainState(params, make_optimizer(train_cfg, params), 0, rng)


def _losses(params: ParamSource, batch: SceneBatch, cfg: TrainConfig) -> LossBundle:
    fused = forward_fused(params, batch)
    shortcut = None
    if cfg.objective == "w2r2":
        shortcut = forward_shortcut(params, batch, stopgrad_2d=cfg.stopgrad_mode == "encoder_blocked")
    return w2r2_losses(fused, shortcut, cfg.lam, cfg.mu, cfg.box_weight)


def _offending_sample(params: ModelParams, batch: SceneBatch, cfg: TrainConfig) -> int:
    """Index (into the source split) of the first sample whose loss cannot be computed or is non-finite."""
    for b in range(batch.batch_size):
        single = batch.sample(b)
        try:
            bundle = _losses(params, single, cfg)
        except NumericError:
            return int(single.sample_ids[0])
        if not np.isfinite(bundle.total.value).all():
            return int(single.sample_ids[0])
    return int(batch.sample_ids[0])


def compute_gradients(params: ModelParams, batch: SceneBatch, cfg: TrainConfig
                      ) -> Tuple[LossBundle, Dict[str, np.ndarray], ad.Graph]:
    """Both passes on one tape, one backward on the total loss."""
    graph = ad.Graph()
    leaves = params.bind(graph)
    try:
        bundle = _losses(leaves, batch, cfg)
    except NumericError as e:
        index = _offending_sample(params, batch, cfg)
        logger.error(f"Forward pass failed ({e}); offending sample index {index}")
        raise NumericError(f"{e} at sample index {index}")
    if not np.isfinite(bundle.total.value).all():
        index = _offending_sample(params, batch, cfg)
        logger.error(f"Non-finite loss {bundle.total.item()!r}; offending sample index {index}")
        raise NumericError(f"non-finite loss at sample index {index}")
    graph.backward(bundle.total)
    grads = {name: graph.grad(t) for name, t in leaves.items()}
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericError(f"non-finite gradients for {bad}")
    return bundle, grads, graph


def train_step(state: TrainState, batch: SceneBatch, cfg: TrainConfig) -> Tuple[TrainState, LossBundle]:
    try:
        bundle, grads, _ = compute_gradients(state.params, batch, cfg)
    except NumericError as e:
        logger.error(f"Step {state.step}: numeric failure in batch samples {batch.sample_ids.tolist()}")
        raise NumericError(f"step {state.step}: {e}")
    state.optimizer.step(state.params, grads)
    state.step += 1
    return state, bundle


def prepare_eval_batches(split: GroundingSplit, num_categories: int, n_max: Optional[int] = None,
                         chunk: int = EVAL_CHUNK) -> List[SceneBatch]:
    if len(split) == 0:
        raise ShapeError(f"split {split.name!r} is empty")
    return collate_chunks(split.pairs(), num_categories, n_max, chunk)


def evaluate(params: ModelParams, split: Union[GroundingSplit, Sequence[SceneBatch]], cfg: TrainConfig,
             step: int = 0) -> MetricsRecord:
    """Fused and shortcut metrics in argmax-box mode. Parameters are only read."""
    batches = as_batches(params, split)

    fused_scores, short_scores, similarity = [], [], []
    pooled: Dict[str, List[np.ndarray]] = {"2d": [], "3d": [], "fused": []}
    align_sum = det_sum = 0.0
    total = 0
    for batch in batches:
        fused = forward_fused(params, batch)
        short = forward_shortcut(params, batch)
        fused_scores.append(score_pass(fused))
        short_scores.append(score_pass(short))

        align = alignment_loss(fused, gt_box=batch.gt_boxes, box_weight=cfg.box_weight)
        det, s, _ = deterrence_terms(short, batch.gt_boxes, cfg.mu)
        align_sum += align.item() * batch.batch_size
        det_sum += det.item() * batch.batch_size
        similarity.append(s)
        total += batch.batch_size
        for name, values in pooled_features(params, fused).items():
            pooled[name].append(values)

    f = {k: np.concatenate([o[k] for o in fused_scores]) for k in fused_scores[0]}
    sh = {k: np.concatenate([o[k] for o in short_scores]) for k in short_scores[0]}
    similarity_all = np.concatenate(similarity)

    centroids = {name: np.concatenate(v, axis=0).mean(axis=0) for name, v in pooled.items()}
    index = separation_from_centroids(centroids["2d"], centroids["3d"], centroids["fused"])
    separation = float("nan") if index is None else index

    loss_align = align_sum / total
    loss_det = det_sum / total
    return MetricsRecord(
        step=step,
        loss_align=loss_align,
        loss_deterrence=loss_det,
        loss_total=loss_align + cfg.effective_lambda * loss_det,
        acc25_fused=acc_at(f["iou"], 0.25),
        acc50_fused=acc_at(f["iou"], 0.5),
        acc25_shortcut=acc_at(sh["iou"], 0.25),
        acc50_shortcut=acc_at(sh["iou"], 0.5),
        sel_acc_fused=float(f["selected"].mean()),
        sel_acc_shortcut=float(sh["selected"].mean()),
        separation_index=separation,
        hinge_activation_rate=float(np.count_nonzero(similarity_all > cfg.mu)) / total,
        soft_iou_fused=float(f["soft_iou"].mean()),
        soft_iou_shortcut=float(sh["soft_iou"].mean()),
    )


def _log_record(record: MetricsRecord) -> None:
    logger.info(
        f"step {record.step}: align={record.loss_align:.4f} det={record.loss_deterrence:.4f} "
        f"sel_fused={record.sel_acc_fused:.3f} sel_short={record.sel_acc_shortcut:.3f} "
        f"acc25={record.acc25_fused:.3f} acc50={record.acc50_fused:.3f} "
        f"soft_iou_short={record.soft_iou_shortcut:.3f} sep={record.separation_index:.3f}"
    )


def write_metrics(path: str, history: Sequence[MetricsRecord]) -> None:
    storage.write_csv(path, [r.to_row() for r in history], METRIC_COLUMNS)


def train_run(world_cfg: WorldConfig, model_cfg: ModelConfig, train_cfg: TrainConfig,
              splits: Optional[Dict[str, GroundingSplit]] = None,
              out_dir: Optional[str] = None) -> Tuple[ModelParams, List[MetricsRecord]]:
    """Full loop with periodic evaluation; reproducible from the three configs."""
    for cfg in (world_cfg, model_cfg, train_cfg):
        cfg.validate()
    if splits is None:
        splits = scenes.build_dataset(world_cfg)
    train_split, val_split = splits["train"], splits["val"]
    state = init_state(model_cfg, world_cfg.num_categories, train_cfg)
    logger.info(
        f"Training objective={train_cfg.objective} lambda={train_cfg.lam} mu={train_cfg.mu} "
        f"epochs={train_cfg.epochs} on {len(train_split)} samples ({state.params.count()} parameters)"
    )

    eval_batches = prepare_eval_batches(val_split, world_cfg.num_categories, model_cfg.n_max)
    history = [evaluate(state.params, eval_batches, train_cfg, step=0)]
    _log_record(history[-1])

    pairs = train_split.pairs()
    for epoch in range(train_cfg.epochs):
        order = state.rng.permutation(len(pairs))
        loss_sum, active_sum, seen = 0.0, 0, 0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            batch = collate([pairs[i] for i in idx], world_cfg.num_categories, idx, model_cfg.n_max)
            state, bundle = train_step(state, batch, train_cfg)
            loss_sum += bundle.total.item() * batch.batch_size
            active_sum += int(bundle.active.sum())
            seen += batch.batch_size
            if train_cfg.eval_every and state.step % train_cfg.eval_every == 0:
                history.append(evaluate(state.params, eval_batches, train_cfg, step=state.step))
                _log_record(history[-1])
        if seen:
            logger.info(f"epoch {epoch + 1}/{train_cfg.epochs}: mean train loss {loss_sum / seen:.4f}, "
                        f"hinge active on {active_sum}/{seen} samples")
        if not train_cfg.eval_every:
            history.append(evaluate(state.params, eval_batches, train_cfg, step=state.step))
            _log_record(history[-1])

    if history[-1].step != state.step:
        history.append(evaluate(state.params, eval_batches, train_cfg, step=state.step))
        _log_record(history[-1])

    if out_dir is not None:
        run_dir = storage.RunDirectory(out_dir)
        write_metrics(run_dir.metrics_csv, history)
        save_checkpoint(state.params, run_dir.checkpoint, world_cfg)
        storage.write_json(run_dir.run_config, {
            "world": config_to_dict(world_cfg),
            "model": config_to_dict(model_cfg),
            "train": config_to_dict(train_cfg),
        })
        logger.info(f"Wrote {run_dir.metrics_csv} ({len(history)} evaluations)")
    return state.params, history
