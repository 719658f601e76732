"""
Lambda/mu sweeps and the multi-seed baseline vs W2R2 comparison.

Every cell is an independent train_run. Cell seeds are derived from the base
seeds and the (lambda, mu) pair, so a single cell re-run on its own
reproduces its sweep row.
"""
import hashlib
import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd

import scenes
import storage
from config import ModelConfig, TrainConfig, WorldConfig
from diagnostics import separation_index, shortcut_probe
from errors import ConfigError, W2R2Error
from scenes import GroundingSplit
from trainer import METRIC_COLUMNS, MetricsRecord, train_run

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["lambda", "mu"] + METRIC_COLUMNS + ["status", "error"]
COMPARISON_COLUMNS = ["seed", "objective", "sel_acc_shortcut", "chance", "soft_iou_shortcut",
                      "sel_acc_fused", "acc25_fused", "separation_index"]

# Values used for the hyperparameter ablations
ABLATION_LAMBDA_GRID = (0.1, 0.5, 1.0, 1.5, 2.0)
ABLATION_MU_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


def parse_grid(text: str, name: str) -> List[float]:
    """Parse a comma-separated list of floats, e.g. '0,0.5,1.5'."""
    values = []
    for raw in text.split(","):
        raw = raw.strip()
        if not raw:
            continue
        try:
            values.append(float(raw))
        except ValueError:
            raise ConfigError(f"{name} grid: {raw!r} is not a number")
    return dedupe_grid(values, name)


def dedupe_grid(values: Iterable[float], name: str) -> List[float]:
    unique: List[float] = []
    for v in values:
        if v in unique:
            logger.warning(f"Duplicate {name} value {v} dropped from the grid")
            continue
        unique.append(float(v))
    if not unique:
        raise ConfigError(f"{name} grid is empty")
    return unique


def _derived_seed(seed: int, lam: float, mu: float, salt: str) -> int:
    digest = hashlib.sha256(f"{salt}:{seed}:{lam!r}:{mu!r}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def cell_configs(model: ModelConfig, train: TrainConfig, lam: float, mu: float,
                 common_seed: bool = False) -> Tuple[ModelConfig, TrainConfig]:
    """Model and train configs of one sweep cell. The world (and so the data) is shared."""
    cell_train = replace(train, lam=float(lam), mu=float(mu))
    if common_seed:
        return model, cell_train
    return (replace(model, seed=_derived_seed(model.seed, lam, mu, "model")),
            replace(cell_train, seed=_derived_seed(train.seed, lam, mu, "train")))


def cell_dirname(lam: float, mu: float) -> str:
    return f"lambda_{lam:g}_mu_{mu:g}"


@dataclass
class CellResult:
    lam: float
    mu: float
    record: Optional[MetricsRecord]
    status: str
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_row(self) -> Dict[str, object]:
        row: Dict[str, object] = {"lambda": self.lam, "mu": self.mu}
        if self.record is not None:
            row.update(self.record.to_row())
        row["status"] = self.status
        row["error"] = self.error
        return row


@dataclass
class SweepResult:
    cells: List[CellResult]

    @property
    def succeeded(self) -> int:
        return sum(1 for c in self.cells if c.ok)

    def rows(self) -> List[Dict[str, object]]:
        return [c.to_row() for c in self.cells]

    def record(self, lam: float, mu: float) -> Optional[MetricsRecord]:
        for c in self.cells:
            if c.lam == lam and c.mu == mu:
                return c.record
        return None


def _run_cell(task: Tuple[WorldConfig, ModelConfig, TrainConfig, Dict[str, GroundingSplit], Optional[str]]
              ) -> CellResult:
    world, model, train, splits, out_dir = task
    try:
        _, history = train_run(world, model, train, splits, out_dir)
        return CellResult(train.lam, train.mu, history[-1], "ok")
    except (W2R2Error, ValueError, ArithmeticError, OSError) as e:
        logger.error(f"Sweep cell lambda={train.lam} mu={train.mu} failed: {e}")
        return CellResult(train.lam, train.mu, None, "failed", f"{type(e).__name__}: {e}")


def run_sweep(world: WorldConfig, model: ModelConfig, train: TrainConfig,
              lambda_grid: Sequence[float], mu_grid: Sequence[float],
              out_dir: Optional[str] = None, workers: int = 1, common_seed: bool = False,
              splits: Optional[Dict[str, GroundingSplit]] = None) -> SweepResult:
    """One train_run per (lambda, mu) cell; failures are recorded and the sweep continues."""
    lambdas = dedupe_grid(lambda_grid, "lambda")
    mus = dedupe_grid(mu_grid, "mu")
    if splits is None:
        splits = scenes.build_dataset(world)

    tasks = []
    for lam, mu in itertools.product(lambdas, mus):
        cell_model, cell_train = cell_configs(model, train, lam, mu, common_seed)
        cell_out = os.path.join(out_dir, cell_dirname(lam, mu)) if out_dir else None
        tasks.append((world, cell_model, cell_train, splits, cell_out))
    logger.info(f"Sweeping {len(tasks)} cells ({len(lambdas)} lambda x {len(mus)} mu) on {workers} worker(s)")

    if workers <= 1 or len(tasks) == 1:
        cells = [_run_cell(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, tasks))

    result = SweepResult(cells)
    logger.info(f"Sweep finished: {result.succeeded}/{len(cells)} cells succeeded")
    if out_dir:
        storage.write_csv(os.path.join(out_dir, "sweep.csv"), result.rows(), SWEEP_COLUMNS)
    return result


def run_comparison(world: WorldConfig, model: ModelConfig, train: TrainConfig, seeds: Sequence[int],
                   splits: Optional[Dict[str, GroundingSplit]] = None,
                   out_dir: Optional[str] = None) -> pd.DataFrame:
    """
    Train the alignment-only baseline and W2R2 for each seed on identical data
    and tabulate the shortcut and re-forming diagnostics on the val split.
    """
    if not seeds:
        raise ConfigError("comparison needs at least one seed")
    if splits is None:
        splits = scenes.build_dataset(world)
    val = splits["val"]

    rows = []
    for seed in seeds:
        for objective in ("baseline", "w2r2"):
            run_model = replace(model, seed=int(seed))
            run_train = replace(train, seed=int(seed), objective=objective)
            run_out = os.path.join(out_dir, f"{objective}_seed_{seed}") if out_dir else None
            params, _ = train_run(world, run_model, run_train, splits, run_out)
            probe = shortcut_probe(params, val)
            separation = separation_index(params, val).as_float()
            rows.append({
                "seed": int(seed),
                "objective": objective,
                "sel_acc_shortcut": probe.sel_acc_shortcut,
                "chance": probe.chance,
                "soft_iou_shortcut": probe.soft_iou_shortcut,
                "sel_acc_fused": probe.sel_acc_fused,
                "acc25_fused": probe.acc25_fused,
                "separation_index": separation,
            })
            logger.info(f"seed {seed} {objective}: shortcut sel_acc={probe.sel_acc_shortcut:.3f} "
                        f"soft_iou={probe.soft_iou_shortcut:.3f} separation={separation:.3f}")

    frame = pd.DataFrame(rows, columns=COMPARISON_COLUMNS)
    if out_dir:
        storage.write_csv(os.path.join(out_dir, "comparison.csv"), rows, COMPARISON_COLUMNS)
    return frame


def summarize_comparison(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean over seeds per objective."""
    metrics = [c for c in COMPARISON_COLUMNS if c not in ("seed", "objective")]
    return frame.groupby("objective", sort=True)[metrics].mean()
