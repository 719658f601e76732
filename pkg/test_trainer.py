from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

import scenes
from config import TrainConfig
from errors import NumericError
from geometry import iou3d_batch
from model import ModelParams, collate, forward_shortcut, load_checkpoint
from scenes import FeatureView, GroundingSplit
from trainer import (METRIC_COLUMNS, SGD, Adam, compute_gradients, evaluate, init_state,
                     prepare_eval_batches, train_run, train_step)


def _scramble_3d(split, rng):
    views = [FeatureView(v.f2d, rng.normal(size=v.f3d.shape)) for v in split.views]
    return GroundingSplit(split.name, split.samples, views)


class TestTrainStep:
    @pytest.mark.parametrize("overrides", [
        {},
        {"objective": "baseline"},
        {"mu": 1e-6},
        {"mu": 1e-6, "stopgrad_mode": "none"},
    ])
    def test_sgd_step_descends(self, tiny_params, tiny_batch, overrides):
        cfg = TrainConfig(optimizer="sgd", lr=1e-3, **overrides)
        before, grads, _ = compute_gradients(tiny_params, tiny_batch, cfg)
        if "mu" in overrides:
            assert before.active.any()
        SGD(cfg.lr).step(tiny_params, grads)
        after, _, _ = compute_gradients(tiny_params, tiny_batch, cfg)
        assert after.total.item() < before.total.item() or abs(after.total.item() - before.total.item()) < 1e-6

    def test_stopgrad_mode_controls_e2d_gradients(self, tiny_params, tiny_batch):
        bundle, blocked, _ = compute_gradients(tiny_params, tiny_batch, TrainConfig(mu=1e-6))
        _, unblocked, _ = compute_gradients(tiny_params, tiny_batch, TrainConfig(mu=1e-6, stopgrad_mode="none"))
        assert bundle.active.any()
        assert not np.array_equal(blocked["e2d.l2.w"], unblocked["e2d.l2.w"])
        for name in ("fusion.l1.w", "decoder.l1.w", "head.box.w", "e3d.l1.w"):
            assert np.allclose(blocked[name], unblocked[name], rtol=0, atol=1e-12), name

    @pytest.mark.parametrize("optimizer", ["sgd", "adam"])
    def test_updates_in_place(self, tiny_model, tiny_world, tiny_batch, optimizer):
        state = init_state(tiny_model, tiny_world.num_categories, TrainConfig(optimizer=optimizer))
        ids = {name: id(a) for name, a in state.params.arrays.items()}
        before = state.params.checksum()
        state, _ = train_step(state, tiny_batch, TrainConfig(optimizer=optimizer))
        assert {name: id(a) for name, a in state.params.arrays.items()} == ids
        assert state.params.checksum() != before
        assert state.step == 1

    def test_adam_bias_correction(self, tiny_params):
        adam = Adam(tiny_params, lr=0.1)
        grads = {name: np.ones_like(a) for name, a in tiny_params.arrays.items()}
        before = tiny_params.arrays["head.logit.b"].copy()
        adam.step(tiny_params, grads)
        # first corrected step moves every coordinate by ~lr
        assert np.allclose(before - tiny_params.arrays["head.logit.b"], 0.1, atol=1e-6)

    def test_non_finite_loss(self, tiny_model, tiny_world, tiny_batch):
        state = init_state(tiny_model, tiny_world.num_categories, TrainConfig())
        state.params.arrays["head.logit.w"][0, 0] = np.nan
        with pytest.raises(NumericError, match="step 0"):
            train_step(state, tiny_batch, TrainConfig())

    def test_forward_overflow_names_the_sample(self, tiny_model, tiny_world, tiny_batch):
        state = init_state(tiny_model, tiny_world.num_categories, TrainConfig())
        state.params.arrays["head.box.b"][0, 3:] = 800.0
        with pytest.raises(NumericError, match="step 0: .* at sample index 0"):
            train_step(state, tiny_batch, TrainConfig())

    def test_nan_features_point_at_their_sample(self, tiny_model, tiny_world, tiny_batch):
        state = init_state(tiny_model, tiny_world.num_categories, TrainConfig())
        start = 3 * tiny_batch.n_pad
        tiny_batch.f2d[start:start + int(tiny_batch.sizes[3])] = np.nan
        with pytest.raises(NumericError, match="sample index 3"):
            train_step(state, tiny_batch, TrainConfig())

    def test_nan_weight_behind_relu_aborts(self, tiny_model, tiny_world, tiny_batch):
        state = init_state(tiny_model, tiny_world.num_categories, TrainConfig())
        state.params.arrays["e2d.l1.w"][0, 0] = np.nan
        before = {name: a.copy() for name, a in state.params.arrays.items()}
        with pytest.raises(NumericError, match="sample index"):
            train_step(state, tiny_batch, TrainConfig())
        for name, a in state.params.arrays.items():
            assert np.array_equal(a, before[name], equal_nan=True), name
        assert state.step == 0

    def test_baseline_runs_one_pass(self, tiny_params, tiny_batch):
        bundle, grads, graph = compute_gradients(tiny_params, tiny_batch, TrainConfig(objective="baseline"))
        full, _, full_graph = compute_gradients(tiny_params, tiny_batch, TrainConfig())
        assert len(graph.nodes) < len(full_graph.nodes)
        assert bundle.deterrence.item() == 0.0
        assert set(grads) == set(tiny_params.names())


class TestEvaluate:
    def test_does_not_mutate(self, tiny_params, tiny_splits):
        before = tiny_params.checksum()
        evaluate(tiny_params, tiny_splits["val"], TrainConfig())
        assert tiny_params.checksum() == before

    def test_shortcut_metrics_ignore_3d(self, tiny_params, tiny_splits, rng):
        cfg = TrainConfig(mu=0.05)
        a = evaluate(tiny_params, tiny_splits["val"], cfg)
        b = evaluate(tiny_params, _scramble_3d(tiny_splits["val"], rng), cfg)
        for name in ("acc25_shortcut", "acc50_shortcut", "sel_acc_shortcut", "soft_iou_shortcut",
                     "loss_deterrence", "hinge_activation_rate"):
            assert getattr(a, name) == getattr(b, name), name

    def test_hinge_rate_is_exact_fraction(self, tiny_params, tiny_splits, tiny_world):
        val = tiny_splits["val"]
        batch = collate(val.pairs(), tiny_world.num_categories)
        s = iou3d_batch(forward_shortcut(tiny_params, batch).soft_box.value, batch.gt_boxes)
        mu = float(np.median(s))
        record = evaluate(tiny_params, val, TrainConfig(mu=mu))
        assert record.hinge_activation_rate == np.count_nonzero(s > mu) / len(val)

    def test_chunking_does_not_change_metrics(self, tiny_params, tiny_splits, tiny_world):
        val = tiny_splits["val"]
        whole = evaluate(tiny_params, val, TrainConfig())
        chunked = evaluate(tiny_params, prepare_eval_batches(val, tiny_world.num_categories, chunk=7),
                           TrainConfig())
        assert chunked.sel_acc_fused == whole.sel_acc_fused
        assert chunked.loss_align == pytest.approx(whole.loss_align, abs=1e-12)

    def test_random_init_selects_at_chance(self, small_model, small_world):
        val = scenes.generate_split(small_world, "val")
        p = np.array([1.0 / s.num_objects for s in val.samples])
        chance = p.mean()
        sigma = np.sqrt(np.sum(p * (1 - p))) / len(val)
        # average over a few initialisations so one draw's bias does not dominate
        accs = [evaluate(ModelParams.init(replace(small_model, seed=seed), small_world.num_categories), val,
                         TrainConfig()).sel_acc_fused
                for seed in range(4)]
        assert len(val) >= 500
        assert abs(np.mean(accs) - chance) <= 3 * sigma


class TestTrainRun:
    def _run(self, tiny_world, tiny_model, splits, out_dir, **train):
        cfg = TrainConfig(**{"epochs": 2, "batch_size": 16, **train})
        return train_run(tiny_world, tiny_model, cfg, splits=splits, out_dir=str(out_dir))

    def test_zero_epochs_has_one_row(self, tmp_path, tiny_world, tiny_model, tiny_splits):
        _, history = self._run(tiny_world, tiny_model, tiny_splits, tmp_path, epochs=0)
        frame = pd.read_csv(tmp_path / "metrics.csv")
        assert len(history) == 1 and len(frame) == 1
        assert list(frame.columns) == METRIC_COLUMNS
        assert frame["step"].iloc[0] == 0

    def test_eval_every(self, tmp_path, tiny_world, tiny_model, tiny_splits):
        # 64 training samples at batch 16 is 4 steps per epoch
        _, history = self._run(tiny_world, tiny_model, tiny_splits, tmp_path, epochs=1, eval_every=2)
        assert [r.step for r in history] == [0, 2, 4]

    def test_final_step_is_always_evaluated(self, tmp_path, tiny_world, tiny_model, tiny_splits):
        _, history = self._run(tiny_world, tiny_model, tiny_splits, tmp_path, epochs=1, eval_every=3)
        assert [r.step for r in history] == [0, 3, 4]
        frame = pd.read_csv(tmp_path / "metrics.csv")
        assert frame["step"].tolist() == [0, 3, 4]

    def test_csv_is_reproducible(self, tmp_path, tiny_world, tiny_model, tiny_splits):
        self._run(tiny_world, tiny_model, tiny_splits, tmp_path / "a")
        self._run(tiny_world, tiny_model, tiny_splits, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_zero_lambda_equals_baseline(self, tmp_path, tiny_world, tiny_model, tiny_splits):
        self._run(tiny_world, tiny_model, tiny_splits, tmp_path / "w2r2", lam=0.0)
        self._run(tiny_world, tiny_model, tiny_splits, tmp_path / "base", objective="baseline")
        a = (tmp_path / "w2r2" / "metrics.csv").read_bytes()
        b = (tmp_path / "base" / "metrics.csv").read_bytes()
        assert a == b

    def test_writes_run_artifacts(self, tmp_path, tiny_world, tiny_model, tiny_splits):
        params, history = self._run(tiny_world, tiny_model, tiny_splits, tmp_path, epochs=1)
        loaded, world = load_checkpoint(str(tmp_path / "checkpoint.json"))
        assert loaded.checksum() == params.checksum()
        assert world == tiny_world
        assert (tmp_path / "run_config.json").exists()
        assert len(history) == 2

    def test_training_moves_parameters(self, tiny_world, tiny_model, tiny_splits):
        params, _ = train_run(tiny_world, tiny_model, TrainConfig(epochs=1, batch_size=16), splits=tiny_splits)
        assert params.checksum() != ModelParams.init(tiny_model, tiny_world.num_categories).checksum()
