import math
from types import SimpleNamespace

import numpy as np
import pytest

import autodiff as ad
from errors import LossError
from geometry import Box3, iou3d_batch
from losses import (alignment_loss, cross_entropy, deterrence_loss, deterrence_terms, total_loss,
                    w2r2_losses)
from model import collate, forward_fused, forward_shortcut
from scenes import FeatureView

UNIT_GT = Box3((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


def _shortcut_with_box(center, size):
    """Stand-in shortcut output carrying only a soft box."""
    soft = ad.Tensor(np.array([[*center, *size]], dtype=np.float64))
    return SimpleNamespace(soft_box=soft, batch=SimpleNamespace(batch_size=1))


def _grads(params, loss_fn):
    graph = ad.Graph()
    leaves = params.bind(graph)
    loss = loss_fn(leaves)
    graph.backward(loss)
    return {name: graph.grad(t).copy() for name, t in leaves.items()}


def _shortcut_similarity(params, batch):
    out = forward_shortcut(params, batch)
    return iou3d_batch(out.soft_box.value, batch.gt_boxes)


class TestAlignment:
    def test_uniform_logits(self):
        logits = ad.Tensor(np.zeros((1, 4)))
        assert cross_entropy(logits, np.array([2])).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_confident_logits(self):
        logits = ad.Tensor(np.array([[2.0, 0.0, 0.0, 0.0]]))
        assert cross_entropy(logits, np.array([0])).item() == pytest.approx(0.3408, abs=1e-4)

    def test_padding_is_ignored(self, tiny_params, tiny_splits):
        pairs = tiny_splits["val"].pairs()
        small = next(p for p in pairs if p[0].num_objects == 2)
        large = next(p for p in pairs if p[0].num_objects == 4)
        alone = alignment_loss(forward_fused(tiny_params, collate([small], 3))).item()
        both = forward_fused(tiny_params, collate([small, large], 3))
        second = alignment_loss(forward_fused(tiny_params, collate([large], 3))).item()
        assert alignment_loss(both).item() == pytest.approx((alone + second) / 2, abs=1e-12)

    def test_target_out_of_range(self, tiny_params, tiny_batch):
        out = forward_fused(tiny_params, tiny_batch)
        with pytest.raises(LossError):
            alignment_loss(out, target_index=[5] * tiny_batch.batch_size)

    def test_box_term_adds_nonnegative(self, tiny_params, tiny_batch):
        out = forward_fused(tiny_params, tiny_batch)
        ce = alignment_loss(out).item()
        with_box = alignment_loss(out, gt_box=tiny_batch.gt_boxes, box_weight=1.0).item()
        assert with_box >= ce

    def test_negative_box_weight(self, tiny_params, tiny_batch):
        out = forward_fused(tiny_params, tiny_batch)
        with pytest.raises(LossError):
            alignment_loss(out, gt_box=tiny_batch.gt_boxes, box_weight=-1.0)


class TestDeterrence:
    def test_active_hinge(self):
        loss, s, active = deterrence_terms(_shortcut_with_box((0, 0, 0), (0.9, 1, 1)), UNIT_GT, mu=0.7)
        assert s[0] == pytest.approx(0.9, abs=1e-12)
        assert loss.item() == pytest.approx(0.2, abs=1e-12)
        assert active[0]

    def test_boundary_is_zero(self):
        loss = deterrence_loss(_shortcut_with_box((0, 0, 0), (0.7, 1, 1)), UNIT_GT, mu=0.7)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_below_margin(self):
        loss, _, active = deterrence_terms(_shortcut_with_box((0, 0, 0), (0.5, 1, 1)), UNIT_GT, mu=0.7)
        assert loss.item() == 0.0
        assert not active[0]

    def test_mu_range(self):
        with pytest.raises(LossError):
            deterrence_loss(_shortcut_with_box((0, 0, 0), (1, 1, 1)), UNIT_GT, mu=1.0)

    def test_gt_count_mismatch(self):
        with pytest.raises(LossError):
            deterrence_loss(_shortcut_with_box((0, 0, 0), (1, 1, 1)), [UNIT_GT, UNIT_GT])

    def test_ignores_3d_features(self, tiny_params, tiny_splits, rng):
        pairs = tiny_splits["val"].pairs()[:12]
        scrambled = [(s, FeatureView(v.f2d, rng.permutation(v.f3d))) for s, v in pairs]
        a = deterrence_loss(forward_shortcut(tiny_params, collate(pairs, 3)), mu=0.01).item()
        b = deterrence_loss(forward_shortcut(tiny_params, collate(scrambled, 3)), mu=0.01).item()
        assert a == b


class TestTotal:
    def test_weighted_sum(self):
        total = total_loss(ad.Tensor(np.asarray(1.0)), ad.Tensor(np.asarray(0.2)), 1.5)
        assert total.item() == pytest.approx(1.3, abs=1e-12)

    def test_zero_lambda_is_alignment(self):
        assert total_loss(ad.Tensor(np.asarray(0.8)), ad.Tensor(np.asarray(0.5)), 0.0).item() == 0.8

    def test_negative_lambda(self):
        with pytest.raises(LossError):
            total_loss(ad.Tensor(np.asarray(1.0)), ad.Tensor(np.asarray(0.2)), -0.1)

    def test_baseline_bundle(self, tiny_params, tiny_batch):
        bundle = w2r2_losses(forward_fused(tiny_params, tiny_batch), None, lam=1.5, mu=0.7)
        assert bundle.total is bundle.align
        assert bundle.deterrence.item() == 0.0
        assert np.all(np.isnan(bundle.similarity))
        assert bundle.activation_rate == 0.0


class TestGradientFlow:
    def test_blocked_shortcut_never_reaches_2d_encoder(self, tiny_params, tiny_batch):
        def deterrence_only(leaves, stopgrad):
            return deterrence_loss(forward_shortcut(leaves, tiny_batch, stopgrad_2d=stopgrad), mu=1e-6)

        assert np.all(_shortcut_similarity(tiny_params, tiny_batch) > 1e-6)
        blocked = _grads(tiny_params, lambda leaves: deterrence_only(leaves, True))
        open_ = _grads(tiny_params, lambda leaves: deterrence_only(leaves, False))
        for name in tiny_params.names():
            if name.startswith(("e2d.", "e3d.")):
                assert np.array_equal(blocked[name], np.zeros_like(blocked[name]))
        assert any(np.any(open_[n] != 0) for n in tiny_params.names() if n.startswith("e2d."))
        assert any(np.any(blocked[n] != 0) for n in tiny_params.names() if n.startswith("fusion."))

    def test_total_and_alignment_agree_on_2d_encoder(self, tiny_params, tiny_splits):
        pairs = tiny_splits["train"].pairs()
        for start in range(0, 50, 10):
            batch = collate(pairs[start:start + 10], 3)

            def pull_push(leaves):
                fused = forward_fused(leaves, batch)
                shortcut = forward_shortcut(leaves, batch, stopgrad_2d=True)
                return w2r2_losses(fused, shortcut, lam=1.5, mu=1e-6).total

            def pull_only(leaves):
                return alignment_loss(forward_fused(leaves, batch), gt_box=batch.gt_boxes)

            a = _grads(tiny_params, pull_push)
            b = _grads(tiny_params, pull_only)
            for name in ("e2d.l1.w", "e2d.l1.b", "e2d.l2.w", "e2d.l2.b"):
                assert np.allclose(a[name], b[name], rtol=0, atol=1e-12), name

    def test_inactive_hinge_has_zero_gradient(self, tiny_params, tiny_batch):
        assert np.all(_shortcut_similarity(tiny_params, tiny_batch) <= 0.7)
        graph = ad.Graph()
        leaves = tiny_params.bind(graph)
        loss = deterrence_loss(forward_shortcut(leaves, tiny_batch), mu=0.7)
        graph.backward(loss)
        assert loss.item() == 0.0
        assert all(np.array_equal(graph.grad(t), np.zeros_like(t.value)) for t in leaves.values())

    def test_inactive_hinge_leaves_alignment_gradient(self, tiny_params, tiny_batch):
        assert np.all(_shortcut_similarity(tiny_params, tiny_batch) <= 0.7)

        def pull_push(leaves):
            fused = forward_fused(leaves, tiny_batch)
            shortcut = forward_shortcut(leaves, tiny_batch, stopgrad_2d=True)
            return w2r2_losses(fused, shortcut, lam=1.5, mu=0.7).total

        def pull_only(leaves):
            return w2r2_losses(forward_fused(leaves, tiny_batch), None, lam=1.5, mu=0.7).total

        a = _grads(tiny_params, pull_push)
        b = _grads(tiny_params, pull_only)
        for name in tiny_params.names():
            assert np.array_equal(a[name], b[name]), name

    def test_full_objective_matches_finite_differences(self, tiny_params, tiny_splits):
        batch = collate(tiny_splits["train"].pairs()[:20], 3)
        s = np.sort(_shortcut_similarity(tiny_params, batch))
        # margin between two similarities so both hinge regimes appear
        mu = float(0.5 * (s[9] + s[10]))
        names = tiny_params.names()
        arrays = [tiny_params.arrays[n].copy() for n in names]

        def build(graph, leaves):
            p = dict(zip(names, leaves))
            fused = forward_fused(p, batch)
            shortcut = forward_shortcut(p, batch, stopgrad_2d=True)
            return w2r2_losses(fused, shortcut, lam=1.0, mu=mu).total

        assert ad.check_gradients(build, arrays) < 1e-4
