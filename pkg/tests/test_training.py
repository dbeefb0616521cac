import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unept import numerics as nx
from unept.boundary import IGNORE, make_boundary_targets, refine_logits
from unept.numerics import Tensor, parameter
from unept.training import (
    LossWeights,
    NonFiniteLossError,
    OptimizerState,
    adamw_step,
    boundary_bce,
    confusion_matrix,
    cross_entropy,
    lr_schedule,
    merge_confusion,
    metrics,
    segmentation_loss,
)

from oracles import loss_loop, miou_by_hand


def random_case(rng, k=3, h=4, w=4, ignore_frac=0.2):
    labels = rng.integers(0, k, size=(h, w)).astype(np.int64)
    labels[rng.random((h, w)) < ignore_frac] = IGNORE
    clean = np.where(labels == IGNORE, 0, labels)
    targets = make_boundary_targets(np.where(labels == IGNORE, IGNORE, clean))
    seg = rng.standard_normal((k, h, w))
    return labels, targets, seg


class TestLoss:
    def test_uniform_logits_give_log_k(self):
        labels = np.array([[0, 1], [2, 3]])
        targets = make_boundary_targets(labels)
        z = Tensor(np.zeros((4, 2, 2)))
        loss, _ = segmentation_loss(z, z, Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((8, 2, 2))),
                                    labels, targets, LossWeights(1.0, 0.0, 0.0, 0.0))
        assert abs(loss.item() - math.log(4)) < 1e-15

    def test_confident_logits_approach_zero(self):
        labels = np.zeros((4, 4), dtype=int)
        labels[:, 2:] = 1
        targets = make_boundary_targets(labels)
        scale = 50.0
        seg = Tensor(scale * (np.eye(2)[labels].transpose(2, 0, 1) * 2 - 1))
        bnd = Tensor(scale * (2 * targets.boundary[None].astype(float) - 1))
        dirs = Tensor(scale * np.eye(8)[np.maximum(targets.direction, 0)].transpose(2, 0, 1))
        loss, _ = segmentation_loss(seg, seg, bnd, dirs, labels, targets)
        assert 0 <= loss.item() < 1e-9

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        labels, targets, seg = random_case(rng)
        refined = rng.standard_normal(seg.shape)
        bnd = rng.standard_normal((1, 4, 4)) * 3
        dirs = rng.standard_normal((8, 4, 4))
        lam = tuple(rng.uniform(0, 3, size=4))
        loss, terms = segmentation_loss(Tensor(seg), Tensor(refined), Tensor(bnd), Tensor(dirs),
                                        labels, targets, LossWeights(*lam))
        expected, expected_terms = loss_loop(seg, refined, bnd, dirs, labels, targets.boundary,
                                             targets.direction, lam)
        assert abs(loss.item() - expected) < 1e-10
        np.testing.assert_allclose(list(terms.values()), expected_terms, rtol=0, atol=1e-10)
        assert loss.item() >= 0

    def test_all_ignore_contributes_zero(self):
        labels = np.full((3, 3), IGNORE)
        targets = make_boundary_targets(labels)
        x = Tensor(np.ones((2, 3, 3)), requires_grad=True)
        loss, terms = segmentation_loss(x, x, Tensor(np.ones((1, 3, 3))), Tensor(np.ones((8, 3, 3))),
                                        labels, targets)
        assert loss.item() == 0.0 and set(terms.values()) == {0.0}

    def test_no_boundary_direction_term_zero(self):
        labels = np.ones((4, 4), dtype=int)
        targets = make_boundary_targets(labels)
        assert targets.boundary.sum() == 0
        ce = cross_entropy(Tensor(np.ones((8, 4, 4))), targets.direction, mask=targets.boundary == 1, ignore=-1)
        assert ce.item() == 0.0

    def test_bce_extreme_logits_finite(self):
        logits = Tensor(np.array([[[800.0, -800.0]]]))
        out = boundary_bce(logits, np.array([[0, 1]]), np.zeros((1, 2)))
        assert out.item() == pytest.approx(800.0)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 1, 1))), np.array([[5]]))

    def test_non_finite_term_named(self):
        labels = np.array([[0, 1]])
        targets = make_boundary_targets(labels)
        good = Tensor(np.zeros((2, 1, 2)))
        bad = np.zeros((1, 1, 2))
        bad_t = Tensor(bad)
        bad_t.data[0, 0, 0] = np.nan  # bypass the creation check to simulate a corrupted head
        with pytest.raises(NonFiniteLossError, match="boundary_bce"):
            segmentation_loss(good, good, bad_t, Tensor(np.zeros((8, 1, 2))), labels, targets)

    def test_gradients_match_finite_differences(self, rng):
        labels, targets, seg0 = random_case(rng, h=5, w=5)
        seg = Tensor(seg0, requires_grad=True)
        bnd = Tensor(rng.standard_normal((1, 5, 5)), requires_grad=True)
        dirs = Tensor(rng.standard_normal((8, 5, 5)), requires_grad=True)

        def loss():
            refined = refine_logits(seg, nx.sigmoid(bnd).reshape(5, 5), dirs)
            return segmentation_loss(seg, refined, bnd, dirs, labels, targets)[0]

        for r in nx.check_parameters(loss, {"seg": seg, "bnd": bnd, "dirs": dirs}):
            assert r.max_rel_err < 1e-4, r


class TestAdamW:
    def test_hand_computed_step(self):
        p = parameter(np.array([0.5]))
        p.grad = np.array([0.2])
        st_ = OptimizerState(lr=0.01, weight_decay=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        adamw_step({"w": p}, st_)
        # decay: 0.5 - 0.01*0.1*0.5 = 0.4995; m_hat = 0.2, v_hat = 0.04 -> step 0.01 * 0.2 / (0.2 + 1e-8)
        expected = 0.4995 - 0.01 * 0.2 / (0.2 + 1e-8)
        assert abs(p.data[0] - expected) < 1e-12
        assert st_.step == 1

    def test_two_steps_against_formula(self):
        p = parameter(np.array([1.0, -2.0]))
        st_ = OptimizerState(lr=0.1, weight_decay=0.0)
        grads = [np.array([0.3, -0.1]), np.array([-0.5, 0.4])]
        m = v = 0.0
        x = np.array([1.0, -2.0])
        for t, g in enumerate(grads, start=1):
            p.grad = g
            adamw_step({"w": p}, st_)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-12)

    def test_zero_grad_zero_decay_unchanged(self):
        p = parameter(np.array([1.0, 2.0]))
        p.grad = np.zeros(2)
        adamw_step({"w": p}, OptimizerState(lr=0.1, weight_decay=0.0))
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_decay_only_shrinks(self, rng):
        p = parameter(rng.standard_normal(5))
        before = np.linalg.norm(p.data)
        p.grad = np.zeros(5)
        adamw_step({"w": p}, OptimizerState(lr=0.1, weight_decay=0.5))
        assert np.linalg.norm(p.data) < before

    def test_lr_zero_changes_only_state(self, rng):
        p = parameter(rng.standard_normal(4))
        p.grad = rng.standard_normal(4)
        before = p.data.copy()
        st_ = OptimizerState(lr=0.0, weight_decay=0.3)
        adamw_step({"w": p}, st_)
        np.testing.assert_array_equal(p.data, before)
        assert st_.step == 1

    def test_backbone_runs_at_tenth(self):
        a = parameter(np.array([1.0]))
        b = parameter(np.array([1.0]))
        a.grad = b.grad = np.array([1.0])
        adamw_step({"backbone.w": a, "decoder.w": b}, OptimizerState(lr=0.1, weight_decay=0.0))
        assert (1.0 - a.data[0]) == pytest.approx((1.0 - b.data[0]) / 10, rel=1e-9)

    def test_moment_shape_mismatch(self):
        p = parameter(np.zeros(3))
        p.grad = np.zeros(3)
        st_ = OptimizerState()
        st_.m["w"], st_.v["w"] = np.zeros(2), np.zeros(2)
        with pytest.raises(ValueError):
            adamw_step({"w": p}, st_)


class TestSchedule:
    def test_start(self):
        assert lr_schedule(0, 500, 1e-3) == 1e-3

    def test_end(self):
        assert lr_schedule(499, 500, 1e-3) == pytest.approx(1e-4)

    def test_boundary_inclusive(self):
        assert lr_schedule(334, 500, 1.0) == 0.1
        assert lr_schedule(333, 500, 1.0) == 1.0
        assert lr_schedule(6, 9, 1.0) == 0.1 and lr_schedule(5, 9, 1.0) == 1.0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(11, 10, 1.0)


class TestMetrics:
    def test_identity_is_diagonal(self, rng):
        x = rng.integers(0, 3, size=(5, 5))
        cm = confusion_matrix(x, x, 3)
        assert (cm == np.diag(np.diag(cm))).all()

    def test_all_ignore(self):
        cm = confusion_matrix(np.zeros((2, 2), int), np.full((2, 2), IGNORE), 3)
        assert (cm == 0).all()
        with pytest.raises(ValueError):
            metrics(cm)

    def test_manual_count(self):
        gt = np.array([[0, 1, 1], [0, 0, 1], [1, 1, 0]])
        pred = np.array([[0, 1, 0], [1, 0, 1], [1, 0, 0]])
        np.testing.assert_array_equal(confusion_matrix(pred, gt, 2), [[3, 1], [2, 3]])

    def test_half_and_half(self):
        gt = np.array([[0, 0], [1, 1]])
        miou, acc = metrics(confusion_matrix(np.zeros((2, 2), int), gt, 2))
        assert acc == 0.5 and miou == 0.25

    def test_absent_class_ignored(self):
        gt = np.array([[0, 1]])
        assert metrics(confusion_matrix(gt, gt, 5)) == (1.0, 1.0)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            confusion_matrix(np.array([[3]]), np.array([[0]]), 3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(2, 5), st.integers(0, 2**31))
    def test_self_agreement_and_oracle(self, h, w, k, seed):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, k, size=(h, w))
        pred = rng.integers(0, k, size=(h, w))
        assert metrics(confusion_matrix(gt, gt, k)) == (1.0, 1.0)
        miou, acc = metrics(confusion_matrix(pred, gt, k))
        e_miou, e_acc = miou_by_hand(pred, gt, k)
        assert abs(miou - e_miou) < 1e-15 and acc == e_acc

    def test_merge_is_associative(self, rng):
        pairs = [(rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4))) for _ in range(4)]
        mats = [confusion_matrix(p, g, 3) for p, g in pairs]
        np.testing.assert_array_equal(merge_confusion(mats), merge_confusion(mats[::-1]))
        whole = confusion_matrix(np.stack([p for p, _ in pairs]), np.stack([g for _, g in pairs]), 3)
        np.testing.assert_array_equal(merge_confusion(mats), whole)
