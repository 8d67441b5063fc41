import math

import numpy as np
import pytest

from darl import adversarial as adv
from darl import nn
from darl.exceptions import BatchError, LabelError
from darl.synthdata import ShiftSpec, generate_task


def _nets(k=3, d_in=2, seed=0, feature_dim=5, hidden=6):
    return adv.make_adv_nets(d_in, k, np.random.default_rng(seed), feature_dim, hidden, hidden)


def _batch(rng, k, d_in=2, n_s=5, n_t=4):
    return rng.normal(size=(d_in, n_s)), rng.integers(0, k, n_s), rng.normal(size=(d_in, n_t))


def _generic_nets(k, seed):
    # random biases keep ReLU pre-activations away from the kink at exactly 0
    nets = _nets(k=k, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for params in (nets.f_params, nets.c_params, nets.d_params):
        for b in params.biases:
            b += rng.normal(0.0, 0.1, b.shape)
    return nets


def _zero_head(params):
    params.weights[-1][:] = 0.0
    params.biases[-1][:] = 0.0


class TestLabels:
    def test_examples(self):
        assert adv.build_disc_labels("source", [1], 3)[:, 0].tolist() == [0, 1, 0, 0]
        assert adv.build_disc_labels("target", None, 3, n=1)[:, 0].tolist() == [0, 0, 0, 1]
        assert adv.build_disc_labels("source", [0], 1)[:, 0].tolist() == [1, 0]
        assert adv.build_feat_labels("source", None, 3, n=1)[:, 0].tolist() == [0, 0, 0, 1]
        assert adv.build_feat_labels("target", [2], 3)[:, 0].tolist() == [0, 0, 1, 0]

    @pytest.mark.parametrize("k", range(1, 9))
    def test_exhaustive_duality(self, k):
        idx = np.arange(k)
        disc_s = adv.build_disc_labels("source", idx, k)
        feat_t = adv.build_feat_labels("target", idx, k)
        expect = np.zeros((k + 1, k))
        expect[idx, idx] = 1.0
        np.testing.assert_array_equal(disc_s, expect)
        np.testing.assert_array_equal(feat_t, expect)
        slot_k = np.zeros((k + 1, 3))
        slot_k[k] = 1.0
        np.testing.assert_array_equal(adv.build_disc_labels("target", None, k, n=3), slot_k)
        np.testing.assert_array_equal(adv.build_feat_labels("source", None, k, n=3), slot_k)
        for labels in (disc_s, feat_t):
            assert (np.count_nonzero(labels, axis=0) == 1).all()

    def test_out_of_range(self):
        with pytest.raises(LabelError):
            adv.build_disc_labels("source", [3], 3)
        with pytest.raises(LabelError):
            adv.build_feat_labels("target", [-1], 3)

    def test_missing_labels(self):
        with pytest.raises(LabelError):
            adv.build_disc_labels("source", None, 3)
        with pytest.raises(LabelError):
            adv.build_feat_labels("target", None, 3)


class TestShapes:
    def test_widths(self):
        nets = adv.make_adv_nets(2, 4, np.random.default_rng(0))
        assert nets.f_spec.layer_widths == (2, 32, 32, 16)
        assert nets.c_spec.layer_widths == (16, 4)
        assert nets.d_spec.layer_widths == (16, 32, 5)

    def test_predict_contract(self):
        nets = _nets(k=4)
        x = np.random.default_rng(1).normal(size=(2, 30))
        cp, pl, dp = adv.predict(nets, x)
        np.testing.assert_allclose(cp.sum(axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(dp.sum(axis=0), 1.0, atol=1e-12)
        scan = [max(range(4), key=lambda c: (cp[c, j], -c)) for j in range(30)]
        assert pl.tolist() == scan

    def test_uniform_head_ties_to_zero(self):
        nets = _nets(k=4)
        _zero_head(nets.c_params)
        assert not adv.predict(nets, np.ones((2, 7)))[1].any()


class TestLosses:
    def test_uniform_classifier_is_ln4(self):
        nets = _nets(k=4)
        _zero_head(nets.c_params)
        loss, _, _ = adv.classifier_loss(nets, np.ones((2, 3)), np.array([0, 1, 3]))
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_perfect_classifier_near_zero(self):
        nets = _nets(k=2)
        _zero_head(nets.c_params)
        nets.c_params.biases[0][:] = [200.0, -200.0]
        loss, _, _ = adv.classifier_loss(nets, np.ones((2, 2)), np.array([0, 0]))
        assert loss <= 1e-10

    @pytest.mark.parametrize("k", [1, 3, 6])
    def test_first_disc_loss_two_ln(self, k):
        nets = _nets(k=k)
        _zero_head(nets.d_params)
        xs, ys, xt = _batch(np.random.default_rng(k), k)
        loss = adv.discriminator_step(nets, xs, ys, xt, lr=1e-3)
        assert loss == pytest.approx(2 * math.log(k + 1), abs=1e-12)

    def test_empty_batches(self):
        nets = _nets()
        with pytest.raises(BatchError):
            adv.discriminator_loss(nets, np.zeros((2, 0)), np.zeros(0, int), np.ones((2, 3)))
        with pytest.raises(BatchError):
            adv.feature_classifier_step(nets, np.ones((2, 3)), np.zeros(3, int), np.zeros((2, 0)), 1e-3)


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_classifier_loss(self, seed):
        rng = np.random.default_rng(seed)
        nets = _generic_nets(3, seed)
        x, y, _ = _batch(rng, 3)
        _, gf, gc = adv.classifier_loss(nets, x, y)
        fn = lambda: adv.classifier_loss(nets, x, y)[0]
        num = nn.finite_diff(fn, nets.f_params.arrays() + nets.c_params.arrays())
        assert nn.max_relative_error(gf + gc, num) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_discriminator_loss(self, seed):
        rng = np.random.default_rng(100 + seed)
        nets = _generic_nets(2 + seed % 3, seed)
        xs, ys, xt = _batch(rng, nets.k_source)
        _, gd = adv.discriminator_loss(nets, xs, ys, xt)
        num = nn.finite_diff(lambda: adv.discriminator_loss(nets, xs, ys, xt)[0], nets.d_params.arrays())
        assert nn.max_relative_error(gd, num) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_feature_loss(self, seed):
        rng = np.random.default_rng(200 + seed)
        nets = _generic_nets(3, seed)
        xs, ys, xt = _batch(rng, 3)
        pseudo = rng.integers(0, 3, xt.shape[1])
        extra = {}
        if seed % 2:
            extra = {"cls_x": rng.normal(size=(2, 6)), "cls_y": rng.integers(0, 3, 6)}
        _, gf, gc = adv.feature_loss(nets, xs, ys, xt, pseudo, **extra)
        fn = lambda: adv.feature_loss(nets, xs, ys, xt, pseudo, **extra)[0]["total"]
        num = nn.finite_diff(fn, nets.f_params.arrays() + nets.c_params.arrays())
        assert nn.max_relative_error(gf + gc, num) < 1e-4


class TestFreeze:
    def test_disc_step_keeps_f_and_c(self):
        nets = _nets()
        before = nets.copy()
        xs, ys, xt = _batch(np.random.default_rng(0), 3)
        adv.discriminator_step(nets, xs, ys, xt, lr=1e-2)
        assert nets.f_params.equals(before.f_params) and nets.c_params.equals(before.c_params)
        assert not nets.d_params.equals(before.d_params)

    def test_feature_step_keeps_d(self):
        nets = _nets()
        before = nets.copy()
        xs, ys, xt = _batch(np.random.default_rng(0), 3)
        adv.feature_classifier_step(nets, xs, ys, xt, lr=1e-2)
        assert nets.d_params.equals(before.d_params)
        assert not nets.f_params.equals(before.f_params)

    def test_pretrain_keeps_d(self):
        task = generate_task(seed=0, per_class_count_src=5, per_class_count_tgt=5)
        nets = adv.make_adv_nets(2, 4, np.random.default_rng(0))
        before = nets.d_params.copy()
        adv.pretrain_source(nets, task, 2, 1e-3, np.random.default_rng(1))
        assert nets.d_params.equals(before)


class TestTraining:
    def test_disc_overfits_separated_features(self):
        task = generate_task(seed=0, class_separation=6.0, cluster_std=0.3,
                             shift=ShiftSpec(0.0, (20.0, 20.0), (1, 1), 0.1), k_source=3, n_shared=2)
        nets = adv.make_adv_nets(2, 3, np.random.default_rng(0))
        for _ in range(400):
            adv.discriminator_step(nets, task.source_x, task.source_y, task.target_x, 1e-2)
        d_src = adv.predict(nets, task.source_x)[2]
        d_tgt = adv.predict(nets, task.target_x)[2]
        assert d_src[task.source_y, np.arange(task.n_source)].min() > 0.9
        assert d_tgt[-1].min() > 0.9

    def test_feature_step_decreases_loss(self):
        rng = np.random.default_rng(5)
        nets = _nets(k=3, seed=5)
        xs, ys, xt = _batch(rng, 3, n_s=12, n_t=12)
        totals = []
        for _ in range(51):
            totals.append(adv.feature_classifier_step(nets, xs, ys, xt, 1e-3)["total"])
        ups = sum(b > a for a, b in zip(totals, totals[1:]))
        assert totals[-1] < totals[0] and ups <= 5

    def test_uniform_d_reduces_to_classifier_step(self):
        rng = np.random.default_rng(9)
        nets = _nets(k=3, seed=9)
        _zero_head(nets.d_params)
        xs, ys, xt = _batch(rng, 3)
        ref = nets.copy()
        adv.feature_classifier_step(nets, xs, ys, xt, 1e-3)
        adv.classifier_step(ref, xs, ys, 1e-3)
        for a, b in zip(nets.f_params.arrays() + nets.c_params.arrays(), ref.f_params.arrays() + ref.c_params.arrays()):
            np.testing.assert_allclose(a, b, atol=1e-6, rtol=0)

    def test_pretrain_fits_default_source(self):
        task = generate_task(seed=0)
        nets = adv.make_adv_nets(2, 4, np.random.default_rng(0))
        curve = adv.pretrain_source(nets, task, 200, 1e-3, np.random.default_rng(1))
        acc = float(np.mean(adv.predict(nets, task.source_x)[1] == task.source_y))
        assert acc >= 0.95
        assert curve[-1] < curve[0]

    def test_pretrain_needs_epochs(self):
        with pytest.raises(ValueError):
            adv.pretrain_source(_nets(), generate_task(seed=0), 0, 1e-3, np.random.default_rng(0))


def test_sample_batches_equal_and_capped():
    rng = np.random.default_rng(0)
    s, t = adv.sample_batches(rng, 100, 30, 64)
    assert s.size == t.size == 64 and len(set(s.tolist())) == 64
    s, t = adv.sample_batches(rng, 5, 30, 64)
    assert s.tolist() == list(range(5)) and t.size == 5
