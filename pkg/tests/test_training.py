import math

import numpy as np
import pytest

from fgsn.model import CorrespondenceSample, FeatureMap, LabelMap, ScoreMap
from fgsn.training import (
    ToyHead,
    TrainConfig,
    TrainItem,
    class_loss,
    corr_loss,
    grad_check,
    loss_and_grad,
    mean_corr_loss,
    sgd_step,
    softmax,
    total_loss,
    train_loop,
)


def random_item(rng, h=2, w=3, d=2, c=3, n=3):
    ref = rng.normal(size=(h, w, d))
    tgt = rng.normal(size=(h, w, d))
    labels = rng.integers(0, c, size=(h, w))
    rp = np.column_stack([rng.integers(0, h, n), rng.integers(0, w, n)])
    tp = np.column_stack([rng.integers(0, h, n), rng.integers(0, w, n)])
    return TrainItem(ref, tgt, CorrespondenceSample("r", "t", rp, tp), labels)


def direct_total(ref_p, tgt_p, item):
    """Second route: explicit loops over pixels with plain math.log."""
    h, w = item.ref_labels.shape
    lc = -sum(math.log(ref_p[r, c, item.ref_labels[r, c]]) for r in range(h) for c in range(w)) / (h * w)
    pairs = zip(item.sample.ref_points, item.sample.tgt_points)
    terms = [math.log(ref_p[r0, c0, item.ref_labels[r0, c0]]) + math.log(tgt_p[r1, c1, item.ref_labels[r0, c0]]) for (r0, c0), (r1, c1) in pairs]
    return lc, -sum(terms) / len(terms)


class TestLosses:
    def test_class_loss_one_hot(self):
        labels = np.array([[0, 1], [2, 1]])
        scores = np.eye(3)[labels]
        assert class_loss(ScoreMap(scores), LabelMap(labels, 3)) == 0.0

    def test_class_loss_half(self):
        assert class_loss(np.array([[[0.5, 0.5]]]), np.array([[0]])) == pytest.approx(math.log(2), abs=1e-12)

    @pytest.mark.parametrize("c", [2, 5, 19])
    def test_class_loss_uniform(self, c):
        assert class_loss(np.full((3, 4, c), 1.0 / c), np.zeros((3, 4), int)) == pytest.approx(math.log(c), abs=1e-12)

    def test_class_loss_shape_mismatch(self):
        with pytest.raises(ValueError):
            class_loss(np.full((2, 2, 2), 0.5), np.zeros((3, 2), int))

    def test_corr_loss_worked_example(self):
        s = CorrespondenceSample("r", "t", [[0, 0]], [[0, 0]])
        got = corr_loss(np.array([[[0.5, 0.5]]]), np.array([[[0.25, 0.75]]]), s, np.array([[0]]))
        assert got == pytest.approx(-(math.log(0.5) + math.log(0.25)), abs=1e-12)
        assert got == pytest.approx(2.0794, abs=1e-4)

    def test_corr_loss_one_hot(self):
        labels = np.array([[1, 0]])
        one_hot = np.eye(2)[labels]
        s = CorrespondenceSample("r", "t", [[0, 0], [0, 1]], [[0, 0], [0, 1]])
        assert corr_loss(one_hot, one_hot, s, labels) == 0.0

    def test_corr_loss_identical_maps_doubles_cross_entropy(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(4), size=(3, 3))
        labels = rng.integers(0, 4, (3, 3))
        pts = np.array([[0, 0], [1, 2], [2, 1]])
        s = CorrespondenceSample("r", "t", pts, pts)
        ce = -np.mean([math.log(p[r, c, labels[r, c]]) for r, c in pts])
        assert corr_loss(p, p, s, labels) == pytest.approx(2 * ce, abs=1e-12)

    def test_corr_loss_out_of_bounds(self):
        s = CorrespondenceSample("r", "t", [[5, 0]], [[0, 0]])
        with pytest.raises(ValueError):
            corr_loss(np.full((2, 2, 2), 0.5), np.full((2, 2, 2), 0.5), s, np.zeros((2, 2), int))

    def test_total_is_sum(self):
        rng = np.random.default_rng(1)
        item = random_item(rng)
        pr, pt = rng.dirichlet(np.ones(3), size=(2, 3)), rng.dirichlet(np.ones(3), size=(2, 3))
        a = class_loss(pr, item.ref_labels)
        b = corr_loss(pr, pt, item.sample, item.ref_labels)
        assert total_loss(pr, pt, item.sample, item.ref_labels) == a + b

    def test_total_matches_direct_recomputation(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            item = random_item(rng)
            pr, pt = rng.dirichlet(np.ones(3), size=(2, 3)), rng.dirichlet(np.ones(3), size=(2, 3))
            lc, lco = direct_total(pr, pt, item)
            assert total_loss(pr, pt, item.sample, item.ref_labels) == pytest.approx(lc + lco, rel=1e-12)

    def test_losses_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            item = random_item(rng)
            pr, pt = rng.dirichlet(np.ones(3), size=(2, 3)), rng.dirichlet(np.ones(3), size=(2, 3))
            assert class_loss(pr, item.ref_labels) >= 0
            assert corr_loss(pr, pt, item.sample, item.ref_labels) >= 0

    def test_log_floor(self):
        assert class_loss(np.array([[[1.0, 0.0]]]), np.array([[1]])) == pytest.approx(-math.log(1e-12))

    def test_mean_corr_loss(self):
        s = CorrespondenceSample("r", "t", [[0, 0]], [[0, 0]])
        half = np.array([[[0.5, 0.5]]])
        items = [(half, half, s, np.array([[0]])), (np.array([[[1.0, 0.0]]]),) * 2 + (s, np.array([[0]]))]
        assert mean_corr_loss(items) == pytest.approx(math.log(2))


class TestHeadGradients:
    def test_loss_and_grad_matches_score_losses(self):
        rng = np.random.default_rng(4)
        head = ToyHead.init(2, [3], 3, rng, reinit_std=0.5)
        item = random_item(rng)
        losses, _ = loss_and_grad(head, [item])
        pr, pt = softmax(head.forward(item.ref)), softmax(head.forward(item.tgt))
        lc, lco = direct_total(pr, pt, item)
        assert losses["class"] == pytest.approx(lc, rel=1e-12)
        assert losses["corr"] == pytest.approx(lco, rel=1e-12)

    def test_linear_head_class_loss(self):
        rng = np.random.default_rng(5)
        head = ToyHead.init(3, [], 4, rng, reinit_std=0.5)
        assert grad_check(head, [random_item(rng, d=3, c=4)], epsilon=1e-3, terms="class") < 1e-4

    def test_corr_loss_two_pixel_maps(self):
        rng = np.random.default_rng(6)
        head = ToyHead.init(2, [3], 2, rng, reinit_std=0.5)
        assert grad_check(head, [random_item(rng, h=1, w=2, c=2, n=2)], terms="corr") < 1e-4

    def test_zero_parameter_head(self):
        head = ToyHead([(np.zeros((2, 0)), np.zeros(0))])
        assert grad_check(head, []) == 0.0

    def test_predict_is_normalized(self):
        rng = np.random.default_rng(7)
        head = ToyHead.init(4, [5], 6, rng)
        assert head.predict(FeatureMap(rng.normal(size=(3, 3, 4)))).is_normalized()


class TestSGD:
    def _scalar_head(self, w):
        return ToyHead([(np.array([[w]]), np.array([0.0]))])

    def test_zero_gradient_no_decay(self):
        head = self._scalar_head(1.5)
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0)
        new, _ = sgd_step(head, [np.zeros((1, 1)), np.zeros(1)], cfg)
        assert new == head

    def test_plain_step(self):
        cfg = TrainConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0)
        new, _ = sgd_step(self._scalar_head(1.0), [np.ones((1, 1)), np.zeros(1)], cfg)
        assert new.layers[0][0][0, 0] == pytest.approx(0.9)

    def test_momentum_unrolled(self):
        lr, mu, wd = 0.1, 0.9, 0.01
        cfg = TrainConfig(learning_rate=lr, momentum=mu, weight_decay=wd)
        head, vel = self._scalar_head(1.0), None
        g1, g2 = 0.5, -0.25
        head, vel = sgd_step(head, [np.array([[g1]]), np.zeros(1)], cfg, vel)
        head, vel = sgd_step(head, [np.array([[g2]]), np.zeros(1)], cfg, vel)
        # hand-unrolled recurrence
        w0 = 1.0
        v1 = g1 + wd * w0
        w1 = w0 - lr * v1
        v2 = mu * v1 + g2 + wd * w1
        w2 = w1 - lr * v2
        assert head.layers[0][0][0, 0] == pytest.approx(w2, abs=1e-15)

    def test_non_finite_gradient_names_block(self):
        cfg = TrainConfig()
        with pytest.raises(FloatingPointError, match=r"layers\[0\].biases"):
            sgd_step(self._scalar_head(1.0), [np.zeros((1, 1)), np.array([np.nan])], cfg)

    def test_zero_learning_rate_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)


def separable_dataset(rng, n_pairs=4, h=6, w=6):
    """Two well-separated feature blobs; targets are noisy copies of references."""
    features, samples = {}, []
    for i in range(n_pairs):
        mask = rng.random((h, w)) < 0.5
        ref = np.where(mask[..., None], 2.0, -2.0) + 0.2 * rng.normal(size=(h, w, 3))
        tgt = ref + 0.2 * rng.normal(size=ref.shape)
        features[f"r{i}"], features[f"t{i}"] = FeatureMap(ref), FeatureMap(tgt)
        pts = np.column_stack(np.divmod(rng.choice(h * w, 10, replace=False), w))
        samples.append(CorrespondenceSample(f"r{i}", f"t{i}", pts, pts))
    return features, samples


class TestTrainLoop:
    def _cfg(self, **kw):
        base = dict(learning_rate=0.05, total_iterations=60, recluster_interval=20, num_clusters=2, hidden_dims=[4], pca_dim=2, cluster_samples=200, seed=0)
        base.update(kw)
        return TrainConfig(**base)

    def test_loss_decreases(self):
        features, samples = separable_dataset(np.random.default_rng(0))
        res = train_loop(features.__getitem__, samples, self._cfg(total_iterations=150, recluster_interval=150))
        first = np.mean([t[3] for t in res.loss_trace[:10]])
        last = np.mean([t[3] for t in res.loss_trace[-10:]])
        assert last < first

    def test_single_clustering_when_interval_equals_total(self):
        features, samples = separable_dataset(np.random.default_rng(1))
        res = train_loop(features.__getitem__, samples, self._cfg(recluster_interval=60))
        assert [h[0] for h in res.centroid_history] == [0]

    def test_recluster_schedule_and_reset(self):
        features, samples = separable_dataset(np.random.default_rng(2))
        res = train_loop(features.__getitem__, samples, self._cfg())
        assert [h[0] for h in res.centroid_history] == [0, 20, 40]
        assert [v[0] for v in res.val_history] == [20, 40, 60]

    def test_deterministic(self):
        features, samples = separable_dataset(np.random.default_rng(3))
        a = train_loop(features.__getitem__, samples, self._cfg())
        b = train_loop(features.__getitem__, samples, self._cfg())
        assert a.head == b.head
        assert a.loss_trace == b.loss_trace

    def test_provider_failure_reports_iteration(self):
        features, samples = separable_dataset(np.random.default_rng(4))

        def provider(image_id):
            if image_id == "t1":
                raise OSError("disk gone")
            return features[image_id]

        with pytest.raises(RuntimeError, match="iteration"):
            train_loop(provider, samples, self._cfg())

    def test_no_recluster_reset_keeps_final_layer_continuous(self, monkeypatch):
        import fgsn.training as tr

        features, samples = separable_dataset(np.random.default_rng(5))
        seen = []
        real_step = tr.sgd_step

        def spy(head, grads, config, velocity=None):
            seen.append(head.layers[-1][0].copy())
            out = real_step(head, grads, config, velocity)
            seen.append(out[0].layers[-1][0].copy())
            return out

        monkeypatch.setattr(tr, "sgd_step", spy)
        train_loop(features.__getitem__, samples, self._cfg(no_recluster_reset=True))
        # the head entering step i equals the head leaving step i - 1
        for it in (20, 40):
            np.testing.assert_array_equal(seen[2 * it], seen[2 * it - 1])

        seen.clear()
        train_loop(features.__getitem__, samples, self._cfg(no_recluster_reset=False))
        assert not np.array_equal(seen[40], seen[39])
