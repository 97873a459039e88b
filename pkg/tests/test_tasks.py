import math
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dphfl import tasks
from dphfl.tasks import (
    Dataset,
    DatasetError,
    IdxFormatError,
    PartitionError,
    batch_size,
    clip,
    device_gradient,
    evaluate,
    load_idx_images,
    make_quadratic,
    make_softmax,
    partition_noniid,
    softmax_task,
    stochastic_gradient,
    write_idx,
)
from dphfl.topology import build_topology


@pytest.fixture
def topo():
    return build_topology(2, [3, 2], [True, False])


@pytest.fixture
def quad(topo):
    return make_quadratic(4, 5, 1.0, 3, topology=topo, points_per_device=6, point_spread=0.7)


@pytest.fixture(scope="module")
def small_softmax():
    data = make_softmax(40, 4, 30, 2.0, seed=1)
    topo = build_topology(2, [2, 2], [True, False])
    shards = partition_noniid(data, topo, 2, seed=2)
    return softmax_task(shards, topo, grad_bound=math.inf)


class TestQuadratic:
    def test_centres_are_record_means(self, quad):
        for shard, a in zip(quad.shards, quad.centers):
            np.testing.assert_allclose(shard.features.mean(axis=0), a, atol=1e-12)

    def test_heterogeneity_radius(self):
        task = make_quadratic(6, 40, 0.3, 0)
        common_spread = np.linalg.norm(task.centers - task.centers.mean(axis=0), axis=1)
        assert common_spread.max() <= 0.6 + 1e-12

    def test_zero_heterogeneity_identical_centres(self):
        task = make_quadratic(3, 4, 0.0, 5)
        assert np.ptp(task.centers, axis=0).max() == 0.0

    def test_evaluate_closed_form(self, topo):
        task = make_quadratic(4, 5, 1.0, 3, topology=topo, points_per_device=3, point_spread=0.0)
        w = np.array([0.3, -1.0, 2.0, 0.5])
        rho = 1.0 / topo.sizes[topo.device_to_subnet]
        varrho = 1.0 / topo.num_subnets
        expected = sum(varrho * r * 0.5 * np.sum((w - a) ** 2) for r, a in zip(rho, task.centers))
        ev = evaluate(task, w)
        assert ev.loss == pytest.approx(expected, rel=1e-12)
        assert ev.accuracy is None
        grad = sum(varrho * r * (w - a) for r, a in zip(rho, task.centers))
        assert ev.grad_norm_sq == pytest.approx(float(grad @ grad), rel=1e-12)

    def test_optimum_has_zero_gradient(self, quad):
        assert evaluate(quad, quad.optimum).grad_norm_sq < 1e-24

    def test_full_batch_gradient_is_analytic(self, quad):
        w = np.ones(4)
        for i in range(5):
            g = stochastic_gradient(quad, i, w, 1.0, seed=0)
            np.testing.assert_allclose(g, w - quad.centers[i], rtol=1e-12, atol=1e-15)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            make_quadratic(0, 2, 1.0, 0)
        with pytest.raises(ValueError):
            make_quadratic(2, 2, -1.0, 0)


class TestClipping:
    @settings(max_examples=200, deadline=None)
    @given(
        g=arrays(np.float64, 7, elements=st.floats(-1e6, 1e6)),
        bound=st.floats(1e-3, 1e3),
    )
    def test_clip_bound(self, g, bound):
        c = clip(g, bound)
        assert np.linalg.norm(c) <= bound + 1e-12
        if np.linalg.norm(g) <= bound:
            assert np.array_equal(c, g)

    @settings(max_examples=50, deadline=None)
    @given(model=arrays(np.float64, 40, elements=st.floats(-50, 50)), seed=st.integers(0, 1000))
    def test_stochastic_gradient_respects_bound(self, small_softmax, model, seed):
        task = tasks.TaskInstance(
            kind=small_softmax.kind, model_dim=small_softmax.model_dim, shards=small_softmax.shards,
            topology=small_softmax.topology, grad_bound=0.05, num_classes=small_softmax.num_classes,
        )
        g = stochastic_gradient(task, seed % 4, model, 0.3, seed)
        assert np.linalg.norm(g) <= 0.05 + 1e-12


class TestSampling:
    @pytest.mark.parametrize("D, q, b", [(60, 0.1, 6), (10, 0.25, 3), (5, 1.0, 5), (3, 0.01, 1), (7, 0.5, 4)])
    def test_batch_size(self, D, q, b):
        assert batch_size(D, q) == b

    def test_rejects_bad_fraction(self):
        with pytest.raises(ValueError):
            batch_size(10, 0.0)

    def test_same_seed_same_gradient(self, quad):
        w = np.zeros(4)
        a = stochastic_gradient(quad, 0, w, 0.5, seed=11)
        b = stochastic_gradient(quad, 0, w, 0.5, seed=11)
        assert np.array_equal(a, b)

    def test_realized_fraction(self, quad):
        assert tasks.realized_sampling_fraction(quad, 0.25) == pytest.approx(2 / 6)


class TestSoftmax:
    def test_shape_and_classes(self):
        data = make_softmax(7840, 10, 20, 2.0, seed=0)
        assert data.features.shape == (200, 784)
        assert np.bincount(data.labels).tolist() == [20] * 10

    def test_deterministic(self):
        a = make_softmax(60, 3, 5, 1.0, seed=4)
        b = make_softmax(60, 3, 5, 1.0, seed=4)
        assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)

    def test_model_dim_must_divide(self):
        with pytest.raises(ValueError):
            make_softmax(41, 4, 5, 1.0, seed=0)

    def test_mean_separation(self):
        data = make_softmax(400, 4, 2000, 3.0, seed=0)
        means = np.stack([data.features[data.labels == c].mean(axis=0) for c in range(4)])
        d = np.linalg.norm(means[0] - means[1])
        assert d == pytest.approx(3.0, rel=0.05)

    def test_gradient_matches_finite_differences(self, small_softmax):
        rng = np.random.default_rng(0)
        w = rng.normal(size=40)
        shard = small_softmax.shards[0]
        g = device_gradient(small_softmax, 0, w)
        h = 1e-6
        for j in rng.choice(40, 8, replace=False):
            e = np.zeros(40)
            e[j] = h
            fd = (tasks._loss(small_softmax, shard, w + e) - tasks._loss(small_softmax, shard, w - e)) / (2 * h)
            assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_smoothness_bound_dominates_probe(self, small_softmax):
        props = tasks.estimate_properties(
            small_softmax, [np.zeros(40), np.ones(40) * 0.2], probe_pairs=6, seed=0
        )
        assert props.source == "estimated"
        assert props.beta <= tasks.softmax_smoothness_bound(small_softmax) + 1e-12
        assert props.zeta >= 0 and (props.zeta_c >= 0).all() and props.sigma_sgd == 0.0

    def test_no_separation_is_chance(self):
        accs = []
        for seed in range(5):
            data = make_softmax(200, 10, 100, 0.0, seed=seed)
            train, test = tasks.train_test_split(data, 0.3, seed)
            topo = build_topology(1, [1], [True])
            task = softmax_task([train], topo)
            w = np.zeros(task.model_dim)
            for _ in range(100):
                w -= 0.5 * device_gradient(task, 0, w)
            accs.append(tasks.accuracy_on(task, w, test))
        assert abs(np.mean(accs) - 0.1) <= 0.05

    def test_separable_learns(self, small_softmax):
        w = np.zeros(40)
        for _ in range(200):
            w -= 1.0 * sum(
                wt * device_gradient(small_softmax, i, w) for i, wt in enumerate(small_softmax.loss_weights)
            )
        assert evaluate(small_softmax, w).accuracy > 0.9


class TestPartition:
    def test_disjoint_and_label_exact(self):
        data = make_softmax(100, 10, 60, 1.0, seed=0)
        topo = build_topology(10, [5] * 10, [True] * 10)
        shards = partition_noniid(data, topo, 3, seed=5)
        assert len(shards) == 50
        seen = np.concatenate([s.source_index for s in shards])
        assert len(seen) == len(np.unique(seen)) == len(data)
        for s in shards:
            assert len(np.unique(s.labels)) == 3
            np.testing.assert_array_equal(data.labels[s.source_index], s.labels)

    def test_integer_device_count(self):
        data = make_softmax(20, 2, 10, 1.0, seed=0)
        shards = partition_noniid(data, 4, 1, seed=0)
        assert [len(np.unique(s.labels)) for s in shards] == [1] * 4

    def test_infeasible(self):
        data = make_softmax(20, 2, 2, 1.0, seed=0)
        with pytest.raises(PartitionError, match="infeasible"):
            partition_noniid(data, 10, 2, seed=0)

    def test_labels_per_device_range(self):
        data = make_softmax(20, 2, 5, 1.0, seed=0)
        with pytest.raises(PartitionError):
            partition_noniid(data, 2, 3, seed=0)

    @settings(max_examples=25, deadline=None)
    @given(devices=st.integers(1, 12), L=st.integers(1, 4), seed=st.integers(0, 10_000))
    def test_property(self, devices, L, seed):
        data = make_softmax(16, 4, 40, 1.0, seed=seed)
        shards = partition_noniid(data, devices, L, seed)
        idx = np.concatenate([s.source_index for s in shards])
        assert len(idx) == len(np.unique(idx))
        assert all(len(np.unique(s.labels)) == L for s in shards)


class TestIdx:
    def _pair(self, tmp_path, n=20, labels=None):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
        labs = (np.arange(n) % 10).astype(np.uint8) if labels is None else labels
        write_idx(tmp_path / "img", imgs)
        write_idx(tmp_path / "lab", labs)
        return imgs, labs

    def test_round_trip(self, tmp_path):
        imgs, labs = self._pair(tmp_path)
        data = load_idx_images(tmp_path / "img", tmp_path / "lab")
        assert data.features.shape == (20, 784)
        assert data.num_classes == 10
        np.testing.assert_allclose(data.features * 255.0, imgs.reshape(20, -1))
        assert 0.0 <= data.features.min() and data.features.max() <= 1.0
        np.testing.assert_array_equal(data.labels, labs)

    def test_synthetic_full_size_fixture(self, tmp_path):
        imgs, labs = self._pair(tmp_path, n=10_000)
        data = load_idx_images(tmp_path / "img", tmp_path / "lab")
        assert data.features.shape == (10_000, 784)
        assert np.bincount(data.labels).tolist() == [1000] * 10

    def test_truncated(self, tmp_path):
        self._pair(tmp_path)
        raw = (tmp_path / "img").read_bytes()
        (tmp_path / "img").write_bytes(raw[:-5])
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx_images(tmp_path / "img", tmp_path / "lab")
        (tmp_path / "img").write_bytes(raw[:6])
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx_images(tmp_path / "img", tmp_path / "lab")

    def test_bad_magic(self, tmp_path):
        self._pair(tmp_path)
        with pytest.raises(IdxFormatError, match="bad magic"):
            load_idx_images(tmp_path / "lab", tmp_path / "img")

    def test_count_mismatch(self, tmp_path):
        self._pair(tmp_path)
        write_idx(tmp_path / "lab", np.arange(19, dtype=np.uint8) % 10)
        with pytest.raises(IdxFormatError, match="count mismatch"):
            load_idx_images(tmp_path / "img", tmp_path / "lab")

    def test_missing_class_rejected(self, tmp_path):
        self._pair(tmp_path, labels=np.array([0, 2] * 10, dtype=np.uint8))
        with pytest.raises(DatasetError):
            load_idx_images(tmp_path / "img", tmp_path / "lab")

    @pytest.mark.skipif("DPHFL_FMNIST_DIR" not in os.environ, reason="set DPHFL_FMNIST_DIR to test real data")
    def test_real_fashion_mnist(self):
        root = Path(os.environ["DPHFL_FMNIST_DIR"])
        data = load_idx_images(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
        assert data.features.shape == (60_000, 784)
        assert data.num_classes == 10


class TestProperties:
    def test_quadratic_analytic(self, topo):
        task = make_quadratic(3, 5, 1.0, 0, topology=topo, points_per_device=4, point_spread=0.0)
        props = tasks.estimate_properties(task, [np.zeros(3)], 1, 0, q=0.5)
        assert props.source == "analytic"
        assert props.beta == 1.0
        assert props.sigma_sgd == 0.0
        sub = np.stack([task.centers[topo.members(c)].mean(axis=0) for c in range(2)])
        assert props.zeta == pytest.approx(np.linalg.norm(sub - sub.mean(axis=0), axis=1).max())

    def test_quadratic_sgd_variance_exact(self):
        topo = build_topology(1, [1], [True])
        x = np.array([[0.0], [1.0], [2.0], [3.0]])
        task = tasks.quadratic_task([x], topo)
        props = tasks.estimate_properties(task, [np.zeros(1)], 1, 0, q=0.5)
        # enumerate all 6 two-point batches
        import itertools

        errs = [((x[list(b)].mean() - 1.5) ** 2) for b in itertools.combinations(range(4), 2)]
        assert props.sigma_sgd**2 == pytest.approx(np.mean(errs), rel=1e-12)

    def test_empty_probes(self, quad):
        with pytest.raises(ValueError):
            tasks.estimate_properties(quad, [], 1, 0)

    def test_dataset_check(self):
        with pytest.raises(DatasetError):
            Dataset(np.zeros((2, 2)), np.array([0, 5]), 3).check()
