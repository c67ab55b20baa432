"""Deterministic k-means and cluster-to-class assignment."""
import numpy as np
import pytest

from ncdseg.clustering import (ClusterModel, assign_cluster_classes, kmeans,
                               masked_mean_feature)
from ncdseg.core import ClassSpace


class TestMaskedMean:
    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        features = rng.normal(size=(6, 5, 4))
        mask = (rng.random((6, 5)) < 0.4).astype(np.uint8)
        if not mask.any():
            mask[0, 0] = 1
        total = np.zeros(4)
        count = 0
        for i in range(6):
            for j in range(5):
                if mask[i, j]:
                    total += features[i, j]
                    count += 1
        assert np.allclose(masked_mean_feature(features, mask), total / count)

    def test_empty_mask_raises(self):
        with pytest.raises(ValueError):
            masked_mean_feature(np.ones((2, 2, 3)), np.zeros((2, 2), dtype=np.uint8))


class TestKMeans:
    def test_separated_clouds_recovered_exactly(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(20, 3))           # diameter ~ a few units
        b = rng.normal(size=(20, 3)) + 300.0   # 100x the diameter away
        points = np.vstack([a, b])
        model = kmeans(points, k=2, seed=0)
        assign = np.array([model.assignments[str(i)] for i in range(40)])
        assert len(set(assign[:20])) == 1
        assert len(set(assign[20:])) == 1
        assert assign[0] != assign[20]

    def test_deterministic_and_seed_sensitive(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(30, 4))
        m1 = kmeans(pts, 3, seed=5)
        m2 = kmeans(pts, 3, seed=5)
        assert np.array_equal(m1.centroids, m2.centroids)
        assert m1.assignments == m2.assignments
        assert m1.inertia == m2.inertia

    def test_restarts_never_hurt(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(50, 2))
        single = kmeans(pts, 5, seed=1, n_init=1)
        multi = kmeans(pts, 5, seed=1, n_init=10)
        assert multi.inertia <= single.inertia

    def test_k_equals_n_gives_zero_inertia(self):
        pts = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        model = kmeans(pts, 3, seed=0)
        assert np.isclose(model.inertia, 0.0)
        assert sorted(model.assignments.values()) == [0, 1, 2]

    def test_duplicate_points_keep_all_clusters_nonempty_or_merge(self):
        # degenerate input: fewer distinct locations than k must still finish
        pts = np.repeat(np.array([[0.0, 0.0], [10.0, 10.0]]), 5, axis=0)
        model = kmeans(pts, 4, seed=0)
        assert all(0 <= c < 4 for c in model.assignments.values())
        assert np.isfinite(model.centroids).all()

    def test_custom_ids(self):
        pts = np.array([[0.0], [0.1], [9.0], [9.1]])
        model = kmeans(pts, 2, seed=0, ids=["w", "x", "y", "z"])
        assert set(model.assignments) == {"w", "x", "y", "z"}
        assert model.assignments["w"] == model.assignments["x"]
        assert model.assignments["y"] == model.assignments["z"]

    def test_input_validation(self):
        pts = np.zeros((3, 2))
        with pytest.raises(ValueError):
            kmeans(pts, 0, seed=0)
        with pytest.raises(ValueError):
            kmeans(pts, 4, seed=0)
        with pytest.raises(ValueError):
            kmeans(pts, 2, seed=0, ids=["a"])
        with pytest.raises(ValueError):
            kmeans(pts, 2, seed=0, n_init=0)
        with pytest.raises(ValueError):
            kmeans(np.zeros(3), 1, seed=0)


class TestAssignClusterClasses:
    def _model(self, k):
        return ClusterModel(k=k, centroids=np.zeros((k, 2)),
                            assignments={f"im{i}": i % k for i in range(6)},
                            inertia=0.0)

    def test_exact_mode_offsets_by_n_base(self):
        cs = ClassSpace(3, 5)
        mapping = assign_cluster_classes(self._model(5), cs, "exact")
        assert all(3 <= v < 8 for v in mapping.values())
        assert mapping["im1"] == 3 + 1

    def test_over_mode_requires_head_size(self):
        cs = ClassSpace(3, 5, novel_head_size=10)
        mapping = assign_cluster_classes(self._model(10), cs, "over")
        assert all(3 <= v < 13 for v in mapping.values())
        with pytest.raises(ValueError):
            assign_cluster_classes(self._model(5), cs, "over")

    def test_exact_mode_requires_k_match(self):
        cs = ClassSpace(3, 5)
        with pytest.raises(ValueError):
            assign_cluster_classes(self._model(4), cs, "exact")
        with pytest.raises(ValueError):
            assign_cluster_classes(self._model(5), cs, "kmeans")
