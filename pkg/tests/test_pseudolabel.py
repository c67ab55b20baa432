"""Stage-2 pseudo-labels: confident base maps, mask restriction, fusion."""
import numpy as np
import pytest

from conftest import build_benchmark, small_config
from ncdseg import pseudolabel
from ncdseg.config import base_train_config
from ncdseg.core import ClassSpace
from ncdseg.pseudolabel import (build_pseudo_labels, confident_base_labels,
                                fuse_labels, novel_salient_mask,
                                read_pseudo_labels, write_pseudo_labels)
from ncdseg.segmenter import train_base


class TestConfidentBaseLabels:
    def test_low_confidence_filtered_to_background(self):
        prob = np.array([[[0.6, 0.3, 0.1]]])
        assert confident_base_labels(prob, tau=0.9)[0, 0] == 0

    def test_confident_pixels_keep_argmax(self):
        prob = np.array([[[0.05, 0.92, 0.03], [0.91, 0.05, 0.04]]])
        out = confident_base_labels(prob, tau=0.9)
        assert out[0, 0] == 1 and out[0, 1] == 0

    def test_threshold_is_strict(self):
        prob = np.array([[[0.9, 0.1, 0.0]]])
        assert confident_base_labels(prob, tau=0.9)[0, 0] == 0

    def test_tau_bounds(self):
        prob = np.full((1, 1, 2), 0.5)
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                confident_base_labels(prob, bad)


class TestNovelSalientMask:
    def test_matches_boolean_oracle(self):
        rng = np.random.default_rng(0)
        saliency = (rng.random((16, 16)) < 0.5).astype(np.uint8)
        base_labels = rng.integers(0, 3, size=(16, 16)).astype(np.uint8)
        mask = novel_salient_mask(saliency, base_labels)
        for i in range(16):
            for j in range(16):
                expect = 1 if (saliency[i, j] == 1 and base_labels[i, j] == 0) else 0
                assert mask[i, j] == expect

    def test_mask_is_restriction_of_saliency(self):
        rng = np.random.default_rng(1)
        saliency = (rng.random((8, 8)) < 0.5).astype(np.uint8)
        base_labels = rng.integers(0, 2, size=(8, 8)).astype(np.uint8)
        mask = novel_salient_mask(saliency, base_labels)
        assert np.all(mask <= saliency)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            novel_salient_mask(np.zeros((2, 2), dtype=np.uint8),
                               np.zeros((2, 3), dtype=np.uint8))


class TestFuseLabels:
    def test_fusion_postconditions(self):
        rng = np.random.default_rng(2)
        cs = ClassSpace(3, 4)
        base = rng.integers(0, 3, size=(10, 10)).astype(np.uint8)
        mask = ((rng.random((10, 10)) < 0.4) & (base == 0)).astype(np.uint8)
        fused = fuse_labels(base, mask, cluster_class=5, class_space=cs)
        assert np.all(fused[base != 0] == base[base != 0])
        assert np.all(fused[mask == 1] == 5)
        assert np.all(fused[(base == 0) & (mask == 0)] == 0)

    def test_overlap_rejected(self):
        cs = ClassSpace(3, 4)
        base = np.array([[1]], dtype=np.uint8)
        mask = np.array([[1]], dtype=np.uint8)
        with pytest.raises(ValueError):
            fuse_labels(base, mask, 4, cs)

    def test_cluster_class_range_checked(self):
        cs = ClassSpace(3, 4)   # novel channels [3, 7)
        base = np.zeros((2, 2), dtype=np.uint8)
        mask = np.ones((2, 2), dtype=np.uint8)
        for bad in (0, 2, 7, 20):
            with pytest.raises(ValueError):
                fuse_labels(base, mask, bad, cs)
        assert fuse_labels(base, mask, 3, cs)[0, 0] == 3


@pytest.fixture(scope="module")
def small_cfg_module():
    cfg = small_config()
    return cfg, build_benchmark(cfg)


@pytest.fixture(scope="module")
def stage2(small_cfg_module):
    cfg, bench = small_cfg_module
    base, novel, _ = bench
    base_model = train_base(base, base_train_config(cfg))
    space = ClassSpace(base.class_space.n_base, base.class_space.n_novel,
                       novel_head_size=base.class_space.n_novel)
    records, model = build_pseudo_labels(base_model, novel, space, tau=0.9,
                                         k=space.n_novel, seed=0, mode="exact")
    return base_model, records, model, novel, space


class TestBuildPseudoLabels:
    def test_records_in_dataset_order(self, stage2):
        _, records, _, novel, _ = stage2
        assert [r.image_id for r in records] == novel.ids()

    def test_labeled_records_have_consistent_fields(self, stage2):
        _, records, model, _, space = stage2
        for rec in records:
            if rec.skipped:
                assert rec.fused is None and rec.cluster_id is None
                assert rec.novel_pixels < pseudolabel.MIN_NOVEL_PIXELS
                assert np.isnan(rec.distance)
            else:
                assert rec.novel_pixels == int(rec.novel_mask.sum())
                assert 0 <= rec.cluster_id < model.k
                assert np.isfinite(rec.distance)
                # fused equals the additive formula
                expect = (rec.base_labels.astype(np.int64)
                          + (space.n_base + rec.cluster_id) * rec.novel_mask)
                assert np.array_equal(rec.fused, expect.astype(np.uint8))

    def test_undersized_masks_are_skipped(self, stage2):
        base_model, records, _, novel, space = stage2
        cut = int(np.median([r.novel_pixels for r in records])) + 1
        records2, _ = build_pseudo_labels(base_model, novel, space, tau=0.9,
                                          k=space.n_novel, seed=0, mode="exact",
                                          min_novel_pixels=cut)
        assert any(r.skipped for r in records2)
        assert all(r.novel_pixels < cut for r in records2 if r.skipped)
        assert [r.image_id for r in records2] == novel.ids()

    def test_too_few_usable_images_raises(self, stage2):
        base_model, _, _, novel, space = stage2
        with pytest.raises(ValueError):
            build_pseudo_labels(base_model, novel, space, tau=0.9,
                                k=space.n_novel, seed=0, mode="exact",
                                min_novel_pixels=10**6)

    def test_missing_saliency_rejected(self, small_cfg_module, stage2):
        _, bench = small_cfg_module
        base, _, _ = bench
        base_model, _, _, _, _ = stage2
        space = base.class_space
        with pytest.raises(ValueError):
            build_pseudo_labels(base_model, base, space, tau=0.9,
                                k=space.n_novel, seed=0, mode="exact")


class TestRoundtrip:
    def test_write_read_preserves_records(self, stage2, tmp_path):
        _, records, _, _, _ = stage2
        write_pseudo_labels(records, tmp_path / "pl")
        back = read_pseudo_labels(tmp_path / "pl")
        assert len(back) == len(records)
        for a, b in zip(records, back):
            assert a.image_id == b.image_id
            assert a.cluster_id == b.cluster_id
            assert a.novel_pixels == b.novel_pixels
            assert np.array_equal(a.base_labels, b.base_labels)
            assert np.array_equal(a.novel_mask, b.novel_mask)
            if a.fused is None:
                assert b.fused is None
                assert np.isnan(b.distance)
            else:
                assert np.array_equal(a.fused, b.fused)
                assert a.distance == b.distance

    def test_missing_sidecar_raises(self, tmp_path):
        from ncdseg.dataio import DataFormatError
        (tmp_path / "pl").mkdir()
        with pytest.raises(DataFormatError):
            read_pseudo_labels(tmp_path / "pl")
