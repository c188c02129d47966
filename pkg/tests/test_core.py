import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmfseg.core import (
    ConfigError,
    EmbeddingMap,
    LabelMap,
    Prototype,
    Segmentation,
    TrainConfig,
    ZeroVectorError,
    cosine,
    normalize_map,
)


class TestNormalizeMap:
    def test_direct_normalization(self):
        raw = np.array([[[3.0, 4.0]]])
        emb = normalize_map(raw)
        np.testing.assert_allclose(emb.data[0, 0], [0.6, 0.8])

    def test_unit_vector_unchanged(self):
        raw = np.zeros((1, 1, 4))
        raw[0, 0, 0] = 1.0
        emb = normalize_map(raw)
        np.testing.assert_array_equal(emb.data, raw)

    def test_zero_vector_rejected(self):
        raw = np.ones((2, 2, 3))
        raw[1, 0] = 0.0
        with pytest.raises(ZeroVectorError):
            normalize_map(raw)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        raw = rng.normal(size=(5, 7, 6))
        once = normalize_map(raw)
        twice = normalize_map(once.data)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-12)

    def test_output_norms(self):
        rng = np.random.default_rng(4)
        emb = normalize_map(rng.normal(size=(4, 4, 8)) * 100)
        np.testing.assert_allclose(np.linalg.norm(emb.data, axis=2), 1.0, atol=1e-12)


class TestCosine:
    def test_identity(self):
        assert cosine(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_antipodal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) == -1.0

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_symmetric_and_clamped(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=4)
        b = rng.normal(size=4)
        a /= np.linalg.norm(a)
        b /= np.linalg.norm(b)
        assert cosine(a, b) == cosine(b, a)
        assert -1.0 <= cosine(a, b) <= 1.0


class TestEmbeddingMap:
    def test_rejects_non_unit(self):
        with pytest.raises(ValueError):
            EmbeddingMap(np.full((2, 2, 3), 0.9))

    def test_rejects_small_dim(self):
        with pytest.raises(ValueError):
            EmbeddingMap(np.ones((2, 2, 1)))

    def test_immutable(self):
        emb = normalize_map(np.random.default_rng(0).normal(size=(2, 2, 3)))
        with pytest.raises(ValueError):
            emb.data[0, 0, 0] = 2.0


class TestSegmentation:
    def test_from_labels_compacts(self):
        seg = Segmentation.from_labels(np.array([[0, 5], [5, 9]]))
        assert seg.num_segments == 3
        np.testing.assert_array_equal(seg.labels, [[0, 1], [1, 2]])

    def test_compaction_preserves_order(self):
        seg = Segmentation.from_labels(np.array([[7, 2], [2, 7]]))
        np.testing.assert_array_equal(seg.labels, [[1, 0], [0, 1]])

    def test_rejects_gap(self):
        with pytest.raises(ValueError):
            Segmentation(labels=np.array([[0, 2]]), num_segments=2)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            Segmentation.from_labels(np.array([[-1, 0]]))


class TestLabelMap:
    def test_ignore_mask(self):
        lm = LabelMap(labels=np.array([[1, 65535], [0, 2]]))
        np.testing.assert_array_equal(lm.ignore_mask(), [[False, True], [False, False]])


class TestPrototype:
    def test_rejects_non_unit(self):
        with pytest.raises(ValueError):
            Prototype(vector=np.array([1.0, 1.0]), image_id=0, segment_id=0)

    def test_rejects_zero_pixels(self):
        with pytest.raises(ValueError):
            Prototype(vector=np.array([1.0, 0.0]), image_id=0, segment_id=0, pixel_count=0)


class TestTrainConfig:
    def test_reference_defaults(self):
        cfg = TrainConfig()
        assert cfg.embedding_dim == 32
        assert cfg.num_clusters == 25
        assert cfg.em_iters == 10
        assert cfg.kappa == 10.0
        assert cfg.knn == 21
        assert cfg.bank_depth == 2

    def test_validate_passes_defaults(self):
        TrainConfig().validate()

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"num_clusters": 1},
            {"num_clusters": 0},
            {"kappa": 0.0},
            {"kappa": -1.0},
            {"knn": 4},
            {"knn": 0},
            {"em_iters": 0},
            {"coord_weight": -0.5},
            {"bank_depth": -1},
            {"batch_size": 0},
            {"embedding_dim": 1},
        ],
    )
    def test_validate_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs).validate()

    def test_degenerate_k_allowed_for_tests(self):
        TrainConfig(num_clusters=1).validate(allow_degenerate=True)
