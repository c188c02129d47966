"""Compiled and pure-numpy kernels must agree."""

import numpy as np
import pytest

from vmfseg import _kernels_py
from vmfseg import backend

compiled = pytest.importorskip("vmfseg._kernels")


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return np.ascontiguousarray(v / np.linalg.norm(v, axis=1, keepdims=True))


class TestKernelAgreement:
    def test_assign_matches(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            n, k, d = rng.integers(1, 500), rng.integers(1, 40), rng.integers(2, 40)
            vectors = unit_rows(rng, n, d)
            protos = unit_rows(rng, k, d)
            ic, sc = compiled.assign(vectors, protos)
            ip, sp = _kernels_py.assign(vectors, protos)
            np.testing.assert_array_equal(ic, ip)
            np.testing.assert_allclose(sc, sp, atol=1e-12)

    def test_assign_tie_break(self):
        vectors = np.array([[1.0, 0.0]])
        protos = np.array([[0.0, 1.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
        for impl in (compiled, _kernels_py):
            idx, _ = impl.assign(vectors, protos)
            assert idx[0] == 2

    def test_segment_sums_bit_identical(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            n, k, d = int(rng.integers(1, 800)), int(rng.integers(1, 30)), int(rng.integers(2, 20))
            vectors = unit_rows(rng, n, d)
            labels = rng.integers(0, k, size=n).astype(np.int64)
            sc, cc = compiled.segment_sums(vectors, labels, k)
            sp, cp = _kernels_py.segment_sums(vectors, labels, k)
            np.testing.assert_array_equal(cc, cp)
            # Same accumulation order on both sides: exact equality.
            np.testing.assert_array_equal(sc, sp)

    def test_label_range_checked(self):
        vectors = unit_rows(np.random.default_rng(2), 4, 3)
        labels = np.array([0, 1, 2, 5], dtype=np.int64)
        for impl in (compiled, _kernels_py):
            with pytest.raises(ValueError):
                impl.segment_sums(vectors, labels, 3)

    def test_kmeans_identical_across_backends(self, monkeypatch):
        from vmfseg.core import TrainConfig, normalize_map
        from vmfseg import kmeans

        rng = np.random.default_rng(3)
        emb = normalize_map(rng.normal(size=(20, 20, 6)))
        cfg = TrainConfig(num_clusters=7, em_iters=8, embedding_dim=6)

        results = []
        for impl in (compiled, _kernels_py):
            monkeypatch.setattr(backend, "assign", impl.assign)
            monkeypatch.setattr(backend, "segment_sums", impl.segment_sums)
            seg, objectives = kmeans.spherical_kmeans_trace(emb, cfg)
            results.append((seg.labels.copy(), objectives.copy()))
        np.testing.assert_array_equal(results[0][0], results[1][0])
        np.testing.assert_allclose(results[0][1], results[1][1], rtol=1e-12)

    def test_backend_name_reports(self):
        assert backend.backend_name() in {"compiled", "numpy"}
