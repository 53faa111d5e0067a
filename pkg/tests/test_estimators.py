import numpy as np
import pytest
from sklearn.base import clone

import placemap as pm
from placemap import (
    DescriptorReducer,
    DescriptorSumRecognizer,
    DistanceAveragingRecognizer,
    LogSumExpRecognizer,
    PoolingRecognizer,
    SubspaceRecognizer,
)
from placemap.errors import ConfigError

from conftest import random_unit_rows


@pytest.fixture(scope="module")
def world():
    cfg = pm.SynthConfig(seed=33, dimension=24, num_places=8, queries_per_place=2)
    refs, queries, _ = pm.generate(cfg)
    X = refs.descriptors
    y = [r.place_id for r in refs.records]
    Xq = queries.descriptors
    yq = [r.place_id for r in queries.records]
    headings = [r.heading_deg for r in refs.records]
    return X, y, Xq, yq, headings


ALL_RECOGNIZERS = [
    SubspaceRecognizer,
    PoolingRecognizer,
    DistanceAveragingRecognizer,
    DescriptorSumRecognizer,
    LogSumExpRecognizer,
]


class TestEstimatorContract:
    @pytest.mark.parametrize("cls", ALL_RECOGNIZERS)
    def test_fit_predict_score(self, cls, world):
        X, y, Xq, yq, _ = world
        est = cls().fit(X, y)
        pred = est.predict(Xq)
        assert pred.shape == (len(yq),)
        assert set(pred) <= set(y)
        score = est.score(Xq, yq)
        assert 0.0 <= score <= 1.0

    @pytest.mark.parametrize("cls", ALL_RECOGNIZERS)
    def test_clone_and_params(self, cls):
        est = cls()
        params = est.get_params()
        cloned = clone(est)
        assert cloned.get_params() == params

    def test_set_params_roundtrip(self):
        est = SubspaceRecognizer(method="svd", svd_rank=2)
        est.set_params(svd_rank=3)
        assert est.get_params()["svd_rank"] == 3

    def test_predict_before_fit_raises(self, world):
        _, _, Xq, _, _ = world
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            SubspaceRecognizer().predict(Xq)

    def test_label_count_mismatch(self, world):
        X, y, _, _, _ = world
        with pytest.raises(ConfigError):
            SubspaceRecognizer().fit(X, y[:-1])


class TestSubspaceRecognizer:
    def test_matches_functional_pipeline(self, world):
        X, y, Xq, _, _ = world
        est = SubspaceRecognizer().fit(X, y)
        ds = pm.dataset_from_arrays(X, y)
        index = pm.build_map(ds, pm.MapBuildConfig())
        expected = [r.top_place() for r in pm.batch_match(index, Xq, "qr").results]
        assert list(est.predict(Xq)) == expected

    def test_decision_function_orders_like_rank(self, world):
        X, y, Xq, _, _ = world
        est = SubspaceRecognizer().fit(X, y)
        scores = est.decision_function(Xq[:3])
        ranks = est.rank(Xq[:3])
        for row, res in zip(scores, ranks):
            assert est.places_[int(np.argmax(row))] == res.top_place()

    def test_svd_variant(self, world):
        X, y, Xq, _, _ = world
        est = SubspaceRecognizer(method="svd", svd_rank="m-1").fit(X, y)
        assert est.map_index_.subspaces[0].method == "svd_truncated"
        est.predict(Xq)

    def test_viewpoint_pairs_need_headings(self, world):
        X, y, _, _, headings = world
        with pytest.raises(ConfigError):
            SubspaceRecognizer(method="qr_2vp").fit(X, y)
        est = SubspaceRecognizer(method="qr_2vp").fit(X, y, headings=headings)
        assert len(est.map_index_) == 4 * len(set(y))

    def test_recall_at_one_on_easy_world(self):
        cfg = pm.SynthConfig(
            seed=40, dimension=32, num_places=6, noise_sigma=0.0, query_mode="aligned"
        )
        refs, queries, _ = pm.generate(cfg)
        est = SubspaceRecognizer().fit(
            refs.descriptors, [r.place_id for r in refs.records]
        )
        assert est.score(queries.descriptors, [r.place_id for r in queries.records]) == 1.0


class TestBaselineRecognizers:
    def test_lse_params_flow_through(self, world):
        X, y, Xq, _, _ = world
        a = LogSumExpRecognizer(top_c=1).fit(X, y)
        b = PoolingRecognizer().fit(X, y)
        assert list(a.predict(Xq)) == list(b.predict(Xq))

    def test_lse_decision_function_unsupported(self, world):
        X, y, Xq, _, _ = world
        est = LogSumExpRecognizer().fit(X, y)
        with pytest.raises(ConfigError):
            est.decision_function(Xq)

    def test_sum_recognizer_param(self, world):
        X, y, Xq, _, _ = world
        est = DescriptorSumRecognizer(sum_renormalize=False).fit(X, y)
        est.predict(Xq)  # cosine scoring is scale-invariant either way


class TestDescriptorReducer:
    def test_slice_transform(self, world):
        X, *_ = world
        red = DescriptorReducer(method="slice", target_dim=8).fit(X)
        out = red.transform(X)
        assert out.shape == (X.shape[0], 8)
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)
        assert np.array_equal(out, pm.reduce_dimension(X, "slice", 8))

    def test_pca_fit_on_refs_applies_to_queries(self, world):
        X, _, Xq, _, _ = world
        red = DescriptorReducer(method="pca", target_dim=6).fit(X)
        out = red.transform(Xq)
        assert out.shape == (Xq.shape[0], 6)
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)

    def test_fit_transform_matches_function(self, world):
        X, *_ = world
        out = DescriptorReducer(method="pca", target_dim=5).fit_transform(X)
        assert np.allclose(out, pm.reduce_dimension(X, "pca", 5), atol=1e-12)

    def test_dimension_mismatch_on_transform(self, world):
        X, *_ = world
        red = DescriptorReducer(method="slice", target_dim=8).fit(X)
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            red.transform(random_unit_rows(rng, 3, X.shape[1] + 1))

    def test_pipeline_composition(self, world):
        from sklearn.pipeline import Pipeline

        X, y, Xq, yq, _ = world
        pipe = Pipeline(
            [
                ("reduce", DescriptorReducer(method="pca", target_dim=12)),
                ("recognize", SubspaceRecognizer()),
            ]
        )
        pipe.fit(X, y)
        assert 0.0 <= pipe.score(Xq, yq) <= 1.0
