import math

import numpy as np
import pytest

import placemap as pm
from placemap.errors import ConfigError, EmptyMapError
from placemap.matching import MIN_SCORE

from conftest import random_unit_rows, unit_rows


def dataset_of(rows_by_place, n):
    rows, place_ids = [], []
    for pid, rows_list in sorted(rows_by_place.items()):
        for r in rows_list:
            rows.append(r)
            place_ids.append(pid)
    return pm.dataset_from_arrays(np.asarray(rows, dtype=float).reshape(-1, n), place_ids)


def two_axis_map():
    e = np.eye(3)
    ds = dataset_of({"P1": [e[0]], "P2": [e[1]]}, 3)
    return ds, pm.build_map(ds, pm.MapBuildConfig())


class TestMatchSubspace:
    def test_orthogonal_places(self):
        _, index = two_axis_map()
        res = pm.match_subspace(index, [1.0, 0.0, 0.0])
        assert res.ranking[0] == ("P1", pytest.approx(1.0, abs=1e-9))
        assert res.ranking[1] == ("P2", pytest.approx(0.0, abs=1e-9))

    def test_tie_broken_by_place_id(self):
        _, index = two_axis_map()
        res = pm.match_subspace(index, np.array([1.0, 1.0, 0.0]) / np.sqrt(2))
        assert [p for p, _ in res.ranking] == ["P1", "P2"]
        assert res.ranking[0][1] == pytest.approx(res.ranking[1][1], abs=1e-12)
        assert res.ranking[0][1] == pytest.approx(1 / np.sqrt(2), abs=1e-9)

    def test_agrees_with_brute_force_argmin(self):
        rng = np.random.default_rng(21)
        n, m = 32, 3
        X = random_unit_rows(rng, 10 * m, n)
        ds = pm.dataset_from_arrays(X, [f"p{i // m:02d}" for i in range(10 * m)])
        index = pm.build_map(ds, pm.MapBuildConfig())
        for q in random_unit_rows(rng, 100, n):
            assert pm.match_subspace(index, q).top_place() == pm.oracle_match(ds, q)

    def test_empty_map(self):
        with pytest.raises((EmptyMapError, ConfigError)):
            index = pm.MapIndex([], pm.MapBuildConfig(), 3)
            pm.match_subspace(index, [1.0, 0.0, 0.0])


class TestPooling:
    def test_exact_hit(self):
        e = np.eye(3)
        ds = dataset_of({"P1": [e[0], e[1]]}, 3)
        assert pm.match_pooling(ds, e[1]).ranking[0][1] == pytest.approx(1.0, abs=1e-9)

    def test_antipodal(self):
        e = np.eye(3)
        ds = dataset_of({"P1": [e[0]]}, 3)
        assert pm.match_pooling(ds, -e[0]).ranking[0][1] == pytest.approx(-1.0, abs=1e-9)

    def test_exhaustive_scan_oracle(self):
        rng = np.random.default_rng(31)
        n = 16
        X = random_unit_rows(rng, 15, n)
        place_ids = [f"p{i % 5}" for i in range(15)]
        ds = pm.dataset_from_arrays(X, place_ids)
        queries = random_unit_rows(rng, 40, n)
        hits = 0
        for q in queries:
            # independent exhaustive scan: best single image defines the place
            sims = ds.descriptors @ q
            best_place = ds.records[int(np.argmax(sims))].place_id
            hits += pm.match_pooling(ds, q).top_place() == best_place
        assert hits == len(queries)


class TestDistanceAverage:
    def test_mean_of_one_and_zero(self):
        e = np.eye(3)
        ds = dataset_of({"P1": [e[0], e[1]]}, 3)
        assert pm.match_dmat_avg(ds, e[0]).ranking[0][1] == pytest.approx(0.5, abs=1e-9)

    def test_single_reference_reduces_to_pooling(self):
        rng = np.random.default_rng(41)
        ds = dataset_of({"P1": [unit_rows(rng.standard_normal((1, 8)))[0]]}, 8)
        q = unit_rows(rng.standard_normal((1, 8)))[0]
        assert pm.match_dmat_avg(ds, q).ranking == pm.match_pooling(ds, q).ranking

    def test_cancellation(self):
        e = np.eye(3)
        ds = dataset_of({"P1": [e[0], -e[0]]}, 3)
        assert pm.match_dmat_avg(ds, e[0]).ranking[0][1] == pytest.approx(0.0, abs=1e-9)


class TestSumDescriptors:
    def test_bundle_direction(self):
        e = np.eye(3)
        ds = dataset_of({"P1": [e[0], e[1]]}, 3)
        res = pm.match_sum_desc(ds, e[0])
        assert res.ranking[0][1] == pytest.approx(1 / np.sqrt(2), abs=1e-9)

    def test_single_reference_equals_pooling(self):
        rng = np.random.default_rng(51)
        ds = dataset_of({"P1": [unit_rows(rng.standard_normal((1, 8)))[0]]}, 8)
        q = unit_rows(rng.standard_normal((1, 8)))[0]
        a = pm.match_sum_desc(ds, q).ranking[0][1]
        b = pm.match_pooling(ds, q).ranking[0][1]
        # equal up to the single-precision storage of the reference
        assert a == pytest.approx(b, abs=1e-6)

    def test_zero_bundle_ranked_last(self):
        e = np.eye(3)
        ds = dataset_of({"A": [e[0], -e[0]], "B": [e[1]]}, 3)
        res = pm.match_sum_desc(ds, e[0])
        assert res.ranking[0][0] == "B"
        assert res.ranking[1] == ("A", MIN_SCORE)


class TestLogSumExp:
    def test_top_c_one_equals_pooling(self):
        rng = np.random.default_rng(61)
        X = random_unit_rows(rng, 12, 8)
        ds = pm.dataset_from_arrays(X, [f"p{i % 4}" for i in range(12)])
        q = unit_rows(rng.standard_normal((1, 8)))[0]
        lse = pm.match_lse_rerank(ds, q, pm.BaselineConfig(lse_top_c=1))
        pool = pm.match_pooling(ds, q)
        assert [p for p, _ in lse.ranking] == [p for p, _ in pool.ranking]

    def test_hand_computed_two_places(self):
        # Place A holds references at cosines {0.9, 0.1} to the query,
        # place B two references both at 0.6. With beta=1:
        #   score_A = log(e^0.9 + e^0.1) = 1.2711837...
        #   score_B = log(2 e^0.6)       = 1.2931471...
        # so B outranks A despite A's better single image.
        q = np.array([1.0, 0.0, 0.0])
        def at_cos(c, axis):
            v = np.zeros(3)
            v[0] = c
            v[axis] = np.sqrt(1 - c * c)
            return v
        ds = dataset_of(
            {"A": [at_cos(0.9, 1), at_cos(0.1, 2)], "B": [at_cos(0.6, 1), at_cos(0.6, 2)]},
            3,
        )
        res = pm.match_lse_rerank(ds, q, pm.BaselineConfig(lse_top_c=2, lse_beta=1.0))
        score_a = math.log(math.exp(0.9) + math.exp(0.1))
        score_b = math.log(2.0 * math.exp(0.6))
        assert score_b > score_a  # sanity on the hand computation
        assert res.ranking[0][0] == "B"
        # references are stored at single precision, so cosines carry ~1e-7
        assert res.ranking[0][1] == pytest.approx(score_b, abs=1e-6)
        assert res.ranking[1][1] == pytest.approx(score_a, abs=1e-6)

    def test_beta_to_zero_prefers_more_references(self):
        rng = np.random.default_rng(62)
        big = random_unit_rows(rng, 4, 16)  # 4 references
        small = random_unit_rows(rng, 2, 16)  # 2 references
        ds = dataset_of({"big": list(big), "small": list(small)}, 16)
        # query closest to the small place so pooling prefers it
        q = pm.normalize(small[0] + 0.1 * rng.standard_normal(16))
        pool = pm.match_pooling(ds, q)
        assert pool.top_place() == "small"
        res = pm.match_lse_rerank(ds, q, pm.BaselineConfig(lse_top_c=2, lse_beta=1e-6))
        assert res.top_place() == "big"
        # scores collapse toward log(m)
        scores = dict(res.top(2))
        assert scores["big"] == pytest.approx(math.log(4), abs=1e-4)
        assert scores["small"] == pytest.approx(math.log(2), abs=1e-4)


class TestBatchMatch:
    def test_batch_equals_sequential(self, small_world, small_map):
        _, queries, _ = small_world
        batch = pm.batch_match(small_map, queries, "qr").results
        for rec, res in zip(queries.records, batch):
            single = pm.match_subspace(
                small_map, queries.descriptors[rec.descriptor_index], query_id=rec.image_id
            )
            assert res.query_id == single.query_id
            assert np.array_equal(res.order, single.order)
            assert np.allclose(res.sorted_scores, single.sorted_scores, atol=0)

    def test_empty_query_list(self, small_map):
        batch = pm.batch_match(small_map, np.empty((0, small_map.dimension)))
        assert batch.results == []
        assert batch.ms_per_query == 0.0

    def test_chunking_invariance(self, small_world, small_map):
        # slabs are fixed-size: splitting the batch by hand changes nothing
        _, queries, _ = small_world
        whole = pm.batch_match(small_map, queries, "qr").results
        parts = []
        for lo in range(0, queries.count, 3):
            sub = queries.descriptors[lo : lo + 3]
            ids = [r.image_id for r in queries.records[lo : lo + 3]]
            parts.extend(pm.batch_match(small_map, sub, "qr", query_ids=ids).results)
        for a, b in zip(whole, parts):
            assert a.query_id == b.query_id
            assert np.array_equal(a.order, b.order)
            assert np.array_equal(a.sorted_scores, b.sorted_scores)


class TestRankingInvariants:
    def test_monotone_equivalence_magnitude_vs_residual(self, small_world, small_map):
        _, queries, _ = small_world
        for res in pm.batch_match(small_map, queries, "qr").results:
            mags = res.sorted_scores
            residuals = 1.0 - mags**2
            by_residual = np.argsort(residuals, kind="stable")
            assert np.array_equal(by_residual, np.arange(len(mags)))

    def test_m1_reduction_matches_pooling(self):
        rng = np.random.default_rng(71)
        X = random_unit_rows(rng, 8, 16)
        ds = pm.dataset_from_arrays(X, [f"p{i}" for i in range(8)])
        index = pm.build_map(ds, pm.MapBuildConfig())
        for _ in range(20):
            q = pm.normalize(np.abs(rng.standard_normal(16)))
            if (X @ q < 0).any():
                continue  # only claimed for non-negative cosines
            a = [p for p, _ in pm.match_subspace(index, q).ranking]
            b = [p for p, _ in pm.match_pooling(ds, q).ranking]
            assert a == b

    def test_strategy_totality(self, small_world, small_map):
        refs, queries, _ = small_world
        for strategy in pm.matching.STRATEGIES:
            target = small_map if strategy == "qr" else refs
            res = pm.batch_match(target, queries, strategy).results[0]
            assert sorted(p for p, _ in res.ranking) == refs.place_ids

    def test_2vp_places_collapse_by_max(self):
        cfg = pm.SynthConfig(seed=91, dimension=24, num_places=4, conditions=1,
                             queries_per_place=2)
        refs, queries, _ = pm.generate(cfg)
        index = pm.build_map(refs, pm.MapBuildConfig(method="qr_2vp"))
        assert len(index) == 4 * 4  # four viewpoint pairs per place
        res = pm.match_subspace(index, queries.descriptors[0])
        assert sorted(p for p, _ in res.ranking) == refs.place_ids  # once each
        # per-place score is the best over that place's pair subspaces
        for pid, score in res.ranking:
            best = max(
                pm.project(sub, queries.descriptors[0]).magnitude
                for sub in index.place_subspaces(pid)
            )
            assert score == pytest.approx(best, abs=1e-12)

    def test_tie_determinism_under_construction_order(self):
        rng = np.random.default_rng(81)
        X = random_unit_rows(rng, 12, 16)
        ids = [f"p{i % 4}" for i in range(12)]
        ds1 = pm.dataset_from_arrays(X, ids)
        perm = rng.permutation(12)
        ds2 = pm.dataset_from_arrays(X[perm], [ids[i] for i in perm])
        i1 = pm.build_map(ds1, pm.MapBuildConfig())
        i2 = pm.build_map(ds2, pm.MapBuildConfig())
        for q in random_unit_rows(rng, 10, 16):
            r1 = pm.match_subspace(i1, q)
            r2 = pm.match_subspace(i2, q)
            assert [p for p, _ in r1.ranking] == [p for p, _ in r2.ranking]


class TestResultSerialization:
    def test_jsonl_output(self, tmp_path, small_world, small_map):
        _, queries, _ = small_world
        batch = pm.batch_match(small_map, queries, "qr")
        out = tmp_path / "results.jsonl"
        pm.write_results_jsonl(batch.results, out, top=3)
        import json

        lines = out.read_text().splitlines()
        assert len(lines) == queries.count
        first = json.loads(lines[0])
        assert set(first) == {"query_id", "strategy", "top"}
        assert len(first["top"]) == 3
