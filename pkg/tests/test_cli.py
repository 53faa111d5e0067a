import json

import numpy as np
import pytest
from click.testing import CliRunner

import placemap as pm
from placemap.cli import main


@pytest.fixture()
def runner():
    return CliRunner()


def run_ok(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


SYNTH_ARGS = [
    "synth", "--seed", "5", "--n", "16", "--places", "6",
    "--conditions", "2", "--queries-per-place", "2",
]


@pytest.fixture()
def dataset_dir(tmp_path, runner):
    out = tmp_path / "data"
    run_ok(runner, SYNTH_ARGS + ["--out", str(out)])
    return out


def dataset_args(d):
    return [
        "--manifest", str(d / "references.manifest.json"),
        "--descriptors", str(d / "references.vprd"),
    ]


def query_args(d):
    return [
        "--query-manifest", str(d / "queries.manifest.json"),
        "--query-descriptors", str(d / "queries.vprd"),
    ]


class TestSynth:
    def test_outputs_exist_and_load(self, dataset_dir):
        refs = pm.load_dataset(
            dataset_dir / "references.manifest.json", dataset_dir / "references.vprd"
        )
        assert refs.count == 6 * 2 * 4
        assert (dataset_dir / "synth_config.json").is_file()

    def test_same_seed_twice_identical_bytes(self, tmp_path, runner):
        a, b = tmp_path / "a", tmp_path / "b"
        run_ok(runner, SYNTH_ARGS + ["--out", str(a)])
        run_ok(runner, SYNTH_ARGS + ["--out", str(b)])
        for name in ("references.vprd", "queries.vprd", "references.manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_invalid_shared_frac_is_config_error(self, tmp_path, runner):
        result = runner.invoke(
            main, SYNTH_ARGS + ["--out", str(tmp_path / "x"), "--shared-frac", "1.5"]
        )
        assert result.exit_code == 4


class TestBuildMap:
    def test_builds_map_and_stats(self, dataset_dir, runner, tmp_path):
        out = tmp_path / "m.vprmap"
        stats = tmp_path / "stats.json"
        run_ok(
            runner,
            ["build-map", *dataset_args(dataset_dir), "--out", str(out),
             "--stats-out", str(stats)],
        )
        index = pm.load_map(out)
        assert len(index) == 6
        data = json.loads(stats.read_text())
        assert data["places"] == 6
        assert data["map_mem_bytes"] == index.memory_bytes

    def test_svd_m_minus_one(self, dataset_dir, runner, tmp_path):
        out = tmp_path / "m.vprmap"
        run_ok(
            runner,
            ["build-map", *dataset_args(dataset_dir), "--out", str(out),
             "--method", "svd", "--rank", "m-1"],
        )
        index = pm.load_map(out)
        assert all(sub.rank == 7 for sub in index)  # 8 references per place

    def test_missing_manifest_is_input_error(self, runner, tmp_path):
        result = runner.invoke(
            main,
            ["build-map", "--manifest", str(tmp_path / "nope.json"),
             "--descriptors", str(tmp_path / "nope.vprd"),
             "--out", str(tmp_path / "m.vprmap")],
        )
        assert result.exit_code == 2
        assert "nope" in result.output

    def test_corrupt_block_is_format_error(self, dataset_dir, runner, tmp_path):
        bad = tmp_path / "bad.vprd"
        bad.write_bytes(b"garbage")
        result = runner.invoke(
            main,
            ["build-map", "--manifest", str(dataset_dir / "references.manifest.json"),
             "--descriptors", str(bad), "--out", str(tmp_path / "m.vprmap")],
        )
        assert result.exit_code == 3


class TestMatch:
    def test_jsonl_output(self, dataset_dir, runner, tmp_path):
        map_path = tmp_path / "m.vprmap"
        run_ok(runner, ["build-map", *dataset_args(dataset_dir), "--out", str(map_path)])
        out = tmp_path / "results.jsonl"
        run_ok(
            runner,
            ["match", "--map", str(map_path), *query_args(dataset_dir),
             "--strategy", "qr", "--top", "3", "--out", str(out)],
        )
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(lines) == 12
        assert all(len(l["top"]) == 3 for l in lines)

    def test_baseline_strategy_uses_references(self, dataset_dir, runner, tmp_path):
        out = tmp_path / "results.jsonl"
        run_ok(
            runner,
            ["match", *dataset_args(dataset_dir), *query_args(dataset_dir),
             "--strategy", "pooling", "--out", str(out)],
        )
        assert out.stat().st_size > 0

    def test_qr_without_map_is_input_error(self, dataset_dir, runner, tmp_path):
        result = runner.invoke(
            main,
            ["match", *query_args(dataset_dir), "--out", str(tmp_path / "r.jsonl")],
        )
        assert result.exit_code == 2


class TestEvaluate:
    def test_five_strategy_report(self, dataset_dir, runner, tmp_path):
        out = tmp_path / "eval"
        run_ok(
            runner,
            ["evaluate", *dataset_args(dataset_dir), *query_args(dataset_dir),
             "--strategies", "qr,pooling,dmat,sum,lse", "--ks", "1,5,10,25",
             "--out-dir", str(out)],
        )
        lines = (out / "report.csv").read_text().splitlines()
        assert len(lines) == 1 + 5 * 4  # header + strategies x ks
        report = json.loads((out / "report.json").read_text())
        assert {r["strategy"] for r in report["rows"]} == {"qr", "pooling", "dmat", "sum", "lse"}

    def test_rank_sweep_full_rank_equals_qr(self, dataset_dir, runner, tmp_path):
        out_sweep = tmp_path / "sweep"
        out_base = tmp_path / "base"
        run_ok(
            runner,
            ["evaluate", *dataset_args(dataset_dir), *query_args(dataset_dir),
             "--sweep", "rank=1..8", "--ks", "1", "--out-dir", str(out_sweep),
             "--deterministic"],
        )
        run_ok(
            runner,
            ["evaluate", *dataset_args(dataset_dir), *query_args(dataset_dir),
             "--strategies", "qr", "--ks", "1", "--out-dir", str(out_base),
             "--deterministic"],
        )
        sweep_rows = (out_sweep / "report.csv").read_text().splitlines()[1:]
        base_row = (out_base / "report.csv").read_text().splitlines()[1]
        full_rank_recall = sweep_rows[-1].split(",")[6]
        assert base_row.split(",")[6] == full_rank_recall

    def test_dim_sweep(self, dataset_dir, runner, tmp_path):
        out = tmp_path / "dims"
        run_ok(
            runner,
            ["evaluate", *dataset_args(dataset_dir), *query_args(dataset_dir),
             "--strategies", "qr", "--sweep", "dim=16,8,4", "--ks", "1",
             "--out-dir", str(out)],
        )
        rows = (out / "report.csv").read_text().splitlines()[1:]
        assert [r.split(",")[3] for r in rows] == ["16", "8", "4"]
        # dim=4 cannot host 8-column places; it degrades to an error row
        assert rows[2].split(",")[6] == ""
        report = json.loads((out / "report.json").read_text())
        assert report["rows"][2]["error"] is not None

    def test_deterministic_reports_byte_identical_across_threads(
        self, dataset_dir, runner, tmp_path
    ):
        outs = []
        for name, threads in (("t1", "1"), ("t2", "2")):
            out = tmp_path / name
            run_ok(
                runner,
                ["evaluate", *dataset_args(dataset_dir), *query_args(dataset_dir),
                 "--strategies", "qr,pooling", "--ks", "1,5", "--out-dir", str(out),
                 "--threads", threads, "--deterministic"],
            )
            outs.append((out / "report.csv").read_bytes())
        assert outs[0] == outs[1]


class TestOrient:
    def test_bias_bound_flag(self, runner):
        result = run_ok(runner, ["orient", "--bias-bound", "5", "10"])
        assert result.output.strip() == "30.0"

    def test_per_query_csv(self, dataset_dir, runner, tmp_path):
        map_path = tmp_path / "m.vprmap"
        run_ok(runner, ["build-map", *dataset_args(dataset_dir), "--out", str(map_path)])
        out = tmp_path / "orient.csv"
        run_ok(
            runner,
            ["orient", "--map", str(map_path), *query_args(dataset_dir),
             "--method", "qr", "--out", str(out)],
        )
        lines = out.read_text().splitlines()
        assert lines[0] == "query_id,method,theta_deg,resultant_length,gt_theta,abs_error_deg"
        assert len(lines) == 1 + 12

    def test_missing_headings_is_capability_error(self, runner, tmp_path):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((4, 8))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        ds = pm.dataset_from_arrays(X, ["a", "a", "b", "b"])
        pm.save_dataset(ds, tmp_path / "r.json", tmp_path / "r.vprd")
        index = pm.build_map(ds, pm.MapBuildConfig())
        pm.save_map(index, tmp_path / "m.vprmap")
        result = CliRunner().invoke(
            main,
            ["orient", "--map", str(tmp_path / "m.vprmap"),
             "--query-manifest", str(tmp_path / "r.json"),
             "--query-descriptors", str(tmp_path / "r.vprd"),
             "--out", str(tmp_path / "o.csv")],
        )
        assert result.exit_code == 4


class TestThreadsEnv:
    def test_env_var_supplies_default(self, dataset_dir, tmp_path):
        runner = CliRunner(env={"PLACEMAP_THREADS": "2"})
        out = tmp_path / "m.vprmap"
        result = runner.invoke(
            main,
            ["build-map", *dataset_args(dataset_dir), "--out", str(out)],
            catch_exceptions=False,
        )
        assert result.exit_code == 0
        assert out.is_file()

    def test_invalid_env_var_is_config_error(self, dataset_dir, tmp_path):
        runner = CliRunner(env={"PLACEMAP_THREADS": "many"})
        result = runner.invoke(
            main,
            ["build-map", *dataset_args(dataset_dir),
             "--out", str(tmp_path / "m.vprmap")],
        )
        assert result.exit_code == 4


class TestInspect:
    def test_map_summary(self, dataset_dir, runner, tmp_path):
        map_path = tmp_path / "m.vprmap"
        run_ok(runner, ["build-map", *dataset_args(dataset_dir), "--out", str(map_path)])
        result = run_ok(runner, ["inspect", str(map_path)])
        assert "places:        6" in result.output
        assert "rank histogram" in result.output

    def test_dataset_summary(self, dataset_dir, runner):
        result = run_ok(
            runner,
            ["inspect", str(dataset_dir / "references.manifest.json"),
             "--descriptors", str(dataset_dir / "references.vprd")],
        )
        assert "places:      6" in result.output
        assert "heading coverage: 48/48" in result.output

    def test_corrupt_map_is_format_error(self, runner, tmp_path):
        bad = tmp_path / "bad.vprmap"
        bad.write_bytes(b"not a map at all")
        result = runner.invoke(main, ["inspect", str(bad)])
        assert result.exit_code == 3
