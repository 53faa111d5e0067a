"""Command-line surface: synth, build-map, match, evaluate, orient, inspect.

All randomness flows from explicit ``--seed`` options and every command is
idempotent on identical inputs. Timing and timestamp fields vary between
runs unless ``--deterministic`` is given, which blanks them so outputs are
byte-identical. Exit codes: 0 success, 2 input, 3 format, 4 configuration,
5 data, 6 numeric errors.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .errors import ConfigError, InputError, ParameterError, PlaceMapError
from .evaluation import (
    GroundTruthSpec,
    condition_pair_filters,
    evaluate_strategies,
    sweep_dimension,
    sweep_rank,
    sweep_reference_subsets,
)
from .mapping import MapBuildConfig, ReferenceFilter, build_map, load_map, save_map
from .matching import STRATEGIES, BaselineConfig, batch_match, write_results_jsonl
from .orientation import (
    angular_error_deg,
    bias_bound,
    estimate_heading_pooling,
    estimate_heading_qr,
)
from .store import load_dataset, save_dataset
from .subspace import place_matrix_from_rows
from .synth import SynthConfig, generate

REF_BASE = "references"
QUERY_BASE = "queries"


def _default_threads() -> int:
    env = os.environ.get("PLACEMAP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"PLACEMAP_THREADS must be an integer, got {env!r}") from None
    return 1


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PlaceMapError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


def _load_pair(manifest, descriptors, what):
    if manifest is None or descriptors is None:
        raise InputError(f"{what} requires both --manifest and --descriptors paths")
    return load_dataset(manifest, descriptors)


def _parse_list(text, cast=float):
    return [cast(part) for part in str(text).split(",") if part != ""]


def _parse_sweep(text):
    """Parse 'rank=1..4', 'dim=2048,1024', or 'subsets=condition-pairs'."""
    if "=" not in text:
        raise ParameterError(f"sweep must look like axis=values, got {text!r}")
    axis, _, values = text.partition("=")
    axis = axis.strip()
    if axis in ("rank", "dim"):
        if ".." in values:
            lo, _, hi = values.partition("..")
            return axis, list(range(int(lo), int(hi) + 1))
        return axis, [int(v) for v in values.split(",")]
    if axis == "subsets":
        return axis, values.strip()
    raise ParameterError(f"unknown sweep axis {axis!r}; use rank, dim, or subsets")


def _reference_filter(headings, dates, conditions):
    if not (headings or dates or conditions):
        return None
    return ReferenceFilter(
        headings=frozenset(_parse_list(headings)) if headings else None,
        dates=frozenset(h.strip() for h in dates.split(",")) if dates else None,
        conditions=frozenset(c.strip() for c in conditions.split(",")) if conditions else None,
    )


def _map_config(method, rank, dep_tol, no_r_factor, no_sources, ref_filter):
    method = {"qr": "qr_full", "qr2vp": "qr_2vp"}.get(method, method)
    svd_rank = None
    if rank is not None:
        svd_rank = rank if rank == "m-1" else int(rank)
    return MapBuildConfig(
        method=method,
        svd_rank=svd_rank,
        reference_filter=ref_filter,
        dep_tol=dep_tol,
        store_r_factor=not no_r_factor,
        store_sources=not no_sources,
    )


@click.group()
@click.version_option(version=__version__, prog_name="placemap")
def main():
    """Multi-reference place recognition via per-place descriptor subspaces."""


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--n", "dimension", default=256, show_default=True, type=int)
@click.option("--places", default=200, show_default=True, type=int)
@click.option("--headings", default="0,90,180,270", show_default=True)
@click.option("--conditions", default=2, show_default=True, type=int)
@click.option("--shared-frac", default=0.5, show_default=True, type=float)
@click.option("--noise-sigma", default=0.1, show_default=True, type=float)
@click.option(
    "--query-mode",
    default="intermediate",
    show_default=True,
    type=click.Choice(["aligned", "intermediate"]),
)
@click.option("--queries-per-place", default=4, show_default=True, type=int)
@handle_errors
def synth(
    out_dir, seed, dimension, places, headings, conditions, shared_frac, noise_sigma,
    query_mode, queries_per_place,
):
    """Write a deterministic synthetic reference/query dataset pair."""
    config = SynthConfig(
        seed=seed,
        dimension=dimension,
        num_places=places,
        headings=tuple(_parse_list(headings)),
        conditions=conditions,
        shared_frac=shared_frac,
        noise_sigma=noise_sigma,
        query_mode=query_mode,
        queries_per_place=queries_per_place,
    )
    references, queries, _ = generate(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_dataset(references, out_dir / f"{REF_BASE}.manifest.json", out_dir / f"{REF_BASE}.vprd")
    save_dataset(queries, out_dir / f"{QUERY_BASE}.manifest.json", out_dir / f"{QUERY_BASE}.vprd")
    (out_dir / "synth_config.json").write_text(
        json.dumps(config.to_json(), indent=2) + "\n", "utf-8"
    )
    click.echo(
        f"wrote {references.count} references and {queries.count} queries to {out_dir}"
    )


@main.command("build-map")
@click.option("--manifest", type=click.Path(path_type=Path), required=True)
@click.option("--descriptors", type=click.Path(path_type=Path), required=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True)
@click.option(
    "--method",
    default="qr",
    show_default=True,
    type=click.Choice(["qr", "qr_full", "qr2vp", "qr_2vp", "svd"]),
)
@click.option("--rank", default=None, help="svd rank: an integer or 'm-1'")
@click.option("--dep-tol", default=1e-8, show_default=True, type=float)
@click.option("--no-r-factor", is_flag=True, help="do not store the basis factor")
@click.option("--no-sources", is_flag=True, help="do not store source descriptors")
@click.option("--filter-headings", default=None, help="comma list of headings to keep")
@click.option("--filter-dates", default=None, help="comma list of dates to keep")
@click.option("--filter-conditions", default=None, help="comma list of condition tags")
@click.option("--stats-out", type=click.Path(path_type=Path), default=None)
@click.option("--threads", default=None, type=int, help="worker threads (or PLACEMAP_THREADS)")
@click.option("--deterministic", is_flag=True, help="omit timing from the stats output")
@handle_errors
def cmd_build_map(
    manifest, descriptors, out_path, method, rank, dep_tol, no_r_factor, no_sources,
    filter_headings, filter_dates, filter_conditions, stats_out, threads, deterministic,
):
    """Factorize a dataset into a place-subspace map (.vprmap)."""
    dataset = load_dataset(manifest, descriptors)
    config = _map_config(
        method, rank, dep_tol, no_r_factor, no_sources,
        _reference_filter(filter_headings, filter_dates, filter_conditions),
    )
    index = build_map(dataset, config, threads=threads or _default_threads())
    save_map(index, out_path)
    stats = {
        "places": len(index.places),
        "subspaces": len(index),
        "decompositions": index.stats.subspace_count,
        "skipped_places": [list(item) for item in index.stats.skipped],
        "map_mem_bytes": index.memory_bytes,
        "file_bytes": out_path.stat().st_size,
        "build_seconds": None if deterministic else index.stats.build_seconds,
        "config": config.to_json(),
    }
    if stats_out is not None:
        stats_out.parent.mkdir(parents=True, exist_ok=True)
        stats_out.write_text(json.dumps(stats, indent=2) + "\n", "utf-8")
    click.echo(f"built {len(index)} subspaces over {len(index.places)} places -> {out_path}")


@main.command()
@click.option("--map", "map_path", type=click.Path(path_type=Path), default=None)
@click.option("--manifest", type=click.Path(path_type=Path), default=None)
@click.option("--descriptors", type=click.Path(path_type=Path), default=None)
@click.option("--query-manifest", type=click.Path(path_type=Path), required=True)
@click.option("--query-descriptors", type=click.Path(path_type=Path), required=True)
@click.option(
    "--strategy", default="qr", show_default=True, type=click.Choice(list(STRATEGIES))
)
@click.option("--top", default=25, show_default=True, type=int)
@click.option("--lse-top-c", default=25, show_default=True, type=int)
@click.option("--lse-beta", default=1.0, show_default=True, type=float)
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True)
@handle_errors
def match(
    map_path, manifest, descriptors, query_manifest, query_descriptors, strategy, top,
    lse_top_c, lse_beta, out_path,
):
    """Rank map places for each query; writes JSON lines."""
    queries = load_dataset(query_manifest, query_descriptors)
    if strategy == "qr":
        if map_path is None:
            raise InputError("the qr strategy requires --map")
        target = load_map(map_path)
    else:
        target = _load_pair(manifest, descriptors, f"strategy {strategy}")
    cfg = BaselineConfig(lse_top_c=lse_top_c, lse_beta=lse_beta)
    batch = batch_match(target, queries, strategy, cfg)
    write_results_jsonl(batch.results, out_path, top=top)
    click.echo(
        f"matched {len(batch.results)} queries in {batch.elapsed_s:.3f}s "
        f"({batch.ms_per_query:.3f} ms/query) -> {out_path}"
    )


@main.command()
@click.option("--manifest", type=click.Path(path_type=Path), required=True)
@click.option("--descriptors", type=click.Path(path_type=Path), required=True)
@click.option("--query-manifest", type=click.Path(path_type=Path), required=True)
@click.option("--query-descriptors", type=click.Path(path_type=Path), required=True)
@click.option("--strategies", default="qr,pooling,dmat,sum,lse", show_default=True)
@click.option("--ks", default="1,5,10,25", show_default=True)
@click.option(
    "--gt-mode",
    default="one_to_one",
    show_default=True,
    type=click.Choice(["one_to_one", "window", "radius"]),
)
@click.option("--window", default=2, show_default=True, type=int)
@click.option("--radius", default=5.0, show_default=True, type=float)
@click.option("--method", default="qr", show_default=True)
@click.option("--rank", default=None)
@click.option("--sweep", default=None, help="rank=1..4 | dim=2048,1024 | subsets=condition-pairs")
@click.option("--lse-top-c", default=25, show_default=True, type=int)
@click.option("--lse-beta", default=1.0, show_default=True, type=float)
@click.option("--out-dir", type=click.Path(path_type=Path), required=True)
@click.option("--threads", default=None, type=int)
@click.option("--deterministic", is_flag=True, help="blank timing fields in reports")
@handle_errors
def evaluate(
    manifest, descriptors, query_manifest, query_descriptors, strategies, ks, gt_mode,
    window, radius, method, rank, sweep, lse_top_c, lse_beta, out_dir, threads,
    deterministic,
):
    """Compute Recall@K per strategy; writes report.csv and report.json."""
    references = load_dataset(manifest, descriptors)
    queries = load_dataset(query_manifest, query_descriptors)
    mode = {"window": "index_window"}.get(gt_mode, gt_mode)
    gt = GroundTruthSpec.from_datasets(references, queries, mode, window, radius)
    ks_list = [int(k) for k in _parse_list(ks, int)]
    strategy_list = [s.strip() for s in strategies.split(",") if s.strip()]
    threads = threads or _default_threads()
    map_config = _map_config(method, rank, 1e-8, False, False, None)
    baseline_cfg = BaselineConfig(lse_top_c=lse_top_c, lse_beta=lse_beta)

    if sweep is None:
        report = evaluate_strategies(
            references, queries, gt, strategy_list, ks_list, map_config, baseline_cfg,
            threads=threads,
        )
    else:
        axis, values = _parse_sweep(sweep)
        if axis == "rank":
            report = sweep_rank(references, queries, gt, values, ks_list, threads=threads)
        elif axis == "dim":
            report = sweep_dimension(
                references, queries, gt, values, "slice", strategy_list, ks_list,
                map_config, threads=threads,
            )
        else:
            if values != "condition-pairs":
                raise ParameterError(
                    f"subsets sweep supports 'condition-pairs', got {values!r}"
                )
            report = sweep_reference_subsets(
                references, queries, gt, condition_pair_filters(references),
                strategy_list, ks_list, map_config, threads=threads,
            )
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / "report.csv", deterministic=deterministic)
    report.write_json(out_dir / "report.json", deterministic=deterministic)
    click.echo(f"wrote {out_dir / 'report.csv'} and {out_dir / 'report.json'}")


@main.command()
@click.option("--map", "map_path", type=click.Path(path_type=Path), default=None)
@click.option("--query-manifest", type=click.Path(path_type=Path), default=None)
@click.option("--query-descriptors", type=click.Path(path_type=Path), default=None)
@click.option(
    "--method", default="qr", show_default=True, type=click.Choice(["qr", "pooling"])
)
@click.option("--tau", default=0.1, show_default=True, type=float)
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None)
@click.option(
    "--bias-bound",
    "bias_args",
    type=(float, float),
    default=None,
    help="print the heading bias bound for T and D metres, then exit",
)
@handle_errors
def orient(map_path, query_manifest, query_descriptors, method, tau, out_path, bias_args):
    """Estimate each query's heading at its best-matching place."""
    if bias_args is not None:
        click.echo(repr(round(bias_bound(*bias_args), 9)))
        return
    if map_path is None or query_manifest is None or query_descriptors is None:
        raise InputError("orient requires --map, --query-manifest and --query-descriptors")
    if out_path is None:
        raise InputError("orient requires --out for the per-query CSV")
    index = load_map(map_path)
    queries = load_dataset(query_manifest, query_descriptors)
    batch = batch_match(index, queries, "qr")
    lines = ["query_id,method,theta_deg,resultant_length,gt_theta,abs_error_deg"]
    for res, rec in zip(batch.results, queries.records):
        sub = _best_subspace(index, res.top_place(), queries.descriptors[rec.descriptor_index])
        d_q = queries.descriptors[rec.descriptor_index]
        if method == "qr":
            est = estimate_heading_qr(sub, d_q)
        else:
            if sub.source_columns is None:
                raise InputError(
                    "pooling orientation needs source descriptors in the map; "
                    "rebuild without --no-sources"
                )
            pm = place_matrix_from_rows(
                sub.place_id,
                sub.source_columns.astype("float64"),
                sub.column_ids,
                sub.column_headings,
            )
            est = estimate_heading_pooling(pm, d_q, tau)
        gt_theta = rec.heading_deg
        err = "" if gt_theta is None else f"{angular_error_deg(est.theta_deg, gt_theta):.6f}"
        gt_txt = "" if gt_theta is None else f"{gt_theta:.6f}"
        lines.append(
            f"{rec.image_id},{est.method},{est.theta_deg:.6f},"
            f"{est.resultant_length:.6f},{gt_txt},{err}"
        )
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n", "utf-8")
    click.echo(f"wrote {len(batch.results)} heading estimates -> {out_path}")


def _best_subspace(index, place_id, d_q):
    """The place's subspace; for multi-subspace places, the best-scoring one."""
    subs = index.place_subspaces(place_id)
    if len(subs) == 1:
        return subs[0]
    mags = [
        float(np.linalg.norm(np.asarray(s.basis, dtype=np.float64).T @ d_q)) for s in subs
    ]
    return subs[int(np.argmax(mags))]


@main.command()
@click.argument("path", type=click.Path(path_type=Path))
@click.option("--descriptors", type=click.Path(path_type=Path), default=None)
@handle_errors
def inspect(path, descriptors):
    """Summarize a .vprmap file or a manifest.json (+ descriptor block)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    if path.suffix == ".vprmap":
        index = load_map(path)
        ranks = {}
        for sub in index:
            ranks[sub.rank] = ranks.get(sub.rank, 0) + 1
        click.echo(f"map: {path}")
        click.echo(f"  dimension:     {index.dimension}")
        click.echo(f"  places:        {len(index.places)}")
        click.echo(f"  subspaces:     {len(index)}")
        click.echo(f"  method:        {index.config.method}")
        click.echo(f"  basis memory:  {index.memory_bytes} bytes")
        click.echo(f"  file size:     {path.stat().st_size} bytes")
        click.echo("  rank histogram:")
        for rank in sorted(ranks):
            click.echo(f"    rank {rank}: {ranks[rank]}")
        return
    if descriptors is None:
        guess = path.with_suffix("").name.replace(".manifest", "")
        candidate = path.parent / f"{guess}.vprd"
        if not candidate.is_file():
            raise InputError("inspecting a dataset requires --descriptors")
        descriptors = candidate
    dataset = load_dataset(path, descriptors)
    with_heading = sum(1 for r in dataset.records if r.heading_deg is not None)
    counts = [rows.size for _, rows in dataset.iter_places()]
    click.echo(f"dataset: {path}")
    click.echo(f"  dimension:   {dataset.dimension}")
    click.echo(f"  descriptors: {dataset.count}")
    click.echo(f"  places:      {len(dataset.place_ids)}")
    if counts:
        click.echo(
            f"  images/place: min {min(counts)}, max {max(counts)}, "
            f"mean {sum(counts) / len(counts):.2f}"
        )
    click.echo(f"  heading coverage: {with_heading}/{dataset.count}")


if __name__ == "__main__":
    main()
