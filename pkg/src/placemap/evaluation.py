"""Ground-truth models, Recall@K computation, sweep drivers, and reports.

Three ground-truth modes cover the usual dataset conventions: exact
place correspondence, an index window along a traversal sequence, and a
metric radius around the query position. A query counts as correct at K
when any acceptable place appears among its top-K ranked places.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, EvaluationError, PlaceMapError
from .mapping import MapBuildConfig, MapIndex, ReferenceFilter, build_map
from .matching import (
    STRATEGIES,
    STRATEGY_SUBSPACE,
    BaselineConfig,
    MatchResult,
    batch_match,
)
from .store import (
    Coordinates,
    DatasetManifest,
    DescriptorDataset,
    _canonical_block,
    principal_directions,
    reduce_dataset,
)

DEFAULT_KS = (1, 5, 10, 25)


@dataclass(frozen=True)
class GroundTruthSpec:
    """Resolves which places are acceptable answers for each query.

    mode ``one_to_one``: truth maps query_id -> correct place_id.
    mode ``index_window``: truth maps query_id -> traversal index; a
    predicted place is correct when its own index is within ``window``.
    mode ``radius``: truth maps query_id -> coordinates; a place is correct
    when any of its reference positions lies within ``radius_m`` metres.
    """

    mode: str
    truth: Mapping[str, object]
    window: int = 0
    radius_m: float = 0.0
    place_index: Mapping[str, int] | None = None
    place_coords: Mapping[str, tuple[Coordinates, ...]] | None = None

    def __post_init__(self):
        if self.mode not in ("one_to_one", "index_window", "radius"):
            raise ConfigError(f"unknown ground-truth mode {self.mode!r}")
        if not self.truth:
            raise EvaluationError("ground truth resolves no queries")
        if self.mode == "index_window" and self.place_index is None:
            raise ConfigError("index_window ground truth needs a place index")
        if self.mode == "radius" and self.place_coords is None:
            raise ConfigError("radius ground truth needs reference coordinates")

    def is_correct(self, query_id: str, place_id: str) -> bool:
        value = self.truth[query_id]
        if self.mode == "one_to_one":
            return place_id == value
        if self.mode == "index_window":
            idx = self.place_index.get(place_id)
            return idx is not None and abs(idx - int(value)) <= self.window
        refs = self.place_coords.get(place_id, ())
        return any(value.distance_to(c) <= self.radius_m for c in refs)

    @classmethod
    def one_to_one(cls, truth: Mapping[str, str]) -> "GroundTruthSpec":
        return cls(mode="one_to_one", truth=dict(truth))

    @classmethod
    def from_datasets(
        cls,
        references: DescriptorDataset,
        queries: DescriptorDataset,
        mode: str = "one_to_one",
        window: int = 2,
        radius_m: float = 5.0,
    ) -> "GroundTruthSpec":
        """Derive ground truth from query metadata against a reference set."""
        if mode == "one_to_one":
            truth = {r.image_id: r.place_id for r in queries.records}
            return cls(mode=mode, truth=truth)
        if mode == "index_window":
            place_index = references.place_sequence_index()
            missing = [r.image_id for r in queries.records if r.place_id not in place_index]
            if missing:
                raise EvaluationError(
                    f"queries reference places absent from the sequence: {missing[:5]}"
                )
            truth = {r.image_id: place_index[r.place_id] for r in queries.records}
            return cls(mode=mode, truth=truth, window=int(window), place_index=place_index)
        if mode == "radius":
            missing_q = [r.image_id for r in queries.records if r.coords is None]
            if missing_q:
                raise EvaluationError(f"queries without coordinates: {missing_q[:5]}")
            missing_r = [r.image_id for r in references.records if r.coords is None]
            if missing_r:
                raise EvaluationError(
                    f"radius mode requires coordinates on all references; "
                    f"missing on {missing_r[:5]}"
                )
            coords: dict[str, list[Coordinates]] = {}
            for r in references.records:
                coords.setdefault(r.place_id, []).append(r.coords)
            truth = {r.image_id: r.coords for r in queries.records}
            return cls(
                mode=mode,
                truth=truth,
                radius_m=float(radius_m),
                place_coords={pid: tuple(cs) for pid, cs in coords.items()},
            )
        raise ConfigError(f"unknown ground-truth mode {mode!r}")


@dataclass
class EvalRow:
    """One evaluated configuration; recalls keyed by K."""

    strategy: str
    method: str = "-"
    rank: str = "-"
    dim: str = "-"
    subset: str = "-"
    recalls: dict[int, float] = field(default_factory=dict)
    queries: int = 0
    map_build_s: float | None = None
    match_ms_per_query: float | None = None
    map_mem_bytes: int | None = None
    notes: str = ""
    error: str | None = None


def _cell(value, deterministic: bool = False) -> str:
    if value is None or (deterministic and isinstance(value, float)):
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class EvalReport:
    """Rows plus configuration echoes, serializable to CSV and JSON."""

    rows: list[EvalRow]
    ks: tuple[int, ...]
    config_echo: dict = field(default_factory=dict)
    tool_version: str = __version__

    CSV_COLUMNS = (
        "strategy",
        "method",
        "rank",
        "dim",
        "subset",
        "K",
        "recall",
        "queries",
        "map_build_s",
        "match_ms_per_query",
        "map_mem_bytes",
    )

    def write_csv(self, path, deterministic: bool = False) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.CSV_COLUMNS)
            for row in self.rows:
                for k in self.ks:
                    writer.writerow(
                        [
                            row.strategy,
                            row.method,
                            row.rank,
                            row.dim,
                            row.subset,
                            k,
                            _cell(row.recalls.get(k)),
                            row.queries,
                            _cell(row.map_build_s, deterministic),
                            _cell(row.match_ms_per_query, deterministic),
                            _cell(row.map_mem_bytes),
                        ]
                    )

    def to_json(self, deterministic: bool = False) -> dict:
        return {
            "tool_version": self.tool_version,
            "created_at": None if deterministic else datetime.now(timezone.utc).isoformat(),
            "ks": list(self.ks),
            "config": self.config_echo,
            "rows": [
                {
                    "strategy": r.strategy,
                    "method": r.method,
                    "rank": r.rank,
                    "dim": r.dim,
                    "subset": r.subset,
                    "recalls": {str(k): v for k, v in sorted(r.recalls.items())},
                    "queries": r.queries,
                    "map_build_s": None if deterministic else r.map_build_s,
                    "match_ms_per_query": None if deterministic else r.match_ms_per_query,
                    "map_mem_bytes": r.map_mem_bytes,
                    "notes": r.notes,
                    "error": r.error,
                }
                for r in self.rows
            ],
        }

    def write_json(self, path, deterministic: bool = False) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(self.to_json(deterministic), indent=2, ensure_ascii=False) + "\n",
            "utf-8",
        )


def recall_values(
    results: Sequence[MatchResult], gt: GroundTruthSpec, ks: Sequence[int]
) -> dict[int, float]:
    """Fraction of queries with a correct place among the top K, per K."""
    if not results:
        raise EvaluationError("no match results to evaluate")
    unresolved = [r.query_id for r in results if r.query_id not in gt.truth]
    if unresolved:
        raise EvaluationError(f"queries without ground truth: {unresolved[:5]}")
    ks = sorted(set(int(k) for k in ks))
    hits = {k: 0 for k in ks}
    kmax = ks[-1]
    for res in results:
        best = None  # rank of the first correct place, if within kmax
        for pos, idx in enumerate(res.order[:kmax]):
            if gt.is_correct(res.query_id, res.place_ids[idx]):
                best = pos
                break
        if best is not None:
            for k in ks:
                if best < k:
                    hits[k] += 1
    total = len(results)
    return {k: hits[k] / total for k in ks}


def recall_at_k(
    results: Sequence[MatchResult], gt: GroundTruthSpec, ks: Sequence[int] = DEFAULT_KS
) -> EvalReport:
    """Summarize match results into an EvalReport, one row per strategy."""
    by_strategy: dict[str, list[MatchResult]] = {}
    for r in results:
        by_strategy.setdefault(r.strategy, []).append(r)
    rows = [
        EvalRow(
            strategy=strategy,
            recalls=recall_values(group, gt, ks),
            queries=len(group),
        )
        for strategy, group in sorted(by_strategy.items())
    ]
    return EvalReport(rows=rows, ks=tuple(sorted(set(int(k) for k in ks))))


def _row_for_strategy(
    strategy: str,
    references: DescriptorDataset,
    queries: DescriptorDataset,
    gt: GroundTruthSpec,
    ks: Sequence[int],
    map_config: MapBuildConfig,
    baseline_cfg: BaselineConfig,
    index: MapIndex | None,
    threads: int = 1,
) -> tuple[EvalRow, MapIndex | None]:
    if strategy == STRATEGY_SUBSPACE:
        if index is None:
            index = build_map(references, map_config, threads=threads)
        target: MapIndex | DescriptorDataset = index
        method = map_config.method
        build_s = index.stats.build_seconds
        mem = index.memory_bytes
    else:
        target = references
        method = "-"
        build_s = None
        mem = references.descriptors.shape[0] * references.dimension * 4
    batch = batch_match(target, queries, strategy, baseline_cfg)
    row = EvalRow(
        strategy=strategy,
        method=method,
        recalls=recall_values(batch.results, gt, ks),
        queries=len(batch.results),
        map_build_s=build_s,
        match_ms_per_query=batch.ms_per_query,
        map_mem_bytes=mem,
    )
    return row, index


def evaluate_strategies(
    references: DescriptorDataset,
    queries: DescriptorDataset,
    gt: GroundTruthSpec,
    strategies: Sequence[str] = STRATEGIES,
    ks: Sequence[int] = DEFAULT_KS,
    map_config: MapBuildConfig | None = None,
    baseline_cfg: BaselineConfig | None = None,
    threads: int = 1,
) -> EvalReport:
    """Evaluate each strategy on the same reference/query split."""
    map_config = map_config or MapBuildConfig()
    baseline_cfg = baseline_cfg or BaselineConfig()
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
    rows = []
    index: MapIndex | None = None
    for strategy in strategies:
        row, index = _row_for_strategy(
            strategy, references, queries, gt, ks, map_config, baseline_cfg, index, threads
        )
        rows.append(row)
    return EvalReport(
        rows=rows,
        ks=tuple(sorted(set(int(k) for k in ks))),
        config_echo={
            "strategies": list(strategies),
            "map_config": map_config.to_json(),
            "baseline_config": {
                "lse_top_c": baseline_cfg.lse_top_c,
                "lse_beta": baseline_cfg.lse_beta,
                "sum_renormalize": baseline_cfg.sum_renormalize,
            },
            "ground_truth": {
                "mode": gt.mode,
                "window": gt.window,
                "radius_m": gt.radius_m,
            },
        },
    )


def sweep_rank(
    references: DescriptorDataset,
    queries: DescriptorDataset,
    gt: GroundTruthSpec,
    ranks: Sequence[int],
    ks: Sequence[int] = DEFAULT_KS,
    dep_tol: float = 1e-8,
    threads: int = 1,
) -> EvalReport:
    """Evaluate SVD maps truncated to each rank; bad ranks produce error rows.

    Requested ranks above a place's reference count are clamped per place;
    a rank above every place's count is reported as a parameter error row.
    """
    max_m = max(rows.size for _, rows in references.iter_places())
    rows_out: list[EvalRow] = []
    baseline_cfg = BaselineConfig()
    for rank in ranks:
        rank = int(rank)
        if rank < 1 or rank > max_m:
            rows_out.append(
                EvalRow(
                    strategy=STRATEGY_SUBSPACE,
                    method="svd",
                    rank=str(rank),
                    error=f"rank must lie in [1, {max_m}] for this dataset",
                )
            )
            continue
        config = MapBuildConfig(method="svd", svd_rank=rank, dep_tol=dep_tol)
        row, _ = _row_for_strategy(
            STRATEGY_SUBSPACE, references, queries, gt, ks, config, baseline_cfg, None, threads
        )
        row.method = "svd"
        row.rank = str(rank)
        rows_out.append(row)
    return EvalReport(
        rows=rows_out,
        ks=tuple(sorted(set(int(k) for k in ks))),
        config_echo={"sweep": "rank", "ranks": [int(r) for r in ranks]},
    )


def sweep_dimension(
    references: DescriptorDataset,
    queries: DescriptorDataset,
    gt: GroundTruthSpec,
    dims: Sequence[int],
    method: str = "slice",
    strategies: Sequence[str] = STRATEGIES,
    ks: Sequence[int] = DEFAULT_KS,
    map_config: MapBuildConfig | None = None,
    threads: int = 1,
) -> EvalReport:
    """Re-run the full pipeline at each reduced descriptor dimension.

    For pca the projection is fit on the references and applied to the
    queries, so both live in the same reduced coordinate system.
    """
    map_config = map_config or MapBuildConfig()
    n = references.dimension
    rows_out: list[EvalRow] = []
    for dim in dims:
        dim = int(dim)
        if dim == n:
            red_refs, red_queries = references, queries
        elif not 1 <= dim < n:
            rows_out.append(
                EvalRow(
                    strategy="-",
                    dim=str(dim),
                    error=f"target dimension must lie in [1, {n}]",
                )
            )
            continue
        elif method == "slice":
            red_refs = reduce_dataset(references, "slice", dim)
            red_queries = reduce_dataset(queries, "slice", dim)
        else:
            directions = principal_directions(references.descriptors, dim)
            red_refs = _project_dataset(references, directions)
            red_queries = _project_dataset(queries, directions)
        try:
            report = evaluate_strategies(
                red_refs, red_queries, gt, strategies, ks, map_config, threads=threads
            )
        except PlaceMapError as exc:
            rows_out.append(EvalRow(strategy="-", dim=str(dim), error=str(exc)))
            continue
        for row in report.rows:
            row.dim = str(dim)
            rows_out.append(row)
    return EvalReport(
        rows=rows_out,
        ks=tuple(sorted(set(int(k) for k in ks))),
        config_echo={"sweep": "dimension", "dims": [int(d) for d in dims], "method": method},
    )


def _project_dataset(dataset: DescriptorDataset, directions) -> DescriptorDataset:
    Y = dataset.descriptors @ directions
    manifest = DatasetManifest(
        dimension=directions.shape[1],
        count=dataset.count,
        records=dataset.records,
        sequence_order=dataset.manifest.sequence_order,
        format_version=dataset.manifest.format_version,
    )
    ids = [r.image_id for r in dataset.records]
    norms = np.linalg.norm(Y, axis=1)
    if (norms == 0.0).any():
        raise EvaluationError("a descriptor projects to zero under the pca directions")
    return DescriptorDataset(manifest, _canonical_block(Y / norms[:, None], ids))


def condition_pair_filters(references: DescriptorDataset) -> dict[str, ReferenceFilter]:
    """All two-condition reference subsets present in the dataset."""
    conditions = sorted(
        {r.condition for r in references.records if r.condition is not None}
    )
    if len(conditions) < 2:
        raise EvaluationError("dataset has fewer than two condition tags")
    return {
        f"{a}+{b}": ReferenceFilter(conditions=frozenset((a, b)))
        for a, b in combinations(conditions, 2)
    }


def sweep_reference_subsets(
    references: DescriptorDataset,
    queries: DescriptorDataset,
    gt: GroundTruthSpec,
    subsets: Mapping[str, ReferenceFilter],
    strategies: Sequence[str] = STRATEGIES,
    ks: Sequence[int] = DEFAULT_KS,
    map_config: MapBuildConfig | None = None,
    threads: int = 1,
) -> EvalReport:
    """Evaluate every strategy once per named reference subset."""
    map_config = map_config or MapBuildConfig()
    rows_out: list[EvalRow] = []
    for name, ref_filter in subsets.items():
        subset_refs = references.subset(ref_filter.admits)
        skipped = sorted(set(references.place_ids) - set(subset_refs.place_ids))
        report = evaluate_strategies(
            subset_refs, queries, gt, strategies, ks, map_config, threads=threads
        )
        for row in report.rows:
            row.subset = name
            if skipped:
                row.notes = f"{len(skipped)} places empty under this subset"
            rows_out.append(row)
    return EvalReport(
        rows=rows_out,
        ks=tuple(sorted(set(int(k) for k in ks))),
        config_echo={"sweep": "reference_subsets", "subsets": sorted(subsets)},
    )
