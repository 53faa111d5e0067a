"""Query-to-place scoring under five strategies with deterministic rankings.

Strategies:

* ``qr``      -- projection magnitude onto each place's subspace (works for
                 maps built with any decomposition method)
* ``pooling`` -- best cosine similarity among a place's references
* ``dmat``    -- mean cosine similarity over a place's references
* ``sum``     -- cosine similarity to the element-wise sum of references
* ``lse``     -- pooling, then log-sum-exp rescoring of the top candidates

All scores are higher-is-better. Rankings sort by score descending with
ties broken by ascending place id; for maps with several subspaces per
place the per-place score is the maximum over its subspaces.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DegenerateInputError, EmptyMapError, ShapeError
from .mapping import MapIndex
from .store import DescriptorDataset
from .validation import UNIT_TOL, as_matrix

STRATEGY_SUBSPACE = "qr"
BASELINE_STRATEGIES = ("pooling", "dmat", "sum", "lse")
STRATEGIES = (STRATEGY_SUBSPACE,) + BASELINE_STRATEGIES

# Ranking sentinel for places whose bundle cancels to zero: strictly below
# any cosine similarity, unlike -inf it survives JSON serialization.
MIN_SCORE = -2.0

# Queries are scored in fixed-size slabs so results never depend on how the
# work is distributed.
_QUERY_CHUNK = 256


@dataclass(frozen=True)
class BaselineConfig:
    """Tunables for the aggregation baselines."""

    lse_top_c: int = 25
    lse_beta: float = 1.0
    sum_renormalize: bool = True

    def validate(self) -> None:
        if self.lse_top_c < 1:
            raise ConfigError(f"lse_top_c must be >= 1, got {self.lse_top_c}")
        if not self.lse_beta > 0:
            raise ConfigError(f"lse_beta must be > 0, got {self.lse_beta}")


@dataclass(eq=False)
class MatchResult:
    """Full ranking of all map places for one query."""

    query_id: str
    strategy: str
    place_ids: tuple[str, ...]  # ascending order, shared between results
    order: np.ndarray  # rank position -> index into place_ids
    sorted_scores: np.ndarray

    score_semantics = "higher_is_better"

    @property
    def ranking(self) -> list[tuple[str, float]]:
        return [(self.place_ids[i], float(s)) for i, s in zip(self.order, self.sorted_scores)]

    def top(self, k: int) -> list[tuple[str, float]]:
        return [
            (self.place_ids[i], float(s))
            for i, s in zip(self.order[:k], self.sorted_scores[:k])
        ]

    def top_place(self) -> str:
        return self.place_ids[self.order[0]]

    def to_json(self, top: int = 25) -> dict:
        return {
            "query_id": self.query_id,
            "strategy": self.strategy,
            "top": [[pid, score] for pid, score in self.top(top)],
        }


@dataclass(frozen=True)
class BatchMatchResult:
    """Results of matching a query batch plus wall-clock accounting."""

    results: list[MatchResult]
    elapsed_s: float

    @property
    def ms_per_query(self) -> float:
        if not self.results:
            return 0.0
        return 1000.0 * self.elapsed_s / len(self.results)


def _query_matrix(queries, dimension: int) -> tuple[np.ndarray, list[str]]:
    if isinstance(queries, DescriptorDataset):
        ids = [r.image_id for r in queries.records]
        Q = queries.descriptors
    else:
        Q = as_matrix(queries, "queries")
        ids = [f"q{i:06d}" for i in range(Q.shape[0])]
    if Q.shape[1] != dimension:
        raise ShapeError(f"queries have dimension {Q.shape[1]}, expected {dimension}")
    norms = np.linalg.norm(Q, axis=1)
    off = np.abs(norms - 1.0) > UNIT_TOL
    if off.any():
        if (norms[off] == 0.0).any():
            raise DegenerateInputError("queries contain a zero vector")
        Q = Q.copy()
        Q[off] /= norms[off, None]
    return Q, ids


class _SubspaceScorer:
    """Batched projection-magnitude scoring against a stacked map basis."""

    def __init__(self, index: MapIndex):
        if len(index) == 0:
            raise EmptyMapError("cannot match against an empty map")
        self.index = index
        self.place_ids = tuple(index.places)
        basis, offsets, owner = index.stacked_basis()
        self.basis = basis
        self.offsets = offsets
        # Subspaces are ordered by place id, so owner is non-decreasing and
        # per-place collapse is a reduceat over contiguous runs.
        self.place_starts = np.flatnonzero(np.r_[1, np.diff(owner)]).astype(np.intp)

    def scores(self, Q: np.ndarray) -> np.ndarray:
        coords = Q @ self.basis  # (B, total rank)
        np.square(coords, out=coords)
        per_subspace = np.add.reduceat(coords, self.offsets, axis=1)
        per_place = np.maximum.reduceat(per_subspace, self.place_starts, axis=1)
        return np.sqrt(per_place, out=per_place)


class _BaselineScorer:
    """Cosine-similarity scoring over references grouped by place."""

    def __init__(self, dataset: DescriptorDataset):
        groups = list(dataset.iter_places())
        if not groups:
            raise EmptyMapError("reference dataset has no places")
        self.place_ids = tuple(pid for pid, _ in groups)
        self.perm = np.concatenate([rows for _, rows in groups])
        counts = np.asarray([rows.size for _, rows in groups], dtype=np.float64)
        self.starts = np.zeros(len(groups), dtype=np.intp)
        np.cumsum(counts[:-1].astype(np.intp), out=self.starts[1:])
        self.counts = counts
        self.refs = dataset.descriptors
        bundles = np.add.reduceat(self.refs[self.perm], self.starts, axis=0)
        self.bundle_norms = np.linalg.norm(bundles, axis=1)
        safe = np.where(self.bundle_norms == 0.0, 1.0, self.bundle_norms)
        self.unit_bundles = bundles / safe[:, None]

    def sims(self, Q: np.ndarray) -> np.ndarray:
        return (Q @ self.refs.T)[:, self.perm]

    def pooling(self, sims_g: np.ndarray) -> np.ndarray:
        return np.maximum.reduceat(sims_g, self.starts, axis=1)

    def dmat(self, sims_g: np.ndarray) -> np.ndarray:
        return np.add.reduceat(sims_g, self.starts, axis=1) / self.counts

    def sum_desc(self, Q: np.ndarray) -> np.ndarray:
        scores = Q @ self.unit_bundles.T
        scores[:, self.bundle_norms == 0.0] = MIN_SCORE
        return scores

    def place_slice(self, place_pos: int) -> slice:
        start = self.starts[place_pos]
        stop = start + int(self.counts[place_pos])
        return slice(start, stop)


def _rank(scores: np.ndarray) -> np.ndarray:
    """Rank positions per row: descending score, ties by ascending place id."""
    return np.argsort(-scores, axis=1, kind="stable")


def _make_results(
    strategy: str,
    place_ids: tuple[str, ...],
    scores: np.ndarray,
    order: np.ndarray,
    query_ids: Sequence[str],
) -> list[MatchResult]:
    out = []
    for b, qid in enumerate(query_ids):
        out.append(
            MatchResult(
                query_id=qid,
                strategy=strategy,
                place_ids=place_ids,
                order=order[b],
                sorted_scores=scores[b, order[b]],
            )
        )
    return out


def _lse_results(
    scorer: _BaselineScorer,
    sims_g: np.ndarray,
    pool_scores: np.ndarray,
    query_ids: Sequence[str],
    cfg: BaselineConfig,
) -> list[MatchResult]:
    place_ids = scorer.place_ids
    pool_order = _rank(pool_scores)
    c = min(cfg.lse_top_c, len(place_ids))
    out = []
    for b, qid in enumerate(query_ids):
        head = pool_order[b, :c]
        lse = np.array(
            [
                logsumexp(cfg.lse_beta * sims_g[b, scorer.place_slice(p)])
                for p in head
            ]
        )
        # Rescore the candidate pool; the tail keeps its pooling order.
        head_sorted = head[np.lexsort((head, -lse))]
        order = np.concatenate([head_sorted, pool_order[b, c:]])
        scores = pool_scores[b].copy()
        scores[head] = lse
        out.append(
            MatchResult(
                query_id=qid,
                strategy="lse",
                place_ids=place_ids,
                order=order,
                sorted_scores=scores[order],
            )
        )
    return out


def batch_match(
    target: MapIndex | DescriptorDataset,
    queries,
    strategy: str = STRATEGY_SUBSPACE,
    cfg: BaselineConfig | None = None,
    query_ids: Sequence[str] | None = None,
) -> BatchMatchResult:
    """Match a batch of queries, returning one full ranking per query.

    ``target`` is a MapIndex for the ``qr`` strategy and the reference
    DescriptorDataset for the baselines. Queries are processed in fixed-size
    slabs, so results are identical however the batch is split.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    cfg = cfg or BaselineConfig()
    cfg.validate()

    if strategy == STRATEGY_SUBSPACE:
        if not isinstance(target, MapIndex):
            raise ConfigError("the qr strategy matches against a MapIndex")
        scorer: _SubspaceScorer | _BaselineScorer = _SubspaceScorer(target)
        dimension = target.dimension
    else:
        if not isinstance(target, DescriptorDataset):
            raise ConfigError(f"the {strategy} strategy matches against a reference dataset")
        scorer = _BaselineScorer(target)
        dimension = target.dimension

    Q, auto_ids = _query_matrix(queries, dimension)
    ids = list(query_ids) if query_ids is not None else auto_ids
    if len(ids) != Q.shape[0]:
        raise ShapeError(f"{len(ids)} query ids for {Q.shape[0]} queries")

    results: list[MatchResult] = []
    t0 = time.perf_counter()
    for lo in range(0, Q.shape[0], _QUERY_CHUNK):
        chunk = Q[lo : lo + _QUERY_CHUNK]
        chunk_ids = ids[lo : lo + _QUERY_CHUNK]
        if strategy == STRATEGY_SUBSPACE:
            scores = scorer.scores(chunk)
            results.extend(
                _make_results(strategy, scorer.place_ids, scores, _rank(scores), chunk_ids)
            )
            continue
        assert isinstance(scorer, _BaselineScorer)
        if strategy == "sum":
            scores = scorer.sum_desc(chunk)
            results.extend(
                _make_results(strategy, scorer.place_ids, scores, _rank(scores), chunk_ids)
            )
            continue
        sims_g = scorer.sims(chunk)
        if strategy == "pooling":
            scores = scorer.pooling(sims_g)
        elif strategy == "dmat":
            scores = scorer.dmat(sims_g)
        else:  # lse
            results.extend(
                _lse_results(scorer, sims_g, scorer.pooling(sims_g), chunk_ids, cfg)
            )
            continue
        results.extend(
            _make_results(strategy, scorer.place_ids, scores, _rank(scores), chunk_ids)
        )
    elapsed = time.perf_counter() - t0
    return BatchMatchResult(results=results, elapsed_s=elapsed)


def _single(target, d_q, strategy, cfg=None, query_id="query") -> MatchResult:
    d = np.asarray(d_q, dtype=np.float64).reshape(1, -1)
    return batch_match(target, d, strategy, cfg, query_ids=[query_id]).results[0]


def match_subspace(index: MapIndex, d_q, query_id: str = "query") -> MatchResult:
    """Rank places by projection magnitude of the query onto each subspace."""
    return _single(index, d_q, STRATEGY_SUBSPACE, query_id=query_id)


def match_pooling(dataset: DescriptorDataset, d_q, query_id: str = "query") -> MatchResult:
    """Rank places by their best per-reference cosine similarity."""
    return _single(dataset, d_q, "pooling", query_id=query_id)


def match_dmat_avg(dataset: DescriptorDataset, d_q, query_id: str = "query") -> MatchResult:
    """Rank places by mean cosine similarity over their references."""
    return _single(dataset, d_q, "dmat", query_id=query_id)


def match_sum_desc(
    dataset: DescriptorDataset, d_q, cfg: BaselineConfig | None = None, query_id: str = "query"
) -> MatchResult:
    """Rank places by cosine similarity to their summed reference bundle."""
    return _single(dataset, d_q, "sum", cfg, query_id=query_id)


def match_lse_rerank(
    dataset: DescriptorDataset, d_q, cfg: BaselineConfig | None = None, query_id: str = "query"
) -> MatchResult:
    """Pooling followed by log-sum-exp rescoring of the top candidates.

    The rescored head is concatenated with the untouched pooling tail, so
    head scores are log-sum-exp aggregates while tail scores remain plain
    cosines.
    """
    return _single(dataset, d_q, "lse", cfg, query_id=query_id)


def write_results_jsonl(results: Sequence[MatchResult], path, top: int = 25) -> None:
    """Write one JSON object per result: {query_id, strategy, top: [[place, score]...]}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for res in results:
            fh.write(json.dumps(res.to_json(top), ensure_ascii=False) + "\n")
