"""Scikit-learn style estimators wrapping the matching pipeline.

Every recognizer follows the estimator contract: constructor arguments are
stored verbatim, ``fit(X, y)`` learns from descriptor rows X and place
labels y, and ``predict`` / ``rank`` / ``score`` operate on query rows.
``get_params`` / ``set_params`` come from ``BaseEstimator``, so the models
compose with pipelines and grid search.

Descriptors are L2-normalized and rounded to single precision at fit time,
matching the on-disk dataset format, so an estimator and the file-based
pipeline produce identical rankings.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError, ParameterError, RankError
from .mapping import MapBuildConfig, build_map
from .matching import (
    STRATEGY_SUBSPACE,
    BaselineConfig,
    MatchResult,
    batch_match,
)
from .store import dataset_from_arrays, principal_directions, reduce_dimension
from .validation import as_matrix


def _labels(y, n_rows: int) -> list[str]:
    labels = [str(v) for v in np.asarray(y).reshape(-1)]
    if len(labels) != n_rows:
        raise ConfigError(f"got {len(labels)} labels for {n_rows} descriptors")
    return labels


class _RecognizerBase(BaseEstimator):
    """Shared ranking machinery; subclasses set the strategy and fit target."""

    _strategy: str

    def _fit_dataset(self, X, y, headings=None):
        X = as_matrix(X, "X")
        dataset = dataset_from_arrays(X, _labels(y, X.shape[0]), headings=headings)
        self.n_features_in_ = X.shape[1]
        self.places_ = np.asarray(dataset.place_ids, dtype=object)
        return dataset

    def _target(self):
        raise NotImplementedError

    def _baseline_config(self) -> BaselineConfig:
        return BaselineConfig()

    def rank(self, X, query_ids=None) -> list[MatchResult]:
        """Full place ranking for each query row."""
        check_is_fitted(self)
        batch = batch_match(
            self._target(), X, self._strategy, self._baseline_config(), query_ids
        )
        return batch.results

    def predict(self, X):
        """Top-ranked place id for each query row."""
        return np.asarray([r.top_place() for r in self.rank(X)], dtype=object)

    def score(self, X, y):
        """Recall@1 against true place labels."""
        truth = _labels(y, as_matrix(X, "X").shape[0])
        pred = self.predict(X)
        return float(np.mean([p == t for p, t in zip(pred, truth)]))


class SubspaceRecognizer(_RecognizerBase):
    """Place recognition by projection onto per-place descriptor subspaces.

    Parameters
    ----------
    method : {"qr_full", "svd", "qr_2vp"}
        Factorization per place: pivoted QR of all references, truncated
        SVD, or one QR per adjacent-heading pair (needs ``headings`` at
        fit time).
    svd_rank : int or "m-1", optional
        Retained rank for the svd method.
    dep_tol : float
        Relative pivot tolerance below which dependent columns are dropped.
    store_r_factor : bool
        Keep the factor needed for heading estimation.

    Attributes
    ----------
    map_index_ : MapIndex
        The fitted per-place subspaces.
    places_ : ndarray of place ids, ascending.
    """

    _strategy = STRATEGY_SUBSPACE

    def __init__(self, method="qr_full", svd_rank=None, dep_tol=1e-8, store_r_factor=True):
        self.method = method
        self.svd_rank = svd_rank
        self.dep_tol = dep_tol
        self.store_r_factor = store_r_factor

    def fit(self, X, y, headings=None):
        dataset = self._fit_dataset(X, y, headings=headings)
        config = MapBuildConfig(
            method=self.method,
            svd_rank=self.svd_rank,
            dep_tol=self.dep_tol,
            store_r_factor=self.store_r_factor,
        )
        self.map_index_ = build_map(dataset, config)
        self.places_ = np.asarray(self.map_index_.places, dtype=object)
        return self

    def _target(self):
        return self.map_index_

    def decision_function(self, X):
        """Projection magnitude per (query, place), places in ``places_`` order."""
        check_is_fitted(self)
        results = self.rank(X)
        out = np.empty((len(results), len(self.places_)))
        for i, res in enumerate(results):
            out[i, res.order] = res.sorted_scores
        return out


class _BaselineRecognizer(_RecognizerBase):
    """Recognizers that score against the raw grouped references."""

    def fit(self, X, y):
        self.reference_dataset_ = self._fit_dataset(X, y)
        return self

    def _target(self):
        return self.reference_dataset_

    def decision_function(self, X):
        check_is_fitted(self)
        results = self.rank(X)
        out = np.empty((len(results), len(self.places_)))
        for i, res in enumerate(results):
            out[i, res.order] = res.sorted_scores
        return out


class PoolingRecognizer(_BaselineRecognizer):
    """Scores a place by the best cosine similarity among its references."""

    _strategy = "pooling"


class DistanceAveragingRecognizer(_BaselineRecognizer):
    """Scores a place by the mean cosine similarity over its references."""

    _strategy = "dmat"


class DescriptorSumRecognizer(_BaselineRecognizer):
    """Scores a place by cosine similarity to its summed reference bundle."""

    _strategy = "sum"

    def __init__(self, sum_renormalize=True):
        self.sum_renormalize = sum_renormalize

    def _baseline_config(self):
        return BaselineConfig(sum_renormalize=self.sum_renormalize)


class LogSumExpRecognizer(_BaselineRecognizer):
    """Pooling with log-sum-exp rescoring of the top candidate places."""

    _strategy = "lse"

    def __init__(self, top_c=25, beta=1.0):
        self.top_c = top_c
        self.beta = beta

    def _baseline_config(self):
        return BaselineConfig(lse_top_c=self.top_c, lse_beta=self.beta)

    def decision_function(self, X):
        raise ConfigError(
            "LogSumExpRecognizer has no per-place score matrix: rescored head "
            "and pooling tail are on different scales; use rank() instead"
        )


class DescriptorReducer(TransformerMixin, BaseEstimator):
    """Dimensionality reduction transformer for unit-norm descriptors.

    ``slice`` keeps the leading coordinates; ``pca`` projects onto the top
    principal directions of the uncentered second moment fit on the
    training descriptors. Rows are renormalized after reduction.
    """

    def __init__(self, method="slice", target_dim=64):
        self.method = method
        self.target_dim = target_dim

    def fit(self, X, y=None):
        X = as_matrix(X, "X")
        n = X.shape[1]
        k = int(self.target_dim)
        self.n_features_in_ = n
        if self.method == "pca":
            if not 1 <= k <= n:
                raise ParameterError(f"pca needs 1 <= target_dim <= {n}, got {k}")
            if X.shape[0] < k:
                raise RankError(f"pca to {k} dimensions needs at least {k} descriptors")
            self.components_ = principal_directions(X, k)
        elif self.method == "slice":
            if not 1 <= k < n:
                raise ParameterError(f"slice needs 1 <= target_dim < {n}, got {k}")
            self.components_ = None
        else:
            raise ConfigError(f"unknown reduction method {self.method!r}")
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = as_matrix(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ConfigError(
                f"X has {X.shape[1]} features, reducer was fit with {self.n_features_in_}"
            )
        if self.method == "slice":
            return reduce_dimension(X, "slice", self.target_dim)
        Y = X @ self.components_
        norms = np.linalg.norm(Y, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        return Y / norms
