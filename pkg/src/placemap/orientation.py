"""Relative heading estimation from per-heading contributions.

For places whose references are tagged with capture headings, a query's
heading is recovered by weighting the reference headings and taking the
circular mean. Two weighting schemes are provided: least-squares
coefficients through the stored basis factor, and softmax over per-heading
cosine similarities. A geometric bound limits the bias introduced when the
query is translated relative to the references.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    CapabilityError,
    DomainError,
    HeadingUndefinedError,
    ParameterError,
)
from .subspace import PlaceMatrix, PlaceSubspace
from .validation import as_vector, check_dimension, ensure_unit_vector

# Resultant lengths below this mean the weighted directions cancel and the
# reported heading carries no information.
_DEGENERATE_RESULTANT = 1e-12


@dataclass(frozen=True)
class HeadingEstimate:
    """A continuous heading in [0, 360) with its per-heading weights.

    ``resultant_length`` is the norm of the weighted mean direction vector,
    in [0, 1]; values near zero flag a degenerate (uninformative) estimate.
    """

    theta_deg: float
    weights: tuple[tuple[float, float], ...]  # (heading_deg, weight), heading-ascending
    method: str
    resultant_length: float

    @property
    def degenerate(self) -> bool:
        return self.resultant_length < _DEGENERATE_RESULTANT


def wrap_deg(theta: float) -> float:
    """Map an angle onto [0, 360); guards the 360.0 rounding edge of fmod."""
    out = theta % 360.0
    return 0.0 if out >= 360.0 else out


def circular_mean_deg(
    headings_deg: Sequence[float], weights: Sequence[float]
) -> tuple[float, float]:
    """Weighted circular mean direction and resultant length.

    Weights must be non-negative and sum to 1. Returns (theta in [0, 360),
    resultant length in [0, 1]); a zero resultant reports theta 0.
    """
    h = np.radians(np.asarray(headings_deg, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    x = float(np.sum(w * np.cos(h)))
    y = float(np.sum(w * np.sin(h)))
    resultant = math.hypot(x, y)
    if resultant < _DEGENERATE_RESULTANT:
        return 0.0, resultant
    return wrap_deg(math.degrees(math.atan2(y, x))), resultant


def angular_error_deg(a: float, b: float) -> float:
    """Absolute circular distance between two headings, in [0, 180]."""
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def _aggregate_by_heading(
    headings: Sequence[float], values: np.ndarray, how: str
) -> tuple[list[float], np.ndarray]:
    """Collapse per-column values onto unique headings (mean or max)."""
    unique = sorted(set(float(h) for h in headings))
    out = np.empty(len(unique))
    for i, h in enumerate(unique):
        vals = values[[j for j, hj in enumerate(headings) if float(hj) == h]]
        out[i] = vals.mean() if how == "mean" else vals.max()
    return unique, out


def estimate_heading_qr(sub: PlaceSubspace, d_q) -> HeadingEstimate:
    """Heading from least-squares coefficients over the reference columns.

    Solves the stored factor for the query's coordinates in the original
    column basis, clamps negative coefficients to zero (a negative
    coefficient marks anti-correlation, not presence), averages weights per
    unique heading, and interpolates with the circular mean.
    """
    if sub.r_factor is None:
        raise CapabilityError(
            f"subspace {sub.place_id!r} carries no factor matrix; "
            "rebuild the map with store_r_factor enabled"
        )
    if sub.column_headings is None:
        raise CapabilityError(f"subspace {sub.place_id!r} has no heading metadata")
    d = as_vector(d_q, "query descriptor")
    check_dimension(d.size, sub.n, "query descriptor")
    d = ensure_unit_vector(d)
    basis = np.asarray(sub.basis, dtype=np.float64)
    r_factor = np.asarray(sub.r_factor, dtype=np.float64)
    y = basis.T @ d
    # Minimum-norm least squares handles rank-deficient factors (duplicate
    # or dependent columns) deterministically.
    x, *_ = np.linalg.lstsq(r_factor, y, rcond=None)
    contrib = np.maximum(x, 0.0)
    if contrib.sum() <= 0.0:
        raise HeadingUndefinedError(
            f"no positive heading contribution for place {sub.place_id!r}"
        )
    unique, per_heading = _aggregate_by_heading(sub.column_headings, contrib, "mean")
    weights = per_heading / per_heading.sum()
    theta, resultant = circular_mean_deg(unique, weights)
    return HeadingEstimate(
        theta_deg=theta,
        weights=tuple(zip(unique, weights.tolist())),
        method="qr_coeff",
        resultant_length=resultant,
    )


def estimate_heading_pooling(pm: PlaceMatrix, d_q, tau: float = 0.1) -> HeadingEstimate:
    """Heading from softmax-weighted per-heading cosine similarities.

    Per-heading similarity is the best cosine among that heading's columns;
    softmax with temperature tau turns similarities into weights.
    """
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    if pm.column_headings is None:
        raise CapabilityError(f"place {pm.place_id!r} has no heading metadata")
    d = as_vector(d_q, "query descriptor")
    check_dimension(d.size, pm.n, "query descriptor")
    d = ensure_unit_vector(d)
    sims = pm.matrix.T @ d
    unique, per_heading = _aggregate_by_heading(pm.column_headings, sims, "max")
    scaled = per_heading / tau
    scaled -= scaled.max()
    weights = np.exp(scaled)
    weights /= weights.sum()
    theta, resultant = circular_mean_deg(unique, weights)
    return HeadingEstimate(
        theta_deg=theta,
        weights=tuple(zip(unique, weights.tolist())),
        method="pooling_softmax",
        resultant_length=resultant,
    )


def bias_bound(translation_m: float, depth_m: float) -> float:
    """Worst-case heading bias, in degrees, from translating the camera.

    A query taken up to ``translation_m`` metres from its reference, looking
    at scene content ``depth_m`` metres away, can disagree with the true
    heading by at most ``arctan(T / sqrt(D^2 - T^2))``.
    """
    t = float(translation_m)
    d = float(depth_m)
    if t < 0:
        raise DomainError(f"translation must be non-negative, got {t}")
    if t >= d:
        raise DomainError(f"translation ({t}) must be smaller than scene depth ({d})")
    return math.degrees(math.atan2(t, math.sqrt(d * d - t * t)))
