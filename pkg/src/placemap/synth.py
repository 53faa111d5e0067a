"""Deterministic synthetic descriptor worlds for desk-scale experiments.

Each place is a blend of a place-wide latent direction and per-heading
latent directions, with appearance variation modelled as additive Gaussian
noise. The generator is a pure function of its config: it draws from a
counter-based Philox PRNG (via numpy's Generator), so identical configs
yield byte-identical datasets on every platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .evaluation import GroundTruthSpec
from .store import Coordinates, DescriptorDataset, dataset_from_arrays
from .subspace import residual_brute_force

QUERY_MODES = ("aligned", "intermediate")


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic world.

    ``shared_frac`` splits descriptor energy between the place-wide latent
    (weight ``sqrt(shared_frac)``) and the heading latent; ``noise_sigma``
    is the per-coordinate standard deviation of the additive noise, so the
    expected noise norm is roughly ``noise_sigma * sqrt(dimension)``
    against a unit-norm signal.
    """

    seed: int
    dimension: int = 256
    num_places: int = 200
    headings: tuple[float, ...] = (0.0, 90.0, 180.0, 270.0)
    conditions: int = 2
    shared_frac: float = 0.5
    noise_sigma: float = 0.1
    query_mode: str = "intermediate"
    queries_per_place: int = 4

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.dimension < 2:
            raise ConfigError(f"dimension must be >= 2, got {self.dimension}")
        if self.num_places < 1:
            raise ConfigError(f"num_places must be >= 1, got {self.num_places}")
        if len(self.headings) < 1:
            raise ConfigError("at least one heading is required")
        if not all(0.0 <= h < 360.0 for h in self.headings):
            raise ConfigError(f"headings must lie in [0, 360), got {self.headings}")
        if len(set(self.headings)) != len(self.headings):
            raise ConfigError("headings must be distinct")
        if self.conditions < 1:
            raise ConfigError(f"conditions must be >= 1, got {self.conditions}")
        if not 0.0 <= self.shared_frac <= 1.0:
            raise ConfigError(f"shared_frac must lie in [0, 1], got {self.shared_frac}")
        if self.noise_sigma < 0.0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.query_mode not in QUERY_MODES:
            raise ConfigError(f"query_mode must be one of {QUERY_MODES}")
        if self.queries_per_place < 1:
            raise ConfigError(f"queries_per_place must be >= 1, got {self.queries_per_place}")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "dimension": self.dimension,
            "num_places": self.num_places,
            "headings": list(self.headings),
            "conditions": self.conditions,
            "shared_frac": self.shared_frac,
            "noise_sigma": self.noise_sigma,
            "query_mode": self.query_mode,
            "queries_per_place": self.queries_per_place,
        }


def _unit_rows(X: np.ndarray) -> np.ndarray:
    return X / np.linalg.norm(X, axis=-1, keepdims=True)


def _midpoint_deg(a: float, b: float) -> float:
    """Circular midpoint travelling from a forward to b, in [0, 360)."""
    gap = (b - a) % 360.0
    out = (a + gap / 2.0) % 360.0
    return 0.0 if out >= 360.0 else out


def generate(
    config: SynthConfig,
) -> tuple[DescriptorDataset, DescriptorDataset, GroundTruthSpec]:
    """Build (references, queries, ground truth) from a config.

    Draw order is fixed: per-place latents first (one place-wide and one
    per heading, each a normalized Gaussian vector), then reference noise,
    then query noise. References exist for every (place, condition,
    heading) triple. Aligned queries reuse a reference heading's latent;
    intermediate queries mix the two adjacent heading latents equally and
    sit at the circular midpoint heading. Ground truth is the generating
    place (one-to-one).
    """
    config.validate()
    rng = np.random.Generator(np.random.Philox(config.seed))
    P, H, C, n = (
        config.num_places,
        len(config.headings),
        config.conditions,
        config.dimension,
    )
    qpp = config.queries_per_place

    latents = _unit_rows(rng.standard_normal((P, 1 + H, n)))
    shared = latents[:, 0, :]  # (P, n)
    heading_latents = latents[:, 1:, :]  # (P, H, n)
    ref_noise = rng.standard_normal((P, C, H, n)) * config.noise_sigma
    query_noise = rng.standard_normal((P, qpp, n)) * config.noise_sigma

    w_shared = math.sqrt(config.shared_frac)
    w_heading = math.sqrt(1.0 - config.shared_frac)

    signal = w_shared * shared[:, None, None, :] + w_heading * heading_latents[:, None, :, :]
    refs = _unit_rows(signal + ref_noise).reshape(P * C * H, n)

    grid = max(1, math.isqrt(P))
    place_ids = [f"p{r:05d}" for r in range(P)]
    place_xy = [
        Coordinates("xy", 10.0 * (r % grid), 10.0 * (r // grid)) for r in range(P)
    ]

    ref_place, ref_ids, ref_heads, ref_coords, ref_dates, ref_conds = [], [], [], [], [], []
    for r in range(P):
        for c in range(C):
            for i, heading in enumerate(config.headings):
                ref_place.append(place_ids[r])
                ref_ids.append(f"{place_ids[r]}_c{c}_v{i}")
                ref_heads.append(float(heading))
                ref_coords.append(place_xy[r])
                ref_dates.append(f"2020-{c + 1:02d}-15")
                ref_conds.append(f"cond{c}")

    q_rows = np.empty((P * qpp, n))
    q_place, q_ids, q_heads, q_coords = [], [], [], []
    for r in range(P):
        for j in range(qpp):
            slot = j % H
            if config.query_mode == "aligned":
                mix = heading_latents[r, slot]
                theta = float(config.headings[slot])
            else:
                nxt = (slot + 1) % H
                mix = 0.5 * heading_latents[r, slot] + 0.5 * heading_latents[r, nxt]
                theta = _midpoint_deg(config.headings[slot], config.headings[nxt])
            v = w_shared * shared[r] + w_heading * mix + query_noise[r, j]
            q_rows[r * qpp + j] = v
            q_place.append(place_ids[r])
            q_ids.append(f"q{r:05d}_{j}")
            q_heads.append(theta)
            q_coords.append(place_xy[r])
    q_rows = _unit_rows(q_rows)

    references = dataset_from_arrays(
        refs,
        ref_place,
        image_ids=ref_ids,
        headings=ref_heads,
        coords=ref_coords,
        dates=ref_dates,
        conditions=ref_conds,
        sequence_order=ref_ids,
    )
    queries = dataset_from_arrays(
        q_rows,
        q_place,
        image_ids=q_ids,
        headings=q_heads,
        coords=q_coords,
    )
    gt = GroundTruthSpec.one_to_one({r.image_id: r.place_id for r in queries.records})
    return references, queries, gt


def oracle_match(references: DescriptorDataset, d_q) -> str:
    """Place with the smallest normal-equation least-squares residual.

    Independent of the factorization path: per place, the residual is
    computed directly from the stacked reference matrix via
    :func:`placemap.subspace.residual_brute_force`. Ties resolve to the
    ascending-place-id winner, matching the matcher's rule.
    """
    best_pid = None
    best = math.inf
    for pid, rows in references.iter_places():
        res = residual_brute_force(references.descriptors[rows].T, d_q)
        if res < best:
            best = res
            best_pid = pid
    if best_pid is None:
        raise ConfigError("reference dataset has no places")
    return best_pid
