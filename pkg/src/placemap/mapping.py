"""Grouping a dataset into place subspaces and persisting the result.

A map is an ordered collection of per-place subspaces plus the build
configuration, immutable after construction. Serialized maps (``.vprmap``)
store numeric payloads as little-endian float32; matching upcasts to
float64, so round-trips are bit-exact and scoring stays in double
precision.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import (
    CapabilityError,
    ConfigError,
    FormatError,
    InputError,
    ShapeError,
)
from .store import DescriptorDataset, ImageRecord, _canonical_block
from .subspace import PlaceSubspace, factor_qr, factor_svd, place_matrix_from_rows

log = logging.getLogger(__name__)

VPRMAP_MAGIC = b"VPRM"
VPRMAP_VERSION = 1
_MAP_HEADER = struct.Struct("<4sIIQ")

METHODS = ("qr_full", "qr_2vp", "svd")

# Fixed work unit so results never depend on the worker count.
_BUILD_CHUNK = 64


@dataclass(frozen=True)
class ReferenceFilter:
    """Keeps reference records matching every specified attribute set."""

    headings: frozenset[float] | None = None
    dates: frozenset[str] | None = None
    conditions: frozenset[str] | None = None

    def admits(self, rec: ImageRecord) -> bool:
        if self.headings is not None and rec.heading_deg not in self.headings:
            return False
        if self.dates is not None and rec.date not in self.dates:
            return False
        if self.conditions is not None and rec.condition not in self.conditions:
            return False
        return True

    def describe(self) -> str:
        parts = []
        if self.headings is not None:
            parts.append("headings=" + ",".join(f"{h:g}" for h in sorted(self.headings)))
        if self.dates is not None:
            parts.append("dates=" + ",".join(sorted(self.dates)))
        if self.conditions is not None:
            parts.append("conditions=" + ",".join(sorted(self.conditions)))
        return ";".join(parts) if parts else "all"

    def to_json(self) -> dict:
        return {
            "headings": sorted(self.headings) if self.headings is not None else None,
            "dates": sorted(self.dates) if self.dates is not None else None,
            "conditions": sorted(self.conditions) if self.conditions is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict | None) -> "ReferenceFilter | None":
        if obj is None:
            return None
        mk = lambda v: None if v is None else frozenset(v)
        return cls(
            headings=mk(obj.get("headings")),
            dates=mk(obj.get("dates")),
            conditions=mk(obj.get("conditions")),
        )


@dataclass(frozen=True)
class MapBuildConfig:
    """How a dataset is turned into place subspaces."""

    method: str = "qr_full"
    svd_rank: int | str | None = None  # integer rank or the "m-1" rule
    reference_filter: ReferenceFilter | None = None
    dep_tol: float = 1e-8
    store_r_factor: bool = True
    store_sources: bool = True

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown map method {self.method!r}; choose from {METHODS}")
        if self.method == "svd":
            if self.svd_rank is None:
                raise ConfigError("svd method requires svd_rank (an integer or 'm-1')")
            if isinstance(self.svd_rank, str) and self.svd_rank != "m-1":
                raise ConfigError(f"svd_rank string form must be 'm-1', got {self.svd_rank!r}")
            if isinstance(self.svd_rank, int) and self.svd_rank < 1:
                raise ConfigError(f"svd_rank must be >= 1, got {self.svd_rank}")
        if self.dep_tol <= 0:
            raise ConfigError(f"dep_tol must be positive, got {self.dep_tol}")

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "svd_rank": self.svd_rank,
            "reference_filter": (
                self.reference_filter.to_json() if self.reference_filter else None
            ),
            "dep_tol": self.dep_tol,
            "store_r_factor": self.store_r_factor,
            "store_sources": self.store_sources,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MapBuildConfig":
        cfg = cls(
            method=obj["method"],
            svd_rank=obj.get("svd_rank"),
            reference_filter=ReferenceFilter.from_json(obj.get("reference_filter")),
            dep_tol=float(obj.get("dep_tol", 1e-8)),
            store_r_factor=bool(obj.get("store_r_factor", True)),
            store_sources=bool(obj.get("store_sources", True)),
        )
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class BuildStats:
    places_built: int = 0
    subspace_count: int = 0
    skipped: tuple[tuple[str, str], ...] = ()
    build_seconds: float = 0.0
    threads: int = 1

    @property
    def warning_count(self) -> int:
        return len(self.skipped)


class MapIndex:
    """Immutable ordered collection of place subspaces plus build config."""

    def __init__(
        self,
        subspaces: Sequence[PlaceSubspace],
        config: MapBuildConfig,
        dimension: int,
        stats: BuildStats | None = None,
    ):
        config.validate()
        ordered = sorted(subspaces, key=lambda s: s.place_id)
        for sub in ordered:
            if sub.n != dimension:
                raise ShapeError(
                    f"subspace {sub.place_id!r} has dimension {sub.n}, map declares {dimension}"
                )
        keys = [(s.place_id, s.tag) for s in ordered]
        if len(set(keys)) != len(keys):
            raise ConfigError("duplicate (place_id, tag) pairs in map")
        self.subspaces: tuple[PlaceSubspace, ...] = tuple(ordered)
        self.config = config
        self.dimension = dimension
        self.stats = stats or BuildStats(subspace_count=len(ordered))
        self._places: list[str] | None = None
        self._stacked: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.subspaces)

    def __iter__(self) -> Iterator[PlaceSubspace]:
        return iter(self.subspaces)

    @property
    def places(self) -> list[str]:
        """Unique place ids, ascending."""
        if self._places is None:
            seen: dict[str, None] = {}
            for s in self.subspaces:
                seen.setdefault(s.place_id, None)
            self._places = sorted(seen)
        return self._places

    def place_subspaces(self, place_id: str) -> list[PlaceSubspace]:
        out = [s for s in self.subspaces if s.place_id == place_id]
        if not out:
            raise InputError(f"map has no place {place_id!r}")
        return out

    @property
    def memory_bytes(self) -> int:
        """Basis storage in bytes at float32, the matching-time footprint."""
        return sum(s.basis.shape[0] * s.basis.shape[1] * 4 for s in self.subspaces)

    def stacked_basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All bases concatenated for batched scoring.

        Returns ``(B, offsets, owner)`` where B is n x K float64 (K = total
        retained rank), ``offsets[i]`` is the first column of subspace i,
        and ``owner[i]`` is the index of its place in :attr:`places`.
        """
        if self._stacked is None:
            if not self.subspaces:
                raise ShapeError("map has no subspaces to stack")
            blocks = [np.asarray(s.basis, dtype=np.float64) for s in self.subspaces]
            offsets = np.zeros(len(blocks), dtype=np.intp)
            np.cumsum([b.shape[1] for b in blocks[:-1]], out=offsets[1:])
            place_pos = {pid: i for i, pid in enumerate(self.places)}
            owner = np.asarray([place_pos[s.place_id] for s in self.subspaces], dtype=np.intp)
            self._stacked = (np.concatenate(blocks, axis=1), offsets, owner)
        return self._stacked


def _resolve_svd_rank(svd_rank: int | str, m: int) -> int:
    if svd_rank == "m-1":
        return max(1, m - 1)
    return min(int(svd_rank), m)


def _circular_pairs(headings: list[float]) -> list[tuple[float, float]]:
    """Adjacent heading pairs in sorted circular order."""
    hs = sorted(set(headings))
    if len(hs) == 2:
        return [(hs[0], hs[1])]
    return [(hs[i], hs[(i + 1) % len(hs)]) for i in range(len(hs))]


def _build_place(
    place_id: str,
    rows: np.ndarray,
    records: Sequence[ImageRecord],
    config: MapBuildConfig,
) -> list[PlaceSubspace]:
    ids = [r.image_id for r in records]
    headings = None
    if all(r.heading_deg is not None for r in records):
        headings = [float(r.heading_deg) for r in records]

    def finish(sub: PlaceSubspace, source_rows: np.ndarray) -> PlaceSubspace:
        sub = sub.with_storage_dtype(np.float32)
        if not config.store_r_factor:
            sub = replace(sub, r_factor=None)
        if config.store_sources:
            sub = replace(
                sub, source_columns=np.ascontiguousarray(source_rows, dtype=np.float32)
            )
        return sub

    if config.method == "qr_2vp":
        if headings is None:
            raise ConfigError("qr_2vp requires heading metadata on every reference record")
        pairs = _circular_pairs(headings)
        gaps = {round((b - a) % 360.0, 6) for a, b in pairs}
        if len(pairs) > 1 and len(gaps) > 1:
            log.warning(
                "place %s headings are not a regular grid; using nearest-neighbour pairs",
                place_id,
            )
        out = []
        for a, b in pairs:
            sel = [i for i, h in enumerate(headings) if h in (a, b)]
            pm = place_matrix_from_rows(
                place_id, rows[sel], [ids[i] for i in sel], [headings[i] for i in sel]
            )
            sub = factor_qr(pm, dep_tol=config.dep_tol)
            out.append(replace(finish(sub, rows[sel]), tag=f"vp{a:g}-{b:g}"))
        return out

    pm = place_matrix_from_rows(place_id, rows, ids, headings)
    if config.method == "svd":
        sub = factor_svd(pm, _resolve_svd_rank(config.svd_rank, pm.m))
    else:
        sub = factor_qr(pm, dep_tol=config.dep_tol)
    return [finish(sub, rows)]


def build_map(
    dataset: DescriptorDataset, config: MapBuildConfig, threads: int = 1
) -> MapIndex:
    """Factorize every place of a dataset into subspaces.

    Places left empty by the reference filter, or with too few references
    for the method, are skipped with a warning recorded in the build stats.
    Output is deterministic for a given dataset and config, regardless of
    the thread count.
    """
    config.validate()
    t0 = time.perf_counter()
    all_places = dataset.place_ids
    working = dataset
    if config.reference_filter is not None:
        working = dataset.subset(config.reference_filter.admits)

    groups = list(working.iter_places())
    surviving = {pid for pid, _ in groups}
    skipped = [(pid, "no references after filtering") for pid in all_places if pid not in surviving]

    min_cols = 2 if config.method == "qr_2vp" else 1
    tasks = []
    for pid, rows_idx in groups:
        if rows_idx.size < min_cols:
            skipped.append((pid, f"needs >= {min_cols} references for {config.method}"))
            continue
        tasks.append((pid, rows_idx))

    def run_chunk(chunk):
        out = []
        for pid, rows_idx in chunk:
            recs = [working.records[i] for i in rows_idx]
            out.extend(_build_place(pid, working.descriptors[rows_idx], recs, config))
        return out

    chunks = [tasks[i : i + _BUILD_CHUNK] for i in range(0, len(tasks), _BUILD_CHUNK)]
    subspaces: list[PlaceSubspace] = []
    # Single-threaded BLAS inside the per-place factorizations keeps the
    # numeric output identical for every worker count.
    with threadpool_limits(limits=1):
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for part in pool.map(run_chunk, chunks):
                    subspaces.extend(part)
        else:
            for chunk in chunks:
                subspaces.extend(run_chunk(chunk))

    for pid, reason in skipped:
        log.warning("skipping place %s: %s", pid, reason)
    stats = BuildStats(
        places_built=len(tasks),
        subspace_count=len(subspaces),
        skipped=tuple(skipped),
        build_seconds=time.perf_counter() - t0,
        threads=threads,
    )
    return MapIndex(subspaces, config, dataset.dimension, stats)


def incremental_add(
    index: MapIndex,
    place_id: str,
    new_descriptors,
    column_ids: Sequence[str] | None = None,
    headings: Sequence[float] | None = None,
) -> MapIndex:
    """Rebuild one place from its retained sources plus new descriptors.

    Returns a new MapIndex; untouched places share their subspace objects
    with the input. Requires the map to have been built with
    ``store_sources`` (the default).
    """
    from .validation import as_matrix

    X = as_matrix(new_descriptors, "new descriptors")
    if X.shape[1] != index.dimension:
        raise ShapeError(
            f"new descriptors have dimension {X.shape[1]}, map has {index.dimension}"
        )
    X = _canonical_block(X)

    existing = [s for s in index.subspaces if s.place_id == place_id]
    old_rows: list[np.ndarray] = []
    old_ids: list[str] = []
    old_headings: list[float | None] = []
    seen: set[str] = set()
    for sub in existing:
        if sub.source_columns is None:
            raise CapabilityError(
                f"map was built without source columns; cannot update place {place_id!r}"
            )
        for j, cid in enumerate(sub.column_ids):
            if cid in seen:
                continue
            seen.add(cid)
            old_rows.append(np.asarray(sub.source_columns[j], dtype=np.float64))
            old_ids.append(cid)
            old_headings.append(
                None if sub.column_headings is None else sub.column_headings[j]
            )

    if column_ids is None:
        column_ids = [f"{place_id}_add{len(old_ids) + i:04d}" for i in range(X.shape[0])]
    if len(column_ids) != X.shape[0]:
        raise ShapeError(f"{len(column_ids)} column ids for {X.shape[0]} new descriptors")
    clash = set(column_ids) & seen
    if clash:
        raise InputError(f"new column ids already present: {sorted(clash)[:3]}")

    if index.config.method == "qr_2vp":
        if headings is None or any(h is None for h in old_headings):
            raise CapabilityError("qr_2vp maps need headings for every column to update")
    if headings is not None and len(headings) != X.shape[0]:
        raise ShapeError(f"{len(headings)} headings for {X.shape[0]} new descriptors")

    all_rows = np.vstack(old_rows + [X]) if old_rows else X
    all_ids = old_ids + [str(c) for c in column_ids]
    new_h: list[float | None] = list(headings) if headings is not None else [None] * X.shape[0]
    merged_headings = old_headings + new_h
    records = [
        ImageRecord(
            image_id=cid,
            place_id=place_id,
            descriptor_index=i,
            heading_deg=merged_headings[i],
        )
        for i, cid in enumerate(all_ids)
    ]
    with threadpool_limits(limits=1):
        rebuilt = _build_place(place_id, all_rows, records, index.config)
    untouched = [s for s in index.subspaces if s.place_id != place_id]
    return MapIndex(untouched + rebuilt, index.config, index.dimension, index.stats)


def _pack_str(s: str, width: str = "<H") -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(width, len(raw)) + raw


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.buf):
            raise FormatError(f"{self.path} is truncated")
        out = self.buf[self.pos : self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self) -> str:
        (length,) = self.unpack("<H")
        return self.take(length).decode("utf-8")

    def array(self, dtype: str, count: int) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * item), dtype=dtype).copy()


_FLAG_R = 1
_FLAG_SIGMA = 2
_FLAG_HEADINGS = 4
_FLAG_SOURCES = 8


def save_map(index: MapIndex, path) -> None:
    """Serialize a map; numeric payloads are little-endian float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_blob = json.dumps(index.config.to_json(), ensure_ascii=False).encode("utf-8")
    parts = [
        _MAP_HEADER.pack(VPRMAP_MAGIC, VPRMAP_VERSION, index.dimension, len(index.subspaces)),
        struct.pack("<I", len(config_blob)),
        config_blob,
    ]
    for sub in index.subspaces:
        flags = 0
        if sub.r_factor is not None:
            flags |= _FLAG_R
        if sub.singular_values is not None:
            flags |= _FLAG_SIGMA
        if sub.column_headings is not None:
            flags |= _FLAG_HEADINGS
        if sub.source_columns is not None:
            flags |= _FLAG_SOURCES
        parts.append(_pack_str(sub.place_id))
        parts.append(_pack_str(sub.tag))
        parts.append(_pack_str(sub.method))
        parts.append(struct.pack("<IIB", sub.rank, sub.m, flags))
        for cid in sub.column_ids:
            parts.append(_pack_str(cid))
        if sub.column_headings is not None:
            parts.append(np.asarray(sub.column_headings, dtype="<f8").tobytes())
        if sub.r_factor is not None:
            parts.append(np.ascontiguousarray(sub.r_factor, dtype="<f4").tobytes())
        if sub.singular_values is not None:
            parts.append(np.ascontiguousarray(sub.singular_values, dtype="<f4").tobytes())
        if sub.source_columns is not None:
            parts.append(np.ascontiguousarray(sub.source_columns, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(sub.basis, dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))


def load_map(path) -> MapIndex:
    """Load a ``.vprmap`` file; inverse of :func:`save_map`, bit-exact."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    reader = _Reader(path.read_bytes(), str(path))
    magic, version, dimension, count = reader.unpack("<4sIIQ")
    if magic != VPRMAP_MAGIC:
        raise FormatError(f"{path} has bad magic {magic!r}, expected {VPRMAP_MAGIC!r}")
    if version != VPRMAP_VERSION:
        raise FormatError(f"{path} has version {version}, expected {VPRMAP_VERSION}")
    (config_len,) = reader.unpack("<I")
    try:
        config = MapBuildConfig.from_json(json.loads(reader.take(config_len).decode("utf-8")))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path} has a corrupt config block: {exc}") from None

    subspaces = []
    for _ in range(count):
        place_id = reader.string()
        tag = reader.string()
        method = reader.string()
        rank, m, flags = reader.unpack("<IIB")
        if rank < 1 or rank > m:
            raise FormatError(f"{path}: subspace {place_id!r} has invalid rank {rank}")
        column_ids = tuple(reader.string() for _ in range(m))
        headings = None
        if flags & _FLAG_HEADINGS:
            headings = tuple(float(h) for h in reader.array("<f8", m))
        r_factor = None
        if flags & _FLAG_R:
            r_factor = reader.array("<f4", rank * m).reshape(rank, m)
        sigma = None
        if flags & _FLAG_SIGMA:
            sigma = reader.array("<f4", rank)
        sources = None
        if flags & _FLAG_SOURCES:
            sources = reader.array("<f4", m * dimension).reshape(m, dimension)
        basis = reader.array("<f4", dimension * rank).reshape(dimension, rank)
        subspaces.append(
            PlaceSubspace(
                place_id=place_id,
                basis=basis,
                r_factor=r_factor,
                method=method,
                column_ids=column_ids,
                column_headings=headings,
                singular_values=sigma,
                tag=tag,
                source_columns=sources,
            )
        )
    if reader.pos != len(reader.buf):
        raise FormatError(f"{path} has {len(reader.buf) - reader.pos} trailing bytes")
    return MapIndex(subspaces, config, dimension)
