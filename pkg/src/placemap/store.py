"""Descriptor storage: binary blocks, JSON manifests, and dataset views.

A dataset is a pair of files:

* ``*.vprd``: header ``magic "VPRD" | u32 version | u32 dimension | u64 count``
  followed by ``count x dimension`` little-endian float32 values, one
  descriptor per row, contiguous.
* ``*.manifest.json``: UTF-8 JSON mirroring :class:`DatasetManifest`.

Descriptors are canonicalized at ingestion: rows whose norm is off by more
than ``1e-6`` are L2-normalized, and all values are rounded through float32
(the storage precision). In-memory matrices are float64 upcasts of those
float32 values, so save/load round-trips are bit-exact while computation
runs in double precision.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateInputError,
    FormatError,
    InputError,
    ParameterError,
    RankError,
    ShapeError,
)
from .validation import UNIT_TOL, as_matrix, as_vector

VPRD_MAGIC = b"VPRD"
VPRD_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")

# |norm - 1| below this is treated as exactly unit; makes normalize idempotent.
_NORM_SNAP = 64.0 * np.finfo(np.float64).eps


def normalize(v) -> np.ndarray:
    """Return the unit-norm vector pointing along v.

    Exactly idempotent: vectors already unit-norm (within a few ulps) are
    returned unchanged, so ``normalize(normalize(v))`` equals
    ``normalize(v)`` bit for bit.
    """
    a = as_vector(v, "descriptor")
    n = float(np.linalg.norm(a))
    if n == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    if not math.isfinite(n):
        raise DataError("descriptor norm overflowed; rescale the input")
    if abs(n - 1.0) <= _NORM_SNAP:
        return a.copy()
    return a / n


@dataclass(frozen=True)
class Coordinates:
    """A 2-D position, either geographic ("latlon") or planar ("xy").

    ``a`` is latitude in degrees or x in metres; ``b`` is longitude in
    degrees or y in metres.
    """

    kind: str
    a: float
    b: float

    _EARTH_RADIUS_M = 6371008.8

    def __post_init__(self):
        if self.kind not in ("latlon", "xy"):
            raise DataError(f"unknown coordinate kind {self.kind!r}")

    def distance_to(self, other: "Coordinates") -> float:
        """Distance in metres: great-circle for latlon, Euclidean for xy."""
        if self.kind != other.kind:
            raise DataError("cannot mix latlon and xy coordinates")
        if self.kind == "xy":
            return math.hypot(self.a - other.a, self.b - other.b)
        lat1, lon1, lat2, lon2 = map(math.radians, (self.a, self.b, other.a, other.b))
        s = (
            math.sin((lat2 - lat1) / 2) ** 2
            + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
        )
        return 2.0 * self._EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(s)))

    def to_json(self) -> dict:
        if self.kind == "latlon":
            return {"lat": self.a, "lon": self.b}
        return {"x": self.a, "y": self.b}

    @classmethod
    def from_json(cls, obj: dict) -> "Coordinates":
        if "lat" in obj and "lon" in obj:
            return cls("latlon", float(obj["lat"]), float(obj["lon"]))
        if "x" in obj and "y" in obj:
            return cls("xy", float(obj["x"]), float(obj["y"]))
        raise DataError(f"coordinates must have lat/lon or x/y keys, got {sorted(obj)}")


@dataclass(frozen=True)
class ImageRecord:
    """Metadata binding one descriptor row to a place."""

    image_id: str
    place_id: str
    descriptor_index: int
    heading_deg: float | None = None
    pitch_deg: float | None = None
    coords: Coordinates | None = None
    date: str | None = None
    condition: str | None = None

    def to_json(self) -> dict:
        out: dict = {
            "image_id": self.image_id,
            "place_id": self.place_id,
            "descriptor_index": self.descriptor_index,
        }
        if self.heading_deg is not None:
            out["heading_deg"] = self.heading_deg
        if self.pitch_deg is not None:
            out["pitch_deg"] = self.pitch_deg
        if self.coords is not None:
            out["coords"] = self.coords.to_json()
        if self.date is not None:
            out["date"] = self.date
        if self.condition is not None:
            out["condition"] = self.condition
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ImageRecord":
        try:
            rec = cls(
                image_id=str(obj["image_id"]),
                place_id=str(obj["place_id"]),
                descriptor_index=int(obj["descriptor_index"]),
                heading_deg=None if obj.get("heading_deg") is None else float(obj["heading_deg"]),
                pitch_deg=None if obj.get("pitch_deg") is None else float(obj["pitch_deg"]),
                coords=None if obj.get("coords") is None else Coordinates.from_json(obj["coords"]),
                date=obj.get("date"),
                condition=obj.get("condition"),
            )
        except KeyError as exc:
            raise FormatError(f"image record missing required field {exc}") from None
        return rec


@dataclass(frozen=True)
class DatasetManifest:
    """Dataset metadata mirrored field-for-field by ``*.manifest.json``."""

    dimension: int
    count: int
    records: tuple[ImageRecord, ...]
    sequence_order: tuple[str, ...] | None = None
    format_version: int = 1

    def validate(self) -> None:
        if self.dimension < 1:
            raise DataError(f"dimension must be >= 1, got {self.dimension}")
        if self.count != len(self.records):
            raise DataError(
                f"manifest count {self.count} != number of records {len(self.records)}"
            )
        seen: set[str] = set()
        for pos, rec in enumerate(self.records):
            if rec.image_id in seen:
                raise DataError(f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            if rec.descriptor_index != pos:
                raise DataError(
                    f"record {rec.image_id!r} has descriptor_index "
                    f"{rec.descriptor_index}, expected its position {pos}"
                )
            if rec.heading_deg is not None and not (0.0 <= rec.heading_deg < 360.0):
                raise DataError(
                    f"record {rec.image_id!r} heading {rec.heading_deg} outside [0, 360)"
                )
        if self.sequence_order is not None:
            unknown = set(self.sequence_order) - seen
            if unknown:
                raise DataError(f"sequence_order names unknown image ids: {sorted(unknown)[:3]}")

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "dimension": self.dimension,
            "count": self.count,
            "records": [r.to_json() for r in self.records],
            "sequence_order": list(self.sequence_order) if self.sequence_order else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        try:
            manifest = cls(
                dimension=int(obj["dimension"]),
                count=int(obj["count"]),
                records=tuple(ImageRecord.from_json(r) for r in obj["records"]),
                sequence_order=tuple(obj["sequence_order"]) if obj.get("sequence_order") else None,
                format_version=int(obj.get("format_version", 1)),
            )
        except KeyError as exc:
            raise FormatError(f"manifest missing required field {exc}") from None
        manifest.validate()
        return manifest


class DescriptorDataset:
    """A validated manifest plus its float64 descriptor matrix (rows unit-norm)."""

    def __init__(self, manifest: DatasetManifest, descriptors: np.ndarray):
        manifest.validate()
        if descriptors.shape != (manifest.count, manifest.dimension):
            raise ShapeError(
                f"descriptor matrix shape {descriptors.shape} does not match manifest "
                f"({manifest.count}, {manifest.dimension})"
            )
        self.manifest = manifest
        self.descriptors = descriptors
        self.descriptors.flags.writeable = False
        self._groups: dict[str, np.ndarray] | None = None
        self._by_id: dict[str, ImageRecord] | None = None

    @property
    def dimension(self) -> int:
        return self.manifest.dimension

    @property
    def count(self) -> int:
        return self.manifest.count

    @property
    def records(self) -> tuple[ImageRecord, ...]:
        return self.manifest.records

    def _group_map(self) -> dict[str, np.ndarray]:
        if self._groups is None:
            groups: dict[str, list[int]] = {}
            for i, rec in enumerate(self.records):
                groups.setdefault(rec.place_id, []).append(i)
            self._groups = {
                pid: np.asarray(rows, dtype=np.intp) for pid, rows in sorted(groups.items())
            }
        return self._groups

    @property
    def place_ids(self) -> list[str]:
        """Unique place ids in ascending order."""
        return list(self._group_map().keys())

    def place_rows(self, place_id: str) -> np.ndarray:
        try:
            return self._group_map()[place_id]
        except KeyError:
            raise InputError(f"unknown place_id {place_id!r}") from None

    def iter_places(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self._group_map().items()

    def record(self, image_id: str) -> ImageRecord:
        if self._by_id is None:
            self._by_id = {r.image_id: r for r in self.records}
        try:
            return self._by_id[image_id]
        except KeyError:
            raise InputError(f"unknown image_id {image_id!r}") from None

    def subset(self, predicate: Callable[[ImageRecord], bool]) -> "DescriptorDataset":
        """New dataset keeping records for which predicate(record) is true."""
        keep = [i for i, rec in enumerate(self.records) if predicate(rec)]
        rows = np.asarray(keep, dtype=np.intp)
        records = tuple(
            replace(self.records[i], descriptor_index=new_pos)
            for new_pos, i in enumerate(keep)
        )
        kept_ids = {r.image_id for r in records}
        seq = None
        if self.manifest.sequence_order is not None:
            seq = tuple(i for i in self.manifest.sequence_order if i in kept_ids)
        manifest = DatasetManifest(
            dimension=self.dimension,
            count=len(records),
            records=records,
            sequence_order=seq,
            format_version=self.manifest.format_version,
        )
        return DescriptorDataset(manifest, self.descriptors[rows])

    def place_sequence_index(self) -> dict[str, int]:
        """Position of each place along the dataset's traversal order.

        Uses ``sequence_order`` when present, else manifest record order;
        a place's index is the rank of its first appearance.
        """
        order: list[str] = []
        seen: set[str] = set()
        if self.manifest.sequence_order is not None:
            ids = (self.record(i).place_id for i in self.manifest.sequence_order)
        else:
            ids = (r.place_id for r in self.records)
        for pid in ids:
            if pid not in seen:
                seen.add(pid)
                order.append(pid)
        return {pid: i for i, pid in enumerate(order)}


def _canonical_block(X: np.ndarray, image_ids: Sequence[str] | None = None) -> np.ndarray:
    """Normalize out-of-tolerance rows and round everything through float32."""
    if X.size and not np.isfinite(X).all():
        bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
        who = image_ids[bad] if image_ids is not None else f"row {bad}"
        raise DataError(f"non-finite descriptor entries in record {who}")
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        who = image_ids[zero[0]] if image_ids is not None else f"row {int(zero[0])}"
        raise DataError(f"zero-norm descriptor in record {who}")
    off = np.abs(norms - 1.0) > UNIT_TOL
    if off.any():
        X = X.copy()
        X[off] /= norms[off, None]
    return X.astype(np.float32).astype(np.float64)


def dataset_from_arrays(
    X,
    place_ids: Sequence[str],
    image_ids: Sequence[str] | None = None,
    headings: Sequence[float | None] | None = None,
    coords: Sequence[Coordinates | None] | None = None,
    dates: Sequence[str | None] | None = None,
    conditions: Sequence[str | None] | None = None,
    sequence_order: Sequence[str] | None = None,
) -> DescriptorDataset:
    """Ingest raw descriptor rows plus per-row metadata into a dataset."""
    X = as_matrix(X, "descriptors")
    n_rows = X.shape[0]
    if len(place_ids) != n_rows:
        raise ShapeError(f"got {len(place_ids)} place ids for {n_rows} descriptors")
    if image_ids is None:
        image_ids = [f"img{i:06d}" for i in range(n_rows)]

    def pick(seq, i):
        return None if seq is None else seq[i]

    records = tuple(
        ImageRecord(
            image_id=str(image_ids[i]),
            place_id=str(place_ids[i]),
            descriptor_index=i,
            heading_deg=pick(headings, i),
            pitch_deg=None,
            coords=pick(coords, i),
            date=pick(dates, i),
            condition=pick(conditions, i),
        )
        for i in range(n_rows)
    )
    manifest = DatasetManifest(
        dimension=X.shape[1],
        count=n_rows,
        records=records,
        sequence_order=tuple(sequence_order) if sequence_order else None,
    )
    return DescriptorDataset(manifest, _canonical_block(X, list(image_ids)))


def load_dataset(manifest_path, block_path) -> DescriptorDataset:
    """Load and validate a ``manifest.json`` + ``.vprd`` pair."""
    manifest_path = Path(manifest_path)
    block_path = Path(block_path)
    for p in (manifest_path, block_path):
        if not p.is_file():
            raise InputError(f"no such file: {p}")
    try:
        manifest = DatasetManifest.from_json(json.loads(manifest_path.read_text("utf-8")))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path} is not valid JSON: {exc}") from None

    raw = block_path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{block_path} is too short to hold a descriptor block header")
    magic, version, dim, count = _HEADER.unpack_from(raw)
    if magic != VPRD_MAGIC:
        raise FormatError(f"{block_path} has bad magic {magic!r}, expected {VPRD_MAGIC!r}")
    if version != VPRD_VERSION:
        raise FormatError(f"{block_path} has version {version}, expected {VPRD_VERSION}")
    if dim != manifest.dimension or count != manifest.count:
        raise ShapeError(
            f"{block_path} holds {count} x {dim} descriptors, manifest declares "
            f"{manifest.count} x {manifest.dimension}"
        )
    payload = raw[_HEADER.size:]
    expected = manifest.count * manifest.dimension * 4
    if len(payload) != expected:
        raise ShapeError(
            f"{block_path} payload is {len(payload)} bytes, expected {expected} "
            f"({manifest.count} x {manifest.dimension} float32)"
        )
    X = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    X = X.reshape(manifest.count, manifest.dimension)
    ids = [r.image_id for r in manifest.records]
    return DescriptorDataset(manifest, _canonical_block(X, ids))


def save_dataset(dataset: DescriptorDataset, manifest_path, block_path) -> None:
    """Write the manifest and descriptor block; byte-deterministic."""
    manifest_path = Path(manifest_path)
    block_path = Path(block_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    block_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(
        json.dumps(dataset.manifest.to_json(), indent=2, ensure_ascii=False) + "\n",
        "utf-8",
    )
    header = _HEADER.pack(VPRD_MAGIC, VPRD_VERSION, dataset.dimension, dataset.count)
    block = dataset.descriptors.astype("<f4").tobytes(order="C")
    block_path.write_bytes(header + block)


def reduce_dimension(X, method: str, target_dim: int) -> np.ndarray:
    """Shrink descriptor rows to target_dim columns, renormalizing each row.

    ``slice`` keeps the leading coordinates (requires target_dim < n);
    ``pca`` projects onto the top principal directions of the uncentered
    second-moment matrix fit on X itself (target_dim == n is permitted and
    acts as a pure rotation).
    """
    X = as_matrix(X, "descriptors")
    n = X.shape[1]
    k = int(target_dim)
    if method == "slice":
        if not 1 <= k < n:
            raise ParameterError(f"slice needs 1 <= target_dim < {n}, got {k}")
        Y = X[:, :k].copy()
    elif method == "pca":
        if not 1 <= k <= n:
            raise ParameterError(f"pca needs 1 <= target_dim <= {n}, got {k}")
        if X.shape[0] < k:
            raise RankError(
                f"pca to {k} dimensions needs at least {k} descriptors, got {X.shape[0]}"
            )
        Y = X @ principal_directions(X, k)
    else:
        raise ParameterError(f"unknown reduction method {method!r}; use 'slice' or 'pca'")
    norms = np.linalg.norm(Y, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateInputError(
            f"row {int(zero[0])} reduces to the zero vector under {method}"
        )
    return Y / norms[:, None]


def principal_directions(X: np.ndarray, k: int) -> np.ndarray:
    """Top-k eigenvectors (columns) of the uncentered second-moment matrix of X."""
    second_moment = X.T @ X
    _, vecs = np.linalg.eigh(second_moment)
    return vecs[:, ::-1][:, :k]


def reduce_dataset(dataset: DescriptorDataset, method: str, target_dim: int) -> DescriptorDataset:
    """Apply reduce_dimension to a dataset, preserving all metadata."""
    Y = reduce_dimension(dataset.descriptors, method, target_dim)
    manifest = DatasetManifest(
        dimension=int(target_dim),
        count=dataset.count,
        records=dataset.records,
        sequence_order=dataset.manifest.sequence_order,
        format_version=dataset.manifest.format_version,
    )
    ids = [r.image_id for r in dataset.records]
    return DescriptorDataset(manifest, _canonical_block(Y, ids))
