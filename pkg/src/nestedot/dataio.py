"""File formats, manifests, subsampling and the pairwise-value disk cache.

Embedding files are a fixed-width binary format (magic ``HHOT``, little
endian u32 version/rows/dim header, row-major float32 payload); CSV is
accepted as a slow path for files ending in ``.csv``.  Dataset manifests are
one JSON document per dataset.  Distance matrices persist as CSV with a
``# key=value`` metadata header and full-precision (repr) float cells, so a
write/read round trip is value-exact and repeated writes are byte-identical.

Values are always computed in double precision; only embedding storage is
32-bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core
from .core import SolverConfig, TransportResult
from .errors import InputError
from .hierarchy import Dataset, DistanceMatrix, PairValueCache, Slide, slide_cost_matrix

EMBEDDING_MAGIC = b"HHOT"
EMBEDDING_VERSION = 1
_HEADER = struct.Struct("<4sIII")

# The seeded generator behind subsampling; declared in output metadata so a
# reimplementation can reproduce selections.
SUBSAMPLE_RNG = "pcg64"

_MANIFEST_KEYS = {"name", "slides"}
_MANIFEST_SLIDE_KEYS = {"id", "label", "path", "weight"}

# Documented metadata keys, in file order; extra keys follow sorted.
_META_KEY_ORDER = (
    "epsilon_inner",
    "epsilon_outer",
    "debiased",
    "metric",
    "subsample",
    "seed",
    "version",
)


@dataclass(frozen=True)
class EmbeddingFile:
    """A parsed embedding matrix: one row per tile."""

    n_rows: int
    dim: int
    values: np.ndarray


def write_embedding_file(path, values) -> None:
    """Write tile embeddings in the binary format (float32 storage)."""
    arr = core.as_points(values, "embedding values")
    n, d = arr.shape
    payload = arr.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, n, d))
        fh.write(payload)


def _read_embedding_csv(path) -> EmbeddingFile:
    try:
        arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise InputError(f"embedding CSV {path}: {exc}") from exc
    if arr.size == 0:
        raise InputError(f"embedding CSV {path} is empty")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"embedding CSV {path} contains NaN or Inf values")
    return EmbeddingFile(arr.shape[0], arr.shape[1], arr)


def read_embedding_file(path) -> EmbeddingFile:
    """Parse an embedding file; ``.csv`` paths take the CSV slow path."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _read_embedding_csv(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read embedding file {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise InputError(f"embedding file {path} is truncated: no complete header")
    magic, version, n, d = _HEADER.unpack_from(blob)
    if magic != EMBEDDING_MAGIC:
        raise InputError(f"embedding file {path} has bad magic {magic!r}")
    if version != EMBEDDING_VERSION:
        raise InputError(
            f"embedding file {path} has unsupported version {version} "
            f"(expected {EMBEDDING_VERSION})"
        )
    if n < 1 or d < 1:
        raise InputError(f"embedding file {path} declares empty shape {n}x{d}")
    expected = _HEADER.size + 4 * n * d
    if len(blob) != expected:
        raise InputError(
            f"embedding file {path} declares {n}x{d} values ({expected} bytes) "
            f"but holds {len(blob)} bytes"
        )
    values = (
        np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
        .reshape(n, d)
        .astype(np.float64)
    )
    if not np.all(np.isfinite(values)):
        raise InputError(f"embedding file {path} contains NaN or Inf values")
    return EmbeddingFile(n, d, values)


def load_manifest(path) -> Dataset:
    """Load and validate a dataset manifest (JSON), reading all embeddings.

    Slide paths are resolved relative to the manifest location.  Missing
    weights default to 1; weights are normalized to sum to one.  Unknown
    fields are rejected.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError(f"manifest {path} must be a JSON object")
    unknown = set(doc) - _MANIFEST_KEYS
    if unknown:
        raise InputError(f"manifest {path} has unknown fields: {sorted(unknown)}")
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise InputError(f"manifest {path}: 'name' must be a non-empty string")
    slides_doc = doc.get("slides")
    if not isinstance(slides_doc, list) or not slides_doc:
        raise InputError(f"manifest {path}: 'slides' must be a non-empty list")

    seen: set[str] = set()
    slides: list[Slide] = []
    raw_weights: list[float] = []
    dim: int | None = None
    dim_source = ""
    for idx, entry in enumerate(slides_doc):
        where = f"manifest {path}, slide #{idx}"
        if not isinstance(entry, dict):
            raise InputError(f"{where}: expected an object")
        unknown = set(entry) - _MANIFEST_SLIDE_KEYS
        if unknown:
            raise InputError(f"{where}: unknown fields {sorted(unknown)}")
        slide_id = entry.get("id")
        if not isinstance(slide_id, str) or not slide_id:
            raise InputError(f"{where}: 'id' must be a non-empty string")
        if slide_id in seen:
            raise InputError(f"manifest {path}: duplicate slide id {slide_id!r}")
        seen.add(slide_id)
        rel = entry.get("path")
        if not isinstance(rel, str) or not rel:
            raise InputError(f"{where}: 'path' must be a non-empty string")
        label = entry.get("label")
        if label is not None and not isinstance(label, str):
            raise InputError(f"{where}: 'label' must be a string when present")
        weight = entry.get("weight", 1.0)
        if not isinstance(weight, (int, float)) or isinstance(weight, bool):
            raise InputError(f"{where}: 'weight' must be a number")
        if not (weight > 0 and np.isfinite(weight)):
            raise InputError(f"{where}: 'weight' must be positive, got {weight!r}")

        file_path = path.parent / rel
        embedding = read_embedding_file(file_path)
        if dim is None:
            dim = embedding.dim
            dim_source = str(file_path)
        elif embedding.dim != dim:
            raise InputError(
                f"dimension mismatch: {file_path} has dim {embedding.dim} but "
                f"{dim_source} has dim {dim}"
            )
        slides.append(Slide(slide_id, embedding.values, label=label))
        raw_weights.append(float(weight))

    weights = np.asarray(raw_weights)
    return Dataset(name, tuple(slides), weights / weights.sum())


def subsample_tiles(s: Slide, k: int, seed: int) -> Slide:
    """Keep k tiles sampled uniformly without replacement (seeded PCG64).

    Returns the slide unchanged when it has at most k tiles; otherwise the
    selection preserves tile order and weights are re-uniformized.
    """
    if k < 1:
        raise InputError(f"subsample size must be >= 1, got {k}")
    if k >= s.n_tiles:
        return s
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(s.n_tiles, size=k, replace=False))
    return Slide(s.id, s.tiles[idx], label=s.label)


def _slide_seed(seed: int, slide_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{slide_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def subsample_dataset(D: Dataset, k: int, seed: int) -> Dataset:
    """Subsample every slide, deriving a stable per-slide seed from its id."""
    slides = tuple(subsample_tiles(s, k, _slide_seed(seed, s.id)) for s in D.slides)
    return Dataset(D.name, slides, D.slide_weights)


def _format_meta_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (dict, list)):
        return json.dumps(value, sort_keys=True, separators=(",", ":"))
    return str(value)


def _parse_optional_float(text: str):
    return None if text == "none" else float(text)


def _parse_optional_int(text: str):
    return None if text == "none" else int(text)


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError(f"expected true/false, got {text!r}")


_META_PARSERS = {
    "epsilon_inner": _parse_optional_float,
    "epsilon_outer": _parse_optional_float,
    "debiased": _parse_bool,
    "metric": str,
    "subsample": _parse_optional_int,
    "seed": _parse_optional_int,
    "version": str,
    "normalize_cost": _parse_bool,
    "labels": json.loads,
    "config": json.loads,
}


def write_distance_matrix(m: DistanceMatrix, path) -> None:
    """Persist a distance matrix as CSV with a commented metadata header."""
    meta = dict(m.metadata)
    lines = [f"# {key}={_format_meta_value(meta.pop(key, None))}" for key in _META_KEY_ORDER]
    lines.extend(f"# {key}={_format_meta_value(meta[key])}" for key in sorted(meta))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([""] + list(m.col_ids))
        for row_id, row in zip(m.row_ids, m.entries):
            writer.writerow([row_id] + [repr(float(v)) for v in row])


def read_distance_matrix(path) -> DistanceMatrix:
    """Read a distance-matrix CSV; validates shape and matrix invariants."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read distance matrix {path}: {exc}") from exc

    metadata: dict = {}
    body_at = 0
    for body_at, line in enumerate(lines):
        if not line.startswith("#"):
            break
        key, sep, raw = line[1:].strip().partition("=")
        if not sep:
            raise InputError(f"distance matrix {path}: malformed metadata line {line!r}")
        key = key.strip()
        parser = _META_PARSERS.get(key)
        try:
            metadata[key] = parser(raw) if parser else raw
        except ValueError as exc:
            raise InputError(f"distance matrix {path}: bad value for {key!r}: {exc}") from exc
    else:
        body_at = len(lines)

    rows = [row for row in csv.reader(lines[body_at:]) if row]
    if not rows:
        raise InputError(f"distance matrix {path} has no table body")
    header = rows[0]
    if len(header) < 2 or header[0] != "":
        raise InputError(
            f"distance matrix {path}: header row must start with an empty cell "
            f"followed by column ids"
        )
    col_ids = tuple(header[1:])
    row_ids = []
    entries = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(col_ids) + 1:
            raise InputError(
                f"distance matrix {path}: table row {line_no} has {len(row) - 1} "
                f"values, expected {len(col_ids)}"
            )
        row_ids.append(row[0])
        try:
            entries.append([float(cell) for cell in row[1:]])
        except ValueError as exc:
            raise InputError(f"distance matrix {path}: non-numeric cell: {exc}") from exc
    if not row_ids:
        raise InputError(f"distance matrix {path} has a header but no rows")
    try:
        return DistanceMatrix(tuple(row_ids), col_ids, np.asarray(entries), metadata)
    except InputError as exc:
        raise InputError(f"distance matrix {path}: {exc}") from exc


def read_labels(path) -> dict[str, str]:
    """Read an id-to-label CSV (header ``id,label``)."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read labels file {path}: {exc}") from exc
    rows = [row for row in csv.reader(lines) if row]
    if not rows or [cell.strip() for cell in rows[0]] != ["id", "label"]:
        raise InputError(f"labels file {path} must start with a header 'id,label'")
    labels: dict[str, str] = {}
    for row in rows[1:]:
        if len(row) != 2:
            raise InputError(f"labels file {path}: expected two columns, got {row!r}")
        if row[0] in labels:
            raise InputError(f"labels file {path}: duplicate id {row[0]!r}")
        labels[row[0]] = row[1]
    return labels


class DiskPairCache(PairValueCache):
    """Per-pair transport values on disk, keyed by content and configuration.

    Keys hash the slide id pair, the slide content digests (which reflect any
    subsampling already applied) and the solver knobs that influence the
    value.  Entries are written to a temp file and atomically renamed, so
    concurrent writers of the same key are safe: values are deterministic and
    the last rename wins with identical content.  Corrupt entries are
    recomputed and overwritten with a warning.
    """

    _SCHEMA = 1
    _FIELDS = ("linear_cost", "regularized_objective", "iterations", "converged", "cost_scale")

    def __init__(self, cache_dir):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def _key(self, a: Slide, b: Slide, cfg: SolverConfig) -> str:
        payload = json.dumps(
            {
                "schema": self._SCHEMA,
                "ids": [a.id, b.id],
                "digests": [a.content_digest, b.content_digest],
                "epsilon": cfg.epsilon,
                "tolerance": cfg.tolerance,
                "max_iterations": cfg.max_iterations,
                "debiased": cfg.debiased,
                "normalize_cost": cfg.normalize_cost,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    def _path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def get(self, a: Slide, b: Slide, cfg: SolverConfig) -> TransportResult | None:
        entry_path = self._path(self._key(a, b, cfg))
        if not entry_path.exists():
            self.misses += 1
            return None
        try:
            doc = json.loads(entry_path.read_text())
            if not isinstance(doc, dict) or any(k not in doc for k in self._FIELDS):
                raise ValueError("missing fields")
            result = TransportResult(
                linear_cost=float(doc["linear_cost"]),
                regularized_objective=float(doc["regularized_objective"]),
                iterations=int(doc["iterations"]),
                converged=bool(doc["converged"]),
                cost_scale=float(doc["cost_scale"]),
            )
        except (OSError, ValueError, TypeError) as exc:
            warnings.warn(
                f"corrupt cache entry {entry_path} ({exc}); recomputing", stacklevel=2
            )
            self.misses += 1
            return None
        if not result.converged:
            self.misses += 1
            return None
        self.hits += 1
        return result

    def put(self, a: Slide, b: Slide, cfg: SolverConfig, result: TransportResult) -> None:
        if not result.converged:
            return
        doc = {
            "linear_cost": result.linear_cost,
            "regularized_objective": result.regularized_objective,
            "iterations": result.iterations,
            "converged": result.converged,
            "cost_scale": result.cost_scale,
        }
        fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(doc, fh)
            os.replace(tmp, self._path(self._key(a, b, cfg)))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def cached_slide_cost_matrix(
    A: Dataset,
    B: Dataset,
    cfg: SolverConfig,
    cache_dir,
    workers: int = 1,
) -> DistanceMatrix:
    """slide_cost_matrix with per-pair values cached under cache_dir."""
    return slide_cost_matrix(A, B, cfg, workers, value_cache=DiskPairCache(cache_dir))
