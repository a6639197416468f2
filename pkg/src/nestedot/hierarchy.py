"""Two-level transport distances over nested collections of embeddings.

A Slide is a weighted set of tile embeddings; a Dataset is a weighted set of
slides.  Slide-to-slide distances are entropic transport values on the
squared-Euclidean tile cost; collecting them for all pairs gives the ground
cost of the outer dataset-to-dataset problem.  In debiased mode (the
default) both levels subtract their self-transport terms, which makes the
resulting matrices symmetric with a zero diagonal.

Pairwise computations are independent and can be spread over a thread pool;
results are assembled by index, so worker count never changes the output.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Any, Callable

import numpy as np

from . import core
from .core import Coupling, DiscreteMeasure, SolverConfig, TransportResult
from .errors import BudgetError, ConvergenceError, InputError
from .version import VERSION

# Refuse to materialize a pooled (flat) cost matrix bigger than this many
# bytes unless the caller raises the budget explicitly.
DEFAULT_MEMORY_BUDGET = 4 * 1024**3

SYMMETRY_TOL = 1e-8
DEBIASED_FLOOR = -1e-8


@dataclass(frozen=True)
class Slide:
    """One collection of tile embeddings with per-tile weights."""

    id: str
    tiles: np.ndarray
    label: str | None = None
    tile_weights: np.ndarray | None = None

    def __post_init__(self):
        if not self.id:
            raise InputError("slide id must be a non-empty string")
        tiles = core.as_points(self.tiles, f"tiles of slide {self.id!r}")
        if self.tile_weights is None:
            weights = core.uniform_weights(tiles.shape[0])
        else:
            weights = core.as_prob_vector(
                self.tile_weights, tiles.shape[0], f"tile_weights of slide {self.id!r}"
            )
        object.__setattr__(self, "tiles", tiles)
        object.__setattr__(self, "tile_weights", weights)

    @property
    def n_tiles(self) -> int:
        return self.tiles.shape[0]

    @property
    def dim(self) -> int:
        return self.tiles.shape[1]

    def measure(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.tiles, self.tile_weights)

    @cached_property
    def content_digest(self) -> str:
        """SHA-256 over shape, tile values and weights; identifies the input data."""
        h = hashlib.sha256()
        h.update(np.asarray(self.tiles.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.tiles).tobytes())
        h.update(np.ascontiguousarray(self.tile_weights).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Dataset:
    """A named, weighted collection of slides."""

    name: str
    slides: tuple[Slide, ...]
    slide_weights: np.ndarray | None = None

    def __post_init__(self):
        slides = tuple(self.slides)
        if len(slides) < 1:
            raise InputError(f"dataset {self.name!r} must contain at least one slide")
        ids = [s.id for s in slides]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise InputError(f"dataset {self.name!r} has duplicate slide ids: {dupes}")
        dims = {s.dim for s in slides}
        if len(dims) > 1:
            raise InputError(
                f"dataset {self.name!r} mixes embedding dimensions {sorted(dims)}"
            )
        if self.slide_weights is None:
            weights = core.uniform_weights(len(slides))
        else:
            weights = core.as_prob_vector(
                self.slide_weights, len(slides), f"slide_weights of dataset {self.name!r}"
            )
        object.__setattr__(self, "slides", slides)
        object.__setattr__(self, "slide_weights", weights)

    @property
    def n_slides(self) -> int:
        return len(self.slides)

    @property
    def dim(self) -> int:
        return self.slides[0].dim

    @property
    def total_tiles(self) -> int:
        return sum(s.n_tiles for s in self.slides)

    def slide_by_id(self, slide_id: str) -> Slide:
        for s in self.slides:
            if s.id == slide_id:
                return s
        raise InputError(f"dataset {self.name!r} has no slide with id {slide_id!r}")


@dataclass(frozen=True)
class DistanceMatrix:
    """Pairwise distances between identified items, with provenance metadata."""

    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]
    entries: np.ndarray
    metadata: dict[str, Any]

    def __post_init__(self):
        row_ids = tuple(self.row_ids)
        col_ids = tuple(self.col_ids)
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape != (len(row_ids), len(col_ids)):
            raise InputError(
                f"entries shape {entries.shape} does not match "
                f"{len(row_ids)} row ids and {len(col_ids)} col ids"
            )
        if not np.all(np.isfinite(entries)):
            raise InputError("distance matrix contains NaN or Inf entries")
        debiased = bool(self.metadata.get("debiased", False))
        if debiased and entries.min() < DEBIASED_FLOOR:
            raise InputError(
                f"debiased distance matrix has entry {entries.min()} below the "
                f"{DEBIASED_FLOOR} numerical floor"
            )
        if row_ids == col_ids:
            if entries.shape[0] != entries.shape[1]:
                raise InputError("row ids equal col ids but matrix is not square")
            asym = float(np.abs(entries - entries.T).max())
            if asym > SYMMETRY_TOL:
                raise InputError(f"matrix with shared ids is asymmetric by {asym}")
            if debiased:
                diag = float(np.abs(np.diag(entries)).max())
                if diag > SYMMETRY_TOL:
                    raise InputError(f"debiased self matrix has nonzero diagonal (max {diag})")
        object.__setattr__(self, "row_ids", row_ids)
        object.__setattr__(self, "col_ids", col_ids)
        object.__setattr__(self, "entries", entries)

    @property
    def is_square(self) -> bool:
        return self.row_ids == self.col_ids


def _base_metadata(cfg: SolverConfig, metric: str) -> dict[str, Any]:
    return {
        "epsilon_inner": cfg.epsilon,
        "epsilon_outer": cfg.epsilon_outer,
        "debiased": cfg.debiased,
        "metric": metric,
        "subsample": None,
        "seed": None,
        "version": VERSION,
        "normalize_cost": cfg.normalize_cost,
    }


def _check_pair_dims(A: Dataset, B: Dataset) -> None:
    if A.dim != B.dim:
        raise InputError(
            f"datasets {A.name!r} (dim {A.dim}) and {B.name!r} (dim {B.dim}) "
            f"have mismatched embedding dimensions"
        )


def slide_distance(a: Slide, b: Slide, cfg: SolverConfig) -> TransportResult:
    """Transport distance between two slides on the squared-Euclidean tile cost.

    Raw mode solves the single cross problem; debiased mode combines it with
    the two self-transport terms, so identical slides score zero and the
    value is symmetric.
    """
    if a.dim != b.dim:
        raise InputError(
            f"slides {a.id!r} (dim {a.dim}) and {b.id!r} (dim {b.dim}) "
            f"have mismatched embedding dimensions"
        )
    if cfg.debiased:
        return core.debiased_transport(a.measure(), b.measure(), cfg)
    C = core.squared_euclidean_cost(a.tiles, b.tiles)
    return core.sinkhorn(C, a.tile_weights, b.tile_weights, cfg)


def tile_coupling(a: Slide, b: Slide, cfg: SolverConfig) -> Coupling:
    """Optimal tile-to-tile plan between two slides (n_a x n_b).

    Row i is the coupling profile of source tile i over the target tiles.
    The plan comes from the cross-term solve and is identical in raw and
    debiased modes, so the self terms are never solved here.
    """
    raw_cfg = replace(cfg, debiased=False, keep_coupling=True)
    res = slide_distance(a, b, raw_cfg)
    res.require_converged(f"tile coupling between slides {a.id!r} and {b.id!r}")
    return res.coupling


class PairValueCache:
    """Interface for memoizing pairwise slide transport values.

    Implementations store converged TransportResult scalars keyed by the
    slide pair content and solver configuration (see dataio.DiskPairCache).
    """

    def get(self, a: Slide, b: Slide, cfg: SolverConfig) -> TransportResult | None:
        raise NotImplementedError

    def put(self, a: Slide, b: Slide, cfg: SolverConfig, result: TransportResult) -> None:
        raise NotImplementedError


def _run_tasks(tasks: list[Callable[[], Any]], workers: int) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(task) for task in tasks]
        return [f.result() for f in futures]


def _self_transport(slide: Slide, cfg: SolverConfig) -> TransportResult:
    C = core.squared_euclidean_cost(slide.tiles, slide.tiles)
    res = core.sinkhorn(C, slide.tile_weights, slide.tile_weights, cfg)
    if not res.converged:
        raise ConvergenceError(
            f"self transport of slide {slide.id!r} did not converge "
            f"within {res.iterations} iterations"
        )
    return res


def slide_cost_matrix(
    A: Dataset,
    B: Dataset,
    cfg: SolverConfig,
    workers: int = 1,
    value_cache: PairValueCache | None = None,
) -> DistanceMatrix:
    """All-pairs slide distances between two datasets.

    Pairs are independent and run on a thread pool of ``workers``; output is
    bit-identical for any worker count.  When ``A is B`` only one triangle is
    solved and mirrored.  In debiased mode the per-slide self-transport terms
    are solved once and shared across pairs.  Any non-converged pair aborts
    the computation with the pair named.
    """
    _check_pair_dims(A, B)
    same = A is B
    work_cfg = replace(cfg, keep_coupling=False)

    # Per-slide self-transport memo for debiasing.  Threads may race to fill
    # an entry; the solve is deterministic so duplicated work is harmless.
    self_memo: dict[int, TransportResult] = {}

    def self_value(s: Slide) -> float:
        res = self_memo.get(id(s))
        if res is None:
            res = _self_transport(s, work_cfg)
            self_memo[id(s)] = res
        return res.regularized_objective

    def pair_result(a: Slide, b: Slide) -> TransportResult:
        if value_cache is not None:
            hit = value_cache.get(a, b, cfg)
            if hit is not None:
                return hit
        if work_cfg.debiased:
            if a is b:
                res = TransportResult(0.0, 0.0, 0, True)
            elif work_cfg.normalize_cost:
                # shared-scale debiasing cannot reuse per-slide self terms
                res = core.debiased_transport(a.measure(), b.measure(), work_cfg)
            else:
                cross = core.sinkhorn(
                    core.squared_euclidean_cost(a.tiles, b.tiles),
                    a.tile_weights,
                    b.tile_weights,
                    work_cfg,
                )
                value = cross.regularized_objective - 0.5 * (self_value(a) + self_value(b))
                res = TransportResult(value, value, cross.iterations, cross.converged)
        else:
            res = slide_distance(a, b, work_cfg)
        if not res.converged:
            raise ConvergenceError(
                f"slide pair ({a.id!r}, {b.id!r}) did not converge "
                f"within {res.iterations} iterations"
            )
        if value_cache is not None:
            value_cache.put(a, b, cfg, res)
        return res

    if same:
        pairs = [
            (i, j)
            for i in range(A.n_slides)
            for j in range(i, A.n_slides)
            if not (cfg.debiased and i == j)
        ]
    else:
        pairs = [(i, j) for i in range(A.n_slides) for j in range(B.n_slides)]

    # Without a disk cache every debiased pair needs the self terms anyway;
    # solve them up front so they parallelize too.
    if cfg.debiased and not cfg.normalize_cost and value_cache is None and pairs:
        distinct = list({id(s): s for s in (*A.slides, *B.slides)}.values())
        _run_tasks([lambda s=s: self_value(s) for s in distinct], workers)

    tasks = [lambda i=i, j=j: pair_result(A.slides[i], B.slides[j]) for (i, j) in pairs]
    results = _run_tasks(tasks, workers)

    entries = np.zeros((A.n_slides, B.n_slides))
    for (i, j), res in zip(pairs, results):
        entries[i, j] = res.value
        if same:
            entries[j, i] = res.value

    metadata = _base_metadata(cfg, "transport")
    labels = {s.id: s.label for s in (*A.slides, *B.slides) if s.label is not None}
    if labels:
        metadata["labels"] = labels
    return DistanceMatrix(
        tuple(s.id for s in A.slides),
        tuple(s.id for s in B.slides),
        entries,
        metadata,
    )


def dataset_distance(
    A: Dataset,
    B: Dataset,
    cfg: SolverConfig,
    workers: int = 1,
    value_cache: PairValueCache | None = None,
) -> TransportResult:
    """Dataset-to-dataset transport over the slide distance matrix.

    The outer solve runs at ``cfg.epsilon_outer`` with the dataset slide
    weights as marginals.  In debiased mode the inner entries are debiased
    and the outer level subtracts the self solves over the self slide-cost
    matrices of A and B.
    """
    cross = slide_cost_matrix(A, B, cfg, workers, value_cache)
    outer_cfg = cfg.for_outer_level()
    if not cfg.debiased:
        return core.sinkhorn_raw(cross.entries, A.slide_weights, B.slide_weights, outer_cfg)

    self_a = slide_cost_matrix(A, A, cfg, workers, value_cache)
    self_b = slide_cost_matrix(B, B, cfg, workers, value_cache)
    scale = None
    if cfg.normalize_cost:
        scale = max(
            float(np.abs(cross.entries).max()),
            float(np.abs(self_a.entries).max()),
            float(np.abs(self_b.entries).max()),
        )
        if scale <= 0:
            scale = 1.0
    self_cfg = replace(outer_cfg, keep_coupling=False)
    outer_ab = core.sinkhorn_raw(
        cross.entries, A.slide_weights, B.slide_weights, outer_cfg, cost_scale=scale
    )
    outer_aa = core.sinkhorn_raw(
        self_a.entries, A.slide_weights, A.slide_weights, self_cfg, cost_scale=scale
    )
    outer_bb = core.sinkhorn_raw(
        self_b.entries, B.slide_weights, B.slide_weights, self_cfg, cost_scale=scale
    )
    value = outer_ab.regularized_objective - 0.5 * (
        outer_aa.regularized_objective + outer_bb.regularized_objective
    )
    return TransportResult(
        linear_cost=value,
        regularized_objective=value,
        iterations=outer_ab.iterations + outer_aa.iterations + outer_bb.iterations,
        converged=outer_ab.converged and outer_aa.converged and outer_bb.converged,
        coupling=outer_ab.coupling,
        cost_scale=outer_ab.cost_scale,
    )


def pooled_measure(D: Dataset) -> DiscreteMeasure:
    """All tiles of a dataset as one measure, tile weight = slide weight x tile weight."""
    points = np.vstack([s.tiles for s in D.slides])
    weights = np.concatenate(
        [w * s.tile_weights for w, s in zip(D.slide_weights, D.slides)]
    )
    return DiscreteMeasure(points, weights / weights.sum())


def flat_dataset_distance(
    A: Dataset,
    B: Dataset,
    cfg: SolverConfig,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> TransportResult:
    """Non-hierarchical baseline: pool all tiles per dataset, one big solve.

    Refuses to run when the pooled cost matrix would exceed ``memory_budget``
    bytes (debiased mode also needs the two self matrices); pass a larger
    budget to override.
    """
    _check_pair_dims(A, B)
    n, m = A.total_tiles, B.total_tiles
    largest = max(n * m, n * n, m * m) if cfg.debiased else n * m
    needed = largest * 8
    if needed > memory_budget:
        raise BudgetError(
            f"flat transport between {A.name!r} and {B.name!r} needs a "
            f"{largest}-entry cost matrix ({needed} bytes), over the "
            f"{memory_budget}-byte budget; raise --memory-budget to override"
        )
    mu = pooled_measure(A)
    nu = pooled_measure(B)
    if cfg.debiased:
        return core.debiased_transport(mu, nu, cfg)
    C = core.squared_euclidean_cost(mu.points, nu.points)
    return core.sinkhorn(C, mu.weights, nu.weights, cfg)


def slide_centroid(s: Slide) -> np.ndarray:
    return s.tile_weights @ s.tiles


def centroid_distance(a: Slide, b: Slide) -> float:
    """Euclidean distance between tile-weighted mean embeddings."""
    if a.dim != b.dim:
        raise InputError(
            f"slides {a.id!r} (dim {a.dim}) and {b.id!r} (dim {b.dim}) "
            f"have mismatched embedding dimensions"
        )
    return float(np.linalg.norm(slide_centroid(a) - slide_centroid(b)))


def centroid_distance_matrix(A: Dataset, B: Dataset) -> DistanceMatrix:
    """All-pairs centroid baseline distances; the aggregation-based contrast."""
    _check_pair_dims(A, B)
    same = A is B
    centroids_a = np.stack([slide_centroid(s) for s in A.slides])
    centroids_b = centroids_a if same else np.stack([slide_centroid(s) for s in B.slides])
    diff = centroids_a[:, None, :] - centroids_b[None, :, :]
    entries = np.sqrt((diff * diff).sum(axis=2))
    if same:
        entries = np.triu(entries, 1)
        entries = entries + entries.T
    metadata = {
        "epsilon_inner": None,
        "epsilon_outer": None,
        "debiased": False,
        "metric": "centroid",
        "subsample": None,
        "seed": None,
        "version": VERSION,
    }
    labels = {s.id: s.label for s in (*A.slides, *B.slides) if s.label is not None}
    if labels:
        metadata["labels"] = labels
    return DistanceMatrix(
        tuple(s.id for s in A.slides),
        tuple(s.id for s in B.slides),
        entries,
        metadata,
    )
