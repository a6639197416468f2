"""Discrete optimal transport over explicit cost matrices.

Entropy-regularized problems are solved with log-domain Sinkhorn iterations:
dual potentials are kept in cost units and every kernel evaluation goes
through a max-subtracted log-sum-exp, so small regularization strengths on
large costs (2048-d embedding norms) do not underflow.  The entropic term
follows the convention H(G) = sum_ij G_ij (log G_ij - 1); with that sign the
objective <G, C> + eps * H(G) is convex and the matrix-scaling fixed point
applies.

An exact brute-force solver over permutations is included as a test oracle
for small uniform problems; it is deliberately capped at 8 points.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConvergenceError, InputError

# Hard cap for the factorial enumeration in exact_ot_uniform.
MAX_EXACT_POINTS = 8

# Extra Sinkhorn iterations spent annealing epsilon down from the cost
# magnitude (one halving per iteration) before iterating at the target value.
_ANNEAL_FACTOR = 0.5


def as_points(points, name: str = "points") -> np.ndarray:
    """Validate and convert a collection of vectors to a float64 (n, d) array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size > 0:
        # a single vector is accepted as a 1-point collection
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InputError(
            f"{name} must be a non-empty 2-d collection of equal-length vectors, "
            f"got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains NaN or Inf entries")
    return arr


def as_prob_vector(weights, size: int, name: str = "weights") -> np.ndarray:
    """Validate a probability vector: non-negative, sums to 1 within 1e-9."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != size:
        raise InputError(f"{name} must be a vector of length {size}, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InputError(f"{name} contains NaN or Inf entries")
    if np.any(w < 0):
        raise InputError(f"{name} has negative entries (min {w.min()})")
    total = float(w.sum())
    if abs(total - 1.0) > 1e-9:
        raise InputError(f"{name} must sum to 1 within 1e-9, got {total!r}")
    return w


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


@dataclass(frozen=True)
class DiscreteMeasure:
    """A weighted finite point set: embedding vectors plus a probability vector."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = as_points(self.points, "points")
        w = as_prob_vector(self.weights, pts.shape[0], "weights")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = as_points(points, "points")
        return cls(pts, uniform_weights(pts.shape[0]))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class CostMatrix:
    """A non-negative, finite ground-cost matrix between two point sets."""

    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise InputError(f"cost matrix must be 2-d and non-empty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InputError("cost matrix contains NaN or Inf entries")
        if np.any(arr < 0):
            raise InputError(f"cost matrix has negative entries (min {arr.min()})")
        object.__setattr__(self, "entries", arr)

    @property
    def n_rows(self) -> int:
        return self.entries.shape[0]

    @property
    def n_cols(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class Coupling:
    """A transport plan with its L1 marginal residuals."""

    matrix: np.ndarray
    row_residual: float
    col_residual: float


@dataclass(frozen=True)
class TransportResult:
    """Solver output.

    ``linear_cost`` is <G, C>; ``regularized_objective`` is
    <G, C> + eps * H(G).  For debiased results both slots hold the same
    debiased value, built from the regularized objectives of the three
    underlying solves.  ``cost_scale`` records the divisor applied to the
    cost matrix when cost normalization was requested (1.0 otherwise); all
    reported values are then in units of the scaled cost.
    """

    linear_cost: float
    regularized_objective: float
    iterations: int
    converged: bool
    coupling: Coupling | None = None
    cost_scale: float = 1.0

    @property
    def value(self) -> float:
        """The scalar consumed by downstream distance matrices."""
        return self.regularized_objective

    def require_converged(self, context: str = "transport solve") -> "TransportResult":
        if not self.converged:
            raise ConvergenceError(
                f"{context} did not reach tolerance within {self.iterations} iterations"
            )
        return self


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the entropic solver.

    ``epsilon`` applies to ground-cost (inner) solves; ``epsilon_outer`` is
    used by the hierarchy module for the solve over a distance matrix between
    collections.  ``tolerance`` bounds the max of the row/column L1 marginal
    residuals.  ``normalize_cost`` divides the cost matrix by its maximum
    before solving and reports the scale on the result.
    """

    epsilon: float = 0.25
    epsilon_outer: float = 0.25
    max_iterations: int = 1000
    tolerance: float = 1e-6
    debiased: bool = True
    keep_coupling: bool = False
    normalize_cost: bool = False

    def __post_init__(self):
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise InputError(f"epsilon must be a positive real, got {self.epsilon!r}")
        if not (self.epsilon_outer > 0 and np.isfinite(self.epsilon_outer)):
            raise InputError(f"epsilon_outer must be a positive real, got {self.epsilon_outer!r}")
        if self.max_iterations < 1:
            raise InputError(f"max_iterations must be >= 1, got {self.max_iterations!r}")
        if not (self.tolerance > 0 and np.isfinite(self.tolerance)):
            raise InputError(f"tolerance must be a positive real, got {self.tolerance!r}")

    def for_outer_level(self) -> "SolverConfig":
        """The same configuration with the outer epsilon in the driving seat."""
        return replace(self, epsilon=self.epsilon_outer)


def squared_euclidean_cost(X, Y) -> CostMatrix:
    """Pairwise squared Euclidean distances, entry (i, j) = ||X_i - Y_j||^2.

    Computed by coordinate-wise difference accumulation, so the diagonal of a
    self-cost (X vs X) is exactly zero.
    """
    xs = as_points(X, "X")
    ys = as_points(Y, "Y")
    if xs.shape[1] != ys.shape[1]:
        raise InputError(
            f"dimension mismatch: X has dim {xs.shape[1]}, Y has dim {ys.shape[1]}"
        )
    return CostMatrix(cdist(xs, ys, "sqeuclidean"))


def _logsumexp_rows(A: np.ndarray) -> np.ndarray:
    """log(sum(exp(A), axis=1)) with max subtraction; A is finite."""
    m = A.max(axis=1)
    return m + np.log(np.exp(A - m[:, None]).sum(axis=1))


def _logsumexp_cols(A: np.ndarray) -> np.ndarray:
    m = A.max(axis=0)
    return m + np.log(np.exp(A - m[None, :]).sum(axis=0))


def _scaling_loop(C, p, q, epsilon, max_iterations, tolerance, symmetric=False):
    """Log-domain Sinkhorn with epsilon annealing.

    The first iterations run at a regularization equal to the cost magnitude,
    halved once per iteration down to the target epsilon; remaining budget is
    spent iterating at the target until the marginal residuals meet the
    tolerance.  Symmetric problems (p = q, C = C^T, notably self-transport)
    use the averaged update f <- (f + T(f)) / 2 instead of alternating row
    and column scalings, which would oscillate instead of converging.
    Returns (log_plan, plan, iterations, converged, row_res, col_res); the
    plan is for the reduced (strictly positive weight) problem.
    """
    n, m = C.shape
    logp = np.log(p)
    logq = np.log(q)
    f = np.zeros(n)
    g = np.zeros(m)
    c_mag = float(np.abs(C).max()) if C.size else 0.0

    iterations = 0
    converged = False
    eps = max(c_mag, epsilon)
    while iterations < max_iterations:
        at_target = eps <= epsilon
        eps = max(eps, epsilon)
        if symmetric:
            f = 0.5 * (f + eps * (logp - _logsumexp_rows((f[None, :] - C) / eps)))
            g = f
        else:
            f = eps * (logp - _logsumexp_rows((g[None, :] - C) / eps))
            g = eps * (logq - _logsumexp_cols((f[:, None] - C) / eps))
        iterations += 1
        if at_target:
            log_plan = (f[:, None] + g[None, :] - C) / eps
            plan = np.exp(log_plan)
            row_res = float(np.abs(plan.sum(axis=1) - p).sum())
            col_res = float(np.abs(plan.sum(axis=0) - q).sum())
            if max(row_res, col_res) <= tolerance:
                converged = True
                break
        else:
            eps *= _ANNEAL_FACTOR

    log_plan = (f[:, None] + g[None, :] - C) / epsilon
    plan = np.exp(log_plan)
    row_res = float(np.abs(plan.sum(axis=1) - p).sum())
    col_res = float(np.abs(plan.sum(axis=0) - q).sum())
    return log_plan, plan, iterations, converged, row_res, col_res


def sinkhorn_raw(C: np.ndarray, p, q, cfg: SolverConfig, *, cost_scale=None) -> TransportResult:
    """Entropic transport over an arbitrary finite cost array.

    Used directly by the hierarchy module, where outer-level "costs" are
    themselves transport values and may be negative in raw (non-debiased)
    mode.  ``cost_scale`` forces a shared normalization divisor across
    related solves; when None and ``cfg.normalize_cost`` is set, the divisor
    is the max absolute entry.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.size == 0:
        raise InputError(f"cost array must be 2-d and non-empty, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise InputError("cost array contains NaN or Inf entries")
    p = as_prob_vector(p, C.shape[0], "p")
    q = as_prob_vector(q, C.shape[1], "q")

    scale = 1.0
    if cfg.normalize_cost:
        scale = float(np.abs(C).max()) if cost_scale is None else float(cost_scale)
        if scale <= 0:
            scale = 1.0
        C = C / scale

    # Zero-weight support points are unreachable by any coupling and break
    # the log-domain updates; solve the reduced problem and re-expand.
    rows = np.flatnonzero(p > 0)
    cols = np.flatnonzero(q > 0)
    reduced = rows.size < p.size or cols.size < q.size
    Cr = C[np.ix_(rows, cols)] if reduced else C
    pr = p[rows] if reduced else p
    qr = q[cols] if reduced else q

    symmetric = (
        Cr.shape[0] == Cr.shape[1]
        and np.array_equal(pr, qr)
        and np.array_equal(Cr, Cr.T)
    )
    log_plan, plan, iterations, converged, row_res, col_res = _scaling_loop(
        Cr, pr, qr, cfg.epsilon, cfg.max_iterations, cfg.tolerance, symmetric=symmetric
    )

    linear = float((plan * Cr).sum())
    entropy = float((plan * (log_plan - 1.0)).sum())
    objective = linear + cfg.epsilon * entropy

    coupling = None
    if cfg.keep_coupling:
        if reduced:
            full = np.zeros_like(C)
            full[np.ix_(rows, cols)] = plan
        else:
            full = plan
        coupling = Coupling(full, row_res, col_res)

    return TransportResult(
        linear_cost=linear,
        regularized_objective=objective,
        iterations=iterations,
        converged=converged,
        coupling=coupling,
        cost_scale=scale,
    )


def sinkhorn(C: CostMatrix, p, q, cfg: SolverConfig) -> TransportResult:
    """Entropic optimal transport between weighted point sets over C.

    Returns the linear cost <G, C>, the regularized objective
    <G, C> + eps * H(G), and (optionally) the coupling with its marginal
    residuals.  Non-convergence within ``cfg.max_iterations`` is reported via
    ``converged=False``, never as an exception.
    """
    return sinkhorn_raw(C.entries, p, q, cfg)


def debiased_transport(X: DiscreteMeasure, Y: DiscreteMeasure, cfg: SolverConfig) -> TransportResult:
    """Debiased entropic transport between two measures.

    Solves the cross problem and the two self problems on squared-Euclidean
    costs and combines their regularized objectives as
    cross - (self_x + self_y) / 2.  The returned coupling (when requested)
    is the cross-term plan.  Under cost normalization all three solves share
    one divisor so the cancellation stays meaningful.
    """
    if X.dim != Y.dim:
        raise InputError(f"dimension mismatch: X has dim {X.dim}, Y has dim {Y.dim}")
    Cxy = squared_euclidean_cost(X.points, Y.points).entries
    Cxx = squared_euclidean_cost(X.points, X.points).entries
    Cyy = squared_euclidean_cost(Y.points, Y.points).entries

    scale = None
    if cfg.normalize_cost:
        scale = max(float(Cxy.max()), float(Cxx.max()), float(Cyy.max()))
        if scale <= 0:
            scale = 1.0

    self_cfg = replace(cfg, keep_coupling=False)
    cross = sinkhorn_raw(Cxy, X.weights, Y.weights, cfg, cost_scale=scale)
    self_x = sinkhorn_raw(Cxx, X.weights, X.weights, self_cfg, cost_scale=scale)
    self_y = sinkhorn_raw(Cyy, Y.weights, Y.weights, self_cfg, cost_scale=scale)

    value = cross.regularized_objective - 0.5 * (
        self_x.regularized_objective + self_y.regularized_objective
    )
    return TransportResult(
        linear_cost=value,
        regularized_objective=value,
        iterations=cross.iterations + self_x.iterations + self_y.iterations,
        converged=cross.converged and self_x.converged and self_y.converged,
        coupling=cross.coupling,
        cost_scale=cross.cost_scale,
    )


def sinkhorn_divergence(X: DiscreteMeasure, Y: DiscreteMeasure, cfg: SolverConfig) -> float:
    """Debiased transport value: OT(X, Y) - (OT(X, X) + OT(Y, Y)) / 2.

    Zero iff the measures coincide, symmetric, and non-negative up to solver
    tolerance.  Raises ConvergenceError if any of the three solves fails to
    converge, since a bare float cannot carry the flag.
    """
    res = debiased_transport(X, Y, replace(cfg, keep_coupling=False))
    res.require_converged("sinkhorn divergence")
    return res.regularized_objective


def exact_ot_uniform(C: CostMatrix) -> TransportResult:
    """Exact OT for uniform marginals by enumeration over permutations.

    A test oracle, not a production solver: requires a square cost matrix
    with at most MAX_EXACT_POINTS rows.  Ties are broken by the first
    permutation in lexicographic enumeration order.  The returned coupling
    is the permutation matrix scaled by 1/n; the regularized objective
    equals the linear cost (no entropy term).
    """
    n, m = C.n_rows, C.n_cols
    if n != m:
        raise InputError(f"exact solver requires a square cost matrix, got {n}x{m}")
    if n > MAX_EXACT_POINTS:
        raise InputError(
            f"exact solver enumerates n! permutations and is capped at "
            f"n={MAX_EXACT_POINTS}, got n={n}"
        )
    rows = C.entries.tolist()
    best_total = None
    best_perm = None
    for perm in itertools.permutations(range(n)):
        total = 0.0
        for i, j in enumerate(perm):
            total += rows[i][j]
        if best_total is None or total < best_total:
            best_total = total
            best_perm = perm

    plan = np.zeros((n, n))
    plan[np.arange(n), best_perm] = 1.0 / n
    value = best_total / n
    return TransportResult(
        linear_cost=value,
        regularized_objective=value,
        iterations=0,
        converged=True,
        coupling=Coupling(plan, 0.0, 0.0),
    )
