"""Fixed-point column updates and the outer descent loops.

One sweep recomputes every candidate column from the same frozen iterate
(Jacobi semantics, so update order is irrelevant and columns may be updated
concurrently), then the distance cache and the objective are rebuilt.  The
loop stops when the objective change drops below the tolerance or the
iteration cap is reached.

The objective is a difference of convex terms; each sweep is a
majorize-minimize step on its regularized form, so the recorded cost
sequence is nonincreasing up to regularization noise.  An increase beyond
``DESCENT_SLACK`` indicates a bug and aborts the run.
"""

from __future__ import annotations

import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .energy import mc_weighted
from .geometry import (
    CandidateSet,
    DistanceCache,
    ReferenceSet,
    build_cache,
    map_columns,
    validate_weights,
)

__all__ = [
    "OptimizerOptions",
    "RunTrace",
    "DescentError",
    "init_candidates",
    "update_point_unweighted",
    "update_point_weighted",
    "run_ccp",
    "run_ccp_weighted",
    "INIT_UNIFORM",
    "INIT_COLUMNS",
    "STOP_CONVERGED",
    "STOP_MAX_ITER",
]

INIT_UNIFORM = "uniform-bounding-box"
INIT_COLUMNS = "sample-columns"
STOP_CONVERGED = "converged"
STOP_MAX_ITER = "max-iter"

DESCENT_SLACK = 1e-9
BBOX_DILATION = 1e-6

_INIT_ALIASES = {
    "uniform": INIT_UNIFORM,
    INIT_UNIFORM: INIT_UNIFORM,
    "columns": INIT_COLUMNS,
    INIT_COLUMNS: INIT_COLUMNS,
}


class DescentError(RuntimeError):
    """The objective increased during a sweep, violating descent."""


@dataclass
class OptimizerOptions:
    """Knobs for a CCP run.

    ``tol`` is compared against the absolute objective change per iteration;
    set ``relative_tol`` to divide the change by ``max(1, |cost|)`` first.
    ``threads`` counts worker threads for column updates and cache
    construction ("auto" uses the CPU count); results are bitwise identical
    for any value.
    """

    tol: float = 1e-5
    max_iter: int = 1000
    init_scheme: str = INIT_UNIFORM
    seed: int = 0
    threads: int | str = "auto"
    relative_tol: bool = False

    def __post_init__(self) -> None:
        if not self.tol > 0.0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")
        if self.init_scheme not in _INIT_ALIASES:
            raise ValueError(
                f"unknown init scheme {self.init_scheme!r}; "
                f"expected one of {sorted(set(_INIT_ALIASES))}"
            )
        self.init_scheme = _INIT_ALIASES[self.init_scheme]
        if isinstance(self.threads, str):
            if self.threads != "auto":
                raise ValueError(f"threads must be a positive count or 'auto', got {self.threads!r}")
        elif self.threads < 1:
            raise ValueError(f"threads must be a positive count or 'auto', got {self.threads}")


@dataclass
class RunTrace:
    """Per-run record: objective path, stop condition and timing.

    ``costs[0]`` is the objective of the initial configuration; one more
    entry follows per sweep.  ``cost_times_ms`` holds the elapsed wall time
    at which each cost was recorded.
    """

    costs: list[float]
    iterations: int
    stop_reason: str
    wall_ms: float
    cost_times_ms: list[float] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    bbox_ok: bool | None = None


def resolve_threads(threads: int | str, n_columns: int) -> int:
    if threads == "auto":
        return max(1, min(n_columns, os.cpu_count() or 1))
    return max(1, int(threads))


def init_candidates(ref: ReferenceSet, n: int, scheme: str = INIT_UNIFORM, seed=0) -> CandidateSet:
    """Draw an initial ``d x n`` candidate matrix.

    ``uniform-bounding-box`` draws every coordinate independently and
    uniformly between the per-row min and max of the reference data (the
    default; avoids duplicate starting columns).  ``sample-columns`` picks
    ``n`` reference columns uniformly without replacement, falling back to
    sampling with replacement (with a warning) when ``n`` exceeds the number
    of atoms.

    ``seed`` may be an integer or a ``numpy.random.Generator``; the draw
    order is fixed, so equal seeds give bitwise-equal output.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if scheme not in _INIT_ALIASES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    scheme = _INIT_ALIASES[scheme]
    rng = np.random.default_rng(seed)

    if scheme == INIT_UNIFORM:
        lo = ref.data.min(axis=1)
        hi = ref.data.max(axis=1)
        pts = rng.uniform(lo[:, None], hi[:, None], size=(ref.d, n))
    else:
        if n <= ref.n_atoms:
            idx = rng.choice(ref.n_atoms, size=n, replace=False)
        else:
            warnings.warn(
                f"sample-columns with n={n} > N={ref.n_atoms}: sampling with replacement",
                stacklevel=2,
            )
            idx = rng.choice(ref.n_atoms, size=n, replace=True)
        pts = ref.data[:, idx]
    return CandidateSet(pts)


def _update_column_weighted(
    i: int,
    pts: np.ndarray,
    ref_data: np.ndarray,
    cache: DistanceCache,
    w: np.ndarray,
) -> np.ndarray:
    n = pts.shape[1]
    inv_xp = w / cache.dist_xp[i]
    q = inv_xp.sum()
    attract = ref_data @ inv_xp
    inv_xx = 1.0 / cache.dist_xx[i]
    inv_xx[i] = 0.0
    repulse = (pts[:, i] * inv_xx.sum() - pts @ inv_xx) / n
    return (attract + repulse) / q


def _update_column_unweighted(
    i: int,
    pts: np.ndarray,
    ref_data: np.ndarray,
    cache: DistanceCache,
) -> np.ndarray:
    n = pts.shape[1]
    N = ref_data.shape[1]
    inv_xp = 1.0 / cache.dist_xp[i]
    q = inv_xp.sum()
    attract = ref_data @ inv_xp
    inv_xx = 1.0 / cache.dist_xx[i]
    inv_xx[i] = 0.0
    repulse = (N / n) * (pts[:, i] * inv_xx.sum() - pts @ inv_xx)
    return (attract + repulse) / q


def update_point_weighted(i: int, A: CandidateSet, ref: ReferenceSet, cache: DistanceCache, w) -> np.ndarray:
    """Weighted fixed-point update of column ``i`` from the frozen iterate.

    ``x_i = (sum_m w_m y_m / D_xp[i,m] + (1/n) sum_{j!=i} (x_i - x_j) / D_xx[i,j]) / q_i``
    with ``q_i = sum_m w_m / D_xp[i,m]``.  All reads come from ``A`` and the
    cache built for it, never from already-updated columns.
    """
    if not 0 <= i < A.n:
        raise IndexError(f"column index {i} out of range for n={A.n}")
    w = validate_weights(w, ref.n_atoms)
    return _update_column_weighted(i, A.points, ref.data, cache, w)


def update_point_unweighted(i: int, A: CandidateSet, ref: ReferenceSet, cache: DistanceCache) -> np.ndarray:
    """Uniform-weight fixed-point update of column ``i``.

    Equals the weighted update at ``w = 1/N`` up to rounding; the repulsion
    carries the ``N/n`` factor because the normalizer here is the plain sum
    of inverse distances.
    """
    if not 0 <= i < A.n:
        raise IndexError(f"column index {i} out of range for n={A.n}")
    return _update_column_unweighted(i, A.points, ref.data, cache)


def _sweep_weighted(
    pts: np.ndarray,
    ref_data: np.ndarray,
    cache: DistanceCache,
    w: np.ndarray,
    threads: int,
) -> np.ndarray:
    out = np.empty_like(pts)

    with threadpool_limits(limits=1):
        def update(i: int) -> None:
            out[:, i] = _update_column_weighted(i, pts, ref_data, cache, w)

        map_columns(update, pts.shape[1], threads)
    return out


def _bbox_report(pts: np.ndarray, ref_data: np.ndarray) -> tuple[bool, str]:
    lo = ref_data.min(axis=1)
    hi = ref_data.max(axis=1)
    slack = BBOX_DILATION * float(np.linalg.norm(hi - lo))
    below = float(np.max(lo - slack - pts.min(axis=1), initial=0.0))
    above = float(np.max(pts.max(axis=1) - hi - slack, initial=0.0))
    excess = max(below, above)
    if excess <= 0.0:
        return True, "bbox-check: ok (all points inside the dilated data bounding box)"
    return False, f"bbox-check: violated, max excess {excess:.6e}"


def run_ccp_weighted(
    ref: ReferenceSet,
    n: int,
    w,
    options: OptimizerOptions | None = None,
    rng=None,
    initial: CandidateSet | None = None,
) -> tuple[CandidateSet, RunTrace]:
    """Weighted support points by cached fixed-point sweeps.

    Builds the cache for the initial configuration, then alternates parallel
    Jacobi column updates with cache and cost re-evaluation until the cost
    change drops below ``options.tol`` or ``options.max_iter`` sweeps have
    run.  Returns the final configuration and the run trace.

    ``rng`` overrides ``options.seed`` as the source for initialization
    draws; ``initial`` skips initialization entirely.  Whether the final
    points lie inside the (slightly dilated) bounding box of the reference
    atoms is reported in the trace, never enforced.
    """
    options = options if options is not None else OptimizerOptions()
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    w = validate_weights(w, ref.n_atoms)
    threads = resolve_threads(options.threads, n)

    notes: list[str] = []
    if initial is not None:
        if initial.d != ref.d or initial.n != n:
            raise ValueError(
                f"initial configuration has shape ({initial.d}, {initial.n}), "
                f"expected ({ref.d}, {n})"
            )
        A = initial
    else:
        if options.init_scheme == INIT_COLUMNS and n > ref.n_atoms:
            notes.append(f"init: n={n} > N={ref.n_atoms}, sampled columns with replacement")
        source = rng if rng is not None else options.seed
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            A = init_candidates(ref, n, options.init_scheme, source)

    start = time.perf_counter()

    def elapsed_ms() -> float:
        return (time.perf_counter() - start) * 1e3

    cache = build_cache(A, ref, w, threads)
    cost = mc_weighted(cache, n)
    costs = [cost]
    cost_times = [elapsed_ms()]

    stop_reason = STOP_MAX_ITER
    for _ in range(options.max_iter):
        new_pts = _sweep_weighted(A.points, ref.data, cache, w, threads)
        A = CandidateSet(new_pts)
        cache = build_cache(A, ref, w, threads)
        cost = mc_weighted(cache, n)
        costs.append(cost)
        cost_times.append(elapsed_ms())

        prev = costs[-2]
        if cost > prev + DESCENT_SLACK:
            raise DescentError(
                f"objective increased from {prev!r} to {cost!r} at iteration "
                f"{len(costs) - 1}; descent property violated"
            )
        delta = abs(cost - prev)
        threshold = options.tol * max(1.0, abs(cost)) if options.relative_tol else options.tol
        if delta < threshold:
            stop_reason = STOP_CONVERGED
            break

    bbox_ok, bbox_note = _bbox_report(A.points, ref.data)
    notes.append(bbox_note)

    trace = RunTrace(
        costs=costs,
        iterations=len(costs) - 1,
        stop_reason=stop_reason,
        wall_ms=elapsed_ms(),
        cost_times_ms=cost_times,
        notes=notes,
        bbox_ok=bbox_ok,
    )
    return A, trace


def run_ccp(
    ref: ReferenceSet,
    n: int,
    options: OptimizerOptions | None = None,
    rng=None,
    initial: CandidateSet | None = None,
) -> tuple[CandidateSet, RunTrace]:
    """Support points with uniform reference weights.

    Thin wrapper over the weighted run at ``w = (1/N, ..., 1/N)``; given the
    same seed and options both produce bitwise-identical results.
    """
    w = np.full(ref.n_atoms, 1.0 / ref.n_atoms)
    return run_ccp_weighted(ref, n, w, options, rng=rng, initial=initial)
