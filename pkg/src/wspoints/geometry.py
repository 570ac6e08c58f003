"""Matrix data model and cached pairwise-distance machinery.

Data is column-oriented throughout: a reference set is a ``d x N`` matrix
whose columns are atoms, a candidate set is a ``d x n`` matrix whose columns
are the points being optimized.  Distance matrices between the two are built
from inner products via the identity ``|x - y|^2 = |x|^2 + |y|^2 - 2 x.y``
and passed through a smooth regularizer so that coincident points never
produce zero denominators downstream.

Determinism contract: every distance entry is computed from the two column
vectors it relates, with a fixed ascending accumulation order, and the scalar
sums use exact (correctly rounded) summation.  As a consequence cache
construction is bitwise independent of the thread count and the weighted
objective is exactly invariant under column permutations.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

__all__ = [
    "ReferenceSet",
    "CandidateSet",
    "DistanceCache",
    "static_norms",
    "regularized_sqrt",
    "epsilon_scale",
    "build_cache",
]

SQRT_MACHINE_EPS = float(np.sqrt(np.finfo(np.float64).eps))
EPSILON_FLOOR = 1e-30
WEIGHT_SUM_TOL = 1e-9
# below this fraction of the squared-norm scale, the inner-product expansion
# of a squared distance has lost too many digits to cancellation
CANCELLATION_GUARD = 1e-6


def _as_matrix(data, name: str) -> np.ndarray:
    """Validate and copy input into a C-contiguous float64 matrix."""
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be nonempty, got shape {arr.shape}")
    finite = np.isfinite(arr)
    if not finite.all():
        k, m = np.argwhere(~finite)[0]
        raise ValueError(
            f"{name} has a non-finite entry at row {k}, column {m}: {arr[k, m]!r}"
        )
    return arr


def static_norms(data: np.ndarray) -> np.ndarray:
    """Squared Euclidean norm of every column of a reference matrix.

    Computed once per dataset and reused across all iterations.  Each norm is
    accumulated over rows in ascending index order, independently per column.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"matrix must be nonempty and 2-dimensional, got shape {arr.shape}")
    finite = np.isfinite(arr)
    if not finite.all():
        k, m = np.argwhere(~finite)[0]
        raise ValueError(
            f"matrix has a non-finite entry at row {k}, column {m}: {arr[k, m]!r}"
        )
    return np.einsum("km,km->m", arr, arr)


class ReferenceSet:
    """A ``d x N`` data matrix whose columns are atoms, plus cached norms.

    The matrix is copied on construction and frozen; instances are safe to
    share across threads.
    """

    def __init__(self, data) -> None:
        self.data = _as_matrix(data, "reference matrix")
        self.static_norms = static_norms(self.data)
        self.data.flags.writeable = False
        self.static_norms.flags.writeable = False

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.data.shape[1]

    def __repr__(self) -> str:
        return f"ReferenceSet(d={self.d}, n_atoms={self.n_atoms})"


class CandidateSet:
    """A ``d x n`` matrix whose columns are the points being optimized."""

    def __init__(self, points) -> None:
        self.points = _as_matrix(points, "candidate matrix")

    @property
    def d(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[1]

    def __repr__(self) -> str:
        return f"CandidateSet(d={self.d}, n={self.n})"


def regularized_sqrt(d2, epsilon: float):
    """Smooth regularized norm ``sqrt(max(d2, 0) + epsilon^2)``.

    Accepts scalars or arrays.  Negative inputs (floating-point cancellation
    noise from the inner-product expansion) are clamped to zero, so the
    result is monotone in ``d2`` and never below ``epsilon``.
    """
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return np.sqrt(np.maximum(d2, 0.0) + epsilon * epsilon)


def _rms_column_norm(matrix: np.ndarray) -> float:
    # Exact summation keeps the scale (hence epsilon) invariant under
    # column permutations of the input.
    total = math.fsum(np.square(matrix, dtype=np.float64).ravel())
    return math.sqrt(total / matrix.shape[1])


def epsilon_scale(candidates: np.ndarray, fallback: np.ndarray | None = None) -> float:
    """Regularization epsilon scaled to the working configuration.

    ``sqrt(machine eps)`` times the RMS column norm of ``candidates``; if that
    norm is zero the RMS column norm of ``fallback`` is used, and if both are
    zero the scale defaults to 1.  Floored at 1e-30.
    """
    s = _rms_column_norm(candidates)
    if s == 0.0 and fallback is not None:
        s = _rms_column_norm(fallback)
    if s == 0.0:
        s = 1.0
    return max(SQRT_MACHINE_EPS * s, EPSILON_FLOOR)


@dataclass(frozen=True)
class DistanceCache:
    """Per-iteration distance cache shared by cost evaluation and updates.

    ``dist_xx`` is exactly symmetric (each unordered pair is computed once)
    and its diagonal stores ``epsilon``; updates never read the diagonal.
    """

    gram_xp: np.ndarray
    gram_xx: np.ndarray
    dist_xp: np.ndarray
    dist_xx: np.ndarray
    r_x: np.ndarray
    s_xp_weighted: float
    s_xx: float
    epsilon: float

    @property
    def n(self) -> int:
        return self.dist_xp.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.dist_xp.shape[1]


def validate_weights(w, n_atoms: int) -> np.ndarray:
    """Check a weight vector: length, nonnegativity, unit sum within 1e-9."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != n_atoms:
        raise ValueError(
            f"weight vector has length {w.shape[0] if w.ndim == 1 else w.shape}, "
            f"expected {n_atoms}"
        )
    if not np.all(np.isfinite(w)):
        raise ValueError("weight vector has a non-finite entry")
    if np.any(w < 0.0):
        raise ValueError("weight vector has a negative entry")
    total = math.fsum(w)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"weights must sum to 1 within {WEIGHT_SUM_TOL}, got {total!r}")
    return w


def map_columns(fn, n: int, threads: int) -> None:
    """Run ``fn(i)`` for every column index, optionally across threads.

    Each call writes a disjoint output slice; the per-column computation is
    identical regardless of thread count, so results are bitwise stable.
    """
    if threads <= 1:
        for i in range(n):
            fn(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            # list() propagates worker exceptions
            list(pool.map(fn, range(n)))


def build_cache(A: CandidateSet, ref: ReferenceSet, w, threads: int = 1) -> DistanceCache:
    """Build the distance cache for one iterate.

    Computes the cross and within inner-product matrices, the regularized
    distance matrices derived from them, and the two partial sums feeding the
    weighted objective: ``s_xp_weighted = sum_i sum_m w_m D_xp[i, m]`` and
    ``s_xx = sum_{i>j} D_xx[i, j]``.

    ``w`` must have one entry per reference atom, be nonnegative and sum
    to one within 1e-9.
    """
    if A.d != ref.d:
        raise ValueError(f"dimension mismatch: candidates have d={A.d}, reference d={ref.d}")
    w = validate_weights(w, ref.n_atoms)

    pts = A.points
    P = ref.data
    r_p = ref.static_norms
    n = A.n
    N = ref.n_atoms

    eps = epsilon_scale(pts, P)
    eps2 = eps * eps

    r_x = np.empty(n, dtype=np.float64)
    gram_xp = np.empty((n, N), dtype=np.float64)
    dist_xp = np.empty((n, N), dtype=np.float64)
    gram_xx = np.empty((n, n), dtype=np.float64)
    dist_xx = np.empty((n, n), dtype=np.float64)

    with threadpool_limits(limits=1):
        def cross_row(i: int) -> None:
            x = pts[:, i]
            r_x[i] = np.dot(x, x)
            g = np.einsum("k,km->m", x, P)
            gram_xp[i, :] = g
            d2 = r_x[i] + r_p - 2.0 * g
            # The expansion cancels catastrophically for near-coincident
            # pairs; recompute those few entries from the column difference
            # so every distance is accurate in relative terms.
            close = np.nonzero(d2 <= CANCELLATION_GUARD * (r_x[i] + r_p))[0]
            for m in close:
                diff = x - P[:, m]
                d2[m] = np.dot(diff, diff)
            dist_xp[i, :] = np.sqrt(np.maximum(d2, 0.0) + eps2)

        map_columns(cross_row, n, threads)

        def pair_row(i: int) -> None:
            gram_xx[i, i] = r_x[i]
            x = pts[:, i]
            for j in range(i + 1, n):
                g = np.dot(x, pts[:, j])
                gram_xx[i, j] = g
                d2 = r_x[i] + r_x[j] - 2.0 * g
                if d2 <= CANCELLATION_GUARD * (r_x[i] + r_x[j]):
                    diff = x - pts[:, j]
                    d2 = np.dot(diff, diff)
                dist_xx[i, j] = math.sqrt(max(d2, 0.0) + eps2)

        map_columns(pair_row, n, threads)

    iu = np.triu_indices(n, k=1)
    gram_xx[(iu[1], iu[0])] = gram_xx[iu]
    dist_xx[(iu[1], iu[0])] = dist_xx[iu]
    np.fill_diagonal(dist_xx, eps)

    # Exact sums: invariant under any permutation of the underlying pairs.
    s_xx = math.fsum(dist_xx[iu]) if n > 1 else 0.0
    s_xp_weighted = math.fsum((dist_xp * w).ravel())

    for arr in (gram_xp, gram_xx, dist_xp, dist_xx, r_x):
        arr.flags.writeable = False

    return DistanceCache(
        gram_xp=gram_xp,
        gram_xx=gram_xx,
        dist_xp=dist_xp,
        dist_xx=dist_xx,
        r_x=r_x,
        s_xp_weighted=s_xp_weighted,
        s_xx=s_xx,
        epsilon=eps,
    )
