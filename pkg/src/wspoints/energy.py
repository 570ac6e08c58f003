"""Energy-distance objectives.

Covers the general energy distance between two weighted discrete measures
and the two forms of the empirical objective driven by a distance cache:
the uniform-weight form and the reference-weighted form.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import (
    CANCELLATION_GUARD,
    DistanceCache,
    _as_matrix,
    epsilon_scale,
    regularized_sqrt,
    validate_weights,
)

__all__ = [
    "DiscreteMeasure",
    "energy_distance",
    "energy_distance_terms",
    "mc_unweighted",
    "mc_weighted",
]


class DiscreteMeasure:
    """A weighted discrete measure: ``d x K`` atoms plus a weight vector.

    Weights default to uniform; they must be nonnegative and sum to one
    within 1e-9.
    """

    def __init__(self, atoms, weights=None) -> None:
        self.atoms = _as_matrix(atoms, "atom matrix")
        if weights is None:
            weights = np.full(self.size, 1.0 / self.size)
        self.weights = validate_weights(weights, self.size)

    @property
    def d(self) -> int:
        return self.atoms.shape[0]

    @property
    def size(self) -> int:
        return self.atoms.shape[1]

    def __repr__(self) -> str:
        return f"DiscreteMeasure(d={self.d}, size={self.size})"


def _pairwise_regularized(X: np.ndarray, Y: np.ndarray, eps: float) -> np.ndarray:
    rx = np.einsum("km,km->m", X, X)
    ry = np.einsum("km,km->m", Y, Y)
    d2 = rx[:, None] + ry[None, :] - 2.0 * (X.T @ Y)
    # rescue cancellation-dominated entries (near-coincident atoms)
    close = np.argwhere(d2 <= CANCELLATION_GUARD * (rx[:, None] + ry[None, :]))
    for i, j in close:
        diff = X[:, i] - Y[:, j]
        d2[i, j] = np.dot(diff, diff)
    return regularized_sqrt(d2, eps)


def energy_distance_terms(f: DiscreteMeasure, g: DiscreteMeasure) -> tuple[float, float, float]:
    """The three expectations of the energy distance, in order
    ``(cross, within_f, within_g)``.

    Cross distances are regularized; within-measure self-pairs contribute
    their true distance of zero, so a point mass against a point mass yields
    exactly twice their separation up to ``O(eps^2)``.
    """
    if f.d != g.d:
        raise ValueError(f"dimension mismatch: measures have d={f.d} and d={g.d}")
    pooled = np.concatenate([f.atoms, g.atoms], axis=1)
    eps = epsilon_scale(pooled)

    d_fg = _pairwise_regularized(f.atoms, g.atoms, eps)
    d_ff = _pairwise_regularized(f.atoms, f.atoms, eps)
    d_gg = _pairwise_regularized(g.atoms, g.atoms, eps)
    np.fill_diagonal(d_ff, 0.0)
    np.fill_diagonal(d_gg, 0.0)

    cross = float(f.weights @ d_fg @ g.weights)
    within_f = float(f.weights @ d_ff @ f.weights)
    within_g = float(g.weights @ d_gg @ g.weights)
    return cross, within_f, within_g


def energy_distance(f: DiscreteMeasure, g: DiscreteMeasure) -> float:
    """Energy distance ``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` between two
    discrete measures.

    Symmetric in its arguments and nonnegative; tiny negatives arising from
    the regularizer are clamped to zero.
    """
    cross, within_f, within_g = energy_distance_terms(f, g)
    return max(2.0 * cross - within_f - within_g, 0.0)


def mc_unweighted(cache: DistanceCache, n: int, N: int) -> float:
    """Empirical objective with uniform reference weights.

    ``(2 / (n N)) sum_{i,m} D_xp[i,m] - (2 / n^2) sum_{i>j} D_xx[i,j]``
    evaluated from the cache.  The cache must have been built with uniform
    weights for this to be the cost the optimizer is descending.
    """
    if cache.n != n or cache.n_atoms != N:
        raise ValueError(
            f"cache shape ({cache.n}, {cache.n_atoms}) does not match (n={n}, N={N})"
        )
    attraction = 2.0 / (n * N) * math.fsum(cache.dist_xp.ravel())
    repulsion = 2.0 / (n * n) * cache.s_xx
    return attraction - repulsion


def mc_weighted(cache: DistanceCache, n: int) -> float:
    """Empirical objective with weighted reference atoms.

    ``(2 / n) s_xp_weighted - (2 / n^2) s_xx`` from the cache built with the
    run's weight vector.  With uniform weights this equals the unweighted
    objective up to rounding.
    """
    if cache.n != n:
        raise ValueError(f"cache was built for n={cache.n}, got n={n}")
    return 2.0 / n * cache.s_xp_weighted - 2.0 / (n * n) * cache.s_xx
