"""Random reweighting of a reference set.

A run-specific random measure is built in four steps: draw a retained
subset size (binomial thinning with a minimum retention floor), sample that
many atom indices uniformly without replacement, calibrate a symmetric
Dirichlet concentration from a target coefficient of variation, and draw
the weights by gamma normalization.  Averaged over subset and weights, the
resulting measure equals the empirical distribution of the full reference
set; the CV controls how far individual draws spread around it.

All sampling takes an explicit ``numpy.random.Generator`` (or a seed) and
consumes draws in a fixed, documented order, so runs are reproducible.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .geometry import ReferenceSet

__all__ = [
    "RandomMeasureParams",
    "RandomMeasure",
    "InfeasibleCVError",
    "CenteringReport",
    "draw_subset_size",
    "sample_subset",
    "calibrate_concentration",
    "draw_symmetric_dirichlet",
    "gen_rmeasure",
    "sample_stick_breaking",
    "estimate_centering_gap",
    "save_measure",
    "load_measure",
]


class InfeasibleCVError(ValueError):
    """The target coefficient of variation cannot be realized."""


def _as_generator(rng):
    # accept seeds, Generators, or any object exposing the draw methods
    if isinstance(rng, np.random.Generator) or hasattr(rng, "uniform"):
        return rng
    return np.random.default_rng(rng)


@dataclass
class RandomMeasureParams:
    """Parameters of the subsetting-plus-Dirichlet scheme.

    ``cv`` is the target coefficient of variation of a single weight around
    its mean.  The retention probability is drawn uniformly from
    ``[theta_lo, theta_hi]`` and the retained size never drops below
    ``floor_frac`` of the dataset.  ``fixed_subset_size`` bypasses the
    random size rule (clamped into ``[2, N]``).
    """

    cv: float = 0.4
    theta_lo: float = 0.7
    theta_hi: float = 0.9
    floor_frac: float = 0.6
    fixed_subset_size: int | None = None

    def __post_init__(self) -> None:
        if not self.cv > 0.0:
            raise ValueError(f"cv must be positive, got {self.cv}")
        if not 0.0 < self.theta_lo <= self.theta_hi <= 1.0:
            raise ValueError(
                f"retention bounds must satisfy 0 < theta_lo <= theta_hi <= 1, "
                f"got ({self.theta_lo}, {self.theta_hi})"
            )
        if not 0.0 < self.floor_frac <= 1.0:
            raise ValueError(f"floor_frac must be in (0, 1], got {self.floor_frac}")
        if self.fixed_subset_size is not None and self.fixed_subset_size < 1:
            raise ValueError(f"fixed_subset_size must be positive, got {self.fixed_subset_size}")


@dataclass
class RandomMeasure:
    """A subset of atom indices with normalized random weights.

    ``indices`` are distinct and ascending; ``weights`` are positive and sum
    to one.  ``kappa`` is the calibrated total concentration and ``alpha``
    the per-component Dirichlet parameter ``kappa / n0``.
    """

    indices: np.ndarray
    weights: np.ndarray
    kappa: float
    alpha: float
    cv: float
    seed: int | None = None

    @property
    def n0(self) -> int:
        return self.indices.shape[0]


def draw_subset_size(N: int, params: RandomMeasureParams, rng) -> int:
    """Draw the retained subset size.

    Order of consumption: one uniform for the retention probability, then one
    binomial draw.  The result is ``max(ceil(floor_frac * N), S)`` with
    ``S ~ Binomial(N, theta)``, never below 2 (the weight calibration needs
    at least two atoms).  A fixed subset size, when set, is returned without
    consuming randomness.
    """
    if N < 2:
        raise ValueError(f"need at least 2 atoms to build a random measure, got N={N}")
    if params.fixed_subset_size is not None:
        return min(max(params.fixed_subset_size, 2), N)
    rng = _as_generator(rng)
    theta = rng.uniform(params.theta_lo, params.theta_hi)
    s = int(rng.binomial(N, theta))
    return max(math.ceil(params.floor_frac * N), s, 2)


def sample_subset(N: int, n0: int, rng) -> np.ndarray:
    """Sample ``n0`` distinct atom indices uniformly, returned ascending."""
    if not 2 <= n0 <= N:
        raise ValueError(f"subset size must satisfy 2 <= n0 <= N, got n0={n0}, N={N}")
    rng = _as_generator(rng)
    idx = rng.choice(N, size=n0, replace=False)
    return np.sort(idx)


def calibrate_concentration(n0: int, cv: float) -> tuple[float, float]:
    """Invert the CV identity to the total concentration.

    ``CV = sqrt((n0 - 1) / (kappa + 1))`` gives ``kappa = (n0 - 1)/CV^2 - 1``
    and ``alpha = kappa / n0``, feasible for ``0 < CV < sqrt(n0 - 1)``.
    """
    if n0 < 2:
        raise ValueError(f"calibration needs a subset of at least 2 atoms, got {n0}")
    if not cv > 0.0:
        raise ValueError(f"cv must be positive, got {cv}")
    bound = math.sqrt(n0 - 1)
    if cv >= bound:
        raise InfeasibleCVError(
            f"target CV {cv} is infeasible for subset size {n0}: "
            f"requires CV < sqrt(n0 - 1) = {bound:.6g}"
        )
    kappa = (n0 - 1) / (cv * cv) - 1.0
    return kappa, kappa / n0


def draw_symmetric_dirichlet(n0: int, alpha: float, rng) -> np.ndarray:
    """Draw exchangeable weights: ``h_j ~ Gamma(alpha, 1)`` normalized by
    their sum.

    Valid for any ``alpha > 0``.  For very small shapes individual gamma
    variates can underflow to zero; exact zeros are lifted to the smallest
    positive normal so every weight stays strictly positive, and if the
    whole vector underflows the draw is retried up to 10 times before
    failing.
    """
    if n0 < 1:
        raise ValueError(f"need at least one atom, got {n0}")
    if not alpha > 0.0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    rng = _as_generator(rng)
    tiny = np.finfo(np.float64).tiny
    for _ in range(11):
        h = rng.gamma(alpha, 1.0, size=n0)
        total = h.sum()
        if total > 0.0:
            h = np.maximum(h, tiny)
            return h / h.sum()
    raise RuntimeError(
        f"gamma sample underflowed to zero 11 times in a row "
        f"(n0={n0}, alpha={alpha}); weights cannot be normalized"
    )


def gen_rmeasure(ref: ReferenceSet, params: RandomMeasureParams, rng) -> RandomMeasure:
    """Compose the full random-measure draw for a reference set.

    RNG consumption order is fixed: retention probability, binomial size,
    subset indices, then the ``n0`` gamma variates.  Equal generator states
    therefore produce bitwise-equal measures.
    """
    rng = _as_generator(rng)
    n0 = draw_subset_size(ref.n_atoms, params, rng)
    indices = sample_subset(ref.n_atoms, n0, rng)
    kappa, alpha = calibrate_concentration(n0, params.cv)
    weights = draw_symmetric_dirichlet(n0, alpha, rng)
    return RandomMeasure(indices=indices, weights=weights, kappa=kappa, alpha=alpha, cv=params.cv)


def sample_stick_breaking(n_atoms: int, concentration: float, rng) -> np.ndarray:
    """Truncated stick-breaking weights.

    Breaks ``v_k ~ Beta(1, concentration)`` give ``w_k = v_k prod_{j<k}(1 - v_j)``
    for all but the last atom, which absorbs the remaining stick mass.
    Provided as an alternative weighting scheme for comparison runs.
    """
    if n_atoms < 1:
        raise ValueError(f"need at least one atom, got {n_atoms}")
    if not concentration > 0.0:
        raise ValueError(f"concentration must be positive, got {concentration}")
    rng = _as_generator(rng)
    w = np.empty(n_atoms, dtype=np.float64)
    if n_atoms == 1:
        w[0] = 1.0
        return w
    v = rng.beta(1.0, concentration, size=n_atoms - 1)
    stick = np.cumprod(1.0 - v)
    w[0] = v[0]
    w[1:-1] = v[1:] * stick[:-1]
    w[-1] = stick[-1]
    return w


@dataclass
class CenteringReport:
    """Monte Carlo comparison of random-measure mass against empirical mass
    for one half-space event ``{y : y[axis] <= threshold}``."""

    axis: int
    threshold: float
    empirical_mass: float
    mean_mass: float
    std_error: float
    z_score: float


def estimate_centering_gap(
    ref: ReferenceSet,
    params: RandomMeasureParams,
    n_draws: int,
    events: list[tuple[int, float]],
    rng,
) -> list[CenteringReport]:
    """Empirically verify that random measures center on the empirical
    distribution.

    For each half-space event, the mass assigned by independently drawn
    random measures is averaged and compared to the full-sample empirical
    mass; under exact centering the z-scores are standard normal.
    """
    if n_draws < 1000:
        raise ValueError(f"need at least 1000 draws for a stable estimate, got {n_draws}")
    rng = _as_generator(rng)

    axes = np.array([a for a, _ in events], dtype=np.intp)
    thresholds = np.array([t for _, t in events], dtype=np.float64)
    if axes.size and (axes.min() < 0 or axes.max() >= ref.d):
        raise ValueError(f"event axis out of range [0, {ref.d})")

    # N x E indicator of atom membership per event
    member = ref.data[axes, :].T <= thresholds[None, :]
    empirical = member.mean(axis=0)

    masses = np.empty((n_draws, len(events)), dtype=np.float64)
    for t in range(n_draws):
        m = gen_rmeasure(ref, params, rng)
        masses[t] = m.weights @ member[m.indices, :]

    mean = masses.mean(axis=0)
    se = masses.std(axis=0, ddof=1) / math.sqrt(n_draws)

    reports = []
    for e, (axis, threshold) in enumerate(events):
        gap = mean[e] - empirical[e]
        if se[e] > 0.0:
            z = gap / se[e]
        else:
            z = 0.0 if gap == 0.0 else math.copysign(math.inf, gap)
        reports.append(
            CenteringReport(
                axis=int(axis),
                threshold=float(threshold),
                empirical_mass=float(empirical[e]),
                mean_mass=float(mean[e]),
                std_error=float(se[e]),
                z_score=float(z),
            )
        )
    return reports


def save_measure(measure: RandomMeasure, path) -> None:
    """Write a measure as ``index,weight`` lines under a metadata header."""
    seed = measure.seed if measure.seed is not None else "none"
    with open(path, "w", encoding="ascii") as fh:
        fh.write(
            f"# n0={measure.n0} kappa={measure.kappa:.17g} "
            f"alpha={measure.alpha:.17g} cv={measure.cv:.17g} seed={seed}\n"
        )
        for idx, weight in zip(measure.indices, measure.weights):
            fh.write(f"{int(idx)},{weight:.17g}\n")


_HEADER_RE = re.compile(
    r"#\s*n0=(?P<n0>\d+)\s+kappa=(?P<kappa>\S+)\s+alpha=(?P<alpha>\S+)"
    r"\s+cv=(?P<cv>\S+)\s+seed=(?P<seed>\S+)\s*$"
)


def load_measure(path) -> RandomMeasure:
    """Read back a measure written by :func:`save_measure`."""
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline()
        m = _HEADER_RE.match(header.strip())
        if m is None:
            raise ValueError(f"{path}: malformed measure header: {header.strip()!r}")
        n0 = int(m.group("n0"))
        indices = np.empty(n0, dtype=np.int64)
        weights = np.empty(n0, dtype=np.float64)
        for row in range(n0):
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: expected {n0} entries, file ends after {row}")
            try:
                idx_text, weight_text = line.strip().split(",")
                indices[row] = int(idx_text)
                weights[row] = float(weight_text)
            except (ValueError, IndexError):
                raise ValueError(f"{path}: malformed entry on line {row + 2}: {line.strip()!r}") from None
        seed_text = m.group("seed")
        return RandomMeasure(
            indices=indices,
            weights=weights,
            kappa=float(m.group("kappa")),
            alpha=float(m.group("alpha")),
            cv=float(m.group("cv")),
            seed=None if seed_text == "none" else int(seed_text),
        )
