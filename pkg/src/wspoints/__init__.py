"""Support points and weighted support points via energy-distance descent.

A reference dataset is compressed into a small set of representative
columns by minimizing the empirical energy distance between the point set
and the data.  Weighted variants target a randomly reweighted subset of the
data instead, so independent runs explore different, equally data-faithful
configurations.
"""

from .energy import DiscreteMeasure, energy_distance, energy_distance_terms, mc_unweighted, mc_weighted
from .geometry import (
    CandidateSet,
    DistanceCache,
    ReferenceSet,
    build_cache,
    epsilon_scale,
    regularized_sqrt,
    static_norms,
)
from .imaging import ImageLayout, clip_and_round_pixels, render_grid, resize_bilinear
from .measures import (
    InfeasibleCVError,
    RandomMeasure,
    RandomMeasureParams,
    calibrate_concentration,
    draw_subset_size,
    draw_symmetric_dirichlet,
    estimate_centering_gap,
    gen_rmeasure,
    load_measure,
    sample_stick_breaking,
    sample_subset,
    save_measure,
)
from .optimizer import (
    DescentError,
    OptimizerOptions,
    RunTrace,
    init_candidates,
    run_ccp,
    run_ccp_weighted,
    update_point_unweighted,
    update_point_weighted,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "CandidateSet",
    "DiscreteMeasure",
    "DistanceCache",
    "ImageLayout",
    "InfeasibleCVError",
    "DescentError",
    "OptimizerOptions",
    "RandomMeasure",
    "RandomMeasureParams",
    "ReferenceSet",
    "RunTrace",
    "build_cache",
    "calibrate_concentration",
    "clip_and_round_pixels",
    "draw_subset_size",
    "draw_symmetric_dirichlet",
    "energy_distance",
    "energy_distance_terms",
    "epsilon_scale",
    "estimate_centering_gap",
    "gen_rmeasure",
    "init_candidates",
    "load_measure",
    "mc_unweighted",
    "mc_weighted",
    "regularized_sqrt",
    "render_grid",
    "resize_bilinear",
    "run_ccp",
    "run_ccp_weighted",
    "sample_stick_breaking",
    "sample_subset",
    "save_measure",
    "static_norms",
    "update_point_unweighted",
    "update_point_weighted",
]
