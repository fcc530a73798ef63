"""Environmental contours for joint metocean extremes.

Fits covariate-binned peaks-over-threshold marginals with conditional
extremes dependence (plus a hierarchical Weibull/log-normal alternative),
estimates direct sampling, joint exceedance, isodensity and IFORM contours,
and quantifies how well contour-based response estimates approximate the
long-term distribution of the N-year maximum structural response.
"""

__version__ = "0.1.0"

from .contours import (
    Contour,
    DirectSamplingBuilder,
    JointExceedanceBuilder,
    alpha_for_return_period,
    calibrate_enclosed_probability,
    direct_sampling_contour,
    failure_probability_mc,
    find_governing_point,
    frontier_indices,
    frontier_mask,
    iform_contour,
    isodensity_contour,
    joint_exceedance_contour,
    points_in_loops,
    radial_profile,
)
from .dependence import CEModel, fit_ce, simulate_ce
from .envsim import (
    EnvRealisation,
    HierarchicalModel,
    JointEnvModel,
    fit_hierarchical,
    model_hash,
    simulate_environment,
)
from .ingest import (
    CovariateBinning,
    SeaStateRecord,
    StormPeak,
    allocate_bins,
    decluster,
    load_csv,
)
from .marginal import (
    MarginalModel,
    bootstrap_marginal,
    fit_gp_ppc,
    fit_gp_shared,
    from_laplace,
    return_value,
    solve_return_level,
    to_laplace,
)
from .response import (
    LongTermEstimate,
    MixtureDist,
    PointMass,
    RayleighMax,
    RayleighResponse,
    SyntheticResponse,
    base_shear_like,
    contour_response_point,
    eval_synthetic,
    heave_like,
    inflation_factor,
    long_term_cdf_closed_form,
    long_term_dist,
    response_heatmap,
    short_term_dist,
    storm_max_dist,
    synthetic_response_cdf_quadrature,
)

__all__ = [name for name in dir() if not name.startswith("_")]
