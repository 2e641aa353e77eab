"""Similarity analysis between two stochastic differential systems.

Estimate conjugacy cost functionals over shared-noise ensembles, probe
the sufficient conditions (ergodic time averaging, dissipation, Lyapunov
spectra), search for the minimizing conjugating map, and verify the
stochastic maximum principle at desk scale.
"""

__version__ = "0.1.0"

from .sde import (  # noqa: F401
    TimeGrid,
    BrownianPath,
    SdeSystem,
    PathPair,
    Ensemble,
    EnsembleConfig,
    generate_brownian_path,
    simulate_pair,
    simulate_ensemble,
    ou_moments_oracle,
    pair_moments_oracle,
    linear_system,
    output_system,
)
from .mapping import (  # noqa: F401
    LinearMap,
    AffineMap,
    Tabulated1d,
    apply,
    jacobian,
    inverse_apply,
    check_homeomorphism,
    identity_map,
)
from .functional import (  # noqa: F401
    CostEstimate,
    cost_J,
    cost_J_semi,
    conjugacy_defect,
    terminal_cost_Jtilde,
    similarity_degree,
    slln_curve,
    defect_curve,
    classify_similarity,
    make_thresholds,
    SimilarityClass,
)
from .conditions import (  # noqa: F401
    dissipation_report,
    decay_rate_check,
    lyapunov_spectrum,
    asymptotic_similarity_prediction,
    assumption_probe,
    LyapunovSpectrum,
    SimilarityPrediction,
)
from .optimize import (  # noqa: F401
    optimize_K,
    OptimizeOptions,
    directional_derivative,
    solve_variational_equations,
    solve_adjoint_lsmc,
    hamiltonian,
    maximum_principle_check,
    SimilarityCost,
)
from .linearize import (  # noqa: F401
    KstarOdeProblem,
    solve_kstar_ode_1d,
    kstar_matrix_rhs,
    linearize_at_fixed_point,
    build_green_kernel,
    solve_kappa_fixed_point,
    verify_conjugacy_defect,
    HartmanGrobmanMap,
)
