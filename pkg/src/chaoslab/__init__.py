"""Desk-scale laboratory for mean-field interacting particle systems and
their McKean-Vlasov limits: exact discrete transport distances, entropy
estimation, synchronously coupled simulations, spectral SPDE systems,
change-of-measure diagnostics, and config-driven convergence studies."""

__version__ = "0.1.0"

from .changemeasure import (
    GirsanovWeight,
    dual_entropy_bound_check,
    exp_lln_moment,
    girsanov_weight,
    girsanov_weights_batch,
    harnack_check,
)
from .entropy import EntropyEstimate, pinsker_check, relative_entropy_gaussian, relative_entropy_knn
from .errors import CheckFailure, ConfigError, NumericalAbort, SolverCapError
from .measures import (
    CostFunction,
    EmpiricalMeasure,
    TransportPlan,
    binned_densities,
    joint_product_transport,
    product_transport,
    transport_cost,
    w_phi,
    wasserstein_p,
    weighted_variation,
)
from .meanfield import (
    CoupledRun,
    Ensemble,
    InitialCoupling,
    MeasureFlow,
    comonotone_coupling,
    identical_coupling,
    independent_coupling,
    run_coupled,
    shift_coupling,
    simulate_ips,
    solve_mkv_picard,
)
from .sde import (
    ModelConstants,
    ModelSpec,
    ModulusFunction,
    NoiseDriver,
    TimeGrid,
    euler_maruyama,
    make_modulus,
    validate_model,
    validate_modulus,
)
from .spde import (
    SpectralField,
    SpectralModel,
    build_spectrum,
    kernel_b1_spectral,
    mkv_spde_flow,
    run_coupled_spde,
    simulate_spde_free,
    simulate_spde_ips,
)
from .study import RateFit, StudyConfig, StudyResult, StudyRow, rate_fit, run_study
