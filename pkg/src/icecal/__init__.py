"""icecal: flowline ice-sheet calibration toolkit.

Shallow-shelf flowline simulator, Gaussian-process field generators,
ensemble Kalman filtering (state and state-augmented), amortized neural
posterior inference, and an observing-system simulation harness.
"""

from icecal.ssa import (
    Grid,
    PhysicalConstants,
    IceState,
    BedProfile,
    FrictionProfile,
    surface_elevation,
    thickness_from_surface,
    grounding_line_index,
    solve_tridiagonal,
    solve_velocity,
    advance_thickness,
    step_year,
    spin_up,
    area_above_flotation,
)
from icecal.fields import (
    CovarianceSpec,
    BasisSystem,
    FieldParams,
    covariance_matrix,
    sample_gp_unconditional,
    sample_gp_conditional,
    gp_posterior_moments,
    local_polynomial_trend,
    basis_matrix,
    project_to_basis,
    reconstruct_fields,
    synthetic_bed,
    synthetic_friction,
    synthetic_initial_state,
)
from icecal.statespace import (
    NoiseConfig,
    ObservationSet,
    Discrepancy,
    ProcessNoiseModel,
    observation_operator,
    velocity_error_sd,
    velocity_mask_pattern,
    default_missingness,
    simulate_observations,
    process_noise_covariance,
    estimate_discrepancy,
    adjust_observations,
    regrid_nearest_k,
)
from icecal.enkf import (
    FilterConfig,
    Ensemble,
    AugmentedEnsemble,
    FilterRun,
    PooledFilterResult,
    analysis_update,
    ensemble_summary,
    init_state_ensemble,
    init_augmented_ensemble,
    forecast,
    analysis,
    run_enkf,
    run_augmented_enkf,
    pooled_posterior_filtering,
)
from icecal.npi import (
    ChannelStats,
    StandardizationStats,
    TrainingScenario,
    TrainingSet,
    SampleRecord,
    PosteriorParams,
    NetworkConfig,
    PosteriorNetwork,
    TrainingReport,
    PosteriorSampleSet,
    standardize,
    destandardize,
    standardize_coefficients,
    destandardize_coefficients,
    observation_tensor,
    shelf_thickness_fill,
    generate_training_data,
    regenerate_sample,
    posterior_param_count,
    assemble_cholesky,
    precision_logdet,
    gaussian_nll,
    nll_loss,
    train,
    infer_posterior,
    sample_posterior,
    calibration_ranks,
    save_checkpoint,
    load_checkpoint,
)

__version__ = "0.1.0"
