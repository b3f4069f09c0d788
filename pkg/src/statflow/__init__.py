"""statflow: online stochastic gradient descent through ergodic SDE simulation.

The package simulates a coupled four-component system (parameter line, state
line, tangent line sharing the state line's Brownian increments, and an
independently driven evaluation line), estimates stationary quantities with
replica-based oracles, and ships diagnostics for contraction, ergodicity,
moment growth, fluctuation integrals, stopping-time cycles, and
Poisson-equation solutions.
"""

from statflow.models import (
    SdeModel,
    ObjectiveSpec,
    AssumptionReport,
    InvalidParameterError,
    make_ou_model,
    make_tanh_model,
    coordinate_objective,
    mean_objective,
    check_dissipativity,
    check_lipschitz_and_growth,
    jacobian_consistency,
    objective_consistency,
)
from statflow.integrator import (
    AlgorithmState,
    NoisePair,
    NoiseStream,
    DivergenceError,
    FrozenPath,
    em_step,
    simulate_frozen,
    make_noise_streams,
)
from statflow.schedule import Schedule, ScheduleReport, validate_schedule
from statflow.algorithm import (
    RunConfig,
    RunLog,
    CheckpointSeries,
    EnsembleResult,
    gradient_estimate,
    run_forward_prop,
    run_ensemble,
)
from statflow.oracle import (
    ErgodicEstimate,
    GradientEstimate,
    ObjectiveEstimate,
    OracleCache,
    stationary_expectation,
    objective_value,
    gradient_fd,
    gradient_frozen_sensitivity,
    frozen_theta_values,
)
from statflow.diagnostics import (
    FluctuationSample,
    CycleRecord,
    PoissonEstimate,
    DecayFit,
    MomentReport,
    WindowIntegral,
    CacheMissError,
    SparseWindowError,
    InsufficientSignalError,
    EstimationFailureError,
    fluctuation_terms,
    reconstruction_residual,
    windowed_fluctuation_integral,
    dyadic_windows,
    detect_cycles,
    mu_for_kappa,
    moment_tracker,
    decay_rate_fit,
    estimate_poisson_solution,
)
from statflow.config import ConfigError, load_config, config_text_hash

__version__ = "0.1.0"
