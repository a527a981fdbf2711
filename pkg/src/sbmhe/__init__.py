"""Moving horizon estimation with irregular, infrequent measurements."""
from .detectability import (
    DetectabilityVerdict,
    SampleTimes,
    SpectralSplit,
    falsify_output_dominance,
    is_sample_observable,
    numerical_rank,
    rolling_window_check,
    sampled_obs_matrix,
    spectral_split,
    unstable_check,
)
from .lm import DivergenceError, LMSettings, levenberg_marquardt
from .mhe import (
    EstimatorConfig,
    EstimatorState,
    IossCertificate,
    MheProblem,
    MheSolution,
    UnsatisfiableHorizonError,
    assemble_residuals,
    cost,
    current_problem,
    error_bound,
    init_estimator,
    make_problem,
    min_horizon,
    solve,
    step,
)
from .model import (
    GapSequence,
    LinearSystem,
    ModelDomainError,
    NonlinearSystem,
    SamplingSchedule,
    delta,
    horizon,
    k_set_times,
    linear_as_nonlinear,
)
from .sim import (
    ExperimentResult,
    Scenario,
    ScheduleSpec,
    Trajectory,
    draw_disturbances,
    rmse,
    run_estimator,
    run_experiment,
    simulate,
    sweep_schedules,
)
from .thyroid import ThyroidParams, build_thyroid, load_thyroid_params, medication_inputs

__version__ = "0.1.0"
