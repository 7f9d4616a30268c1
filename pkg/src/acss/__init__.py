"""Goodness-of-fit testing by approximate co-sufficient sampling with constraints or an l1 penalty."""

from .constraints import (
    DEFAULT_TOLERANCES,
    ConstraintSet,
    SsospCertificate,
    Tolerances,
    active_set,
    builtin_constraints,
    check_ssosp_constrained,
    check_ssosp_penalized,
    ortho_complement_basis,
)
from .density import ConditioningState, log_density_ratio, log_unnorm_density, membership_check
from .errors import (
    AcssError,
    DomainError,
    InfeasiblePoint,
    InfeasibleProblem,
    InvalidArgument,
    ParseError,
    TuningFailed,
    Unsupported,
)
from .estimation import (
    EstimationProblem,
    FitResult,
    SolverOptions,
    fit,
    solve_activeset_qp,
    solve_elastic_net_cd,
    solve_pava,
)
from .experiments import ExperimentConfig, emit_histogram_data, run_experiment, run_trial
from .inference import (
    SparsityBasis,
    TestStatistic,
    compute_pvalue,
    evaluate_many,
    evaluate_statistic,
    h_v_bound,
    h_v_mc,
    v_sparsity,
)
from .models import GaussianLinear, GaussianMixture2, Perturbation, draw_perturbation, loss, simulate
from .samplers import (
    CopySet,
    ProposalSpec,
    chain_length,
    hub_and_spoke,
    mh_step,
    sample_exact_gaussian,
    tune_proposal_size,
)

__version__ = "0.1.0"
