"""Head-neck postural stabilization pipeline.

Closed-loop simulation of a two-link head-neck system riding on a laterally
perturbed base, stabilized by a collocation-horizon model predictive
controller, with posture-drift integrators, multi-objective weight tuning
and random-forest sensitivity analysis on top.
"""

__version__ = "0.1.0"

from .plant import (
    PlantParams,
    PlantState,
    JointTorques,
    HeadKinematics,
    forward_dynamics,
    step,
    head_kinematics,
    gravity_compensation,
)
from .perturbation import MultisineSpec, BaseTrajectory, generate_multisine, step_pulse
from .sensory import (
    SensoryFeedback,
    IntegratorConfig,
    IntegratorState,
    sense,
    integrator_update,
    preset_configuration,
)
from .mpc import (
    HorizonGrid,
    WeightVector,
    MpcConfig,
    MpcSolution,
    build_horizon,
    predict,
    cost,
    solve,
    controller_step,
)
from .harness import SimulationLog, run_closed_loop, steady_state_report
from .analysis import (
    FrfEstimate,
    FevalVector,
    ReferenceSet,
    estimate_frf,
    time_domain_rmse,
    evaluate_fevals,
)
from .tuning import GaConfig, ParetoArchive, EvaluationSample, dominates, run_ga, select_knee
from .forest import ForestConfig, ImportanceMatrix, fit_forest, importance, importance_matrix
