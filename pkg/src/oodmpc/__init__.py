"""Safe crossing control: ensemble prediction, conformal OOD detection, switching MPC.

The package covers an end-to-end pipeline for an autonomous vehicle passing a
road-crossing agent:

- data: trajectory CSV I/O, windowed training pairs, splits, and a parametric
  crossing synthesizer;
- ensemble: from-scratch MLP deep ensemble with Adam training and recursive
  rollout prediction;
- conformal: split conformal calibration of an OOD detector on ensemble
  covariance scores, plus Beta-law coverage analytics and calibration-size
  planning;
- mpc: kinematic vehicle model, reachable-disc over-approximation, and two
  sequential-convex-programming controllers (prediction-constrained and
  reachability-constrained);
- simulation: closed-loop scenario trials, batch reports with detector
  confusion matrices, and a coverage reproduction experiment;
- gmm: covariance-determinant OOD scoring for mixture-model predictors;
- cli: subcommand interface over the above with JSON configs and manifests.
"""

from .conformal import (
    CoverageDistribution,
    Detector,
    ScoreSet,
    calculate_probability,
    calibrate,
    coverage_distribution,
    detect,
    nonconformity,
    regularized_incomplete_beta,
    required_calibration_size,
)
from .data import (
    DataPair,
    DatasetSplit,
    SynthParams,
    Trajectory,
    load_trajectories,
    make_pairs,
    reflect_balance,
    save_trajectories,
    split_dataset,
    synth_generate,
)
from .ensemble import (
    Ensemble,
    MlpModel,
    PredictionStats,
    TrainConfig,
    ensemble_stats,
    init_ensemble,
    load_weights,
    rollout,
    save_weights,
    train_ensemble,
)

from .gmm import (
    GmmMode,
    GmmPrediction,
    classify_trajectory,
    gmm_score,
    load_gmm_predictions,
    save_gmm_predictions,
    synth_gmm_predictions,
)
from .mpc import (
    ControlInput,
    MpcProblem,
    MpcSolution,
    ReachableDisc,
    ScpConfig,
    VehicleState,
    braking_profile,
    reach_step,
    scp_solve,
    simulate_controls,
    solve_mpc_nominal,
    solve_mpc_reachable,
    step_dynamics,
    verify_solution,
)
from .qp import QpConfig, QpResult, solve_qp
from .simulation import (
    BatchReport,
    ConfusionMatrix,
    PedestrianBehavior,
    ScenarioConfig,
    TrialRecord,
    coverage_experiment,
    run_batch,
    run_trial,
)

__version__ = "0.1.0"
