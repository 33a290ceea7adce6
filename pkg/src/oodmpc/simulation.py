"""Closed-loop road-crossing scenario with a runtime OOD monitor.

A vehicle drives along a road while a pedestrian crosses it.  Every
replan period the vehicle observes the pedestrian, scores the newest
observation window with the ensemble nonconformity, and (in the
adaptive mode) picks a planner: the nominal MPC tracks predicted agent
points, the fallback MPC treats the pedestrian as a growing
velocity-bounded disc.  Ablation modes pin the planner to one side.

The pedestrian either replays a recorded trajectory or, in the
adversarial variant, replays it until a switch step and then sprints at
maximum speed straight toward the vehicle.  Trials are deterministic
given their configuration and inputs; batches sample trial scenarios
from a seeded generator and aggregate outcomes plus the detector
confusion matrix.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .conformal import Detector, ScoreSet, detect, nonconformity
from .data import DEFAULT_SAMPLE_RATE_HZ, SynthParams, Trajectory, make_pairs, synth_generate
from .ensemble import Ensemble, _batch_stats, ensemble_stats, rollout
from .errors import ArgumentError, CalibrationError
from .mpc import (
    ControlInput,
    MpcProblem,
    MpcSolution,
    ReachableDisc,
    ScpConfig,
    VehicleState,
    reach_step,
    solve_mpc_nominal,
    solve_mpc_reachable,
    step_dynamics,
)
from .qp import QpConfig

MODE_SODA = "soda"
MODE_ENSEMBLES_ONLY = "ensembles_only"
MODE_REACHABLE_ONLY = "reachable_only"
MODES = (MODE_SODA, MODE_ENSEMBLES_ONLY, MODE_REACHABLE_ONLY)

OUTCOME_PASSED = "passed_safely"
OUTCOME_STOPPED = "stopped_safely"
OUTCOME_COLLISION = "collision"

PLANNER_NOMINAL = "nominal"
PLANNER_REACHABLE = "reachable"

COLLISION_DISTANCE = 2.0


@dataclass(frozen=True)
class ScenarioConfig:
    """Scenario geometry, timing, and controller selection."""

    steps: int = 150
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    replan_period: int = 5
    fraud_switch_time_s: float = 1.3
    ped_v_max: float = 4.5
    ped_radius: float = 0.5
    offset_mean: float = 40.0
    offset_std: float = 2.5
    mode: str = MODE_SODA
    window: int = 14
    goal_distance: float = 70.0
    goal_speed: float = 8.0
    start: VehicleState = field(default_factory=lambda: VehicleState(0.0, -1.8, 0.0, 10.0, 0.0))
    # Closed-loop replans run every 0.2 s, so each solve gets a small
    # budget and relaxed subproblem tolerances; plan quality is guarded
    # by the planner's exact-merit acceptance, not subproblem accuracy.
    scp: ScpConfig = field(
        default_factory=lambda: ScpConfig(
            max_iterations=10,
            qp=QpConfig(
                max_iterations=1200,
                coarse_eps_abs=1e-4,
                coarse_eps_rel=1e-4,
                eps_abs=1e-6,
                eps_rel=1e-6,
            ),
        )
    )

    def __post_init__(self):
        bad = self.violations()
        if bad:
            raise ArgumentError("; ".join(bad))

    def violations(self) -> list[str]:
        out = []
        if self.steps < 1:
            out.append("steps must be at least 1")
        if self.sample_rate_hz <= 0:
            out.append("sample_rate_hz must be positive")
        if self.replan_period < 1:
            out.append("replan_period must be at least 1")
        if self.mode not in MODES:
            out.append(f"mode must be one of {MODES}")
        if min(self.ped_v_max, self.ped_radius, self.offset_std, self.goal_distance) < 0:
            out.append("physical parameters must be non-negative")
        if self.fraud_switch_time_s < 0:
            out.append("fraud_switch_time_s must be non-negative")
        if self.window < 1:
            out.append("window must be at least 1")
        return out

    @property
    def h(self) -> float:
        return 1.0 / self.sample_rate_hz

    @property
    def switch_step(self) -> int:
        return int(math.floor(self.fraud_switch_time_s * self.sample_rate_hz))

    def goal_state(self) -> VehicleState:
        return VehicleState(
            x=self.start.x + self.goal_distance,
            y=self.start.y,
            theta=0.0,
            V=self.goal_speed,
            kappa=0.0,
        )


@dataclass(frozen=True)
class PedestrianBehavior:
    """Replayed crossing, optionally turning adversarial at switch_step."""

    source: Trajectory
    offset_x: float
    switch_step: int | None = None

    @property
    def is_fraud(self) -> bool:
        return self.switch_step is not None

    def start_position(self) -> np.ndarray:
        return self.source.positions[0] + np.array([self.offset_x, 0.0])


def pedestrian_position(
    b: PedestrianBehavior,
    t: int,
    vehicle_pos: np.ndarray,
    previous: np.ndarray | None,
    v_max: float,
    h: float,
) -> np.ndarray:
    """Pedestrian position at step t.

    The nominal variant replays the source trajectory (shifted by the
    horizontal offset).  The adversarial variant, from switch_step on,
    advances exactly v_max*h from its previous position straight toward
    the vehicle, so `previous` must be supplied for those steps.
    """
    if t < 0 or t >= len(b.source.positions):
        raise ArgumentError(f"step {t} outside the source trajectory")
    if b.switch_step is None or t < b.switch_step:
        return b.source.positions[t] + np.array([b.offset_x, 0.0])
    if previous is None:
        raise ArgumentError("previous position required for adversarial steps")
    gap = np.asarray(vehicle_pos, dtype=float) - previous
    norm = float(np.linalg.norm(gap))
    if norm < 1e-12:
        return previous.copy()
    return previous + (v_max * h / norm) * gap


@dataclass(frozen=True)
class Evaluation:
    """One detector evaluation at a replan step."""

    step: int
    score: float
    flagged: bool


@dataclass(frozen=True)
class TrialRecord:
    """Everything observable about one closed-loop trial."""

    vehicle_states: np.ndarray
    pedestrian_positions: np.ndarray
    evaluations: tuple[Evaluation, ...]
    mode_timeline: tuple[tuple[int, str], ...]
    fallback_steps: tuple[int, ...]
    min_distance: float
    outcome: str
    behavior: PedestrianBehavior

    def first_flag_after(self, step: int) -> int | None:
        for ev in self.evaluations:
            if ev.step > step and ev.flagged:
                return ev.step
        return None


def classify_outcome(min_distance: float, vehicle_final: np.ndarray, ped_final: np.ndarray) -> str:
    if min_distance < COLLISION_DISTANCE:
        return OUTCOME_COLLISION
    if vehicle_final[0] > ped_final[0]:
        return OUTCOME_PASSED
    return OUTCOME_STOPPED


def run_trial(
    cfg: ScenarioConfig,
    ensemble: Ensemble,
    detector: Detector,
    behavior: PedestrianBehavior,
) -> TrialRecord:
    """Simulate one trial; deterministic in all inputs.

    Every replan: observe, evaluate the newest window once enough
    observations exist, pick the planner per the configured mode, solve,
    and apply replan_period controls.  Infeasible plans fall back to a
    braking profile and the trial continues.
    """
    if len(behavior.source.positions) < cfg.steps + 1:
        raise ArgumentError(
            f"source trajectory has {len(behavior.source.positions)} points; "
            f"needs at least {cfg.steps + 1}"
        )
    h = cfg.h
    goal = cfg.goal_state()
    veh = cfg.start
    states = np.empty((cfg.steps + 1, 5))
    states[0] = veh.as_array()
    peds = np.empty((cfg.steps + 1, 2))
    peds[0] = pedestrian_position(behavior, 0, veh.position(), None, cfg.ped_v_max, h)

    evaluations: list[Evaluation] = []
    timeline: list[tuple[int, str]] = []
    fallbacks: list[int] = []
    pending: np.ndarray | None = None
    prev_solution: MpcSolution | None = None
    prev_planner: str | None = None

    for t in range(cfg.steps):
        if t % cfg.replan_period == 0:
            observed = peds[: t + 1]
            flagged = False
            if t + 1 >= cfg.window + 1:
                window = observed[-cfg.window :].reshape(-1)
                score = nonconformity(ensemble_stats(ensemble, window))
                flagged = bool(detect(detector, score))
                evaluations.append(Evaluation(step=t, score=score, flagged=flagged))
            if cfg.mode == MODE_SODA:
                use_reachable = flagged
            elif cfg.mode == MODE_ENSEMBLES_ONLY:
                use_reachable = False
            else:
                use_reachable = True
            planner = PLANNER_REACHABLE if use_reachable else PLANNER_NOMINAL
            timeline.append((t, planner))

            T = cfg.steps - t
            prob = MpcProblem(initial=veh, goal=goal, horizon=T, h=h)
            # The tail of the previous plan is dynamically feasible from
            # the current state (plans execute open loop between replans),
            # so it warm-starts the next solve of the same planner.  On a
            # planner switch the old plan is a poor incumbent — it was
            # optimized against the other constraint set — so the
            # planner's own cold-start rule applies instead.
            guess = None
            if prev_solution is not None and prev_planner == planner:
                guess = (
                    prev_solution.states[cfg.replan_period :],
                    prev_solution.controls[cfg.replan_period :],
                )
            if use_reachable:
                disc = ReachableDisc(center=tuple(peds[t]), radius=cfg.ped_radius)
                discs = []
                for _ in range(T):
                    disc = reach_step(disc, cfg.ped_v_max, h)
                    discs.append(disc)
                solution = solve_mpc_reachable(prob, discs, cfg.scp, initial_guess=guess)
            else:
                preds = np.array(
                    [pos for pos, _ in rollout(ensemble, observed, T, cfg.sample_rate_hz)]
                ).reshape(T, 2)
                solution = solve_mpc_nominal(prob, preds, cfg.scp, initial_guess=guess)
            if solution.status == "infeasible":
                fallbacks.append(t)
            pending = solution.controls
            prev_solution = solution
            prev_planner = planner

        u = pending[t % cfg.replan_period]
        vehicle_pos_now = veh.position()
        veh = step_dynamics(veh, ControlInput(u[0], u[1]), h)
        states[t + 1] = veh.as_array()
        peds[t + 1] = pedestrian_position(
            behavior, t + 1, vehicle_pos_now, peds[t], cfg.ped_v_max, h
        )

    min_distance = float(np.min(np.linalg.norm(states[:, :2] - peds, axis=1)))
    outcome = classify_outcome(min_distance, states[-1, :2], peds[-1])
    return TrialRecord(
        vehicle_states=states,
        pedestrian_positions=peds,
        evaluations=tuple(evaluations),
        mode_timeline=tuple(timeline),
        fallback_steps=tuple(fallbacks),
        min_distance=min_distance,
        outcome=outcome,
        behavior=behavior,
    )


@dataclass(frozen=True)
class ConfusionMatrix:
    """Per-evaluation detector counts against ground truth."""

    true_nominal: int = 0
    false_positive: int = 0
    true_ood: int = 0
    false_negative: int = 0

    @property
    def nominal_total(self) -> int:
        return self.true_nominal + self.false_positive

    @property
    def ood_total(self) -> int:
        return self.true_ood + self.false_negative

    @property
    def false_positive_rate(self) -> float:
        return self.false_positive / self.nominal_total if self.nominal_total else 0.0

    @property
    def true_positive_rate(self) -> float:
        return self.true_ood / self.ood_total if self.ood_total else 0.0

    def as_dict(self) -> dict:
        return {
            "true_nominal": self.true_nominal,
            "false_positive": self.false_positive,
            "true_ood": self.true_ood,
            "false_negative": self.false_negative,
            "false_positive_rate": self.false_positive_rate,
            "true_positive_rate": self.true_positive_rate,
        }


def confusion_from_records(records: list[TrialRecord], switch_step: int) -> ConfusionMatrix:
    """Nominal trials contribute every evaluation as ground-truth
    nominal; adversarial trials contribute only post-switch evaluations
    as ground-truth OOD."""
    tn = fp = tp = fn = 0
    for rec in records:
        if rec.behavior.is_fraud:
            for ev in rec.evaluations:
                if ev.step > switch_step:
                    if ev.flagged:
                        tp += 1
                    else:
                        fn += 1
        else:
            for ev in rec.evaluations:
                if ev.flagged:
                    fp += 1
                else:
                    tn += 1
    return ConfusionMatrix(
        true_nominal=tn, false_positive=fp, true_ood=tp, false_negative=fn
    )


@dataclass(frozen=True)
class ModeReport:
    """Outcome tallies and detector counts for one controller mode."""

    mode: str
    outcome_counts: dict
    confusion: ConfusionMatrix
    records: tuple[TrialRecord, ...]

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "outcomes": dict(self.outcome_counts),
            "confusion": self.confusion.as_dict(),
            "trials": [
                {
                    "variant": "fraud" if r.behavior.is_fraud else "nominal",
                    "source_id": r.behavior.source.id,
                    "offset_x": r.behavior.offset_x,
                    "outcome": r.outcome,
                    "min_distance": r.min_distance,
                    "evaluations": len(r.evaluations),
                    "flags": [e.step for e in r.evaluations if e.flagged],
                }
                for r in self.records
            ],
        }


@dataclass(frozen=True)
class BatchReport:
    """Aggregate of run_batch across modes."""

    reports: dict

    def as_dict(self) -> dict:
        return {mode: rep.as_dict() for mode, rep in self.reports.items()}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def _trial_task(args) -> TrialRecord:
    cfg, ensemble, detector, behavior = args
    return run_trial(cfg, ensemble, detector, behavior)


def run_batch(
    cfg: ScenarioConfig,
    ensemble: Ensemble,
    detector: Detector,
    sources: list[Trajectory],
    n_nominal: int,
    n_fraud: int,
    seed: int,
    modes: tuple[str, ...] = MODES,
    threads: int = 1,
) -> BatchReport:
    """Run seeded nominal and adversarial trials under each mode.

    The same sampled scenarios (source trajectory, horizontal offset,
    variant) are replayed under every mode so modes are compared on
    identical inputs.
    """
    if (n_nominal or n_fraud) and not sources:
        raise ArgumentError("at least one source trajectory is required")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    scenarios: list[PedestrianBehavior] = []
    for _ in range(n_nominal):
        src = sources[int(rng.integers(len(sources)))]
        offset = float(rng.normal(cfg.offset_mean, cfg.offset_std))
        scenarios.append(PedestrianBehavior(source=src, offset_x=offset, switch_step=None))
    for _ in range(n_fraud):
        src = sources[int(rng.integers(len(sources)))]
        offset = float(rng.normal(cfg.offset_mean, cfg.offset_std))
        scenarios.append(
            PedestrianBehavior(source=src, offset_x=offset, switch_step=cfg.switch_step)
        )

    reports = {}
    for mode in modes:
        mode_cfg = replace(cfg, mode=mode)
        tasks = [(mode_cfg, ensemble, detector, b) for b in scenarios]
        if threads > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                records = list(pool.map(_trial_task, tasks))
        else:
            records = [_trial_task(t) for t in tasks]
        counts: dict = {}
        for rec in records:
            counts[rec.outcome] = counts.get(rec.outcome, 0) + 1
        reports[mode] = ModeReport(
            mode=mode,
            outcome_counts=counts,
            confusion=confusion_from_records(records, cfg.switch_step),
            records=tuple(records),
        )
    return BatchReport(reports=reports)


def _coverage_trial(args) -> float:
    params, ensemble, cal_size, K, eval_trajectories, window, cal_seed, eval_seed, pick_seed = args
    cal = synth_generate(params, cal_size, cal_seed)
    rng = np.random.default_rng(np.random.SeedSequence(pick_seed))
    windows = []
    for traj in cal:
        start = int(rng.integers(len(traj.positions) - window))
        windows.append(traj.positions[start : start + window].reshape(-1))
    mean, cov = _batch_stats(ensemble, _normalize_windows(np.asarray(windows)))
    scores = np.sort(_eigen_scores(cov))
    threshold = scores[K - 1]

    evals = synth_generate(params, eval_trajectories, eval_seed)
    eval_windows = []
    for traj in evals:
        for pair in make_pairs(traj, window=window):
            eval_windows.append(pair.input_window)
    mean, cov = _batch_stats(ensemble, _normalize_windows(np.asarray(eval_windows)))
    eval_scores = _eigen_scores(cov)
    return float(np.mean(eval_scores <= threshold))


def _normalize_windows(windows: np.ndarray) -> np.ndarray:
    pts = windows.reshape(windows.shape[0], -1, 2)
    return (pts - pts[:, -1:, :]).reshape(windows.shape[0], -1)


def _eigen_scores(cov: np.ndarray) -> np.ndarray:
    s11 = cov[:, 0, 0]
    s22 = cov[:, 1, 1]
    s12 = cov[:, 0, 1]
    return 0.5 * ((s11 + s22) + np.sqrt((s11 - s22) ** 2 + 4.0 * s12**2))


def coverage_experiment(
    params: SynthParams,
    ensemble: Ensemble,
    trials: int,
    cal_size: int = 100,
    K: int = 97,
    eval_trajectories: int = 150,
    seed: int = 0,
    threads: int = 1,
) -> np.ndarray:
    """Empirical coverage of the K-th order-statistic threshold.

    Per trial: draw a fresh calibration set (one uniformly chosen window
    per trajectory), set the threshold at the K-th smallest score, then
    measure the fraction of all windows of a fresh evaluation set at or
    below it.  The ensemble stays fixed throughout.
    """
    if not 1 <= K <= cal_size:
        raise CalibrationError(f"K={K} must lie in [1, {cal_size}]")
    if trials < 1:
        raise ArgumentError("trials must be at least 1")
    window = ensemble.window
    children = np.random.SeedSequence(seed).spawn(trials)
    tasks = []
    for child in children:
        s1, s2, s3 = (int(v) for v in child.generate_state(3))
        tasks.append(
            (params, ensemble, cal_size, K, eval_trajectories, window, s1, s2, s3)
        )
    if threads > 1 and trials > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            vals = list(pool.map(_coverage_trial, tasks))
    else:
        vals = [_coverage_trial(t) for t in tasks]
    return np.asarray(vals)


def vehicle_csv_lines(record: TrialRecord) -> list[str]:
    """Vehicle trajectory as CSV rows `step,x,y,theta,V,kappa,mode_flag`."""
    modes = {}
    for step, planner in record.mode_timeline:
        modes[step] = planner
    lines = ["step,x,y,theta,V,kappa,mode_flag"]
    current = PLANNER_NOMINAL
    for t, row in enumerate(record.vehicle_states):
        current = modes.get(t, current)
        flag = 1 if current == PLANNER_REACHABLE else 0
        vals = ",".join(repr(float(v)) for v in row)
        lines.append(f"{t},{vals},{flag}")
    return lines
