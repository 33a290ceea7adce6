"""Vehicle dynamics, reachable discs, and obstacle-avoiding MPC.

The vehicle is a kinematic car with state (x, y, theta, V, kappa) and
controls (a, p) = (acceleration, curvature rate), integrated with
Euler's forward rule at the simulation step.  Two planning modes share
one solver core:

* nominal mode keeps the vehicle a fixed margin away from a stream of
  predicted agent points, one per future step;
* reachable mode keeps it outside velocity-bounded discs that grow
  around the last observed agent position.

Both are nonconvex through the dynamics and the keep-out constraints,
and are solved by sequential convex programming: linearize dynamics
about an incumbent trajectory, replace each keep-out disc by its
supporting half-plane, solve the resulting QP, re-simulate the controls
through the exact dynamics, and accept the candidate when it is
feasible and does not increase the true objective.  Accepted solutions
are therefore exactly dynamics-consistent by construction; an
independent verifier re-checks every contract after the fact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import ArgumentError
from .qp import QpConfig, QpResult, solve_qp

V_MAX = 20.0
KAPPA_MAX = 1.0 / 5.913
A_MAX = 5.0
P_MAX = 2.0
ROAD_HALF_WIDTH = 3.6
ROAD_MARGIN = 0.9
AGENT_MARGIN = 2.0
LANE_Y = -1.8
DEFAULT_STEP_S = 1.0 / 23.976

_STATE_DIM = 5
_CONTROL_DIM = 2
_ACCEPT_SLACK = 1e-12
# Stop once a feasible solution exists and _STALL_WINDOW accepted steps
# in a row improve neither the best feasible objective nor the incumbent
# merit by a relative _STALL_REL.  Rejected trust-region steps do not
# count: shrinking trust is ordinary progress toward the next accept.
_STALL_WINDOW = 5
_STALL_REL = 1e-4
_DEGENERATE_NORMAL = np.array([-1.0, 0.0])


@dataclass(frozen=True)
class VehicleState:
    """Kinematic car state: planar position, heading, speed, curvature."""

    x: float
    y: float
    theta: float
    V: float
    kappa: float

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.V, self.kappa])

    @staticmethod
    def from_array(arr) -> "VehicleState":
        x, y, theta, V, kappa = (float(v) for v in arr)
        return VehicleState(x, y, theta, V, kappa)

    def violations(self, v_max: float = V_MAX, kappa_max: float = KAPPA_MAX) -> list[str]:
        out = []
        if abs(self.V) > v_max:
            out.append(f"|V| = {abs(self.V)} exceeds {v_max}")
        if abs(self.kappa) > kappa_max:
            out.append(f"|kappa| = {abs(self.kappa)} exceeds {kappa_max}")
        return out


@dataclass(frozen=True)
class ControlInput:
    """Acceleration and pinch (curvature rate) commands."""

    a: float
    p: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.p])


@dataclass(frozen=True)
class ReachableDisc:
    """Disc guaranteed to contain a speed-bounded agent."""

    center: tuple[float, float]
    radius: float

    def center_array(self) -> np.ndarray:
        return np.array(self.center)


def reach_step(d: ReachableDisc, v_max: float, h: float) -> ReachableDisc:
    """Grow the disc by one step of worst-case agent motion."""
    if v_max < 0:
        raise ArgumentError("v_max must be non-negative")
    return ReachableDisc(center=d.center, radius=d.radius + v_max * h)


def step_dynamics(s: VehicleState, u: ControlInput, h: float) -> VehicleState:
    """One Euler step of the kinematic car; no clamping."""
    if h <= 0:
        raise ArgumentError("step length h must be positive")
    return VehicleState(
        x=s.x + h * s.V * math.cos(s.theta),
        y=s.y + h * s.V * math.sin(s.theta),
        theta=s.theta + h * s.V * s.kappa,
        V=s.V + h * u.a,
        kappa=s.kappa + h * u.p,
    )


def simulate_controls(initial: VehicleState, controls: np.ndarray, h: float) -> np.ndarray:
    """Roll a (T, 2) control sequence into a (T+1, 5) state array."""
    controls = np.asarray(controls, dtype=float)
    T = controls.shape[0]
    states = np.empty((T + 1, _STATE_DIM))
    states[0] = initial.as_array()
    s = initial
    for t in range(T):
        s = step_dynamics(s, ControlInput(controls[t, 0], controls[t, 1]), h)
        states[t + 1] = s.as_array()
    return states


@dataclass(frozen=True)
class MpcProblem:
    """One receding-horizon planning instance."""

    initial: VehicleState
    goal: VehicleState
    horizon: int
    h: float = DEFAULT_STEP_S
    w_pos: float = 10.0
    w_vel: float = 1.0
    w_ctrl: float = 0.1
    terminal_scale: float = 10.0
    road_half_width: float = ROAD_HALF_WIDTH
    road_margin: float = ROAD_MARGIN
    agent_margin: float = AGENT_MARGIN
    v_max: float = V_MAX
    kappa_max: float = KAPPA_MAX
    a_max: float = A_MAX
    p_max: float = P_MAX
    ref_speed: float | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ArgumentError("horizon must be at least 1")
        if self.h <= 0:
            raise ArgumentError("step length h must be positive")
        if min(self.w_pos, self.w_vel, self.w_ctrl) <= 0:
            raise ArgumentError("cost weights must be positive")

    def reference_speed(self) -> float:
        return self.goal.V if self.ref_speed is None else self.ref_speed

    def reference_positions(self) -> np.ndarray:
        """Goal-directed position reference, one point per future step.

        The reference advances from the current position toward the goal
        at the reference speed and then holds at the goal.  Tracking it
        keeps the cruise speed at the desired value instead of scaling
        with the distance to a far goal.
        """
        start = self.initial.position()
        target = self.goal.position()
        offset = target - start
        dist = float(np.linalg.norm(offset))
        taus = np.arange(1, self.horizon + 1)
        if dist < 1e-12:
            return np.tile(target, (self.horizon, 1))
        unit = offset / dist
        arc = np.minimum(self.reference_speed() * self.h * taus, dist)
        return start[None, :] + arc[:, None] * unit[None, :]


@dataclass(frozen=True)
class ScpConfig:
    """Outer-loop controls for sequential convex programming."""

    max_iterations: int = 40
    tolerance: float = 1e-4
    trust_radius: float = 20.0
    trust_shrink: float = 0.5
    trust_expand: float = 2.0
    min_trust_radius: float = 1e-9
    # Acceptable true-constraint violation of a returned plan (meters on
    # clearances).  Subproblem limits are tightened by this amount, so a
    # subproblem solved merely to similar accuracy still resimulates to
    # a plan that passes.
    constraint_tol: float = 1e-3
    # L1 penalty on keep-out slack variables; also weights constraint
    # violation in the merit function that drives incumbent acceptance.
    # It must dominate the keep-out multipliers (roughly the tracking
    # cost gradient times the horizon) or the merit optimum is an
    # infeasible trajectory; when the iteration converges to a
    # still-infeasible point the penalty grows by penalty_growth (up to
    # penalty_max) and the search restarts from a fresh trust region.
    penalty: float = 1e5
    penalty_growth: float = 10.0
    penalty_max: float = 1e6
    # Subproblems get a tighter iteration budget than a standalone QP:
    # an inexact proposal still makes progress, so burning long tails on
    # pathological instances buys nothing.
    qp: QpConfig = field(default_factory=lambda: QpConfig(max_iterations=2500))

    def __post_init__(self):
        if min(
            self.max_iterations,
            self.tolerance,
            self.trust_radius,
            self.trust_shrink,
            self.min_trust_radius,
            self.constraint_tol,
        ) <= 0:
            raise ArgumentError("all ScpConfig parameters must be positive")
        if self.trust_expand < 1:
            raise ArgumentError("trust_expand must be at least 1")
        if self.penalty <= 0:
            raise ArgumentError("penalty must be positive")
        if self.penalty_growth <= 1:
            raise ArgumentError("penalty_growth must exceed 1")
        if self.penalty_max < self.penalty:
            raise ArgumentError("penalty_max must be at least penalty")


@dataclass(frozen=True)
class MpcSolution:
    """Accepted trajectory plus solve diagnostics."""

    states: np.ndarray
    controls: np.ndarray
    status: str
    objective: float
    objective_trace: tuple[float, ...]
    iterations: int


Keepouts = list[list[tuple[np.ndarray, float]]]


def trajectory_objective(prob: MpcProblem, states: np.ndarray, controls: np.ndarray) -> float:
    """True (non-surrogate) objective of a trajectory."""
    refs = prob.reference_positions()
    w = np.ones(prob.horizon)
    w[-1] = prob.terminal_scale
    pos_err = states[1:, :2] - refs
    vel_err = states[1:, 3] - prob.goal.V
    return float(
        np.sum(w * prob.w_pos * np.sum(pos_err**2, axis=1))
        + np.sum(w * prob.w_vel * vel_err**2)
        + np.sum(prob.w_ctrl * np.sum(controls**2, axis=1))
    )


def constraint_violation(prob: MpcProblem, states: np.ndarray, controls: np.ndarray, keepouts: Keepouts) -> float:
    """Largest violation (meters or unit-consistent) over all constraints."""
    band = prob.road_half_width - prob.road_margin
    worst = 0.0
    worst = max(worst, float(np.max(np.abs(states[1:, 1]) - band, initial=0.0)))
    worst = max(worst, float(np.max(np.abs(states[1:, 3]) - prob.v_max, initial=0.0)))
    worst = max(worst, float(np.max(np.abs(states[1:, 4]) - prob.kappa_max, initial=0.0)))
    worst = max(worst, float(np.max(np.abs(controls[:, 0]) - prob.a_max, initial=0.0)))
    worst = max(worst, float(np.max(np.abs(controls[:, 1]) - prob.p_max, initial=0.0)))
    for tau in range(1, prob.horizon + 1):
        pos = states[tau, :2]
        for center, dmin in keepouts[tau - 1]:
            worst = max(worst, dmin - float(np.linalg.norm(pos - center)))
    return worst


def _jacobians(prob: MpcProblem, states: np.ndarray, controls: np.ndarray):
    """Per-step Euler Jacobians about an incumbent trajectory."""
    T = prob.horizon
    h = prob.h
    theta = states[:T, 2]
    V = states[:T, 3]
    kappa = states[:T, 4]
    A = np.tile(np.eye(_STATE_DIM), (T, 1, 1))
    A[:, 0, 2] = -h * V * np.sin(theta)
    A[:, 0, 3] = h * np.cos(theta)
    A[:, 1, 2] = h * V * np.cos(theta)
    A[:, 1, 3] = h * np.sin(theta)
    A[:, 2, 3] = h * kappa
    A[:, 2, 4] = h * V
    B = np.zeros((T, _STATE_DIM, _CONTROL_DIM))
    B[:, 3, 0] = h
    B[:, 4, 1] = h
    fx = np.empty((T, _STATE_DIM))
    fx[:, 0] = states[:T, 0] + h * V * np.cos(theta)
    fx[:, 1] = states[:T, 1] + h * V * np.sin(theta)
    fx[:, 2] = theta + h * V * kappa
    fx[:, 3] = V + h * controls[:, 0]
    fx[:, 4] = kappa + h * controls[:, 1]
    return A, B, fx


def _build_subproblem(
    prob: MpcProblem,
    keepouts: Keepouts,
    inc_states: np.ndarray,
    inc_controls: np.ndarray,
    trust_radius: float,
    penalty: float,
    tighten: float = 0.0,
):
    """Assemble the convex QP around the incumbent trajectory.

    Decision vector z = (x_1..x_T, u_0..u_{T-1}, s); x_0 is a constant
    and s holds one L1-penalized slack per keep-out half-plane, so the
    subproblem stays feasible even when the incumbent violates the
    keep-outs.  Limits and keep-outs are pulled in by `tighten` so a
    subproblem solved to comparable accuracy still resimulates to a
    plan within tolerance of the true constraints.
    """
    T = prob.horizon
    n_x = _STATE_DIM * T
    n_xu = n_x + _CONTROL_DIM * T
    n_slack = sum(len(k) for k in keepouts)
    n = n_xu + n_slack

    refs = prob.reference_positions()
    w = np.ones(T)
    w[-1] = prob.terminal_scale
    P_diag = np.zeros(n)
    q = np.zeros(n)
    sidx = np.arange(T) * _STATE_DIM
    P_diag[sidx + 0] = 2.0 * w * prob.w_pos
    P_diag[sidx + 1] = 2.0 * w * prob.w_pos
    P_diag[sidx + 3] = 2.0 * w * prob.w_vel
    q[sidx + 0] = -2.0 * w * prob.w_pos * refs[:, 0]
    q[sidx + 1] = -2.0 * w * prob.w_pos * refs[:, 1]
    q[sidx + 3] = -2.0 * w * prob.w_vel * prob.goal.V
    uidx = n_x + np.arange(T) * _CONTROL_DIM
    P_diag[uidx + 0] = 2.0 * prob.w_ctrl
    P_diag[uidx + 1] = 2.0 * prob.w_ctrl
    # The linear term alone makes the slack penalty exact; the matching
    # quadratic term adds curvature so the penalty does not wreck the
    # solver's cost normalization, and vanishes with the slacks.
    q[n_xu:] = penalty
    P_diag[n_xu:] = penalty

    A_dyn, B_dyn, fx = _jacobians(prob, inc_states, inc_controls)
    rows, cols, data = [], [], []
    eq_rhs = np.empty(_STATE_DIM * T)
    for tau in range(T):
        r0 = tau * _STATE_DIM
        # identity on x_{tau+1}
        rows.append(r0 + np.arange(_STATE_DIM))
        cols.append(tau * _STATE_DIM + np.arange(_STATE_DIM))
        data.append(np.ones(_STATE_DIM))
        # -B on u_tau
        bi, bj = np.nonzero(B_dyn[tau])
        rows.append(r0 + bi)
        cols.append(n_x + tau * _CONTROL_DIM + bj)
        data.append(-B_dyn[tau][bi, bj])
        rhs = fx[tau] - B_dyn[tau] @ inc_controls[tau]
        if tau == 0:
            # x_0 equals the incumbent start exactly, so A_0 x_0 cancels
            # against the linearization constant and the rhs reduces to
            # f(x_0, u_bar) - B_0 u_bar.
            eq_rhs[r0 : r0 + _STATE_DIM] = rhs
        else:
            ai, aj = np.nonzero(A_dyn[tau])
            rows.append(r0 + ai)
            cols.append((tau - 1) * _STATE_DIM + aj)
            data.append(-A_dyn[tau][ai, aj])
            eq_rhs[r0 : r0 + _STATE_DIM] = rhs - A_dyn[tau] @ inc_states[tau]
    n_eq = _STATE_DIM * T

    # One identity row per variable: trust region intersected with limits
    # for states and controls, non-negativity for the slacks.
    inc_z = np.concatenate([inc_states[1:].ravel(), inc_controls.ravel()])
    lo = inc_z - trust_radius
    hi = inc_z + trust_radius
    band = prob.road_half_width - prob.road_margin - tighten
    lo[sidx + 1] = np.maximum(lo[sidx + 1], -band)
    hi[sidx + 1] = np.minimum(hi[sidx + 1], band)
    lo[sidx + 3] = np.maximum(lo[sidx + 3], -prob.v_max + tighten)
    hi[sidx + 3] = np.minimum(hi[sidx + 3], prob.v_max - tighten)
    lo[sidx + 4] = np.maximum(lo[sidx + 4], -prob.kappa_max + tighten)
    hi[sidx + 4] = np.minimum(hi[sidx + 4], prob.kappa_max - tighten)
    lo[uidx + 0] = np.maximum(lo[uidx + 0], -prob.a_max + tighten)
    hi[uidx + 0] = np.minimum(hi[uidx + 0], prob.a_max - tighten)
    lo[uidx + 1] = np.maximum(lo[uidx + 1], -prob.p_max + tighten)
    hi[uidx + 1] = np.minimum(hi[uidx + 1], prob.p_max - tighten)
    # Resimulating accepted controls through the exact dynamics can push
    # a state a hair outside its limit; widening each row to contain the
    # incumbent keeps it a feasible point of every subproblem (the true
    # limits still hold at acceptance via the violation check).
    lo = np.minimum(lo, inc_z)
    hi = np.maximum(hi, inc_z)
    lo = np.concatenate([lo, np.zeros(n_slack)])
    hi = np.concatenate([hi, np.full(n_slack, np.inf)])
    rows.append(n_eq + np.arange(n))
    cols.append(np.arange(n))
    data.append(np.ones(n))

    # Supporting half-planes for keep-out discs/points, each relaxed by
    # its own slack variable.
    ko_rows, ko_cols, ko_data, ko_l = [], [], [], []
    r = n_eq + n
    slack = n_xu
    for tau in range(1, T + 1):
        pos = inc_states[tau, :2]
        for center, dmin in keepouts[tau - 1]:
            normal = pos - center
            norm = float(np.linalg.norm(normal))
            normal = normal / norm if norm > 1e-9 else _DEGENERATE_NORMAL
            ko_rows.extend([r, r, r])
            ko_cols.extend(
                [(tau - 1) * _STATE_DIM, (tau - 1) * _STATE_DIM + 1, slack]
            )
            ko_data.extend([normal[0], normal[1], 1.0])
            ko_l.append(dmin + tighten + float(normal @ center))
            r += 1
            slack += 1
    m = r
    rows.append(np.asarray(ko_rows))
    cols.append(np.asarray(ko_cols))
    data.append(np.asarray(ko_data))

    A = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, n),
    ).tocsc()
    l = np.concatenate([eq_rhs, lo, np.asarray(ko_l)])
    u = np.concatenate([eq_rhs, hi, np.full(len(ko_l), np.inf)])
    return sp.diags(P_diag).tocsc(), q, A, l, u


def braking_profile(prob: MpcProblem) -> tuple[np.ndarray, np.ndarray]:
    """Maximum-deceleration stop that also unwinds curvature."""
    return _speed_profile(prob, 0.0)


def _speed_profile(prob: MpcProblem, target_speed: float) -> tuple[np.ndarray, np.ndarray]:
    """Drive the speed to a target as fast as limits allow, then hold.

    Curvature is unwound simultaneously, so the profile is a straight
    brake (or brake-then-reverse) along the current heading.
    """
    controls = np.zeros((prob.horizon, _CONTROL_DIM))
    s = prob.initial
    for t in range(prob.horizon):
        a = np.clip((target_speed - s.V) / prob.h, -prob.a_max, prob.a_max)
        p = -np.clip(s.kappa / prob.h, -prob.p_max, prob.p_max)
        controls[t] = (a, p)
        s = step_dynamics(s, ControlInput(a, p), prob.h)
    states = simulate_controls(prob.initial, controls, prob.h)
    return states, controls


def _fleeing_guess(
    prob: MpcProblem, discs: list[ReachableDisc]
) -> tuple[np.ndarray, np.ndarray]:
    """Brake, then retreat slightly faster than the disc edge expands.

    A disc that grows at the agent's top speed eventually overruns any
    stopped vehicle, so the only safe posture is to back away along the
    road; when the disc does not grow this reduces to a plain stop.
    """
    T = prob.horizon
    growth = 0.0
    if T > 1:
        growth = (discs[-1].radius - discs[0].radius) / ((T - 1) * prob.h)
    if growth <= 0.0:
        return braking_profile(prob)
    away = 1.0 if prob.initial.x >= discs[0].center_array()[0] else -1.0
    target = away * min(growth + 0.5, prob.v_max)
    return _speed_profile(prob, target)


def scp_solve(
    prob: MpcProblem,
    keepouts: Keepouts,
    initial_states: np.ndarray,
    initial_controls: np.ndarray,
    cfg: ScpConfig = ScpConfig(),
    fallback: tuple[np.ndarray, np.ndarray] | None = None,
) -> MpcSolution:
    """Sequential convex programming around a supplied initial guess.

    Every candidate is re-simulated through the exact dynamics before
    evaluation, so returned states carry no linearization error.  The
    incumbent moves on merit (true objective plus penalty-weighted true
    constraint violation), which lets the iteration approach feasibility
    from an infeasible guess; only candidates within constraint_tol are
    eligible to be returned.  The trace records the objective of each
    improving feasible iterate; it is non-increasing by construction.

    When no candidate meets constraint_tol the result is the `fallback`
    profile (a braking profile when none is given) with status
    "infeasible", so callers always receive executable controls.
    """
    if len(keepouts) != prob.horizon:
        raise ArgumentError("keepouts must provide one entry per horizon step")
    inc_states = np.array(initial_states, dtype=float)
    inc_controls = np.array(initial_controls, dtype=float)
    trust = cfg.trust_radius
    penalty = cfg.penalty
    best: tuple[np.ndarray, np.ndarray] | None = None
    best_obj = math.inf
    inc_merit = math.inf
    trace: list[float] = []
    # The guess itself is a candidate: resimulated through the exact
    # dynamics, it seeds `best` whenever it is feasible, so a solve can
    # never report "infeasible" while holding a feasible starting plan.
    seed_states = simulate_controls(prob.initial, inc_controls, prob.h)
    seed_viol = constraint_violation(prob, seed_states, inc_controls, keepouts)
    if seed_viol <= cfg.constraint_tol:
        best = (seed_states, np.array(inc_controls))
        best_obj = trajectory_objective(prob, seed_states, inc_controls)
        trace.append(best_obj)
    warm: QpResult | None = None
    converged = False
    iterations = 0
    stall = 0
    n_xu = (_STATE_DIM + _CONTROL_DIM) * prob.horizon

    def escalate() -> bool:
        # Converged to an infeasible point: the penalty was too weak to
        # dominate the constraint multipliers, so raise it and restart
        # the trust region around the current incumbent.
        nonlocal penalty, trust, inc_merit
        if penalty >= cfg.penalty_max:
            return False
        penalty = min(penalty * cfg.penalty_growth, cfg.penalty_max)
        trust = cfg.trust_radius
        inc_merit = trajectory_objective(
            prob, inc_states, inc_controls
        ) + penalty * constraint_violation(prob, inc_states, inc_controls, keepouts)
        return True

    for iterations in range(1, cfg.max_iterations + 1):
        P, q, A, l, u = _build_subproblem(
            prob, keepouts, inc_states, inc_controls, trust, penalty,
            tighten=cfg.constraint_tol,
        )
        if warm is None:
            # Seed the solver at the incumbent itself, with slacks set to
            # the incumbent's keep-out violations: when the incumbent is a
            # simulated trajectory this point satisfies every subproblem
            # constraint exactly.
            slack_init = np.array(
                [
                    max(0.0, radius - float(np.linalg.norm(inc_states[tau + 1, :2] - center)))
                    for tau, entries in enumerate(keepouts)
                    for center, radius in entries
                ]
            )
            warm_x = np.concatenate(
                [inc_states[1:].ravel(), inc_controls.ravel(), slack_init]
            )
            warm_y = None
        else:
            warm_x = warm.x
            warm_y = warm.y
        res = solve_qp(P, q, A, l, u, cfg.qp, warm_x=warm_x, warm_y=warm_y)
        if res.status == "primal_infeasible":
            warm = None
            trust *= cfg.trust_shrink
            if trust < cfg.min_trust_radius:
                break
            continue
        # An iteration-capped result is still a usable proposal: the
        # candidate is judged on its exact resimulated merit below, so
        # subproblem accuracy affects progress speed, never soundness.
        warm = res
        n_x = _STATE_DIM * prob.horizon
        cand_controls = res.x[n_x:n_xu].reshape(prob.horizon, _CONTROL_DIM)
        cand_states = simulate_controls(prob.initial, cand_controls, prob.h)
        step = float(
            np.max(
                np.abs(
                    res.x[:n_xu]
                    - np.concatenate([inc_states[1:].ravel(), inc_controls.ravel()])
                ),
                initial=0.0,
            )
        )
        viol = constraint_violation(prob, cand_states, cand_controls, keepouts)
        obj = trajectory_objective(prob, cand_states, cand_controls)
        merit = obj + penalty * viol
        improved = False
        if viol <= cfg.constraint_tol and obj <= best_obj + _ACCEPT_SLACK:
            if best_obj - obj >= _STALL_REL * max(1.0, abs(obj)):
                improved = True
            best = (cand_states, cand_controls)
            best_obj = obj
            trace.append(obj)
        if merit <= inc_merit + _ACCEPT_SLACK:
            if inc_merit - merit >= _STALL_REL * max(1.0, abs(merit)):
                improved = True
            stall = 0 if improved else stall + 1
            if best is not None and stall >= _STALL_WINDOW:
                converged = True
                break
            inc_states = cand_states
            inc_controls = cand_controls
            inc_merit = merit
            trust = min(trust * cfg.trust_expand, cfg.trust_radius)
            if step < cfg.tolerance:
                if viol <= cfg.constraint_tol and best is not None:
                    converged = True
                    break
                if not escalate():
                    break
        else:
            trust *= cfg.trust_shrink
            if trust < cfg.min_trust_radius:
                if viol <= cfg.constraint_tol or not escalate():
                    break

    if best is None:
        states, controls = fallback if fallback is not None else braking_profile(prob)
        return MpcSolution(
            states=states,
            controls=controls,
            status="infeasible",
            objective=trajectory_objective(prob, states, controls),
            objective_trace=tuple(trace),
            iterations=iterations,
        )
    status = "converged" if converged else "max_iterations"
    return MpcSolution(
        states=best[0],
        controls=best[1],
        status=status,
        objective=best_obj,
        objective_trace=tuple(trace),
        iterations=iterations,
    )


def _interpolated_guess(prob: MpcProblem, keepouts: Keepouts) -> tuple[np.ndarray, np.ndarray]:
    """Start-to-goal interpolation, projected out of keep-out discs.

    Points inside a disc are moved to its boundary along the direction
    perpendicular to the travel direction, which keeps the guess a
    smooth dodge instead of a discontinuous jump when an obstacle sits
    directly on the path.
    """
    T = prob.horizon
    frac = np.arange(T + 1)[:, None] / T
    states = (1.0 - frac) * prob.initial.as_array()[None, :] + frac * prob.goal.as_array()[None, :]
    travel = prob.goal.position() - prob.initial.position()
    norm = float(np.linalg.norm(travel))
    travel = travel / norm if norm > 1e-9 else np.array([1.0, 0.0])
    perp = np.array([-travel[1], travel[0]])
    for tau in range(1, T + 1):
        for center, dmin in keepouts[tau - 1]:
            gap = states[tau, :2] - center
            dist = float(np.linalg.norm(gap))
            if dist >= dmin:
                continue
            along = float(gap @ travel)
            lateral = float(gap @ perp)
            if abs(along) >= dmin:
                continue
            need = math.sqrt(dmin * dmin - along * along)
            if abs(lateral) > 1e-9:
                side = math.copysign(1.0, lateral)
            else:
                # Dodge toward the side of the road with more room.
                side = -1.0 if float(center @ perp) > 0 else 1.0
            states[tau, :2] = states[tau, :2] + (side * need - lateral) * perp
    return states, np.zeros((T, _CONTROL_DIM))


def _repeated_start_guess(prob: MpcProblem) -> tuple[np.ndarray, np.ndarray]:
    states = np.tile(prob.initial.as_array(), (prob.horizon + 1, 1))
    return states, np.zeros((prob.horizon, _CONTROL_DIM))


def solve_mpc_nominal(
    prob: MpcProblem,
    predicted_agent: np.ndarray,
    cfg: ScpConfig = ScpConfig(),
    initial_guess: tuple[np.ndarray, np.ndarray] | None = None,
) -> MpcSolution:
    """Plan against per-step predicted agent points (margin-protected)."""
    predicted_agent = np.asarray(predicted_agent, dtype=float)
    if predicted_agent.shape != (prob.horizon, 2):
        raise ArgumentError("predicted_agent must have shape (horizon, 2)")
    keepouts: Keepouts = [
        [(predicted_agent[tau], prob.agent_margin)] for tau in range(prob.horizon)
    ]
    guess = initial_guess or _interpolated_guess(prob, keepouts)
    return scp_solve(prob, keepouts, guess[0], guess[1], cfg)


def solve_mpc_reachable(
    prob: MpcProblem,
    discs: list[ReachableDisc],
    cfg: ScpConfig = ScpConfig(),
    initial_guess: tuple[np.ndarray, np.ndarray] | None = None,
) -> MpcSolution:
    """Plan against growing reachable discs (margin-protected)."""
    if len(discs) != prob.horizon:
        raise ArgumentError("discs must provide one entry per horizon step")
    radii = [d.radius for d in discs]
    if any(r2 < r1 - 1e-12 for r1, r2 in zip(radii, radii[1:])):
        raise ArgumentError("disc radii must be non-decreasing")
    keepouts: Keepouts = [
        [(d.center_array(), d.radius + prob.agent_margin)] for d in discs
    ]
    # Cold starts use the brake-then-flee profile: it is a simulated
    # trajectory (zero defect) inside every state and control limit, it
    # retreats from a growing disc instead of stopping inside it, and
    # it leaves the first incumbent a feasible point of the
    # slack-relaxed subproblem.  It is also the infeasibility fallback:
    # when no plan clears the disc, stopping just waits to be swallowed,
    # so the safe last resort is retreating faster than the disc grows.
    flee = _fleeing_guess(prob, discs)
    guess = initial_guess or flee
    return scp_solve(prob, keepouts, guess[0], guess[1], cfg, fallback=flee)


@dataclass(frozen=True)
class VerificationReport:
    """Independent feasibility audit of a returned solution."""

    max_defect: float
    max_violation: float

    @property
    def ok(self) -> bool:
        return self.max_defect <= 1e-6 and self.max_violation <= 1e-3


def verify_solution(
    prob: MpcProblem,
    solution: MpcSolution,
    keepouts: Keepouts,
) -> VerificationReport:
    """Re-simulate controls and audit every constraint from scratch."""
    states = solution.states
    controls = solution.controls
    defect = 0.0
    s = VehicleState.from_array(states[0])
    for t in range(prob.horizon):
        s_next = step_dynamics(s, ControlInput(controls[t, 0], controls[t, 1]), prob.h)
        defect = max(defect, float(np.max(np.abs(s_next.as_array() - states[t + 1]))))
        s = VehicleState.from_array(states[t + 1])
    viol = constraint_violation(prob, states, controls, keepouts)
    return VerificationReport(max_defect=defect, max_violation=viol)


def solution_to_json(solution: MpcSolution) -> str:
    return json.dumps(
        {
            "status": solution.status,
            "objective": solution.objective,
            "objective_trace": list(solution.objective_trace),
            "iterations": solution.iterations,
            "states": solution.states.tolist(),
            "controls": solution.controls.tolist(),
        }
    )


def solution_from_json(text: str) -> MpcSolution:
    doc = json.loads(text)
    return MpcSolution(
        states=np.asarray(doc["states"], dtype=float),
        controls=np.asarray(doc["controls"], dtype=float),
        status=doc["status"],
        objective=float(doc["objective"]),
        objective_trace=tuple(float(v) for v in doc["objective_trace"]),
        iterations=int(doc["iterations"]),
    )


def problem_to_json(prob: MpcProblem) -> str:
    return json.dumps(
        {
            "initial": list(prob.initial.as_array()),
            "goal": list(prob.goal.as_array()),
            "horizon": prob.horizon,
            "h": prob.h,
            "w_pos": prob.w_pos,
            "w_vel": prob.w_vel,
            "w_ctrl": prob.w_ctrl,
            "terminal_scale": prob.terminal_scale,
            "road_half_width": prob.road_half_width,
            "road_margin": prob.road_margin,
            "agent_margin": prob.agent_margin,
            "v_max": prob.v_max,
            "kappa_max": prob.kappa_max,
            "a_max": prob.a_max,
            "p_max": prob.p_max,
            "ref_speed": prob.ref_speed,
        }
    )


def problem_from_json(text: str) -> MpcProblem:
    doc = json.loads(text)
    return MpcProblem(
        initial=VehicleState.from_array(doc["initial"]),
        goal=VehicleState.from_array(doc["goal"]),
        horizon=int(doc["horizon"]),
        h=float(doc["h"]),
        w_pos=float(doc["w_pos"]),
        w_vel=float(doc["w_vel"]),
        w_ctrl=float(doc["w_ctrl"]),
        terminal_scale=float(doc["terminal_scale"]),
        road_half_width=float(doc["road_half_width"]),
        road_margin=float(doc["road_margin"]),
        agent_margin=float(doc["agent_margin"]),
        v_max=float(doc["v_max"]),
        kappa_max=float(doc["kappa_max"]),
        a_max=float(doc["a_max"]),
        p_max=float(doc["p_max"]),
        ref_speed=None if doc["ref_speed"] is None else float(doc["ref_speed"]),
    )
