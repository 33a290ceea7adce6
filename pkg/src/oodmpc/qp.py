"""Convex quadratic programming by operator splitting.

Solves problems of the form

    minimize    0.5 x' P x + q' x
    subject to  l <= A x <= u

with P positive semidefinite.  The algorithm is the standard ADMM
splitting on the constraint variable z = A x: each iteration solves one
quasi-definite KKT system (factorized once per problem) and projects z
onto the box [l, u].  Rows with l == u are treated as equalities and
given a stiffer penalty so they converge to machine-level satisfaction.

Accuracy beyond first-order tolerance comes from an active-set polish
step: once ADMM has identified the active constraints, an equality
constrained QP is solved directly, which typically drives residuals to
1e-10 or below.  Solutions are certified by the returned residuals, not
by iteration count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ArgumentError

_EQ_TOL = 0.0
_REFINE_ROUNDS = 2
_RAY_TOL = 1e-8


@dataclass(frozen=True)
class QpConfig:
    """Tuning knobs for the splitting solver.

    The loop first runs to the coarse tolerances, then the polish step
    tries to certify the strict ones; only if polish falls short does
    the loop resume at the strict tolerances.
    """

    rho: float = 0.1
    rho_eq_scale: float = 1e3
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    coarse_eps_abs: float = 1e-5
    coarse_eps_rel: float = 1e-5
    eps_infeasible: float = 1e-10
    max_iterations: int = 20000
    check_every: int = 25
    scaling_iterations: int = 10
    polish: bool = True
    polish_reg: float = 1e-9
    polish_interval: int = 250
    adaptive_rho: bool = True
    adaptive_rho_tolerance: float = 5.0

    def violations(self) -> list[str]:
        out = []
        if not 0 < self.alpha < 2:
            out.append("alpha must lie in (0, 2)")
        if self.rho <= 0:
            out.append("rho must be positive")
        if self.sigma <= 0:
            out.append("sigma must be positive")
        if self.max_iterations < 1:
            out.append("max_iterations must be at least 1")
        if self.scaling_iterations < 0:
            out.append("scaling_iterations must be non-negative")
        if self.adaptive_rho_tolerance < 1:
            out.append("adaptive_rho_tolerance must be at least 1")
        if self.polish_interval < 1:
            out.append("polish_interval must be at least 1")
        return out


@dataclass(frozen=True)
class QpResult:
    """Primal/dual solution with certification residuals."""

    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float

    @property
    def solved(self) -> bool:
        return self.status == "solved"


def _as_csc(mat, name: str) -> sp.csc_matrix:
    if sp.issparse(mat):
        return mat.tocsc()
    arr = np.asarray(mat, dtype=float)
    if arr.ndim != 2:
        raise ArgumentError(f"{name} must be a 2-D matrix")
    return sp.csc_matrix(arr)


def solve_qp(
    P,
    q,
    A,
    l,
    u,
    config: QpConfig = QpConfig(),
    warm_x: np.ndarray | None = None,
    warm_y: np.ndarray | None = None,
) -> QpResult:
    """Solve the box-constrained QP and certify the result.

    Returns status "solved" when both residuals meet the configured
    tolerances, "primal_infeasible" when an infeasibility certificate is
    found, and "max_iterations" otherwise.  warm_x/warm_y seed the
    iteration, which matters when a sequence of nearby problems is
    solved (as in sequential convex programming).
    """
    bad = config.violations()
    if bad:
        raise ArgumentError("; ".join(bad))
    P = _as_csc(P, "P")
    A = _as_csc(A, "A")
    q = np.asarray(q, dtype=float).ravel()
    l = np.asarray(l, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    n = q.shape[0]
    m = l.shape[0]
    if P.shape != (n, n):
        raise ArgumentError(f"P must be {n}x{n} to match q")
    if A.shape != (m, n):
        raise ArgumentError(f"A must be {m}x{n} to match bounds and q")
    if u.shape[0] != m:
        raise ArgumentError("l and u must have equal length")
    if np.any(l > u):
        raise ArgumentError("every lower bound must not exceed its upper bound")

    # Ruiz equilibration plus cost normalization; the loop runs on the
    # scaled data while residuals are certified on the original problem.
    D, E, c = _equilibrate(P, A, q, config.scaling_iterations)
    Ps = sp.diags(c * D) @ P @ sp.diags(D)
    As = sp.diags(E) @ A @ sp.diags(D)
    qs = c * D * q
    ls = E * l
    us = E * u

    eq = (u - l) <= _EQ_TOL
    base_rho = config.rho
    x = np.zeros(n) if warm_x is None else np.asarray(warm_x, dtype=float) / D
    y = np.zeros(m) if warm_y is None else c * np.asarray(warm_y, dtype=float) / E
    z = np.clip(As @ x, ls, us)

    upper_left = (Ps + config.sigma * sp.eye(n)).tocsc()

    def factor(base: float):
        rho_vec = np.where(eq, base * config.rho_eq_scale, base)
        kkt = sp.bmat(
            [[upper_left, As.T], [As, -sp.diags(1.0 / rho_vec)]], format="csc"
        )
        return rho_vec, spla.splu(kkt)

    rho, lu = factor(base_rho)
    At = A.T.tocsc()
    Ast = As.T.tocsc()

    def unscaled(xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return D * xs, E * ys / c

    def residuals(xu: np.ndarray, yu: np.ndarray, zu: np.ndarray):
        # zu lies in [l, u] exactly and yu is complementary to it by
        # construction of the projection step, so ||Ax - z|| plus
        # stationarity is a sound optimality certificate (and it bounds
        # the box violation of Ax).
        Ax = A @ xu
        Px = P @ xu
        Aty = At @ yu
        r_prim = float(np.max(np.abs(Ax - zu), initial=0.0))
        r_dual = float(np.max(np.abs(Px + q + Aty), initial=0.0))
        scale_prim = max(
            np.max(np.abs(Ax), initial=0.0), np.max(np.abs(zu), initial=0.0)
        )
        scale_dual = max(
            np.max(np.abs(Px), initial=0.0),
            np.max(np.abs(q), initial=0.0),
            np.max(np.abs(Aty), initial=0.0),
        )
        return r_prim, r_dual, scale_prim, scale_dual

    status = "max_iterations"
    iterations = config.max_iterations
    y_checkpoint = y.copy()
    last_polish = 0
    r_prim = np.inf
    r_dual = np.inf
    eps_abs = config.coarse_eps_abs
    eps_rel = config.coarse_eps_rel
    strict_phase = not config.polish
    if strict_phase:
        eps_abs, eps_rel = config.eps_abs, config.eps_rel
    k = 0
    while k < config.max_iterations:
        k += 1
        rhs = np.concatenate([config.sigma * x - qs, z - y / rho])
        sol = lu.solve(rhs)
        x_tilde = sol[:n]
        z_tilde = z + (sol[n:] - y) / rho
        x = config.alpha * x_tilde + (1.0 - config.alpha) * x
        z_relaxed = config.alpha * z_tilde + (1.0 - config.alpha) * z
        z = np.clip(z_relaxed + y / rho, ls, us)
        y = y + rho * (z_relaxed - z)

        if k % config.check_every == 0 or k == config.max_iterations:
            xu, yu = unscaled(x, y)
            r_prim, r_dual, sc_p, sc_d = residuals(xu, yu, z / E)
            if r_prim <= eps_abs + eps_rel * sc_p and r_dual <= eps_abs + eps_rel * sc_d:
                if strict_phase:
                    status = "solved"
                    iterations = k
                    break
                # Coarse convergence reached: hand off to polish; resume
                # at strict tolerances only if polish falls short.
                polished = _polish(P, q, A, At, l, u, xu, yu, config)
                if polished is not None:
                    px, py, pr_p, pr_d = polished
                    if pr_p <= config.eps_abs and pr_d <= config.eps_abs:
                        return QpResult(
                            x=px,
                            y=py,
                            status="solved",
                            iterations=k,
                            primal_residual=pr_p,
                            dual_residual=pr_d,
                            objective=float(0.5 * px @ (P @ px) + q @ px),
                        )
                strict_phase = True
                eps_abs, eps_rel = config.eps_abs, config.eps_rel
                continue
            if (
                config.polish
                and k - last_polish >= config.polish_interval
                and r_prim <= 1e-3 * max(1.0, sc_p)
            ):
                # The active set usually stabilizes long before the
                # iteration reaches tolerance; a successful polish is a
                # certificate, so attempting it periodically exits early.
                last_polish = k
                polished = _polish(P, q, A, At, l, u, xu, yu, config)
                if polished is not None:
                    px, py, pr_p, pr_d = polished
                    if pr_p <= config.eps_abs and pr_d <= config.eps_abs:
                        return QpResult(
                            x=px,
                            y=py,
                            status="solved",
                            iterations=k,
                            primal_residual=pr_p,
                            dual_residual=pr_d,
                            objective=float(0.5 * px @ (P @ px) + q @ px),
                        )
            dy = y - y_checkpoint
            if _certifies_primal_infeasible(Ast, ls, us, dy, config.eps_infeasible):
                xu, yu = unscaled(x, y)
                return QpResult(
                    x=xu,
                    y=yu,
                    status="primal_infeasible",
                    iterations=k,
                    primal_residual=r_prim,
                    dual_residual=r_dual,
                    objective=float(0.5 * xu @ (P @ xu) + q @ xu),
                )
            y_checkpoint = y.copy()
            if config.adaptive_rho:
                # Balance the scaled-space relative residuals (the
                # geometry the iteration actually runs in) by moving the
                # penalty toward their geometric mid-point; refactor only
                # when the change is large enough to pay for itself.
                Asx = As @ x
                Psx = upper_left @ x - config.sigma * x
                Asty = Ast @ y
                rp_s = float(np.max(np.abs(Asx - z), initial=0.0)) / max(
                    np.max(np.abs(Asx), initial=0.0),
                    np.max(np.abs(z), initial=0.0),
                    1e-12,
                )
                rd_s = float(np.max(np.abs(Psx + qs + Asty), initial=0.0)) / max(
                    np.max(np.abs(Psx), initial=0.0),
                    np.max(np.abs(qs), initial=0.0),
                    np.max(np.abs(Asty), initial=0.0),
                    1e-12,
                )
                scale = np.sqrt(max(rp_s, 1e-12) / max(rd_s, 1e-12))
                scale = min(max(scale, 1e-2), 1e2)
                candidate = min(max(base_rho * scale, 1e-6), 1e6)
                tol = config.adaptive_rho_tolerance
                if candidate > base_rho * tol or candidate < base_rho / tol:
                    base_rho = candidate
                    rho, lu = factor(base_rho)
    else:
        iterations = config.max_iterations

    x, y = unscaled(x, y)
    if config.polish:
        polished = _polish(P, q, A, At, l, u, x, y, config)
        if polished is not None:
            px, py, pr_prim, pr_dual = polished
            # Adopt the polish only if neither residual degrades beyond
            # its already-certified level (up to the absolute tolerance).
            if pr_prim <= max(r_prim, config.eps_abs) and pr_dual <= max(
                r_dual, config.eps_abs
            ):
                x, y, r_prim, r_dual = px, py, pr_prim, pr_dual
                if r_prim <= config.eps_abs and r_dual <= config.eps_abs:
                    status = "solved"

    return QpResult(
        x=x,
        y=y,
        status=status,
        iterations=iterations,
        primal_residual=r_prim,
        dual_residual=r_dual,
        objective=float(0.5 * x @ (P @ x) + q @ x),
    )


def _equilibrate(P: sp.csc_matrix, A: sp.csc_matrix, q: np.ndarray, rounds: int):
    """Ruiz scaling of the symmetric KKT block plus cost normalization.

    Returns positive vectors D (n), E (m) and scalar c such that the
    scaled problem (c D P D, c D q, E A D, E l, E u) is well conditioned.
    """
    n = P.shape[0]
    m = A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    if rounds <= 0:
        return D, E, 1.0
    Pw = P.copy()
    Aw = A.copy()
    for _ in range(rounds):
        col_p = np.maximum(
            np.abs(Pw).max(axis=0).toarray().ravel(),
            np.abs(Aw).max(axis=0).toarray().ravel(),
        )
        row_a = np.abs(Aw).max(axis=1).toarray().ravel()
        col_p[col_p == 0] = 1.0
        row_a[row_a == 0] = 1.0
        d = 1.0 / np.sqrt(col_p)
        e = 1.0 / np.sqrt(row_a)
        Dm = sp.diags(d)
        Em = sp.diags(e)
        Pw = Dm @ Pw @ Dm
        Aw = Em @ Aw @ Dm
        D *= d
        E *= e
    col_norms = np.abs(Pw).max(axis=0).toarray().ravel()
    mean_norm = float(np.mean(col_norms)) if n else 1.0
    denom = max(mean_norm, float(np.max(np.abs(D * q), initial=0.0)))
    cost = 1.0 / denom if denom > 1e-12 else 1.0
    return D, E, cost


def _certifies_primal_infeasible(
    At: sp.csc_matrix,
    l: np.ndarray,
    u: np.ndarray,
    dy: np.ndarray,
    eps: float,
) -> bool:
    """Farkas-style certificate: dy proves l <= Ax <= u is empty."""
    scale = float(np.max(np.abs(dy), initial=0.0))
    if scale <= eps:
        return False
    dy = dy / scale
    dy_pos = np.maximum(dy, 0.0)
    dy_neg = np.minimum(dy, 0.0)
    # A ray escaping through an infinite bound can never certify.
    if np.any(dy_pos[np.isinf(u)] > _RAY_TOL) or np.any(-dy_neg[np.isinf(l)] > _RAY_TOL):
        return False
    if np.max(np.abs(At @ dy), initial=0.0) > _RAY_TOL:
        return False
    support = float(np.sum(u[np.isfinite(u)] * dy_pos[np.isfinite(u)]))
    support += float(np.sum(l[np.isfinite(l)] * dy_neg[np.isfinite(l)]))
    # For a feasible problem the support of any near-null ray is bounded
    # below by roughly -||A' dy|| * ||x||, so the negativity margin must
    # sit well above that noise floor, scaled by the bound magnitudes.
    bound_scale = max(
        1.0,
        float(np.max(np.abs(u[np.isfinite(u)]), initial=0.0)),
        float(np.max(np.abs(l[np.isfinite(l)]), initial=0.0)),
    )
    return support < -1e-6 * bound_scale


def _polish(P, q, A, At, l, u, x, y, config: QpConfig):
    """Solve the equality QP on the active set identified by ADMM.

    The set is seeded from the dual signs — they separate well before
    the primal slacks tighten — with equality rows always included, then
    corrected for a few rounds: rows whose equality-QP multiplier comes
    back with the wrong sign are dropped, and rows the trial point
    violates are added on the violated side.  The iteration stops at the
    first consistent set; if the rounds budget runs out the attempt is
    abandoned and the splitting iteration carries on.
    """
    finite_l = np.isfinite(l)
    finite_u = np.isfinite(u)
    y_tol = 1e-9 * max(1.0, float(np.max(np.abs(y), initial=0.0)))
    eq = (u - l) <= _EQ_TOL
    lower = finite_l & (y < -y_tol) & ~eq
    upper = finite_u & (y > y_tol) & ~eq
    n = q.shape[0]
    add_tol = 1e-9 * max(
        1.0,
        float(np.max(np.abs(u[finite_u]), initial=0.0)),
        float(np.max(np.abs(l[finite_l]), initial=0.0)),
    )
    kkt_rounds = 10
    seen: set[bytes] = set()
    for _ in range(kkt_rounds):
        active = lower | upper | eq
        key = lower.tobytes() + upper.tobytes()
        if key in seen:
            # The working set is cycling; further rounds only repeat it.
            return None
        seen.add(key)
        if not np.any(active):
            Ax = A @ x
            r_prim = float(
                np.max(np.clip(l - Ax, 0, None) + np.clip(Ax - u, 0, None), initial=0.0)
            )
            r_dual = float(np.max(np.abs(P @ x + q), initial=0.0))
            return x, np.zeros_like(y), r_prim, r_dual
        idx = np.flatnonzero(active)
        A_act = A[idx]
        b_act = np.where(upper[idx] | eq[idx], u[idx], l[idx])
        na = idx.shape[0]
        kkt = sp.bmat(
            [
                [P + config.polish_reg * sp.eye(n), A_act.T],
                [A_act, -config.polish_reg * sp.eye(na)],
            ],
            format="csc",
        )
        try:
            lu = spla.splu(kkt)
        except RuntimeError:
            return None
        rhs = np.concatenate([-q, b_act])
        sol = lu.solve(rhs)
        # Iterative refinement removes the polish_reg perturbation.
        kkt_exact = sp.bmat([[P, A_act.T], [A_act, None]], format="csc")
        for _ in range(_REFINE_ROUNDS):
            resid = rhs - kkt_exact @ sol
            sol = sol + lu.solve(resid)
        px = sol[:n]
        py = np.zeros_like(y)
        py[idx] = sol[n:]
        if not (np.all(np.isfinite(px)) and np.all(np.isfinite(py))):
            return None
        # A multiplier with the wrong sign means the row should not have
        # been in the active set; certifying such a point would accept a
        # suboptimal solution.
        sign_tol = 1e-8 * (1.0 + float(np.max(np.abs(py), initial=0.0)))
        bad_lower = lower & (py > sign_tol)
        bad_upper = upper & (py < -sign_tol)
        pAx = A @ px
        miss_lower = finite_l & ~eq & (pAx < l - add_tol)
        miss_upper = finite_u & ~eq & (pAx > u + add_tol)
        changed = bad_lower | bad_upper | (miss_lower & ~lower) | (miss_upper & ~upper)
        if np.any(changed):
            lower = (lower & ~bad_lower) | (miss_lower & ~bad_lower)
            upper = (upper & ~bad_upper) | (miss_upper & ~bad_upper)
            continue
        box_violation = float(
            np.max(np.clip(l - pAx, 0, None) + np.clip(pAx - u, 0, None), initial=0.0)
        )
        # Active rows must actually sit on their bound, or a nonzero
        # multiplier would certify a point that is merely
        # interior-feasible.
        active_gap = float(np.max(np.abs(A_act @ px - b_act), initial=0.0))
        r_prim = max(box_violation, active_gap)
        r_dual = float(np.max(np.abs(P @ px + q + At @ py), initial=0.0))
        return px, py, r_prim, r_dual
    return None
