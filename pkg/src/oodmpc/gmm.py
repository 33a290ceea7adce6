"""Scoring of multimodal Gaussian-mixture trajectory predictions.

Some predictors emit, per agent and time step, a mixture of weighted
2-D Gaussian forecast tracks instead of an ensemble of point estimates.
The uncertainty of such a prediction is the probability-weighted sum of
the determinants of each mode's first-step covariance, and a whole
trajectory is anomalous when the score of at least one of its steps
strictly exceeds a detection threshold.  Thresholds come from the same
order-statistic calibration as the ensemble detector: feed per-step
scores to `conformal.calibrate`, which applies the identical
round-up-at-third-decimal rule.

Predictions are ingested from JSON files; producing them (running the
upstream predictor) is out of scope.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError, FormatError

_SYMMETRY_TOL = 1e-9
_PSD_TOL = -1e-9
_PROB_SUM_TOL = 1e-6


@dataclass(frozen=True)
class GmmMode:
    """One mixture component: a weight and a Gaussian forecast track.

    means has shape (S, 2) and covariances (S, 2, 2); entry 0 is the
    next-step forecast.  Covariances must be symmetric positive
    semidefinite.
    """

    probability: float
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self) -> None:
        p = float(self.probability)
        if not np.isfinite(p) or p < 0.0:
            raise ArgumentError(f"mode probability must be finite and >= 0, got {p}")
        means = np.asarray(self.means, dtype=np.float64)
        covs = np.asarray(self.covariances, dtype=np.float64)
        if means.ndim != 2 or means.shape[1] != 2 or means.shape[0] < 1:
            raise ArgumentError(f"means must have shape (S, 2) with S >= 1, got {means.shape}")
        if covs.shape != (means.shape[0], 2, 2):
            raise ArgumentError(
                f"covariances must have shape ({means.shape[0]}, 2, 2), got {covs.shape}"
            )
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(covs))):
            raise ArgumentError("means and covariances must be finite")
        if np.max(np.abs(covs[:, 0, 1] - covs[:, 1, 0])) > _SYMMETRY_TOL:
            raise ArgumentError("covariances must be symmetric within 1e-9")
        # 2x2 PSD test in closed form: both trace and determinant non-negative.
        det = covs[:, 0, 0] * covs[:, 1, 1] - covs[:, 0, 1] * covs[:, 1, 0]
        trace = covs[:, 0, 0] + covs[:, 1, 1]
        if np.min(det) < _PSD_TOL or np.min(trace) < _PSD_TOL:
            raise ArgumentError("covariances must be positive semidefinite")
        means = means.copy()
        covs = covs.copy()
        means.setflags(write=False)
        covs.setflags(write=False)
        object.__setattr__(self, "probability", p)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)

    @property
    def first_step_covariance(self) -> np.ndarray:
        return self.covariances[0]


@dataclass(frozen=True)
class GmmPrediction:
    """A mixture prediction for one agent at one time step."""

    agent: str
    t: int
    modes: tuple[GmmMode, ...]

    def __post_init__(self) -> None:
        if not self.modes:
            raise ArgumentError(f"prediction for agent {self.agent!r} at t={self.t} has no modes")
        object.__setattr__(self, "modes", tuple(self.modes))
        total = sum(m.probability for m in self.modes)
        if abs(total - 1.0) > _PROB_SUM_TOL:
            raise FormatError(
                f"agent {self.agent!r} t={self.t}: mode probabilities sum to "
                f"{total!r}, expected 1 within {_PROB_SUM_TOL}"
            )


def gmm_score(pred: GmmPrediction) -> float:
    """Probability-weighted sum of first-step covariance determinants."""
    total = 0.0
    for mode in pred.modes:
        c = mode.first_step_covariance
        total += mode.probability * float(c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0])
    return total


def trajectory_scores(predictions: Sequence[GmmPrediction]) -> np.ndarray:
    """Per-step scores for a sequence of predictions (one agent track)."""
    if not predictions:
        raise ArgumentError("predictions must be non-empty")
    return np.array([gmm_score(p) for p in predictions])


def classify_trajectory(scores: Sequence[float], threshold: float) -> bool:
    """True (anomalous) iff at least one per-step score strictly exceeds
    the threshold; scores exactly at the threshold are nominal."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ArgumentError("scores must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError("scores must be finite")
    return bool(np.max(arr) > threshold)


def _mode_from_record(rec: dict, where: str) -> GmmMode:
    if not isinstance(rec, dict) or "p" not in rec or "steps" not in rec:
        raise FormatError(f"{where}: each mode needs 'p' and 'steps'")
    steps = rec["steps"]
    if not isinstance(steps, list) or not steps:
        raise FormatError(f"{where}: 'steps' must be a non-empty list")
    means = []
    covs = []
    for j, step in enumerate(steps):
        if not isinstance(step, dict) or "mean" not in step or "cov" not in step:
            raise FormatError(f"{where} step {j}: each step needs 'mean' and 'cov'")
        means.append(step["mean"])
        covs.append(step["cov"])
    try:
        return GmmMode(
            probability=float(rec["p"]),
            means=np.asarray(means, dtype=np.float64),
            covariances=np.asarray(covs, dtype=np.float64),
        )
    except (ArgumentError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {exc}") from exc


def load_gmm_predictions(path: str) -> list[GmmPrediction]:
    """Load a prediction file: a JSON list of records
    {agent, t, modes: [{p, steps: [{mean: [x, y], cov: [[a, b], [b, d]]}]}]}.

    Every invariant is validated; violations report the record index.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise FormatError(f"{path}: top level must be a list of prediction records")
    out: list[GmmPrediction] = []
    for i, rec in enumerate(raw):
        where = f"record {i}"
        if not isinstance(rec, dict) or not {"agent", "t", "modes"} <= set(rec):
            raise FormatError(f"{where}: each record needs 'agent', 't', and 'modes'")
        if not isinstance(rec["modes"], list) or not rec["modes"]:
            raise FormatError(f"{where}: 'modes' must be a non-empty list")
        modes = tuple(
            _mode_from_record(m, f"{where} mode {k}") for k, m in enumerate(rec["modes"])
        )
        try:
            out.append(GmmPrediction(agent=str(rec["agent"]), t=int(rec["t"]), modes=modes))
        except (FormatError, ArgumentError, TypeError, ValueError) as exc:
            raise FormatError(f"{where}: {exc}") from exc
    return out


def save_gmm_predictions(predictions: Sequence[GmmPrediction], path: str) -> None:
    """Write predictions in the load_gmm_predictions schema (lossless)."""
    payload = []
    for pred in predictions:
        payload.append(
            {
                "agent": pred.agent,
                "t": pred.t,
                "modes": [
                    {
                        "p": mode.probability,
                        "steps": [
                            {
                                "mean": [float(v) for v in mean],
                                "cov": [[float(c) for c in row] for row in cov],
                            }
                            for mean, cov in zip(mode.means, mode.covariances)
                        ],
                    }
                    for mode in pred.modes
                ],
            }
        )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)


def synth_gmm_predictions(
    n_steps: int,
    n_modes: int = 25,
    horizon: int = 6,
    inflation: float = 1.0,
    agent: str = "agent-0",
    seed: int = 0,
) -> list[GmmPrediction]:
    """Seeded synthetic mixture predictions for fixtures and demos.

    Per step, each mode follows its own constant-velocity track with a
    random rotated-ellipse covariance whose scale is multiplied by
    `inflation`; mode weights are drawn from a flat Dirichlet.  Larger
    inflation emulates a predictor growing less certain.
    """
    if n_steps < 1 or n_modes < 1 or horizon < 1:
        raise ArgumentError("n_steps, n_modes, and horizon must be at least 1")
    if inflation <= 0:
        raise ArgumentError("inflation must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out = []
    for t in range(n_steps):
        weights = rng.dirichlet(np.ones(n_modes))
        modes = []
        for z in range(n_modes):
            start = rng.normal(size=2) * 2.0
            vel = rng.normal(size=2) * 0.1
            means = start[None, :] + np.arange(1, horizon + 1)[:, None] * vel[None, :]
            angle = rng.uniform(0.0, np.pi)
            rot = np.array(
                [[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]
            )
            covs = []
            for s in range(horizon):
                axes = inflation * (0.05 + rng.random(2) * 0.2) * (1.0 + 0.3 * s)
                covs.append(rot @ np.diag(axes) @ rot.T)
            modes.append(
                GmmMode(
                    probability=float(weights[z]),
                    means=means,
                    covariances=np.asarray(covs),
                )
            )
        out.append(GmmPrediction(agent=agent, t=t, modes=tuple(modes)))
    return out
