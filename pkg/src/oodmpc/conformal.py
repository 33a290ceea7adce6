"""Split conformal calibration of an OOD detector on ensemble covariance scores.

The nonconformity score of a prediction is the spectral norm of the ensemble
covariance. Given N calibration scores sorted non-decreasing and a failure
probability delta, the threshold index is K = ceil((N + 1) * (1 - delta)) and
the detector threshold C is the K-th smallest score rounded up at the third
decimal, so P(score <= C) >= 1 - delta for exchangeable in-distribution data.

Conditioned on the calibration draw, the coverage attained by the raw K-th
order statistic is Beta(K, N + 1 - K) distributed, with mean K / (N + 1).
That distribution drives two planning utilities: the probability that the
realized coverage falls in a band (x1, x2), and a bisection search for the
calibration size N whose band probability reaches a target.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .ensemble import PredictionStats
from .errors import ArgumentError, CalibrationError, FormatError, SearchError

# Absolute slack when ceiling (N + 1) * (1 - delta): requested failure
# probabilities are usually decimals rounded coarser than the 1 / (N + 1)
# coverage grid, and the raw ceiling would misread e.g. delta=0.0396 at N=100.
_INDEX_FUZZ = 1e-3
_CF_MAX_ITER = 500
_CF_EPS = 1e-16
_CF_TINY = 1e-300
_BISECTION_MAX_STEPS = 200


@dataclass(frozen=True)
class ScoreSet:
    """Calibration scores stored sorted non-decreasing."""

    scores: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1 or s.size < 1:
            raise ArgumentError("scores must be a non-empty 1-D array")
        if not np.all(np.isfinite(s)):
            raise ArgumentError("scores must be finite")
        if np.any(s < 0):
            raise ArgumentError("scores must be non-negative")
        s = np.sort(s)
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return int(self.scores.size)

    @property
    def digest(self) -> str:
        payload = ",".join(repr(float(v)) for v in self.scores)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class Detector:
    threshold: float  # C, rounded up at the third decimal
    order_stat: float  # raw K-th smallest calibration score
    K: int
    N: int
    delta: float
    score_digest: str = ""


@dataclass(frozen=True)
class CoverageDistribution:
    """Beta law of the coverage attained by the raw order-statistic threshold."""

    alpha: float  # K
    beta: float  # N + 1 - K

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    def cdf(self, x: float) -> float:
        return regularized_incomplete_beta(x, self.alpha, self.beta)


def nonconformity(stats: PredictionStats) -> float:
    """Spectral norm of the 2x2 prediction covariance.

    For a symmetric PSD matrix this is the largest eigenvalue, evaluated in
    closed form: ((s11 + s22) + sqrt((s11 - s22)^2 + 4 s12^2)) / 2.
    """
    cov = np.asarray(stats.covariance, dtype=np.float64)
    if cov.shape != (2, 2):
        raise ArgumentError(f"covariance must be 2x2, got {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise ArgumentError("covariance contains non-finite values")
    if abs(cov[0, 1] - cov[1, 0]) > 1e-9:
        raise ArgumentError("covariance is not symmetric within 1e-9")
    s11, s22, s12 = cov[0, 0], cov[1, 1], 0.5 * (cov[0, 1] + cov[1, 0])
    return 0.5 * ((s11 + s22) + math.sqrt((s11 - s22) ** 2 + 4.0 * s12 * s12))


def quantile_index(n: int, delta: float) -> int:
    """K = ceil((n + 1) * (1 - delta)), with slack for coarsely rounded delta."""
    return math.ceil((n + 1) * (1.0 - delta) - _INDEX_FUZZ)


def round_up_third_decimal(value: float) -> float:
    """Smallest multiple of 0.001 that is >= value (modulo float dust)."""
    rounded = math.ceil(value * 1000.0 - 1e-9) / 1000.0
    if rounded < value:
        rounded += 0.001
    return rounded


def calibrate(
    scores: ScoreSet, delta: float | None = None, K: int | None = None
) -> Detector:
    """Build a detector from calibration scores at failure probability delta
    (or directly at order-statistic index K; give exactly one of the two)."""
    n = len(scores)
    if (delta is None) == (K is None):
        raise ArgumentError("give exactly one of delta and K")
    if delta is not None:
        if not 0.0 < delta < 1.0:
            raise ArgumentError("delta must lie in (0, 1)")
        K = quantile_index(n, delta)
        if K > n:
            raise CalibrationError(
                f"delta={delta} is below the resolution of N={n} calibration scores; "
                f"the coverage grid requires delta >= 1/(N+1) = {1.0 / (n + 1):.6g}"
            )
        if K < 1:
            raise CalibrationError(f"delta={delta} leaves no usable order statistic for N={n}")
    else:
        if not 1 <= K <= n:
            raise ArgumentError(f"K must lie in [1, {n}], got {K}")
        delta = 1.0 - K / (n + 1)
    order_stat = float(scores.scores[K - 1])
    threshold = round_up_third_decimal(order_stat)
    return Detector(
        threshold=threshold,
        order_stat=order_stat,
        K=int(K),
        N=n,
        delta=float(delta),
        score_digest=scores.digest,
    )


def detect(detector: Detector, rho: float) -> int:
    """1 if the score exceeds the threshold (OOD), else 0; the boundary is in-distribution."""
    if not np.isfinite(rho):
        raise ArgumentError("score must be finite")
    if rho < 0:
        raise ArgumentError("score must be non-negative")
    return 1 if rho > detector.threshold else 0


def coverage_distribution(n: int, k: int) -> CoverageDistribution:
    if n < 1:
        raise ArgumentError("n must be at least 1")
    if not 1 <= k <= n:
        raise ArgumentError(f"k must lie in [1, {n}], got {k}")
    return CoverageDistribution(alpha=float(k), beta=float(n + 1 - k))


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz scheme)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise SearchError(f"incomplete beta continued fraction did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b), the regularized incomplete beta function.

    Continued-fraction evaluation with the symmetry reduction
    I_x(a, b) = 1 - I_{1-x}(b, a) applied when x is past the switch point
    (a + 1) / (a + b + 2), where the fraction converges fastest.
    """
    if not (np.isfinite(x) and np.isfinite(a) and np.isfinite(b)):
        raise ArgumentError("arguments must be finite")
    if a <= 0 or b <= 0:
        raise ArgumentError("shape parameters must be positive")
    if x < 0.0 or x > 1.0:
        raise ArgumentError("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def calculate_probability(n_test: int, delta: float, x1: float, x2: float) -> float:
    """Probability that realized coverage lands in (x1, x2) for a size-n_test
    calibration set at failure probability delta.

    Coverage follows Beta(K, n_test + 1 - K) with K = ceil((1 - delta)(n_test + 1)),
    so the value is I_x2(K, n_test + 1 - K) - I_x1(K, n_test + 1 - K).
    """
    if n_test < 1:
        raise ArgumentError("n_test must be at least 1")
    if not 0.0 < delta < 1.0:
        raise ArgumentError("delta must lie in (0, 1)")
    if not (0.0 <= x1 < 1.0 - delta < x2 <= 1.0):
        raise ArgumentError("bounds must satisfy 0 <= x1 < 1 - delta < x2 <= 1")
    k = quantile_index(n_test, delta)
    if k > n_test:
        raise ArgumentError(
            f"delta={delta} is below the coverage resolution of n_test={n_test}"
        )
    a, b = float(k), float(n_test + 1 - k)
    return regularized_incomplete_beta(x2, a, b) - regularized_incomplete_beta(x1, a, b)


def bisection_start_lo(delta: float) -> int:
    """Smallest calibration size whose implied K stays within the set."""
    return math.ceil((2.0 - delta) / delta - 1e-9)


def bisection_start_hi(delta: float) -> int:
    return bisection_start_lo(delta) + math.ceil(2.0 / (1.0 - delta) - 1e-9)


def required_calibration_size(
    delta: float,
    target_probability: float,
    precision: int = 1,
    x1: float = 0.95,
    x2: float = 0.97,
) -> int:
    """Smallest-bracket bisection for the calibration size N at which
    calculate_probability(N, delta, x1, x2) reaches target_probability.

    Brackets by doubling/halving from the starting sizes, bisects until the
    bracket width is at most `precision`, and returns a size achieving the
    target probability.
    """
    if not 0.0 < delta < 1.0:
        raise ArgumentError("delta must lie in (0, 1)")
    if not 0.0 < target_probability < 1.0:
        raise ArgumentError("target_probability must lie in (0, 1)")
    if precision < 1:
        raise ArgumentError("precision must be at least 1")
    if not (0.0 <= x1 < 1.0 - delta < x2 <= 1.0):
        raise ArgumentError("bounds must satisfy 0 <= x1 < 1 - delta < x2 <= 1")
    n_min = bisection_start_lo(delta)
    n_lo, n_hi = n_min, bisection_start_hi(delta)
    p_lo = calculate_probability(n_lo, delta, x1, x2)
    p_hi = calculate_probability(n_hi, delta, x1, x2)
    for _ in range(_BISECTION_MAX_STEPS):
        if abs(n_hi - n_lo) <= precision:
            break
        if p_hi < target_probability:
            n_hi *= 2
            p_hi = calculate_probability(n_hi, delta, x1, x2)
        elif p_lo > target_probability:
            if n_lo <= n_min:
                # Even the smallest feasible calibration set beats the target.
                return n_lo
            n_lo = max(math.ceil(n_lo / 2), n_min)
            p_lo = calculate_probability(n_lo, delta, x1, x2)
        else:
            n_test = math.ceil((n_lo + n_hi) / 2)
            p_test = calculate_probability(n_test, delta, x1, x2)
            if p_test < target_probability:
                n_lo, p_lo = n_test, p_test
            else:
                n_hi, p_hi = n_test, p_test
    else:
        raise SearchError("calibration size bisection exceeded its step budget")
    result = math.ceil((n_lo + n_hi) / 2)
    # The bracket midpoint can sit just under the target for precision > 1;
    # walk up within the bracket so the returned size always achieves it.
    while calculate_probability(result, delta, x1, x2) < target_probability and result < n_hi:
        result += 1
    return result


def save_detector(detector: Detector, path: str) -> None:
    doc = {
        "C": detector.threshold,
        "order_stat": detector.order_stat,
        "K": detector.K,
        "N": detector.N,
        "delta": detector.delta,
        "score_digest": detector.score_digest,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_detector(path: str) -> Detector:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    for key in ("C", "K", "N", "delta"):
        if key not in doc:
            raise FormatError(f"{path}: missing field {key!r}")
    k, n = int(doc["K"]), int(doc["N"])
    if not 1 <= k <= n:
        raise FormatError(f"{path}: K={k} out of range for N={n}")
    c = float(doc["C"])
    if not (np.isfinite(c) and c >= 0):
        raise FormatError(f"{path}: threshold must be finite and non-negative")
    return Detector(
        threshold=c,
        order_stat=float(doc.get("order_stat", c)),
        K=k,
        N=n,
        delta=float(doc["delta"]),
        score_digest=str(doc.get("score_digest", "")),
    )


def export_scores(scores: ScoreSet, path: str) -> None:
    """Write scores as a one-column CSV with header rho."""
    with open(path, "w") as fh:
        fh.write("rho\n")
        for v in scores.scores:
            fh.write(repr(float(v)) + "\n")


def load_scores(path: str) -> ScoreSet:
    values = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "rho":
            raise FormatError(f"{path}: line 1: expected header 'rho'")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(float(line))
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
    if not values:
        raise FormatError(f"{path}: no scores")
    return ScoreSet(scores=np.array(values))
