"""Crossing-trajectory datasets: CSV I/O, windowed pairs, splits, synthesis.

Trajectories are fixed-rate 2-D position tracks of agents crossing a road.
Supervised pairs map a window of consecutive positions to the next position.
A dataset split holds out whole test trajectories and removes exactly one
uniformly chosen pair per remaining trajectory into a calibration set; the
removal is pair-level, so overlapping windows that share raw points with a
calibration pair stay in training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FormatError

DEFAULT_SAMPLE_RATE_HZ = 23.976
WINDOW = 14
# Vertical distance from the road centerline at which synthetic crossings start.
SYNTH_START_OFFSET_M = 4.0
# AR(1) smoothing coefficient for synthetic positional jitter.
_JITTER_AR = 0.5
_JITTER_DF = 3.0

CSV_HEADER = ["id", "step", "x", "y"]


@dataclass(frozen=True)
class Trajectory:
    """A single agent track sampled at a fixed rate.

    positions has shape (L, 2) in meters and is immutable.
    """

    id: str
    positions: np.ndarray
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ArgumentError(f"trajectory {self.id!r}: positions must have shape (L, 2)")
        if pos.shape[0] < 1:
            raise ArgumentError(f"trajectory {self.id!r}: empty position list")
        if not np.all(np.isfinite(pos)):
            raise ArgumentError(f"trajectory {self.id!r}: non-finite position")
        if not self.sample_rate_hz > 0:
            raise ArgumentError(f"trajectory {self.id!r}: sample rate must be positive")
        pos = pos.copy()
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True, eq=False)
class DataPair:
    """One supervised example: a flattened window of positions and the next position."""

    input_window: np.ndarray  # shape (2 * window,), row-major over time
    target: np.ndarray  # shape (2,)
    traj_id: str = ""
    start: int = 0  # index of the first window position in the source trajectory

    def __post_init__(self) -> None:
        w = np.asarray(self.input_window, dtype=np.float64).copy()
        t = np.asarray(self.target, dtype=np.float64).copy()
        if w.ndim != 1 or w.size % 2 != 0:
            raise ArgumentError("input_window must be a flat array of 2-D positions")
        if t.shape != (2,):
            raise ArgumentError("target must have shape (2,)")
        w.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "input_window", w)
        object.__setattr__(self, "target", t)

    @property
    def key(self) -> tuple[str, int]:
        return (self.traj_id, self.start)


@dataclass(frozen=True)
class DatasetSplit:
    train_pairs: tuple[DataPair, ...]
    calibration_pairs: tuple[DataPair, ...]
    test_trajectories: tuple[Trajectory, ...]
    seed: int


@dataclass(frozen=True)
class SynthParams:
    """Parameters of the parametric crossing synthesizer.

    Each trajectory draws a constant speed and heading, walks in a straight
    line across the road, and adds smooth positional jitter. Crossing
    direction is down (decreasing y) or up with probability
    crossing_direction_prob of an upward crossing.
    """

    mean_speed: float = 1.1
    speed_std: float = 0.2
    heading_mean: float = 0.0
    heading_std: float = 0.25
    jitter_std: float = 0.08
    length: int = 154
    crossing_direction_prob: float = 0.5
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ

    def violations(self) -> list[str]:
        out = []
        if not self.mean_speed > 0:
            out.append("mean_speed must be positive")
        if self.speed_std < 0:
            out.append("speed_std must be non-negative")
        if self.heading_std < 0:
            out.append("heading_std must be non-negative")
        if self.jitter_std < 0:
            out.append("jitter_std must be non-negative")
        if self.length < 2:
            out.append("length must be at least 2")
        if not 0.0 <= self.crossing_direction_prob <= 1.0:
            out.append("crossing_direction_prob must lie in [0, 1]")
        if not self.sample_rate_hz > 0:
            out.append("sample_rate_hz must be positive")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ArgumentError("; ".join(problems))


def load_trajectories(path: str, sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ) -> list[Trajectory]:
    """Read trajectories from a CSV with header id,step,x,y.

    Step indices must be 0-based and contiguous within each id. Raises
    FormatError naming the offending 1-based line on any malformed row.
    """
    by_id: dict[str, dict[int, tuple[float, float]]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected header {','.join(CSV_HEADER)}")
        if [h.strip() for h in header] != CSV_HEADER:
            raise FormatError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            tid = row[0].strip()
            try:
                step = int(row[1])
                x = float(row[2])
                y = float(row[3])
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
            if not (np.isfinite(x) and np.isfinite(y)):
                raise FormatError(f"{path}: line {lineno}: non-finite coordinate")
            if step < 0:
                raise FormatError(f"{path}: line {lineno}: negative step index")
            steps = by_id.setdefault(tid, {})
            if not steps and tid not in order:
                order.append(tid)
            if step in steps:
                raise FormatError(f"{path}: line {lineno}: duplicate step {step} for id {tid!r}")
            steps[step] = (x, y)
    trajectories = []
    for tid in order:
        steps = by_id[tid]
        expected = set(range(len(steps)))
        if set(steps) != expected:
            missing = sorted(expected - set(steps))[:1] or sorted(set(steps) - expected)[:1]
            raise FormatError(f"{path}: id {tid!r}: step indices not contiguous from 0 (near step {missing[0]})")
        pos = np.array([steps[i] for i in range(len(steps))], dtype=np.float64)
        trajectories.append(Trajectory(id=tid, positions=pos, sample_rate_hz=sample_rate_hz))
    return trajectories


def save_trajectories(trajectories: list[Trajectory], path: str) -> None:
    """Write trajectories as CSV with header id,step,x,y at full float precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for traj in trajectories:
            for step, (x, y) in enumerate(traj.positions):
                writer.writerow([traj.id, step, repr(float(x)), repr(float(y))])


def make_pairs(trajectory: Trajectory, window: int = WINDOW) -> list[DataPair]:
    """Build all length-window sliding pairs; a length-L trajectory yields L - window."""
    if window < 1:
        raise ArgumentError("window must be at least 1")
    n = len(trajectory)
    if n < window + 1:
        raise ArgumentError(
            f"trajectory {trajectory.id!r} has {n} positions, needs at least {window + 1}"
        )
    pairs = []
    pos = trajectory.positions
    for start in range(n - window):
        pairs.append(
            DataPair(
                input_window=pos[start : start + window].reshape(-1),
                target=pos[start + window],
                traj_id=trajectory.id,
                start=start,
            )
        )
    return pairs


def split_dataset(
    trajectories: list[Trajectory], n_test: int, seed: int, window: int = WINDOW
) -> DatasetSplit:
    """Hold out n_test whole trajectories; move one uniform pair per remaining
    trajectory into calibration and keep the rest for training."""
    if n_test < 0:
        raise ArgumentError("n_test must be non-negative")
    if n_test >= len(trajectories):
        raise ArgumentError(
            f"n_test={n_test} leaves no trajectory for training/calibration out of {len(trajectories)}"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    test_idx = set(rng.choice(len(trajectories), size=n_test, replace=False).tolist())
    test = tuple(trajectories[i] for i in sorted(test_idx))
    train: list[DataPair] = []
    calibration: list[DataPair] = []
    for i, traj in enumerate(trajectories):
        if i in test_idx:
            continue
        pairs = make_pairs(traj, window)
        j = int(rng.integers(len(pairs)))
        calibration.append(pairs[j])
        train.extend(pairs[:j])
        train.extend(pairs[j + 1 :])
    return DatasetSplit(
        train_pairs=tuple(train),
        calibration_pairs=tuple(calibration),
        test_trajectories=test,
        seed=seed,
    )


def reflect_balance(trajectories: list[Trajectory]) -> list[Trajectory]:
    """Negate y for trajectories whose net motion is upward so all crossings
    point the same way; ties count as downward and are left unchanged."""
    out = []
    for traj in trajectories:
        dy = traj.positions[-1, 1] - traj.positions[0, 1]
        if dy > 0:
            pos = traj.positions.copy()
            pos[:, 1] = -pos[:, 1]
            out.append(Trajectory(id=traj.id, positions=pos, sample_rate_hz=traj.sample_rate_hz))
        else:
            out.append(traj)
    return out


def _smooth_jitter(rng: np.random.Generator, length: int, std: float) -> np.ndarray:
    """Stationary AR(1) noise with per-component std equal to std.

    Innovations are Student-t so occasional windows are genuinely harder
    than average; a trained ensemble then yields a non-degenerate residual
    tail instead of collapsing every score onto one tight mode.
    """
    if std == 0.0:
        return np.zeros((length, 2))
    tscale = np.sqrt((_JITTER_DF - 2.0) / _JITTER_DF)
    eps = rng.standard_t(_JITTER_DF, size=(length, 2)) * tscale
    out = np.empty((length, 2))
    out[0] = eps[0]
    scale = np.sqrt(1.0 - _JITTER_AR**2)
    for t in range(1, length):
        out[t] = _JITTER_AR * out[t - 1] + scale * eps[t]
    return std * out


def synth_generate(params: SynthParams, n: int, seed: int) -> list[Trajectory]:
    """Generate n independent synthetic crossing trajectories.

    Deterministic per (params, n, seed); trajectories are i.i.d. draws.
    """
    params.validate()
    if n < 0:
        raise ArgumentError("n must be non-negative")
    streams = np.random.SeedSequence(seed).spawn(n)
    h = 1.0 / params.sample_rate_hz
    out = []
    for i, stream in enumerate(streams):
        rng = np.random.Generator(np.random.PCG64(stream))
        upward = rng.random() < params.crossing_direction_prob
        speed = max(0.05, rng.normal(params.mean_speed, params.speed_std))
        heading = rng.normal(params.heading_mean, params.heading_std)
        # heading measures deviation from the crossing axis; 0 is straight across
        sign = 1.0 if upward else -1.0
        velocity = speed * np.array([np.sin(heading), sign * np.cos(heading)])
        start = np.array([0.0, -sign * SYNTH_START_OFFSET_M])
        t = np.arange(params.length)[:, None]
        pos = start[None, :] + t * h * velocity[None, :]
        pos += _smooth_jitter(rng, params.length, params.jitter_std)
        out.append(
            Trajectory(id=f"synth-{i:04d}", positions=pos, sample_rate_hz=params.sample_rate_hz)
        )
    return out
