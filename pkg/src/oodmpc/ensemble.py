"""Deep-ensemble one-step trajectory predictor.

An ensemble of identically shaped MLPs (default 28-32-32-2, ReLU hidden
layers, identity output) maps a flattened window of 14 consecutive 2-D
positions to the next position. Members share data but differ in random
initialization and shuffling, so their disagreement carries epistemic
uncertainty: the ensemble reports the member mean and the unbiased sample
covariance of member outputs.

Windows are translated so the newest observed position sits at the origin
before inference, and the predicted mean is translated back; prediction is
therefore invariant to absolute position, and the covariance is unaffected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FormatError, TrainingError

DEFAULT_HIDDEN = (32, 32)
DEFAULT_WINDOW = 14
BOOTSTRAP_SPEED = 1.1  # m/s, constant-velocity fallback before a full window exists
WEIGHT_FILE_VERSION = 1
_PROBE_MAX = 512


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 200

    def violations(self) -> list[str]:
        out = []
        if not self.learning_rate > 0:
            out.append("learning_rate must be positive")
        if not 0 <= self.beta1 < 1:
            out.append("beta1 must lie in [0, 1)")
        if not 0 <= self.beta2 < 1:
            out.append("beta2 must lie in [0, 1)")
        if not self.eps > 0:
            out.append("eps must be positive")
        if self.batch_size < 1:
            out.append("batch_size must be at least 1")
        if self.epochs < 0:
            out.append("epochs must be non-negative")
        return out


@dataclass(frozen=True)
class PredictionStats:
    """Ensemble mean and unbiased covariance of one predicted position."""

    mean: np.ndarray  # (2,)
    covariance: np.ndarray  # (2, 2), symmetric PSD up to rounding


@dataclass(frozen=True, eq=False)
class MlpModel:
    """One ensemble member; weights[k] has shape (fan_in, fan_out)."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    seed: int

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the network on already-normalized inputs of shape (..., input_dim)."""
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0.0)
        return h


@dataclass(frozen=True, eq=False)
class Ensemble:
    members: tuple[MlpModel, ...]
    window: int = DEFAULT_WINDOW
    # Mean probe MSE per epoch (epochs + 1 entries counting initialization);
    # populated by train_ensemble, not serialized.
    train_history: tuple[float, ...] | None = None

    @property
    def n(self) -> int:
        return len(self.members)


def _layer_dims(window: int, hidden: tuple[int, ...]) -> list[tuple[int, int]]:
    dims = [2 * window, *hidden, 2]
    return list(zip(dims[:-1], dims[1:]))


def init_ensemble(
    n: int,
    seeds: list[int],
    window: int = DEFAULT_WINDOW,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
) -> Ensemble:
    """Create n members with scaled-uniform fan-in initialization.

    Seeds must be distinct: identical seeds produce identical members, which
    collapses the ensemble's disagreement signal.
    """
    if n < 2:
        raise ArgumentError("an ensemble needs at least 2 members for a covariance")
    if len(seeds) != n:
        raise ArgumentError(f"expected {n} seeds, got {len(seeds)}")
    if len(set(seeds)) != n:
        raise ArgumentError("member seeds must be distinct")
    members = []
    for seed in seeds:
        init_ss, _ = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.Generator(np.random.PCG64(init_ss))
        weights, biases = [], []
        for fan_in, fan_out in _layer_dims(window, hidden):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        members.append(MlpModel(weights=tuple(weights), biases=tuple(biases), seed=int(seed)))
    return Ensemble(members=tuple(members), window=window)


def _as_flat_window(window_positions: np.ndarray, window: int) -> np.ndarray:
    w = np.asarray(window_positions, dtype=np.float64)
    if w.shape == (window, 2):
        w = w.reshape(-1)
    if w.shape != (2 * window,):
        raise ArgumentError(f"expected a window of {window} positions, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ArgumentError("window contains non-finite values")
    return w


def normalize_pairs(pairs, window: int = DEFAULT_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Translate each pair so its newest window position is the origin.

    Returns (X, Y) with X of shape (m, 2*window) and Y of shape (m, 2).
    """
    m = len(pairs)
    x = np.empty((m, 2 * window))
    y = np.empty((m, 2))
    for i, pair in enumerate(pairs):
        w = _as_flat_window(pair.input_window, window)
        anchor = w[-2:]
        x[i] = w - np.tile(anchor, window)
        y[i] = np.asarray(pair.target, dtype=np.float64) - anchor
    return x, y


def ensemble_stats(ensemble: Ensemble, window_positions: np.ndarray) -> PredictionStats:
    """Predict the next position: member mean and unbiased member covariance.

    covariance = sum_i (f_i - mean)(f_i - mean)^T / (n - 1).
    """
    w = _as_flat_window(window_positions, ensemble.window)
    anchor = w[-2:]
    xn = w - np.tile(anchor, ensemble.window)
    outputs = np.stack([member.forward(xn) for member in ensemble.members])
    mean = outputs.mean(axis=0)
    dev = outputs - mean
    cov = dev.T @ dev / (len(ensemble.members) - 1)
    cov = 0.5 * (cov + cov.T)
    return PredictionStats(mean=mean + anchor, covariance=cov)


def _batch_stats(ensemble: Ensemble, xn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized mean and covariance for normalized windows of shape (m, 2*window)."""
    outs = np.stack([member.forward(xn) for member in ensemble.members])  # (n, m, 2)
    mean = outs.mean(axis=0)
    dev = outs - mean
    cov = np.einsum("nmi,nmj->mij", dev, dev) / (len(ensemble.members) - 1)
    cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
    return mean, cov


def batch_scores_input(pairs, window: int = DEFAULT_WINDOW) -> np.ndarray:
    x, _ = normalize_pairs(pairs, window)
    return x


def rollout(
    ensemble: Ensemble,
    history: np.ndarray,
    horizon: int,
    sample_rate_hz: float,
    bootstrap_speed: float = BOOTSTRAP_SPEED,
) -> list[tuple[np.ndarray, PredictionStats]]:
    """Predict horizon future positions by feeding the mean back recursively.

    While fewer than `window` observations/predictions exist, positions are
    extrapolated at bootstrap_speed along the initial crossing direction
    (straight across the road, inferred from the sign of the starting y);
    those entries carry zero covariance.
    """
    hist = np.asarray(history, dtype=np.float64)
    if hist.ndim != 2 or hist.shape[1] != 2 or hist.shape[0] < 1:
        raise ArgumentError("history must have shape (m, 2) with m >= 1")
    if horizon < 0:
        raise ArgumentError("horizon must be non-negative")
    if not sample_rate_hz > 0:
        raise ArgumentError("sample_rate_hz must be positive")
    direction = np.array([0.0, -1.0]) if hist[0, 1] >= 0 else np.array([0.0, 1.0])
    step = bootstrap_speed / sample_rate_hz * direction
    buf = [p for p in hist]
    out: list[tuple[np.ndarray, PredictionStats]] = []
    for _ in range(horizon):
        if len(buf) < ensemble.window:
            nxt = buf[-1] + step
            stats = PredictionStats(mean=nxt.copy(), covariance=np.zeros((2, 2)))
        else:
            window = np.array(buf[-ensemble.window :]).reshape(-1)
            stats = ensemble_stats(ensemble, window)
            nxt = stats.mean
        buf.append(nxt)
        out.append((nxt, stats))
    return out


def _stack_params(members) -> tuple[list[np.ndarray], list[np.ndarray]]:
    n_layers = len(members[0].weights)
    ws = [np.stack([m.weights[k] for m in members]) for k in range(n_layers)]
    bs = [np.stack([m.biases[k] for m in members]) for k in range(n_layers)]
    return ws, bs


def _forward_stacked(ws, bs, x):
    """x: (n, B, d_in) or (B, d_in) broadcast across members."""
    h = x
    acts = []
    last = len(ws) - 1
    for k, (w, b) in enumerate(zip(ws, bs)):
        h = h @ w + b[:, None, :]
        if k < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def _mse_and_grads_stacked(ws, bs, xb, yb):
    """Per-member MSE (mean over batch and both outputs) and its gradients."""
    out, acts = _forward_stacked(ws, bs, xb)
    diff = out - yb
    batch, width = diff.shape[1], diff.shape[2]
    losses = np.einsum("nbi,nbi->n", diff, diff) / (batch * width)
    g = 2.0 * diff / (batch * width)
    grads_w = [None] * len(ws)
    grads_b = [None] * len(ws)
    for k in range(len(ws) - 1, -1, -1):
        below = xb if k == 0 else acts[k - 1]
        grads_w[k] = np.einsum("nbi,nbj->nij", below, g)
        grads_b[k] = g.sum(axis=1)
        if k > 0:
            g = (g @ np.transpose(ws[k], (0, 2, 1))) * (acts[k - 1] > 0.0)
    return losses, grads_w, grads_b


def loss_and_gradients(model: MlpModel, x: np.ndarray, y: np.ndarray):
    """MSE loss and analytic parameter gradients for one member.

    x: (m, input_dim) normalized windows; y: (m, 2) normalized targets.
    Returns (loss, [(dW, db) per layer]).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ArgumentError("x and y must be 2-D with matching first dimension")
    ws = [w[None] for w in model.weights]
    bs = [b[None] for b in model.biases]
    losses, gw, gb = _mse_and_grads_stacked(ws, bs, x[None], y[None])
    return float(losses[0]), [(gw[k][0], gb[k][0]) for k in range(len(ws))]


def train_ensemble(ensemble: Ensemble, pairs, cfg: TrainConfig) -> Ensemble:
    """Train every member with Adam on the same pairs, each with its own
    seed-derived shuffling. Returns a new ensemble; zero epochs returns the
    input parameters unchanged (with a one-entry history).
    """
    problems = cfg.violations()
    if problems:
        raise ArgumentError("; ".join(problems))
    if len(pairs) < 1:
        raise ArgumentError("training requires at least one pair")
    x, y = normalize_pairs(pairs, ensemble.window)
    m = x.shape[0]
    n = ensemble.n
    ws, bs = _stack_params(ensemble.members)
    probe_x = x[: min(_PROBE_MAX, m)]
    probe_y = y[: min(_PROBE_MAX, m)]

    def probe_mse() -> float:
        out, _ = _forward_stacked(ws, bs, probe_x[None])
        diff = out - probe_y[None]
        return float(np.mean(diff**2))

    history = [probe_mse()]
    shuffle_rngs = []
    for member in ensemble.members:
        _, shuffle_ss = np.random.SeedSequence(member.seed).spawn(2)
        shuffle_rngs.append(np.random.Generator(np.random.PCG64(shuffle_ss)))

    mw = [np.zeros_like(w) for w in ws]
    vw = [np.zeros_like(w) for w in ws]
    mb = [np.zeros_like(b) for b in bs]
    vb = [np.zeros_like(b) for b in bs]
    t = 0
    batch = cfg.batch_size
    for epoch in range(cfg.epochs):
        perms = np.stack([rng.permutation(m) for rng in shuffle_rngs])
        for s in range(0, m, batch):
            idx = perms[:, s : s + batch]
            xb = x[idx]  # (n, B, d)
            yb = y[idx]
            losses, gw, gb = _mse_and_grads_stacked(ws, bs, xb, yb)
            if not np.all(np.isfinite(losses)):
                bad = int(np.flatnonzero(~np.isfinite(losses))[0])
                raise TrainingError(f"member {bad} diverged at epoch {epoch}")
            t += 1
            c1 = 1.0 - cfg.beta1**t
            c2 = 1.0 - cfg.beta2**t
            for k in range(len(ws)):
                mw[k] = cfg.beta1 * mw[k] + (1 - cfg.beta1) * gw[k]
                vw[k] = cfg.beta2 * vw[k] + (1 - cfg.beta2) * gw[k] ** 2
                ws[k] = ws[k] - cfg.learning_rate * (mw[k] / c1) / (np.sqrt(vw[k] / c2) + cfg.eps)
                mb[k] = cfg.beta1 * mb[k] + (1 - cfg.beta1) * gb[k]
                vb[k] = cfg.beta2 * vb[k] + (1 - cfg.beta2) * gb[k] ** 2
                bs[k] = bs[k] - cfg.learning_rate * (mb[k] / c1) / (np.sqrt(vb[k] / c2) + cfg.eps)
        history.append(probe_mse())
    members = []
    for i, member in enumerate(ensemble.members):
        members.append(
            MlpModel(
                weights=tuple(ws[k][i].copy() for k in range(len(ws))),
                biases=tuple(bs[k][i].copy() for k in range(len(bs))),
                seed=member.seed,
            )
        )
    return Ensemble(members=tuple(members), window=ensemble.window, train_history=tuple(history))


def save_weights(ensemble: Ensemble, path: str) -> None:
    """Serialize all members to JSON at full decimal precision."""
    doc = {
        "version": WEIGHT_FILE_VERSION,
        "n": ensemble.n,
        "window": ensemble.window,
        "members": [
            {
                "seed": member.seed,
                "layers": [
                    {
                        "rows": int(w.shape[0]),
                        "cols": int(w.shape[1]),
                        "weights": [repr(float(v)) for v in w.reshape(-1)],
                        "biases": [repr(float(v)) for v in b],
                    }
                    for w, b in zip(member.weights, member.biases)
                ],
            }
            for member in ensemble.members
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_weights(path: str) -> Ensemble:
    """Read a weight file written by save_weights; bit-exact round trip."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON (truncated or corrupt): {exc}") from exc
    for key in ("version", "n", "window", "members"):
        if key not in doc:
            raise FormatError(f"{path}: missing field {key!r}")
    if doc["version"] != WEIGHT_FILE_VERSION:
        raise FormatError(f"{path}: unsupported version {doc['version']!r}")
    if len(doc["members"]) != doc["n"]:
        raise FormatError(f"{path}: n={doc['n']} but {len(doc['members'])} members present")
    window = int(doc["window"])
    members = []
    for mi, rec in enumerate(doc["members"]):
        layers = rec.get("layers")
        if not layers:
            raise FormatError(f"{path}: member {mi}: no layers")
        weights, biases = [], []
        expected_in = 2 * window
        for li, layer in enumerate(layers):
            rows, cols = int(layer["rows"]), int(layer["cols"])
            if rows != expected_in:
                raise FormatError(
                    f"{path}: member {mi} layer {li}: expected {expected_in} rows, got {rows}"
                )
            flat = layer["weights"]
            if len(flat) != rows * cols:
                raise FormatError(
                    f"{path}: member {mi} layer {li}: expected {rows * cols} weights, got {len(flat)}"
                )
            if len(layer["biases"]) != cols:
                raise FormatError(
                    f"{path}: member {mi} layer {li}: expected {cols} biases, got {len(layer['biases'])}"
                )
            weights.append(np.array([float(v) for v in flat]).reshape(rows, cols))
            biases.append(np.array([float(v) for v in layer["biases"]]))
            expected_in = cols
        if weights[-1].shape[1] != 2:
            raise FormatError(f"{path}: member {mi}: final layer must have 2 outputs")
        members.append(
            MlpModel(weights=tuple(weights), biases=tuple(biases), seed=int(rec.get("seed", 0)))
        )
    return Ensemble(members=tuple(members), window=window)
