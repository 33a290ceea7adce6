"""Batch command-line front end for the crossing-control pipeline.

One JSON config document drives every command; command-line flags
override individual config fields.  Each artifact-producing command
writes its outputs plus a run manifest (command, full config, config
digest, seed, library versions) into the output directory, so any run
can be reproduced from its manifest alone.

Commands:
  synth             generate synthetic crossing trajectories to CSV
  train             split a dataset, train the ensemble, write weights
                    and calibration scores
  calibrate         build a detector file from calibration scores
  simulate          run one closed-loop trial, write report and CSV
  batch             run seeded nominal/adversarial trials across modes
  coverage          empirical coverage of the order-statistic threshold
  beta-prob         probability the empirical coverage lands in a band
  plan-calibration  smallest calibration size reaching a target band
                    probability
  gmm-detect        score mixture-prediction files and flag trajectories
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import sys
from dataclasses import dataclass, field, replace

import numpy as np
import scipy

from . import __version__
from .conformal import (
    ScoreSet,
    calculate_probability,
    calibrate,
    coverage_distribution,
    load_detector,
    load_scores,
    required_calibration_size,
    save_detector,
    export_scores,
    nonconformity,
)
from .data import (
    SynthParams,
    load_trajectories,
    make_pairs,
    save_trajectories,
    split_dataset,
    synth_generate,
)
from .ensemble import (
    TrainConfig,
    ensemble_stats,
    init_ensemble,
    load_weights,
    save_weights,
    train_ensemble,
)
from .errors import ArgumentError, CalibrationError, FormatError
from .gmm import gmm_score, load_gmm_predictions, classify_trajectory
from .mpc import ScpConfig, VehicleState
from .qp import QpConfig
from .simulation import (
    MODES,
    PedestrianBehavior,
    ScenarioConfig,
    coverage_experiment,
    run_batch,
    run_trial,
    vehicle_csv_lines,
)

COMMANDS = (
    "synth",
    "train",
    "calibrate",
    "simulate",
    "batch",
    "coverage",
    "beta-prob",
    "plan-calibration",
    "gmm-detect",
)

_VARIANTS = ("nominal", "fraud")


@dataclass(frozen=True)
class Paths:
    """Input/output artifact locations; relative paths resolve against
    the current working directory, artifacts default into output_dir."""

    data: str | None = None
    weights: str | None = None
    scores: str | None = None
    detector: str | None = None
    gmm: str | None = None


@dataclass(frozen=True)
class CoverageOptions:
    trials: int = 300
    calibration_size: int = 100
    K: int = 97
    evaluation_trajectories: int = 150


@dataclass(frozen=True)
class BetaOptions:
    """Arguments of the coverage-band probability and size planner."""

    n_test: int = 1000
    delta: float = 0.04
    lower: float = 0.95
    upper: float = 0.97
    target_probability: float = 0.89
    precision: int = 1


@dataclass(frozen=True)
class GmmOptions:
    threshold: float | None = None
    K: int | None = None
    delta: float | None = None


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; JSON mirrors the field structure."""

    seed: int = 0
    threads: int = 1
    output_dir: str = "runs"
    paths: Paths = field(default_factory=Paths)
    synth: SynthParams = field(default_factory=SynthParams)
    synth_count: int = 110
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=40))
    members: int = 10
    window: int = 14
    n_test: int = 10
    delta: float | None = 0.0396
    K: int | None = None
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    variant: str = "nominal"
    source_index: int = 0
    n_nominal: int = 10
    n_fraud: int = 10
    modes: tuple[str, ...] = MODES
    coverage: CoverageOptions = field(default_factory=CoverageOptions)
    beta: BetaOptions = field(default_factory=BetaOptions)
    gmm: GmmOptions = field(default_factory=GmmOptions)


def _dataclass_from_dict(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise FormatError(f"{where}: unknown field(s) {sorted(unknown)}")
    return cls(**data)


def load_config(path: str) -> RunConfig:
    """Read a JSON config document into a RunConfig.

    Sections (paths, synth, train, scenario, coverage, beta, gmm) map to
    their dataclasses; unknown keys anywhere are format errors so typos
    cannot silently fall back to defaults.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: top level must be a JSON object")
    sections = {
        "paths": Paths,
        "synth": SynthParams,
        "train": TrainConfig,
        "scenario": ScenarioConfig,
        "coverage": CoverageOptions,
        "beta": BetaOptions,
        "gmm": GmmOptions,
    }
    kwargs: dict = {}
    for key, value in raw.items():
        if key in sections:
            if not isinstance(value, dict):
                raise FormatError(f"{path}: section {key!r} must be an object")
            if key == "scenario":
                value = dict(value)
                if "start" in value:
                    value["start"] = _dataclass_from_dict(
                        VehicleState, value["start"], "section 'scenario.start'"
                    )
                if "scp" in value:
                    scp = dict(value["scp"])
                    if "qp" in scp:
                        scp["qp"] = _dataclass_from_dict(
                            QpConfig, scp["qp"], "section 'scenario.scp.qp'"
                        )
                    value["scp"] = _dataclass_from_dict(
                        ScpConfig, scp, "section 'scenario.scp'"
                    )
            kwargs[key] = _dataclass_from_dict(sections[key], value, f"section {key!r}")
        elif key == "modes":
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return _dataclass_from_dict(RunConfig, kwargs, path)
    except TypeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def config_as_dict(config: RunConfig) -> dict:
    out = dataclasses.asdict(config)
    out["modes"] = list(config.modes)
    # VehicleState/ScpConfig expand to nested dicts via asdict already.
    return out


def config_digest(config: RunConfig) -> str:
    payload = json.dumps(config_as_dict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def validate_config(config: RunConfig, command: str | None = None) -> list[str]:
    """Violations as `field: constraint` strings; empty means valid."""
    out: list[str] = []
    if config.seed < 0:
        out.append("seed: must be non-negative")
    if config.threads < 1:
        out.append("threads: must be at least 1")
    if config.delta is not None and not 0.0 < config.delta < 1.0:
        out.append("delta: must lie in (0, 1)")
    if config.K is not None and config.K < 1:
        out.append("K: must be at least 1")
    if config.synth_count < 1:
        out.append("synth_count: must be at least 1")
    if config.members < 2:
        out.append("members: must be at least 2")
    if config.window < 1:
        out.append("window: must be at least 1")
    if config.n_test < 0:
        out.append("n_test: must be non-negative")
    if config.variant not in _VARIANTS:
        out.append(f"variant: must be one of {_VARIANTS}")
    if config.source_index < 0:
        out.append("source_index: must be non-negative")
    if config.n_nominal < 0:
        out.append("n_nominal: must be non-negative")
    if config.n_fraud < 0:
        out.append("n_fraud: must be non-negative")
    unknown_modes = [m for m in config.modes if m not in MODES]
    if unknown_modes:
        out.append(f"modes: unknown mode(s) {unknown_modes}; valid: {list(MODES)}")
    out.extend(f"synth.{v}" for v in config.synth.violations())
    out.extend(f"train.{v}" for v in config.train.violations())
    out.extend(f"scenario.{v}" for v in config.scenario.violations())
    cov = config.coverage
    if cov.trials < 1:
        out.append("coverage.trials: must be at least 1")
    if not 1 <= cov.K <= cov.calibration_size:
        out.append("coverage.K: must lie in [1, coverage.calibration_size]")
    if cov.evaluation_trajectories < 1:
        out.append("coverage.evaluation_trajectories: must be at least 1")
    beta = config.beta
    if beta.n_test < 1:
        out.append("beta.n_test: must be at least 1")
    if not 0.0 < beta.delta < 1.0:
        out.append("beta.delta: must lie in (0, 1)")
    if not 0.0 <= beta.lower < beta.upper <= 1.0:
        out.append("beta.lower/beta.upper: must satisfy 0 <= lower < upper <= 1")
    if not 0.0 < beta.target_probability < 1.0:
        out.append("beta.target_probability: must lie in (0, 1)")
    if beta.precision < 1:
        out.append("beta.precision: must be at least 1")
    if config.gmm.threshold is not None and config.gmm.threshold < 0:
        out.append("gmm.threshold: must be non-negative")

    needs_data = {"train", "simulate", "batch"}
    if command in needs_data:
        if config.paths.data is None:
            out.append(f"paths.data: required by the {command} command")
        elif not os.path.exists(config.paths.data):
            out.append(f"paths.data: {config.paths.data!r} does not exist")
    if command in {"simulate", "batch"}:
        for name in ("weights", "detector"):
            p = getattr(config.paths, name)
            if p is None:
                out.append(f"paths.{name}: required by the {command} command")
            elif not os.path.exists(p):
                out.append(f"paths.{name}: {p!r} does not exist")
    if command == "calibrate":
        if config.paths.scores is None:
            out.append("paths.scores: required by the calibrate command")
        elif not os.path.exists(config.paths.scores):
            out.append(f"paths.scores: {config.paths.scores!r} does not exist")
        if (config.delta is None) == (config.K is None):
            out.append("delta/K: calibrate needs exactly one of the two")
    if command == "gmm-detect":
        if config.paths.gmm is None:
            out.append("paths.gmm: required by the gmm-detect command")
        elif not os.path.exists(config.paths.gmm):
            out.append(f"paths.gmm: {config.paths.gmm!r} does not exist")
        given = [
            v for v in (config.gmm.threshold, config.gmm.K, config.gmm.delta) if v is not None
        ]
        if len(given) != 1:
            out.append("gmm.threshold/gmm.K/gmm.delta: give exactly one")
    return out


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(config: RunConfig, command: str) -> str:
    os.makedirs(config.output_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": config_as_dict(config),
        "config_digest": config_digest(config),
        "seed": config.seed,
        "versions": {
            "oodmpc": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    path = os.path.join(config.output_dir, "manifest.json")
    _write_json(path, manifest)
    return path


def _out_path(config: RunConfig, default_name: str, override: str | None = None) -> str:
    if override is not None:
        return override
    os.makedirs(config.output_dir, exist_ok=True)
    return os.path.join(config.output_dir, default_name)


def _member_seeds(seed: int, members: int) -> list[int]:
    # seed 42 with 10 members gives 4200..4209; distinct by construction.
    return [seed * 100 + i for i in range(members)]


def _load_pipeline(config: RunConfig):
    ensemble = load_weights(config.paths.weights)
    detector = load_detector(config.paths.detector)
    sources = load_trajectories(config.paths.data, config.synth.sample_rate_hz)
    return ensemble, detector, sources


def _cmd_synth(config: RunConfig) -> int:
    trajectories = synth_generate(config.synth, config.synth_count, config.seed)
    path = _out_path(config, "trajectories.csv", config.paths.data)
    save_trajectories(trajectories, path)
    print(f"wrote {len(trajectories)} trajectories to {path}")
    return 0


def _cmd_train(config: RunConfig) -> int:
    trajectories = load_trajectories(config.paths.data, config.synth.sample_rate_hz)
    split = split_dataset(trajectories, config.n_test, config.seed + 1, config.window)
    ensemble = init_ensemble(
        config.members, _member_seeds(config.seed, config.members), config.window
    )
    ensemble = train_ensemble(ensemble, list(split.train_pairs), config.train)
    weights_path = _out_path(config, "weights.json", config.paths.weights)
    save_weights(ensemble, weights_path)
    scores = ScoreSet(
        np.array(
            [
                nonconformity(ensemble_stats(ensemble, pair.input_window))
                for pair in split.calibration_pairs
            ]
        )
    )
    scores_path = _out_path(config, "scores.json", config.paths.scores)
    export_scores(scores, scores_path)
    print(
        f"trained {config.members} members on {len(split.train_pairs)} pairs; "
        f"wrote {weights_path} and {len(scores)} calibration scores to {scores_path}"
    )
    return 0


def _cmd_calibrate(config: RunConfig) -> int:
    scores = load_scores(config.paths.scores)
    detector = calibrate(scores, delta=config.delta, K=config.K)
    path = _out_path(config, "detector.json", config.paths.detector)
    save_detector(detector, path)
    print(
        f"calibrated on N={detector.N}: K={detector.K}, "
        f"order statistic {detector.order_stat!r}, threshold C={detector.threshold}"
        f" -> {path}"
    )
    return 0


def _scenario_for(config: RunConfig) -> ScenarioConfig:
    return config.scenario


def _cmd_simulate(config: RunConfig) -> int:
    ensemble, detector, sources = _load_pipeline(config)
    if config.source_index >= len(sources):
        raise ArgumentError(
            f"source_index {config.source_index} out of range for {len(sources)} trajectories"
        )
    cfg = _scenario_for(config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    offset = float(rng.normal(cfg.offset_mean, cfg.offset_std))
    behavior = PedestrianBehavior(
        source=sources[config.source_index],
        offset_x=offset,
        switch_step=cfg.switch_step if config.variant == "fraud" else None,
    )
    record = run_trial(cfg, ensemble, detector, behavior)
    report = {
        "mode": cfg.mode,
        "variant": config.variant,
        "source_id": behavior.source.id,
        "offset_x": behavior.offset_x,
        "outcome": record.outcome,
        "min_distance": record.min_distance,
        "evaluations": [
            {"step": ev.step, "score": ev.score, "flagged": ev.flagged}
            for ev in record.evaluations
        ],
        "mode_timeline": [[step, planner] for step, planner in record.mode_timeline],
        "fallback_steps": list(record.fallback_steps),
    }
    report_path = _out_path(config, "trial.json")
    _write_json(report_path, report)
    csv_path = _out_path(config, "vehicle.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(vehicle_csv_lines(record)) + "\n")
    print(
        f"{cfg.mode} {config.variant}: outcome={record.outcome} "
        f"min_distance={record.min_distance:.3f} -> {report_path}, {csv_path}"
    )
    return 0


def _cmd_batch(config: RunConfig) -> int:
    ensemble, detector, sources = _load_pipeline(config)
    report = run_batch(
        _scenario_for(config),
        ensemble,
        detector,
        sources,
        n_nominal=config.n_nominal,
        n_fraud=config.n_fraud,
        seed=config.seed,
        modes=config.modes,
        threads=config.threads,
    )
    path = _out_path(config, "batch.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    for mode, mode_report in report.reports.items():
        conf = mode_report.confusion
        print(
            f"{mode}: outcomes={dict(sorted(mode_report.outcome_counts.items()))} "
            f"fp_rate={conf.false_positive_rate:.4f} tp_rate={conf.true_positive_rate:.4f}"
        )
    print(f"wrote {path}")
    return 0


def _cmd_coverage(config: RunConfig) -> int:
    ensemble = load_weights(config.paths.weights)
    cov = config.coverage
    values = coverage_experiment(
        config.synth,
        ensemble,
        trials=cov.trials,
        cal_size=cov.calibration_size,
        K=cov.K,
        eval_trajectories=cov.evaluation_trajectories,
        seed=config.seed,
        threads=config.threads,
    )
    law = coverage_distribution(cov.calibration_size, cov.K)
    payload = {
        "trials": cov.trials,
        "calibration_size": cov.calibration_size,
        "K": cov.K,
        "evaluation_trajectories": cov.evaluation_trajectories,
        "empirical_mean": float(np.mean(values)),
        "empirical_std": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
        "beta_mean": law.mean,
        "coverages": [float(v) for v in values],
    }
    path = _out_path(config, "coverage.json")
    _write_json(path, payload)
    print(
        f"coverage over {cov.trials} trials: mean={payload['empirical_mean']:.4f} "
        f"(Beta mean {law.mean:.4f}) -> {path}"
    )
    return 0


def _cmd_beta_prob(config: RunConfig) -> int:
    b = config.beta
    prob = calculate_probability(b.n_test, b.delta, b.lower, b.upper)
    payload = {
        "n_test": b.n_test,
        "delta": b.delta,
        "lower": b.lower,
        "upper": b.upper,
        "probability": prob,
    }
    path = _out_path(config, "beta_prob.json")
    _write_json(path, payload)
    print(
        f"P(coverage in [{b.lower}, {b.upper}] | N={b.n_test}, delta={b.delta}) "
        f"= {prob:.4f}"
    )
    return 0


def _cmd_plan_calibration(config: RunConfig) -> int:
    b = config.beta
    n = required_calibration_size(
        b.delta, b.target_probability, precision=b.precision, x1=b.lower, x2=b.upper
    )
    achieved = calculate_probability(n, b.delta, b.lower, b.upper)
    payload = {
        "delta": b.delta,
        "target_probability": b.target_probability,
        "lower": b.lower,
        "upper": b.upper,
        "precision": b.precision,
        "required_size": n,
        "achieved_probability": achieved,
    }
    path = _out_path(config, "calibration_plan.json")
    _write_json(path, payload)
    print(
        f"need N={n} calibration points for "
        f"P(coverage in [{b.lower}, {b.upper}]) >= {b.target_probability} "
        f"(achieves {achieved:.4f})"
    )
    return 0


def _cmd_gmm_detect(config: RunConfig) -> int:
    predictions = load_gmm_predictions(config.paths.gmm)
    by_agent: dict[str, list] = {}
    for pred in predictions:
        by_agent.setdefault(pred.agent, []).append(pred)
    all_scores = []
    for preds in by_agent.values():
        preds.sort(key=lambda p: p.t)
        all_scores.extend(gmm_score(p) for p in preds)
    if config.gmm.threshold is not None:
        threshold = config.gmm.threshold
        threshold_source = "configured"
    else:
        detector = calibrate(
            ScoreSet(np.array(all_scores)), delta=config.gmm.delta, K=config.gmm.K
        )
        threshold = detector.threshold
        threshold_source = f"calibrated (K={detector.K}, N={detector.N})"
    agents = {}
    for agent, preds in sorted(by_agent.items()):
        scores = [gmm_score(p) for p in preds]
        agents[agent] = {
            "steps": len(scores),
            "max_score": max(scores),
            "ood": classify_trajectory(scores, threshold),
        }
    payload = {
        "threshold": threshold,
        "threshold_source": threshold_source,
        "agents": agents,
    }
    path = _out_path(config, "gmm_report.json")
    _write_json(path, payload)
    flagged = sorted(a for a, rec in agents.items() if rec["ood"])
    print(
        f"scored {len(predictions)} predictions for {len(agents)} agent(s) "
        f"at threshold {threshold}; anomalous: {flagged or 'none'} -> {path}"
    )
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "calibrate": _cmd_calibrate,
    "simulate": _cmd_simulate,
    "batch": _cmd_batch,
    "coverage": _cmd_coverage,
    "beta-prob": _cmd_beta_prob,
    "plan-calibration": _cmd_plan_calibration,
    "gmm-detect": _cmd_gmm_detect,
}


def dispatch(command: str, config: RunConfig) -> int:
    """Validate, write the run manifest, and execute one command."""
    if command not in _HANDLERS:
        print(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}", file=sys.stderr)
        return 2
    violations = validate_config(config, command)
    if violations:
        print("invalid configuration:", file=sys.stderr)
        for v in violations:
            print(f"  - {v}", file=sys.stderr)
        return 1
    write_manifest(config, command)
    try:
        return _HANDLERS[command](config)
    except (ArgumentError, FormatError, CalibrationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodmpc",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("command", choices=COMMANDS, help="command to run")
    parser.add_argument("--config", help="JSON config document")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--threads", type=int, help="worker process cap")
    parser.add_argument("--output-dir", help="artifact directory")
    parser.add_argument("--data", help="trajectory CSV path")
    parser.add_argument("--weights", help="ensemble weight file")
    parser.add_argument("--scores", help="calibration score file")
    parser.add_argument("--detector", help="detector file")
    parser.add_argument("--gmm", help="GMM prediction file")
    parser.add_argument("--delta", type=float, help="detector failure probability")
    parser.add_argument("--k", type=int, dest="K", help="detector order-statistic index")
    parser.add_argument("--mode", choices=MODES, help="controller mode for simulate")
    parser.add_argument(
        "--variant", choices=_VARIANTS, help="pedestrian behavior for simulate"
    )
    parser.add_argument("--source-index", type=int, help="source trajectory index")
    parser.add_argument("--n-nominal", type=int, help="nominal trials per batch mode")
    parser.add_argument("--n-fraud", type=int, help="adversarial trials per batch mode")
    parser.add_argument("--trials", type=int, help="coverage experiment trials")
    parser.add_argument("--threshold", type=float, help="explicit gmm-detect threshold")
    return parser


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    simple = {
        "seed": args.seed,
        "threads": args.threads,
        "output_dir": args.output_dir,
        "variant": args.variant,
        "source_index": args.source_index,
        "n_nominal": args.n_nominal,
        "n_fraud": args.n_fraud,
    }
    updates = {k: v for k, v in simple.items() if v is not None}
    if args.command == "gmm-detect":
        # For this command the calibration knobs belong to the gmm section.
        gmm_updates = {
            k: v
            for k, v in {"delta": args.delta, "K": args.K, "threshold": args.threshold}.items()
            if v is not None
        }
        if gmm_updates:
            base = {"threshold": None, "K": None, "delta": None}
            base.update(gmm_updates)
            updates["gmm"] = GmmOptions(**base)
    else:
        if args.delta is not None:
            updates["delta"] = args.delta
            updates["K"] = None
        if args.K is not None:
            updates["K"] = args.K
            if args.delta is None:
                updates["delta"] = None
    path_updates = {
        k: v
        for k, v in {
            "data": args.data,
            "weights": args.weights,
            "scores": args.scores,
            "detector": args.detector,
            "gmm": args.gmm,
        }.items()
        if v is not None
    }
    if path_updates:
        updates["paths"] = replace(config.paths, **path_updates)
    if args.mode is not None:
        updates["scenario"] = replace(config.scenario, mode=args.mode)
    if args.trials is not None:
        updates["coverage"] = replace(config.coverage, trials=args.trials)
    return replace(config, **updates) if updates else config


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config) if args.config else RunConfig()
        config = _apply_overrides(config, args)
    except (FormatError, ArgumentError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return dispatch(args.command, config)


if __name__ == "__main__":
    sys.exit(main())
