"""Benchmark harness: data generation, training runs, evaluation and
reports.

A run directory is self-describing: ``spec.json`` records the experiment
spec, seeds, solver/agent configs and package version, and every artifact
consumed by ``build_report`` lives inside the directory.  All steps are
deterministic, so repeating a spec reproduces every file byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .agents import (
    DqnConfig,
    TrainResult,
    greedy_action,
    load_checkpoint,
    read_metrics_csv,
    save_checkpoint,
    train,
    write_metrics_csv,
)
from .builders import get_feeder
from .env import EnvConfig, VoltVarEnv, generate_offline_dataset, read_offline_dataset
from .errors import BenchError
from .loads import (
    build_load_series,
    generate_synthetic,
    impute,
    read_load_series_csv,
    select_customers,
    write_load_kw_csv,
    write_load_series_csv,
)
from .powerflow import SolverConfig

SMOOTH_WINDOW = 100
FINAL_WINDOW = 500


@dataclass(frozen=True)
class ExperimentSpec:
    feeder: str
    out_dir: str
    state_option: int = 2
    reward_option: int = 1
    algorithm: str = "dqn"
    seeds: tuple[int, ...] = (0, 1, 2)
    steps: int = 3000
    horizon: int = 4032  # 12 weeks of half-hour steps
    customers_per_load: int | None = None  # 5, or 1 for the synthetic large feeder
    data_seed: int = 0
    meter_group_size: int = 1
    max_missing_frac: float = 0.1
    impute_rank: int = 8
    impute_reg: float = 0.1
    impute_iters: int = 50

    def validate(self) -> None:
        if self.horizon < 1:
            raise BenchError("empty horizon")
        if not self.seeds:
            raise BenchError("seeds must be nonempty")
        if self.algorithm != "dqn":
            raise BenchError(f"unknown algorithm '{self.algorithm}' (supported: dqn)")
        if self.state_option not in (1, 2, 3):
            raise BenchError(f"state_option must be 1, 2 or 3, got {self.state_option}")
        if self.reward_option not in (1, 2, 3, 4):
            raise BenchError(f"reward_option must be 1..4, got {self.reward_option}")
        if self.steps < 0:
            raise BenchError("steps must be >= 0")

    def resolved_customers_per_load(self) -> int:
        if self.customers_per_load is not None:
            return self.customers_per_load
        return 1 if self.feeder == "case8500_synthetic" else 5


def _spec_from_doc(doc: dict) -> ExperimentSpec:
    doc = dict(doc)
    doc["seeds"] = tuple(doc["seeds"])
    return ExperimentSpec(**doc)


def _write_json(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _run_dir(spec: ExperimentSpec) -> Path:
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _record_spec(spec: ExperimentSpec, solver: SolverConfig, agent: DqnConfig, run_dir: Path) -> None:
    _write_json(
        run_dir / "spec.json",
        {
            "spec": asdict(spec),
            "solver": asdict(solver),
            "agent": asdict(agent),
            "version": __version__,
        },
    )


def _build_env(spec: ExperimentSpec, run_dir: Path, solver: SolverConfig) -> VoltVarEnv:
    series_path = run_dir / "load_series_pu.csv"
    if not series_path.exists():
        raise BenchError(f"missing {series_path}; run generate-data first")
    series = read_load_series_csv(series_path)
    feeder = get_feeder(spec.feeder)
    return VoltVarEnv(
        EnvConfig(
            feeder=feeder,
            load_series=series,
            state_option=spec.state_option,
            reward_option=spec.reward_option,
            horizon=spec.horizon,
            meter_group_size=spec.meter_group_size,
            solver=solver,
        )
    )


def generate_data(
    spec: ExperimentSpec,
    solver: SolverConfig = SolverConfig(),
    agent: DqnConfig = DqnConfig(),
) -> dict:
    """Produce the operational dataset for a spec: per-unit and AMI-rounded
    kW load series, the default-control transition log (device positions,
    rounded voltages and SCADA-derived features embedded), and the sidecar
    descriptor.  Returns artifact paths plus the transition count."""
    spec.validate()
    feeder = get_feeder(spec.feeder)
    run_dir = _run_dir(spec)
    _record_spec(spec, solver, agent, run_dir)

    cpl = spec.resolved_customers_per_load()
    need = len(feeder.load_points) * cpl
    # the missing-value screen may drop rows; deterministically regenerate
    # with a larger pool until enough customers qualify
    n_customers = need
    while True:
        meters = generate_synthetic(n_customers, spec.horizon, spec.data_seed)
        meters = select_customers(meters, spec.max_missing_frac)
        if meters.n_customers >= need:
            break
        n_customers += max(2, need // 10)
    meters = impute(meters, spec.impute_rank, spec.impute_reg, spec.impute_iters)
    series = build_load_series(feeder, meters, customers_per_load=cpl, seed=spec.data_seed)

    series_path = write_load_series_csv(series, run_dir / "load_series_pu.csv")
    kw_path = write_load_kw_csv(series, feeder.mva_base, run_dir / "load_series_kw.csv")

    env = VoltVarEnv(
        EnvConfig(
            feeder=feeder,
            load_series=series,
            state_option=spec.state_option,
            reward_option=spec.reward_option,
            horizon=spec.horizon,
            meter_group_size=spec.meter_group_size,
            solver=solver,
        )
    )
    transitions_path = run_dir / "transitions.csv"
    count = generate_offline_dataset(env, transitions_path)
    return {
        "run_dir": str(run_dir),
        "load_series_pu": str(series_path),
        "load_series_kw": str(kw_path),
        "transitions": str(transitions_path),
        "transitions_meta": str(transitions_path) + ".meta.json",
        "n_transitions": count,
    }


def train_experiment(
    spec: ExperimentSpec,
    solver: SolverConfig = SolverConfig(),
    agent: DqnConfig = DqnConfig(),
) -> dict:
    """One training run per seed against the generated dataset; writes
    per-seed metrics CSVs, checkpoints, and train_summary.json."""
    spec.validate()
    run_dir = _run_dir(spec)
    transitions_path = run_dir / "transitions.csv"
    if not transitions_path.exists():
        raise BenchError(f"missing {transitions_path}; run generate-data first")
    offline = read_offline_dataset(transitions_path)

    summaries = []
    paths = {"metrics": [], "checkpoints": []}
    for seed in spec.seeds:
        env = _build_env(spec, run_dir, solver)
        result: TrainResult = train(env, offline, agent, seed, spec.steps)
        metrics_path = write_metrics_csv(result.metrics, run_dir / f"metrics_seed{seed}.csv")
        ckpt_path = save_checkpoint(
            run_dir / f"checkpoint_seed{seed}.json",
            result.net,
            agent,
            seed,
            {
                "feeder": spec.feeder,
                "state_option": spec.state_option,
                "reward_option": spec.reward_option,
                "obs_dim": env.obs_dim,
            },
        )
        summaries.append(result.summary)
        paths["metrics"].append(str(metrics_path))
        paths["checkpoints"].append(str(ckpt_path))
    _write_json(run_dir / "train_summary.json", {"seeds": summaries})
    return {"run_dir": str(run_dir), "seeds": list(spec.seeds), **paths}


def evaluate_checkpoint(
    spec: ExperimentSpec,
    seed: int,
    steps: int,
    solver: SolverConfig = SolverConfig(),
) -> dict:
    """Greedy (no exploration, no learning) rollout of a trained checkpoint
    from a fresh reset; writes eval_seed<k>.csv and returns a summary."""
    spec.validate()
    run_dir = _run_dir(spec)
    ckpt = run_dir / f"checkpoint_seed{seed}.json"
    if not ckpt.exists():
        raise BenchError(f"missing {ckpt}; run train first")
    net, _cfg, _seed, _meta = load_checkpoint(ckpt)
    env = _build_env(spec, run_dir, solver)
    if steps > env.horizon:
        raise BenchError(f"steps {steps} exceed horizon {env.horizon}")
    devices = env.action_devices()
    lows = [d["low"] for d in devices]

    obs = env.reset()
    rows = []
    for step in range(steps):
        indices, _q = greedy_action(net, obs)
        action = [lows[i] + indices[i] for i in range(len(devices))]
        obs, reward, info = env.step(action)
        rows.append(
            {
                "step": step,
                "reward": reward,
                "reward_default_delta": reward - info.reward_default,
                "max_violation": info.breakdown.max_violation,
                "epsilon": 0.0,
                "loss": 0.0,
            }
        )
    path = write_metrics_csv(rows, run_dir / f"eval_seed{seed}.csv")
    deltas = [r["reward_default_delta"] for r in rows]
    summary = {
        "seed": seed,
        "steps": steps,
        "mean_reward": float(np.mean([r["reward"] for r in rows])),
        "mean_reward_default_delta": float(np.mean(deltas)),
        "violation_steps": int(sum(1 for r in rows if r["max_violation"] > 0)),
        "metrics": str(path),
    }
    _write_json(run_dir / f"eval_summary_seed{seed}.json", summary)
    return summary


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Smoothed series of length len(x) - window + 1 (window clipped to the
    series length)."""
    window = min(window, len(x))
    return np.convolve(x, np.ones(window) / window, mode="valid")


def build_report(run_dir: str | Path) -> dict:
    """Aggregate a run directory into report files.

    Emits per seed: smoothed reward-difference-vs-default series, the raw
    per-step max violation series (CSV plus whitespace plot-data), and a
    summary table with the mean reward delta over the final 500 steps,
    violation count, and tap-change count.  Seeds with missing artifacts
    are flagged and skipped; everything read lives inside the run dir.
    """
    run_dir = Path(run_dir)
    spec_path = run_dir / "spec.json"
    if not spec_path.exists():
        raise BenchError(f"{run_dir} is not a run directory (no spec.json)")
    spec_doc = json.loads(spec_path.read_text())
    spec = _spec_from_doc(spec_doc["spec"])
    train_summary_path = run_dir / "train_summary.json"
    seed_summaries = {}
    if train_summary_path.exists():
        for s in json.loads(train_summary_path.read_text())["seeds"]:
            seed_summaries[s["seed"]] = s

    report_dir = run_dir / "report"
    report_dir.mkdir(exist_ok=True)
    summary_rows = []
    incomplete = []
    for seed in spec.seeds:
        metrics_path = run_dir / f"metrics_seed{seed}.csv"
        if not metrics_path.exists():
            incomplete.append(seed)
            continue
        metrics = read_metrics_csv(metrics_path)
        delta = np.array([m["reward_default_delta"] for m in metrics])
        violations = np.array([m["max_violation"] for m in metrics])
        steps = np.array([m["step"] for m in metrics])

        smoothed = moving_average(delta, SMOOTH_WINDOW)
        _write_series_csv(
            report_dir / f"reward_delta_smoothed_seed{seed}.csv",
            ["step", "reward_delta_smoothed"],
            steps[len(steps) - len(smoothed) :],
            smoothed,
        )
        _write_series_csv(
            report_dir / f"max_violation_seed{seed}.csv",
            ["step", "max_violation"],
            steps,
            violations,
        )
        _write_plot_data(report_dir / f"reward_delta_smoothed_seed{seed}.dat", steps[len(steps) - len(smoothed) :], smoothed)
        _write_plot_data(report_dir / f"max_violation_seed{seed}.dat", steps, violations)

        final = delta[-min(FINAL_WINDOW, len(delta)) :]
        summary_rows.append(
            {
                "seed": seed,
                "steps": len(metrics),
                "mean_reward_delta_final": float(final.mean()),
                "violation_count": int((violations > 0).sum()),
                "tap_change_count": float(seed_summaries.get(seed, {}).get("total_switches", float("nan"))),
                "complete": True,
            }
        )

    summary_path = report_dir / "summary.csv"
    with summary_path.open("w", newline="") as fh:
        import csv

        writer = csv.writer(fh)
        writer.writerow(
            ["seed", "steps", "mean_reward_delta_final", "violation_count", "tap_change_count", "complete"]
        )
        for row in summary_rows:
            writer.writerow(
                [
                    row["seed"],
                    row["steps"],
                    repr(row["mean_reward_delta_final"]),
                    row["violation_count"],
                    repr(row["tap_change_count"]),
                    row["complete"],
                ]
            )
    meta = {
        "smoothing_window": SMOOTH_WINDOW,
        "final_window": FINAL_WINDOW,
        "incomplete_seeds": incomplete,
        "version": __version__,
    }
    _write_json(report_dir / "report_meta.json", meta)
    return {
        "report_dir": str(report_dir),
        "summary": summary_rows,
        "incomplete_seeds": incomplete,
        "summary_csv": str(summary_path),
    }


def _write_series_csv(path: Path, header: list[str], steps, values) -> None:
    import csv

    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s, v in zip(steps, values):
            writer.writerow([int(s), repr(float(v))])


def _write_plot_data(path: Path, steps, values) -> None:
    lines = [f"{int(s)} {repr(float(v))}" for s, v in zip(steps, values)]
    path.write_text("\n".join(lines) + "\n")
