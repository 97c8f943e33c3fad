"""FastAPI service wrapping the core package.

Long-lived environment sessions live in the app state so remote agents can
drive reset/step over HTTP; data generation, training, evaluation and
reporting run synchronously server-side and return artifact paths.
"""

from __future__ import annotations

import threading
from dataclasses import asdict, replace

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..agents import DqnConfig
from ..bench import (
    ExperimentSpec,
    build_report,
    evaluate_checkpoint,
    generate_data,
    train_experiment,
)
from ..builders import available_feeders, get_feeder
from ..env import EnvConfig, VoltVarEnv
from ..errors import BenchError, VoltVarError
from ..feeder import Feeder
from ..loads import (
    build_load_series,
    generate_synthetic,
    impute,
    read_load_series_csv,
    select_customers,
)
from ..powerflow import (
    InjectionProfile,
    SolverConfig,
    residual,
    solve,
    zero_positions,
)
from . import schemas as s


def _feeder_summary(feeder: Feeder) -> s.FeederSummary:
    ranges = []
    for k, reg in enumerate(feeder.regulators):
        ranges.append(s.DeviceRange(kind="regulator", index=k, low=reg.min_tap, high=reg.max_tap))
    for k, cap in enumerate(feeder.capacitors):
        if cap.controllable:
            ranges.append(s.DeviceRange(kind="capacitor", index=k, low=0, high=1))
    return s.FeederSummary(
        name=feeder.name,
        n_buses=feeder.n_buses,
        n_lines=len(feeder.lines),
        n_loads=len(feeder.load_points),
        n_regulators=len(feeder.regulators),
        n_capacitors=len(feeder.capacitors),
        mva_base=feeder.mva_base,
        kv_base=feeder.kv_base,
        device_ranges=ranges,
    )


def _solver_config(overrides: s.SolverOverrides | None) -> SolverConfig:
    cfg = SolverConfig()
    if overrides is None:
        return cfg
    fields = {k: v for k, v in overrides.model_dump().items() if v is not None}
    return replace(cfg, **fields)


def _agent_config(overrides: s.AgentOverrides | None) -> DqnConfig:
    cfg = DqnConfig()
    if overrides is None:
        return cfg
    fields = {k: v for k, v in overrides.model_dump().items() if v is not None}
    if "hidden_sizes" in fields:
        fields["hidden_sizes"] = tuple(fields["hidden_sizes"])
    return replace(cfg, **fields)


def _experiment_spec(model: s.ExperimentSpecModel) -> ExperimentSpec:
    doc = model.model_dump()
    doc["seeds"] = tuple(doc["seeds"])
    spec = ExperimentSpec(**doc)
    spec.validate()
    return spec


def create_app() -> FastAPI:
    app = FastAPI(title="voltvar service", version=__version__)
    app.state.envs: dict[str, VoltVarEnv] = {}
    app.state.env_counter = 0
    app.state.lock = threading.Lock()

    @app.exception_handler(VoltVarError)
    async def _domain_error(_request: Request, exc: VoltVarError):
        status = 404 if isinstance(exc, BenchError) and "unknown feeder" in str(exc) else 400
        return JSONResponse(status_code=status, content={"error": str(exc)})

    @app.get("/health", response_model=s.HealthResponse)
    def health():
        return s.HealthResponse(status="ok", version=__version__)

    @app.get("/feeders", response_model=list[s.FeederSummary])
    def list_feeders():
        return [_feeder_summary(get_feeder(name)) for name in available_feeders()]

    @app.get("/feeders/{name}", response_model=s.FeederSummary)
    def feeder_info(name: str):
        return _feeder_summary(get_feeder(name))

    @app.post("/powerflow/solve", response_model=s.SolveResponse)
    def powerflow_solve(req: s.SolveRequest):
        feeder = get_feeder(req.feeder)
        if req.snapshot_loads:
            inj = InjectionProfile.from_loads(feeder)
        else:
            import numpy as np

            p = np.zeros(feeder.n_buses)
            q = np.zeros(feeder.n_buses)
            for bus, val in req.p.items():
                p[feeder.bus_pos(int(bus))] = val
            for bus, val in req.q.items():
                q[feeder.bus_pos(int(bus))] = val
            inj = InjectionProfile(p=p, q=q)
        pos = zero_positions(feeder)
        if req.taps is not None:
            pos = replace(pos, taps=tuple(req.taps))
        if req.cap_status is not None:
            pos = replace(pos, cap_status=tuple(req.cap_status))
        cfg = SolverConfig()
        if req.tolerance is not None:
            cfg = replace(cfg, tolerance=req.tolerance)
        if req.max_iter is not None:
            cfg = replace(cfg, max_iter=req.max_iter)
        state = solve(feeder, inj, pos, cfg)
        return s.SolveResponse(
            v=[float(x) for x in state.v],
            v120=[float(x) * 120.0 for x in state.v],
            total_loss=state.total_loss,
            converged=state.converged,
            iterations=state.iterations,
            residual=residual(feeder, inj, pos, state),
        )

    def _make_series(feeder: Feeder, req: s.CreateEnvRequest):
        if req.load_series_csv is not None:
            return read_load_series_csv(req.load_series_csv)
        params = req.synthetic or s.SyntheticDataParams()
        horizon = req.horizon if req.horizon is not None else 4032
        meters = generate_synthetic(
            len(feeder.load_points) * params.customers_per_load, horizon, params.seed
        )
        meters = select_customers(meters, params.max_missing_frac)
        meters = impute(meters, params.impute_rank, params.impute_reg, params.impute_iters)
        return build_load_series(
            feeder, meters, customers_per_load=params.customers_per_load, seed=params.seed
        )

    @app.post("/envs", response_model=s.EnvCreated)
    def create_env(req: s.CreateEnvRequest):
        feeder = get_feeder(req.feeder)
        series = _make_series(feeder, req)
        env = VoltVarEnv(
            EnvConfig(
                feeder=feeder,
                load_series=series,
                state_option=req.state_option,
                reward_option=req.reward_option,
                beta=tuple(req.beta),
                horizon=req.horizon,
                meter_group_size=req.meter_group_size,
            )
        )
        with app.state.lock:
            app.state.env_counter += 1
            env_id = f"env-{app.state.env_counter}"
            app.state.envs[env_id] = env
        return s.EnvCreated(
            env_id=env_id,
            obs_dim=env.obs_dim,
            horizon=env.horizon,
            layout=[s.LayoutSliceModel(**asdict(sl)) for sl in env.observation_layout],
            device_ranges=[s.DeviceRange(**d) for d in env.action_devices()],
        )

    def _get_env(env_id: str) -> VoltVarEnv:
        env = app.state.envs.get(env_id)
        if env is None:
            raise BenchError(f"unknown environment '{env_id}'")
        return env

    @app.post("/envs/{env_id}/reset", response_model=s.ResetResponse)
    def reset_env(env_id: str):
        env = _get_env(env_id)
        obs = env.reset()
        return s.ResetResponse(observation=[float(x) for x in obs], t=0)

    @app.post("/envs/{env_id}/step", response_model=s.StepResponse)
    def step_env(env_id: str, req: s.StepRequest):
        env = _get_env(env_id)
        obs, reward, info = env.step(req.action)
        return s.StepResponse(
            observation=[float(x) for x in obs],
            reward=reward,
            t=env._t,
            info=s.StepInfoModel(
                v_term=info.breakdown.v_term,
                loss_term=info.breakdown.loss_term,
                switch_term=info.breakdown.switch_term,
                max_violation=info.breakdown.max_violation,
                converged=info.converged,
                iterations=info.iterations,
                total_loss=info.total_loss,
                v_min=info.v_min,
                v_max=info.v_max,
                reward_default=info.reward_default,
                taps=list(info.positions.taps),
                cap_status=list(info.positions.cap_status),
            ),
        )

    @app.delete("/envs/{env_id}")
    def delete_env(env_id: str):
        _get_env(env_id)
        with app.state.lock:
            del app.state.envs[env_id]
        return {"deleted": env_id}

    @app.post("/datasets/generate", response_model=s.GenerateDataResponse)
    def datasets_generate(req: s.GenerateDataRequest):
        result = generate_data(
            _experiment_spec(req.spec), _solver_config(req.solver), _agent_config(req.agent)
        )
        return s.GenerateDataResponse(**result)

    @app.post("/runs/train", response_model=s.TrainResponse)
    def runs_train(req: s.TrainRequest):
        result = train_experiment(
            _experiment_spec(req.spec), _solver_config(req.solver), _agent_config(req.agent)
        )
        return s.TrainResponse(**result)

    @app.post("/runs/evaluate", response_model=s.EvaluateResponse)
    def runs_evaluate(req: s.EvaluateRequest):
        result = evaluate_checkpoint(
            _experiment_spec(req.spec), req.seed, req.steps, _solver_config(req.solver)
        )
        return s.EvaluateResponse(**result)

    @app.post("/runs/report", response_model=s.ReportResponse)
    def runs_report(req: s.ReportRequest):
        result = build_report(req.run_dir)
        return s.ReportResponse(
            report_dir=result["report_dir"],
            summary=[s.SummaryRow(**row) for row in result["summary"]],
            incomplete_seeds=result["incomplete_seeds"],
            summary_csv=result["summary_csv"],
        )

    return app


app = create_app()
