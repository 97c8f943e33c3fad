"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class DeviceRange(BaseModel):
    kind: str
    index: int
    low: int
    high: int


class FeederSummary(BaseModel):
    name: str
    n_buses: int
    n_lines: int
    n_loads: int
    n_regulators: int
    n_capacitors: int
    mva_base: float
    kv_base: float
    device_ranges: list[DeviceRange]


class SolveRequest(BaseModel):
    feeder: str
    p: dict[int, float] = Field(default_factory=dict, description="bus id -> p.u. load")
    q: dict[int, float] = Field(default_factory=dict)
    snapshot_loads: bool = Field(
        default=False, description="use the feeder's snapshot loads instead of p/q"
    )
    taps: list[int] | None = None
    cap_status: list[int] | None = None
    tolerance: float | None = None
    max_iter: int | None = None


class SolveResponse(BaseModel):
    v: list[float]
    v120: list[float]
    total_loss: float
    converged: bool
    iterations: int
    residual: float


class SyntheticDataParams(BaseModel):
    customers_per_load: int = 5
    seed: int = 0
    max_missing_frac: float = 0.1
    impute_rank: int = 8
    impute_reg: float = 0.1
    impute_iters: int = 50


class CreateEnvRequest(BaseModel):
    feeder: str
    state_option: int = 2
    reward_option: int = 1
    beta: tuple[float, float, float] = (0.5, 1.0, 0.1)
    horizon: int | None = None
    meter_group_size: int = 1
    load_series_csv: str | None = Field(
        default=None, description="server-side path to a per-unit load series CSV"
    )
    synthetic: SyntheticDataParams | None = Field(
        default=None, description="generate a synthetic series (default when no CSV given)"
    )


class LayoutSliceModel(BaseModel):
    name: str
    start: int
    length: int


class EnvCreated(BaseModel):
    env_id: str
    obs_dim: int
    horizon: int
    layout: list[LayoutSliceModel]
    device_ranges: list[DeviceRange]


class ResetResponse(BaseModel):
    observation: list[float]
    t: int


class StepRequest(BaseModel):
    action: list[int]


class StepInfoModel(BaseModel):
    v_term: float
    loss_term: float
    switch_term: float
    max_violation: float
    converged: bool
    iterations: int
    total_loss: float
    v_min: float
    v_max: float
    reward_default: float
    taps: list[int]
    cap_status: list[int]


class StepResponse(BaseModel):
    observation: list[float]
    reward: float
    t: int
    info: StepInfoModel


class ExperimentSpecModel(BaseModel):
    feeder: str
    out_dir: str
    state_option: int = 2
    reward_option: int = 1
    algorithm: str = "dqn"
    seeds: list[int] = [0, 1, 2]
    steps: int = 3000
    horizon: int = 4032
    customers_per_load: int | None = None
    data_seed: int = 0
    meter_group_size: int = 1
    max_missing_frac: float = 0.1
    impute_rank: int = 8
    impute_reg: float = 0.1
    impute_iters: int = 50


class SolverOverrides(BaseModel):
    tolerance: float | None = None
    max_iter: int | None = None
    max_control_rounds: int | None = None


class AgentOverrides(BaseModel):
    gamma: float | None = None
    batch_size: int | None = None
    learning_rate: float | None = None
    pretrain_steps: int | None = None
    copy_period: int | None = None
    epsilon_max: float | None = None
    epsilon_min: float | None = None
    epsilon_decay_steps: int | None = None
    reward_scale: float | None = None
    hidden_sizes: list[int] | None = None
    buffer_capacity: int | None = None


class GenerateDataRequest(BaseModel):
    spec: ExperimentSpecModel
    solver: SolverOverrides | None = None
    agent: AgentOverrides | None = None


class GenerateDataResponse(BaseModel):
    run_dir: str
    load_series_pu: str
    load_series_kw: str
    transitions: str
    transitions_meta: str
    n_transitions: int


class TrainRequest(BaseModel):
    spec: ExperimentSpecModel
    solver: SolverOverrides | None = None
    agent: AgentOverrides | None = None


class TrainResponse(BaseModel):
    run_dir: str
    seeds: list[int]
    metrics: list[str]
    checkpoints: list[str]


class EvaluateRequest(BaseModel):
    spec: ExperimentSpecModel
    seed: int
    steps: int
    solver: SolverOverrides | None = None


class EvaluateResponse(BaseModel):
    seed: int
    steps: int
    mean_reward: float
    mean_reward_default_delta: float
    violation_steps: int
    metrics: str


class ReportRequest(BaseModel):
    run_dir: str


class SummaryRow(BaseModel):
    seed: int
    steps: int
    mean_reward_delta_final: float
    violation_count: int
    tap_change_count: float
    complete: bool


class ReportResponse(BaseModel):
    report_dir: str
    summary: list[SummaryRow]
    incomplete_seeds: list[int]
    summary_csv: str


class ErrorResponse(BaseModel):
    error: str
