"""Request and response documents for the service endpoints.

JSON field names are camelCase (matching the model-v1 and manifest-v1
schemas); Python code may populate by snake_case name.  A model is
either a builtin name ("srw1".."srw4") or an inline model-v1 document;
the service never reads files, so clients resolve paths before posting.
"""

from typing import Optional, Union

from pydantic import BaseModel, ConfigDict, Field
from pydantic.alias_generators import to_camel


class Schema(BaseModel):
    model_config = ConfigDict(alias_generator=to_camel,
                              populate_by_name=True)


ModelSpec = Union[str, dict]


class ValidateRequest(Schema):
    model: ModelSpec


class ValidateResponse(Schema):
    valid: bool
    report: str
    dimension: Optional[int] = None
    range_: Optional[int] = Field(default=None, alias="range")
    sigma_kind: Optional[str] = None


class SimulateRequest(Schema):
    model: ModelSpec = "srw1"
    noise_level: float = 1.0
    initial_mass: float = 1.0
    horizon: float = 10.0
    time_step: Optional[float] = None     # None picks the stable step
    replica_count: int = 100
    rng_seed: int = 0
    samples_per_decade: int = 60
    extinction_cutoff: float = 1e-30
    box_kind: str = "fixed"
    box_radius: Optional[int] = None
    box_trigger: float = 1e-6
    threads: int = 1


class Trajectory(Schema):
    replica_id: int
    seed: int
    times: list[float]
    mass: list[float]
    qv: list[float]
    clamp_count: int
    box_radius_final: int
    frozen_at: Optional[float] = None


class SimulateResponse(Schema):
    model: dict
    time_step: float
    replicas: list[Trajectory]
    warnings: list[str] = []


class SweepRequest(Schema):
    model: ModelSpec = "srw3"
    lambdas: list[float]
    horizon: float = 50.0
    replicas: int = 200
    rng_seed: int = 0
    threshold: Optional[float] = None
    time_step: Optional[float] = None
    threads: int = 1


class SweepResponse(Schema):
    model: dict
    lambda_grid: list[float]
    survival: list[float]
    survival_se: list[float]
    laplace: list[float]
    laplace_se: list[float]
    crossing: Optional[float]
    threshold: float
    horizon: float
    masses: list[list[float]]
    monotonicity: Optional[dict] = None
    warnings: list[str] = []


class KernelRequest(Schema):
    model: ModelSpec = "srw1"
    t: float = 1.0
    box_radius: Optional[int] = None      # None covers the Poisson reach
    hoeffding_q: Optional[float] = None
    t_grid: list[float] = []
    k_grid_per_t: int = 0


class KernelResponse(Schema):
    model: dict
    t: float
    dimension: int
    box_radius: int
    truncation_error: float
    total: float
    sites: list[list[int]]
    probabilities: list[float]
    hoeffding: Optional[dict] = None


class GreensRequest(Schema):
    model: ModelSpec = "srw3"
    shells: int = 7
    nodes: Optional[int] = None
    mc_horizon: float = 1000.0
    mc_replicas: int = 4000
    mc_seed: int = 0
    noise_level: Optional[float] = None   # adds moment bounds when set
    initial_mass: float = 1.0


class GreensResponse(Schema):
    model: dict
    upsilon_zero: float
    return_probability: float
    quadrature_error: float
    mc_estimate: float
    mc_se: float
    lambda_lower_bound: float
    trace: list[list]
    second_moment: Optional[float] = None
    survival_floor: Optional[float] = None


class OdeclassRequest(Schema):
    times: list[float]
    values: list[float]
    errors: Optional[list[float]] = None
    delta: float = 1.0
    alpha: Optional[float] = None         # None fits it from the data
    gamma: Optional[float] = None
    window_a: float = 1.0
    window_b: float = 1.0
    rescale: float = 1.0


class OdeclassResponse(Schema):
    alpha: float
    gamma: float
    fitted: bool
    membership: dict
    exponent: dict
    decay: Optional[dict] = None


class SigmaSpec(Schema):
    kind: str = "linear"
    lip: float = 1.0
    lower: float = 1.0
    grid: Optional[list[float]] = None
    values: Optional[list[float]] = None


class ContinuumRequest(Schema):
    noise_level: float = 1.0
    horizon: float = 1.0
    grid_spacing: float = 0.1
    time_step: Optional[float] = None     # None picks the noise-aware step
    half_width: Optional[float] = None
    replica_count: int = 100
    rng_seed: int = 0
    samples_per_decade: int = 60
    extinction_cutoff: float = 1e-30
    sigma: SigmaSpec = SigmaSpec()
    threads: int = 1


class ContinuumResponse(Schema):
    time_step: float
    half_width: float
    replicas: list[Trajectory]
    warnings: list[str] = []


class FitRequest(Schema):
    times: list[float]
    estimates: list[float]
    standard_errors: Optional[list[float]] = None
    eta: float = 0.5
    law: str = "d1"


class FitResponse(Schema):
    law: str
    rate: float
    intercept: float
    se: float
    ci: tuple[float, float]
    n_points: int
