"""Experiment scenarios: schema, unit conversions and seed fan-out."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .channel import ChannelParams, Workspace
from .errors import InstabilityError
from .polling import service_time
from .sim import Motion

# stage identifiers for seed fan-out; appending new stages keeps old streams unchanged
STAGES = {"field": 1, "sample": 2, "sim": 3, "sweep": 4}


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WorkspaceSpec(_Model):
    x_min_m: float = 0.0
    x_max_m: float
    y_min_m: float = 0.0
    y_max_m: float
    grid_step_m: float = Field(gt=0)

    @model_validator(mode="after")
    def _extent(self):
        if self.x_max_m <= self.x_min_m or self.y_max_m <= self.y_min_m:
            raise ValueError("workspace max must exceed min on both axes")
        return self

    def build(self) -> Workspace:
        return Workspace(self.x_min_m, self.x_max_m, self.y_min_m, self.y_max_m, self.grid_step_m)


class PairSpec(_Model):
    source_m: tuple[float, float]
    destination_m: tuple[float, float]
    lambda_bps: float = Field(ge=0)


class ChannelSpec(_Model):
    theta_db: tuple[float, float] = (5.2, -7.5)
    alpha2_db2: float = Field(16.0, ge=0)
    beta_m: float = Field(2.09, gt=0)
    sigma2_db2: float = Field(1.96, ge=0)
    threshold_db: float = -85.0
    gamma_t_w: float = Field(0.1, ge=0)
    note: str = ""

    def params(self) -> ChannelParams:
        return ChannelParams(self.theta_db, self.alpha2_db2, self.beta_m, self.sigma2_db2)


class PartitionSpec(_Model):
    alpha_m: Optional[float] = Field(None, gt=0)
    rdp_epsilon_m: float = Field(1.0, ge=0)


class CommsSpec(_Model):
    bandwidth_hz: float = Field(2e6, gt=0)
    spectral_efficiency_bps_per_hz: float = Field(8.0, gt=0)
    bits_per_customer: float = Field(1e6, gt=0)


class MotionSpec(_Model):
    v_mps: float = Field(1.0, gt=0)
    kappa1_n: float = Field(7.2, ge=0)
    kappa2_w: float = Field(0.29, ge=0)


class SimSpec(_Model):
    duration_s: float = Field(7200.0, gt=0)
    warmup_s: Optional[float] = Field(None, ge=0)
    seeds: int = Field(20, ge=2)
    trace_dt_s: float = Field(1.0, gt=0)
    velocity_sweep_mps: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)

    @model_validator(mode="after")
    def _warmup(self):
        if self.warmup_s is not None and self.warmup_s >= self.duration_s:
            raise ValueError("warmup_s must be shorter than duration_s")
        return self


class OptimizerSpec(_Model):
    tol_s: float = Field(1e-3, gt=0)
    max_iters: int = Field(20, ge=1)
    table_period: Optional[int] = Field(None, ge=1)
    position_tol_m: Optional[float] = Field(None, gt=0)


class Scenario(_Model):
    name: str = "scenario"
    seed: int = Field(0, ge=0)
    workspace: WorkspaceSpec
    pairs: tuple[PairSpec, ...] = Field(min_length=1)
    channel: ChannelSpec = ChannelSpec()
    sample_fraction: float = Field(0.01, gt=0, le=1)
    p_th: float = Field(0.7, gt=0, lt=1)
    partition: PartitionSpec = PartitionSpec()
    comms: CommsSpec = CommsSpec()
    motion: MotionSpec = MotionSpec()
    sim: SimSpec = SimSpec()
    optimizer: OptimizerSpec = OptimizerSpec()

    @field_validator("pairs")
    @classmethod
    def _distinct_endpoints(cls, pairs):
        for k, p in enumerate(pairs):
            if p.source_m == p.destination_m:
                raise ValueError(f"pair {k + 1}: source and destination coincide")
        return pairs

    # ---------------------------------------------------------------- derived quantities
    @property
    def n(self) -> int:
        return len(self.pairs)

    @property
    def zeta_bit_s(self) -> float:
        return service_time(self.comms.bandwidth_hz, self.comms.spectral_efficiency_bps_per_hz)

    @property
    def zeta(self) -> float:
        """Service time per customer (s)."""
        return self.zeta_bit_s * self.comms.bits_per_customer

    @property
    def lam(self) -> np.ndarray:
        """Arrival rates in customers/s."""
        return np.array([p.lambda_bps for p in self.pairs]) / self.comms.bits_per_customer

    @property
    def rho(self) -> np.ndarray:
        return np.array([p.lambda_bps for p in self.pairs]) * self.zeta_bit_s

    @property
    def rho_s(self) -> float:
        return float(self.rho.sum())

    def motion_model(self, v: float | None = None) -> Motion:
        return Motion(self.motion.kappa1_n, self.motion.kappa2_w, self.motion.v_mps if v is None else v)

    def check_stability(self) -> None:
        if self.rho_s >= 1.0:
            raise InstabilityError(
                f"scenario {self.name!r} is unstable: rho_s = {self.rho_s:.6g} >= 1 "
                "(stationary wait times need rho_s < 1)"
            )

    def scaling_note(self) -> str:
        return (
            f"1 customer = {self.comms.bits_per_customer:g} bits; zeta = {self.zeta:.6g} s/customer "
            f"({self.zeta_bit_s:.6g} s/bit); rho is unchanged by the scaling, the M/G/1 term "
            f"rho_s*zeta/(2(1-rho_s)) scales with bits_per_customer"
        )

    def stage_seed(self, stage: str, *index: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(STAGES[stage], *index))

    def sim_seeds(self) -> list[int]:
        ss = self.stage_seed("sim")
        return [int(s.generate_state(1)[0]) for s in ss.spawn(self.sim.seeds)]

    def with_seed(self, seed: int) -> "Scenario":
        return self.model_copy(update={"seed": seed})

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file; raises pydantic.ValidationError or InstabilityError."""
    text = Path(path).read_text()
    sc = Scenario.model_validate_json(text)
    sc.check_stability()
    return sc
