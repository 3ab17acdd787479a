"""Request/response models for the reconstruction service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

from ..experiments import ExperimentSpec


class RunRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    spec: ExperimentSpec


class RunResponse(BaseModel):
    status: Literal["ok", "diverged"]
    report: dict | None = None
    trace_csv: str | None = None
    final_pgm_b64: str | None = None
    error: str | None = None


class VerifyRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    suite: str
    seed: int = 0
    trials: int = Field(default=500, ge=1)


class CheckModel(BaseModel):
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


class VerifyResponse(BaseModel):
    suite: str
    passed: bool
    checks: list[CheckModel]


class BenchRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    spec: ExperimentSpec
    workers: list[int] = Field(min_length=1)
    target_norm_res: float = Field(default=1e-3, gt=0)


class BenchRow(BaseModel):
    workers: int
    updates_per_sec: float
    wall_ms_to_target_res: float | None


class BenchResponse(BaseModel):
    rows: list[BenchRow]


class PhantomRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    size: int = Field(default=64, ge=16)


class PhantomResponse(BaseModel):
    pgm_b64: str


class SynthRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    spec: ExperimentSpec
    export_operator: bool = False


class SynthResponse(BaseModel):
    y_csv: str
    x_true_pgm_b64: str
    meta: dict
    operator_txt: str | None = None


class ReplayRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    spec: ExperimentSpec
    schedule_csv: str
