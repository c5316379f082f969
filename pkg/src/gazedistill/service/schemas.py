"""Pydantic request/response models for the service endpoints."""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field


class ConfigCarrier(BaseModel):
    """Shared request base: optional config file plus flat overrides."""

    config_path: Optional[str] = None
    overrides: dict[str, Any] = Field(default_factory=dict)


class HealthResponse(BaseModel):
    status: str
    name: str
    version: str


class SynthRequest(ConfigCarrier):
    out_dir: Optional[str] = None


class SynthResponse(BaseModel):
    dataset_dir: str
    run_dir: str
    count: int
    manifest_sha256: str


class MasksRequest(ConfigCarrier):
    dataset_dir: str
    out_dir: Optional[str] = None


class MasksResponse(BaseModel):
    out_dir: str
    run_dir: str
    count: int
    clamp_warnings: int


class PromptResponse(BaseModel):
    prompt: str


class ValidateReportRequest(BaseModel):
    raw_text: str


class LesionReportModel(BaseModel):
    location: str
    boundary: str
    characteristics: list[str]
    area_percent: float
    confidence: str
    remarks: str


class ValidateReportResponse(BaseModel):
    report: LesionReportModel
    canonical_text: str


class FetchReportRequest(ConfigCarrier):
    image_path: Optional[str] = None
    image_b64: Optional[str] = None


class FetchReportResponse(BaseModel):
    provider_id: str
    latency_ms: float
    raw_text: str
    report: LesionReportModel
    canonical_text: str


class TrainTeacherRequest(ConfigCarrier):
    dataset_dir: str
    run_dir: Optional[str] = None


class TrainStudentRequest(ConfigCarrier):
    dataset_dir: str
    teacher_checkpoint: str
    run_dir: Optional[str] = None


class TrainResponse(BaseModel):
    run_dir: str
    stage: str
    best_epoch: int
    records: list[dict[str, Any]]
    checkpoints: dict[str, str]


class EvalRequest(ConfigCarrier):
    dataset_dir: str
    checkpoint: str
    split: str = "test"
    out_path: Optional[str] = None


class EvalResponse(BaseModel):
    role: str
    split: str
    checkpoint: str
    aggregate: dict[str, Any]
    per_image: list[dict[str, Any]]
    report_path: Optional[str] = None


class AblateRequest(ConfigCarrier):
    dataset_dir: str
    axis: str
    run_dir: Optional[str] = None


class AblateResponse(BaseModel):
    axis: str
    seeds: list[int]
    run_dir: str
    variants: dict[str, Any]
    report_path: str


class ErrorBody(BaseModel):
    kind: str
    detail: str
    key: Optional[str] = None
