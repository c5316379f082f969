"""FastAPI service wrapping the training pipeline.

Paths in requests refer to the service host's filesystem; training and
evaluation run synchronously in the request (desk-scale jobs). Domain
validation failures map to 400 with a typed error body, missing inputs to
404, so the CLI can translate them into its exit-code contract.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..ablate import run_ablation
from ..config import ConfigError, load_config
from ..data import DatasetError
from ..gaze import GazeFormatError, density_map, load_gaze, save_mask_png, threshold_masks
from ..reports import (
    FixtureMissingError,
    ProviderTransportError,
    ReportError,
    VLMClient,
    build_prompt,
    canonical_text,
    validate_report,
)
from ..synth import SceneSpec, write_dataset
from ..train import (
    TrainerError,
    evaluate_checkpoint,
    load_dataset,
    make_run_dir,
    train_student,
    train_teacher,
)
from . import schemas

app = FastAPI(title="gazedistill", version=__version__)


class ServiceError(Exception):
    def __init__(self, status: int, kind: str, detail: str, key: str | None = None):
        self.status = status
        self.body = schemas.ErrorBody(kind=kind, detail=detail, key=key)


@app.exception_handler(ServiceError)
async def _service_error(_req: Request, exc: ServiceError):
    return JSONResponse(status_code=exc.status, content=exc.body.model_dump())


def _resolve(carrier: schemas.ConfigCarrier) -> dict:
    try:
        return load_config(carrier.config_path, carrier.overrides)
    except ConfigError as exc:
        raise ServiceError(400, "config", str(exc), key=exc.key)


def _run(cfg: dict, tag: str, explicit: str | None) -> Path:
    from ..config import dump_config

    if explicit:
        path = Path(explicit)
        path.mkdir(parents=True, exist_ok=True)
    else:
        path = make_run_dir(cfg["run.root"], cfg, tag)
    (path / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    return path


def _report_model(report) -> schemas.LesionReportModel:
    return schemas.LesionReportModel(
        location=report.location,
        boundary=report.boundary,
        characteristics=list(report.characteristics),
        area_percent=report.area_percent,
        confidence=report.confidence,
        remarks=report.remarks,
    )


@app.get("/health", response_model=schemas.HealthResponse)
def health() -> schemas.HealthResponse:
    return schemas.HealthResponse(status="ok", name="gazedistill", version=__version__)


@app.post("/synth", response_model=schemas.SynthResponse)
def synth(req: schemas.SynthRequest) -> schemas.SynthResponse:
    cfg = _resolve(req)
    run_dir = _run(cfg, "synth", None)
    out_dir = Path(req.out_dir) if req.out_dir else run_dir / "dataset"
    manifest = write_dataset(
        out_dir,
        SceneSpec.from_config(cfg),
        count=cfg["scene.count"],
        val_fraction=cfg["split.val"],
        test_fraction=cfg["split.test"],
    )
    return schemas.SynthResponse(
        dataset_dir=str(out_dir),
        run_dir=str(run_dir),
        count=manifest["count"],
        manifest_sha256=manifest["manifest_sha256"],
    )


@app.post("/masks", response_model=schemas.MasksResponse)
def masks(req: schemas.MasksRequest) -> schemas.MasksResponse:
    cfg = _resolve(req)
    dataset_dir = Path(req.dataset_dir)
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.is_file():
        raise ServiceError(404, "not_found", f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    run_dir = _run(cfg, "masks", None)
    out_dir = Path(req.out_dir) if req.out_dir else run_dir / "pseudo_masks"
    (out_dir / "hc").mkdir(parents=True, exist_ok=True)
    (out_dir / "bc").mkdir(parents=True, exist_ok=True)

    side = int(manifest["spec"]["image_side"])
    sigma_px = max(cfg["gaze.sigma_frac"] * side, 0.5)
    warnings = 0
    count = 0
    for entry in manifest["items"]:
        item_id = entry["id"]
        gaze_path = dataset_dir / "gaze" / f"{item_id}.csv"
        try:
            records, clamped = load_gaze(gaze_path.read_bytes(), fmt="csv")
        except GazeFormatError as exc:
            raise ServiceError(400, "gaze_format", f"{gaze_path}: {exc}")
        warnings += clamped
        dm = density_map(records, side, side, sigma_px=sigma_px)
        pair = threshold_masks(
            dm,
            tau_hc=cfg["gaze.tau_hc"],
            tau_bc=cfg["gaze.tau_bc"],
            min_component_px=cfg["gaze.min_component_px"],
        )
        save_mask_png(pair.m_hc, out_dir / "hc" / f"{item_id}.png")
        save_mask_png(pair.m_bc, out_dir / "bc" / f"{item_id}.png")
        count += 1
    return schemas.MasksResponse(
        out_dir=str(out_dir), run_dir=str(run_dir), count=count, clamp_warnings=warnings
    )


@app.get("/report/prompt", response_model=schemas.PromptResponse)
def report_prompt() -> schemas.PromptResponse:
    return schemas.PromptResponse(prompt=build_prompt())


@app.post("/report/validate", response_model=schemas.ValidateReportResponse)
def report_validate(req: schemas.ValidateReportRequest) -> schemas.ValidateReportResponse:
    try:
        report = validate_report(req.raw_text)
    except ReportError as exc:
        raise ServiceError(400, type(exc).__name__, str(exc))
    return schemas.ValidateReportResponse(
        report=_report_model(report), canonical_text=canonical_text(report)
    )


@app.post("/report/fetch", response_model=schemas.FetchReportResponse)
def report_fetch(req: schemas.FetchReportRequest) -> schemas.FetchReportResponse:
    cfg = _resolve(req)
    if bool(req.image_path) == bool(req.image_b64):
        raise ServiceError(400, "bad_request", "pass exactly one of image_path or image_b64")
    if req.image_path:
        path = Path(req.image_path)
        if not path.is_file():
            raise ServiceError(404, "not_found", f"no image at {path}")
        image_bytes = path.read_bytes()
    else:
        image_bytes = base64.b64decode(req.image_b64)
    client = VLMClient(
        mode=cfg["report.mode"],
        fixture_dir=cfg["report.fixture_dir"],
        endpoint=cfg["report.endpoint"],
        credential_env=cfg["report.credential_env"],
        timeout_s=cfg["report.timeout_s"],
        provider_id=cfg["report.provider_id"],
        max_concurrency=cfg["report.max_concurrency"],
    )
    try:
        response = client.request_report(image_bytes, build_prompt())
    except FixtureMissingError as exc:
        raise ServiceError(404, "fixture_missing", str(exc))
    except ProviderTransportError as exc:
        raise ServiceError(502, "transport", str(exc))
    try:
        report = validate_report(response.raw_text)
    except ReportError as exc:
        raise ServiceError(400, type(exc).__name__, str(exc))
    return schemas.FetchReportResponse(
        provider_id=response.provider_id,
        latency_ms=response.latency_ms,
        raw_text=response.raw_text,
        report=_report_model(report),
        canonical_text=canonical_text(report),
    )


def _load_dataset_or_400(cfg: dict, dataset_dir: str):
    path = Path(dataset_dir)
    if not (path / "manifest.json").is_file():
        raise ServiceError(404, "not_found", f"no dataset manifest in {path}")
    try:
        return load_dataset(cfg, path)
    except (DatasetError, GazeFormatError, ReportError) as exc:
        raise ServiceError(400, type(exc).__name__, str(exc))


@app.post("/train/teacher", response_model=schemas.TrainResponse)
def teacher_endpoint(req: schemas.TrainTeacherRequest) -> schemas.TrainResponse:
    cfg = _resolve(req)
    dataset = _load_dataset_or_400(cfg, req.dataset_dir)
    run_dir = _run(cfg, "teacher", req.run_dir)
    try:
        summary = train_teacher(cfg, dataset, run_dir)
    except TrainerError as exc:
        raise ServiceError(400, "trainer", str(exc))
    return schemas.TrainResponse(**summary)


@app.post("/train/student", response_model=schemas.TrainResponse)
def student_endpoint(req: schemas.TrainStudentRequest) -> schemas.TrainResponse:
    cfg = _resolve(req)
    if not (Path(req.teacher_checkpoint) / "manifest.json").is_file():
        raise ServiceError(404, "not_found", f"no checkpoint at {req.teacher_checkpoint}")
    dataset = _load_dataset_or_400(cfg, req.dataset_dir)
    run_dir = _run(cfg, "student", req.run_dir)
    try:
        summary = train_student(cfg, req.teacher_checkpoint, dataset, run_dir)
    except TrainerError as exc:
        raise ServiceError(400, "trainer", str(exc))
    except Exception as exc:
        from ..models import CheckpointCompatError

        if isinstance(exc, CheckpointCompatError):
            raise ServiceError(400, "checkpoint", str(exc))
        raise
    summary.pop("teacher_frozen", None)
    return schemas.TrainResponse(**summary)


@app.post("/eval", response_model=schemas.EvalResponse)
def eval_endpoint(req: schemas.EvalRequest) -> schemas.EvalResponse:
    cfg = _resolve(req)
    if not (Path(req.checkpoint) / "manifest.json").is_file():
        raise ServiceError(404, "not_found", f"no checkpoint at {req.checkpoint}")
    dataset = _load_dataset_or_400(cfg, req.dataset_dir)
    try:
        report = evaluate_checkpoint(cfg, req.checkpoint, dataset, split=req.split)
    except TrainerError as exc:
        raise ServiceError(400, "trainer", str(exc))
    except Exception as exc:
        from ..models import CheckpointCompatError

        if isinstance(exc, CheckpointCompatError):
            raise ServiceError(400, "checkpoint", str(exc))
        raise
    if req.out_path:
        out = Path(req.out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
    else:
        out = _run(cfg, "eval", None) / "eval.json"
    out.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    return schemas.EvalResponse(**report, report_path=str(out))


@app.post("/ablate", response_model=schemas.AblateResponse)
def ablate_endpoint(req: schemas.AblateRequest) -> schemas.AblateResponse:
    cfg = _resolve(req)
    if not (Path(req.dataset_dir) / "manifest.json").is_file():
        raise ServiceError(404, "not_found", f"no dataset manifest in {req.dataset_dir}")
    run_dir = _run(cfg, f"ablate-{req.axis}", req.run_dir)
    try:
        result = run_ablation(cfg, req.axis, req.dataset_dir, run_dir)
    except ValueError as exc:
        raise ServiceError(400, "ablate", str(exc))
    report_path = run_dir / "ablation.json"
    report_path.write_text(json.dumps(result, indent=2, sort_keys=True), encoding="utf-8")
    return schemas.AblateResponse(
        **result, run_dir=str(run_dir), report_path=str(report_path)
    )
