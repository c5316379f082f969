"""Structured lesion reports from a vision-language provider.

The prompt pins every field to a closed vocabulary; validation enforces that
vocabulary instead of coercing, so anything the provider hallucinates outside
it is rejected with a typed error. A replay mode serves recorded fixtures
keyed by image content hash so the whole pipeline runs offline.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import httpx

LOCATIONS = ("upper_left", "upper_right", "lower_left", "lower_right")
BOUNDARIES = ("clear", "irregular", "ambiguous")
CHARACTERISTICS = ("smooth", "spiculated", "lobulated")
CONFIDENCES = ("high", "moderate", "low")

REPORT_KEYS = ("location", "boundary", "characteristics", "area_percent", "confidence", "remarks")

PROMPT_TEMPLATE = """\
Analyze the abnormal region (e.g., tumor or polyp) in this medical image.
Respond with a single JSON object using exactly these keys:
location, boundary, characteristics, area_percent, confidence, remarks.

Field constraints:
- Location: Region position (e.g., upper left); exactly one of "upper left",
  "upper right", "lower left", "lower right".
- Boundary: continuity/clarity/irregularities; exactly one of "clear",
  "irregular", "ambiguous".
- Characteristics: Shape, texture, brightness; a nonempty JSON list drawn
  from "smooth", "spiculated", "lobulated".
- Area Percentage: Estimated area occupied (a number between 0 and 100),
  reported under the key area_percent.
- Confidence: Score (high/moderate/low).
- Remarks: Additional notes; free text, may be empty.
"""


class ReportError(ValueError):
    """Base class for report validation failures."""


class ReportParseError(ReportError):
    """Response is not a JSON object."""


class ReportSchemaError(ReportError):
    """Missing key or wrong type/shape."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class ReportVocabularyError(ReportError):
    """A constrained field holds a value outside its closed set."""

    def __init__(self, field: str, value):
        super().__init__(f"{field}: {value!r} is not in the allowed vocabulary")
        self.field = field
        self.value = value


class ReportRangeError(ReportError):
    """area_percent outside [0, 100]."""


class ProviderTransportError(RuntimeError):
    def __init__(self, provider_id: str, detail: str):
        super().__init__(f"provider {provider_id}: {detail}")
        self.provider_id = provider_id


class FixtureMissingError(KeyError):
    def __init__(self, digest: str):
        super().__init__(f"no recorded fixture for image sha256={digest}")
        self.digest = digest


@dataclass(frozen=True)
class LesionReport:
    location: str
    boundary: str
    characteristics: tuple[str, ...]  # sorted, nonempty
    area_percent: float
    confidence: str
    remarks: str = ""


@dataclass(frozen=True)
class ProviderResponse:
    raw_text: str
    provider_id: str
    latency_ms: float


def build_prompt() -> str:
    """The fixed instruction template; byte-stable across calls."""
    return PROMPT_TEMPLATE


def _strip_fences(text: str) -> str:
    stripped = text.strip()
    if stripped.startswith("```"):
        lines = stripped.splitlines()
        if lines and lines[0].startswith("```"):
            lines = lines[1:]
        if lines and lines[-1].strip() == "```":
            lines = lines[:-1]
        stripped = "\n".join(lines).strip()
    return stripped


def _norm_enum(value) -> str:
    if not isinstance(value, str):
        return ""  # non-strings never match a vocabulary entry
    return value.strip().lower().replace(" ", "_")


def validate_report(raw: str) -> LesionReport:
    """Parse provider output and enforce the closed vocabulary on every field."""
    try:
        payload = json.loads(_strip_fences(raw))
    except json.JSONDecodeError as exc:
        raise ReportParseError(f"response is not valid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise ReportParseError(f"expected a JSON object, got {type(payload).__name__}")

    fields = {str(k).strip().lower(): v for k, v in payload.items()}
    for key in REPORT_KEYS:
        if key not in fields:
            raise ReportSchemaError(key, "missing required key")

    location = _norm_enum(fields["location"])
    if location not in LOCATIONS:
        raise ReportVocabularyError("location", fields["location"])

    boundary = _norm_enum(fields["boundary"])
    if boundary not in BOUNDARIES:
        raise ReportVocabularyError("boundary", fields["boundary"])

    raw_characteristics = fields["characteristics"]
    if not isinstance(raw_characteristics, (list, tuple)):
        raise ReportSchemaError("characteristics", "must be a list")
    if not raw_characteristics:
        raise ReportSchemaError("characteristics", "must be nonempty")
    normalized = []
    for item in raw_characteristics:
        value = _norm_enum(item)
        if value not in CHARACTERISTICS:
            raise ReportVocabularyError("characteristics", item)
        if value not in normalized:
            normalized.append(value)

    area = fields["area_percent"]
    if isinstance(area, bool) or not isinstance(area, (int, float)):
        raise ReportSchemaError("area_percent", "must be a number")
    if not 0.0 <= float(area) <= 100.0:
        raise ReportRangeError(f"area_percent must be in [0,100], got {area}")

    confidence = _norm_enum(fields["confidence"])
    if confidence not in CONFIDENCES:
        raise ReportVocabularyError("confidence", fields["confidence"])

    remarks = fields["remarks"]
    if remarks is None:
        remarks = ""
    if not isinstance(remarks, str):
        raise ReportSchemaError("remarks", "must be a string")

    return LesionReport(
        location=location,
        boundary=boundary,
        characteristics=tuple(sorted(normalized)),
        area_percent=float(area),
        confidence=confidence,
        remarks=remarks,
    )


def canonical_json(report: LesionReport) -> str:
    """Schema-shaped JSON round-trippable through validate_report."""
    return json.dumps(
        {
            "location": report.location,
            "boundary": report.boundary,
            "characteristics": list(report.characteristics),
            "area_percent": report.area_percent,
            "confidence": report.confidence,
            "remarks": report.remarks,
        },
        sort_keys=True,
    )


def canonical_text(report: LesionReport) -> str:
    """Deterministic one-line rendering used as text-encoder input."""
    characteristics = ",".join(sorted(report.characteristics))
    return (
        f"location: {report.location}; "
        f"boundary: {report.boundary}; "
        f"characteristics: {characteristics}; "
        f"area: {report.area_percent:.1f}%; "
        f"confidence: {report.confidence}; "
        f"remarks: {report.remarks}"
    )


def image_digest(image_bytes: bytes) -> str:
    return hashlib.sha256(image_bytes).hexdigest()


class VLMClient:
    """Vision-language provider handle with `live` and `replay` modes.

    Replay serves fixtures named ``<sha256-of-image>.json`` from a directory
    and is fully concurrent; live POSTs to the configured endpoint with the
    credential read from an environment variable, capped at
    ``max_concurrency`` in-flight requests.
    """

    def __init__(
        self,
        mode: str = "replay",
        fixture_dir: str | Path = "fixtures",
        endpoint: str = "",
        credential_env: str = "VLM_API_KEY",
        timeout_s: float = 30.0,
        provider_id: str | None = None,
        max_concurrency: int = 4,
    ):
        if mode not in ("live", "replay"):
            raise ValueError(f"mode must be 'live' or 'replay', got {mode!r}")
        self.mode = mode
        self.fixture_dir = Path(fixture_dir)
        self.endpoint = endpoint
        self.credential_env = credential_env
        self.timeout_s = timeout_s
        self.provider_id = provider_id or ("replay" if mode == "replay" else endpoint)
        self._gate = threading.Semaphore(max(1, int(max_concurrency)))

    def request_report(self, image_bytes: bytes, prompt: str) -> ProviderResponse:
        start = time.perf_counter()
        if self.mode == "replay":
            digest = image_digest(image_bytes)
            path = self.fixture_dir / f"{digest}.json"
            if not path.is_file():
                raise FixtureMissingError(digest)
            raw = path.read_text(encoding="utf-8")
        else:
            raw = self._request_live(image_bytes, prompt)
        latency = (time.perf_counter() - start) * 1000.0
        return ProviderResponse(raw_text=raw, provider_id=self.provider_id, latency_ms=latency)

    def _request_live(self, image_bytes: bytes, prompt: str) -> str:
        if not self.endpoint:
            raise ProviderTransportError(self.provider_id, "no endpoint configured")
        credential = os.environ.get(self.credential_env, "")
        if not credential:
            raise ProviderTransportError(
                self.provider_id, f"credential env var {self.credential_env} is unset"
            )
        payload = {
            "prompt": prompt,
            "image_b64": base64.b64encode(image_bytes).decode("ascii"),
        }
        with self._gate:
            try:
                response = httpx.post(
                    self.endpoint,
                    json=payload,
                    headers={"Authorization": f"Bearer {credential}"},
                    timeout=self.timeout_s,
                )
                response.raise_for_status()
            except httpx.HTTPError as exc:
                raise ProviderTransportError(self.provider_id, str(exc)) from exc
        try:
            text = response.json()["text"]
        except (KeyError, ValueError) as exc:
            raise ProviderTransportError(self.provider_id, f"malformed response: {exc}") from exc
        if not isinstance(text, str) or not text:
            raise ProviderTransportError(self.provider_id, "empty response text")
        return text

    def save_fixture(self, image_bytes: bytes, raw_text: str) -> Path:
        """Record a response so replay mode can serve it later."""
        self.fixture_dir.mkdir(parents=True, exist_ok=True)
        path = self.fixture_dir / f"{image_digest(image_bytes)}.json"
        path.write_text(raw_text, encoding="utf-8")
        return path
