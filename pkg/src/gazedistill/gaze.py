"""Gaze fixation logs and the pseudo-masks derived from them.

A fixation log becomes a duration-weighted Gaussian density map, which is
peak-normalized and thresholded twice: a high threshold gives the sparse
high-confidence mask, a low threshold the broad-coverage mask. The broad mask
is cleaned of small connected components and the high mask is intersected with
it so the nesting invariant (hc subset of bc) always holds.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage


class GazeFormatError(ValueError):
    """Malformed gaze record; carries the 1-based line (or index) it came from."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class GazeRecord:
    x: float  # normalized column in [0,1]
    y: float  # normalized row in [0,1]
    duration_ms: float
    confidence: float


@dataclass(frozen=True)
class DensityMap:
    values: np.ndarray  # H x W, nonnegative, peak value 1 unless all-zero
    sigma_px: float


@dataclass(frozen=True)
class MaskPair:
    m_hc: np.ndarray  # H x W bool, high-confidence
    m_bc: np.ndarray  # H x W bool, broad-coverage
    tau_hc: float
    tau_bc: float


GAZE_CSV_FIELDS = ("x", "y", "duration_ms", "confidence")


def _build_record(fields: dict[str, str], line: int) -> tuple[GazeRecord, int]:
    try:
        x = float(fields["x"])
        y = float(fields["y"])
        duration = float(fields["duration_ms"])
        confidence = float(fields["confidence"])
    except (KeyError, TypeError, ValueError) as exc:
        raise GazeFormatError(f"bad record {fields!r}: {exc}", line) from None
    if duration < 0:
        raise GazeFormatError(f"duration_ms must be >= 0, got {duration}", line)
    if not 0.0 <= confidence <= 1.0:
        raise GazeFormatError(f"confidence must be in [0,1], got {confidence}", line)
    clamped = 0
    if not 0.0 <= x <= 1.0:
        x = min(max(x, 0.0), 1.0)
        clamped = 1
    if not 0.0 <= y <= 1.0:
        y = min(max(y, 0.0), 1.0)
        clamped = 1
    return GazeRecord(x=x, y=y, duration_ms=duration, confidence=confidence), clamped


def load_gaze(stream: bytes | io.IOBase, fmt: str = "csv") -> tuple[list[GazeRecord], int]:
    """Parse a gaze log. Returns (records in file order, clamp warning count)."""
    if isinstance(stream, (bytes, bytearray)):
        data = bytes(stream)
    else:
        data = stream.read()
        if isinstance(data, str):
            data = data.encode("utf-8")
    text = data.decode("utf-8")

    records: list[GazeRecord] = []
    warnings = 0
    if fmt == "csv":
        if not text.strip():
            return [], 0
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != list(GAZE_CSV_FIELDS):
            raise GazeFormatError(
                f"expected header {','.join(GAZE_CSV_FIELDS)!r}, got {reader.fieldnames!r}", 1
            )
        for row in reader:
            line = reader.line_num
            if None in row or any(v is None for v in row.values()):
                raise GazeFormatError(f"wrong field count: {row!r}", line)
            record, clamped = _build_record(row, line)
            records.append(record)
            warnings += clamped
    elif fmt == "json":
        if not text.strip():
            return [], 0
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GazeFormatError(f"invalid JSON: {exc}", exc.lineno)
        if not isinstance(payload, list):
            raise GazeFormatError("top-level JSON value must be an array", 1)
        for index, entry in enumerate(payload):
            if not isinstance(entry, dict):
                raise GazeFormatError(f"record must be an object, got {entry!r}", index + 1)
            record, clamped = _build_record(entry, index + 1)
            records.append(record)
            warnings += clamped
    else:
        raise ValueError(f"unknown gaze format {fmt!r}, expected 'csv' or 'json'")
    return records, warnings


def density_map(
    records: list[GazeRecord], height: int, width: int, sigma_px: float
) -> DensityMap:
    """Splat a duration-weighted isotropic Gaussian per fixation, peak-normalize.

    Normalized coordinates map onto pixel centers: x=0 is the center of the
    first column, x=1 the center of the last. The all-zero map stays all-zero.
    """
    if height < 1 or width < 1:
        raise ValueError(f"grid must be at least 1x1, got {height}x{width}")
    if sigma_px <= 0:
        raise ValueError(f"sigma_px must be > 0, got {sigma_px}")
    grid = np.zeros((height, width), dtype=np.float64)
    if records:
        cols = np.arange(width, dtype=np.float64)
        rows = np.arange(height, dtype=np.float64)
        inv = 1.0 / (2.0 * sigma_px * sigma_px)
        for rec in records:
            cx = rec.x * (width - 1) if width > 1 else 0.0
            cy = rec.y * (height - 1) if height > 1 else 0.0
            gx = np.exp(-((cols - cx) ** 2) * inv)
            gy = np.exp(-((rows - cy) ** 2) * inv)
            grid += rec.duration_ms * np.outer(gy, gx)
    peak = grid.max()
    if peak > 0:
        grid = grid / peak
    return DensityMap(values=grid, sigma_px=float(sigma_px))


def threshold_masks(
    dm: DensityMap,
    tau_hc: float = 0.7,
    tau_bc: float = 0.3,
    min_component_px: int = 16,
) -> MaskPair:
    """Dual super-level thresholding with small-component cleanup on the broad mask."""
    if not (0.0 < tau_bc <= tau_hc <= 1.0):
        raise ValueError(f"need 0 < tau_bc <= tau_hc <= 1, got tau_hc={tau_hc}, tau_bc={tau_bc}")
    values = dm.values
    m_bc = values >= tau_bc
    m_hc = values >= tau_hc
    if min_component_px > 1 and m_bc.any():
        labels, count = ndimage.label(m_bc, structure=np.ones((3, 3), dtype=int))
        if count:
            sizes = np.bincount(labels.ravel())
            keep = sizes >= min_component_px
            keep[0] = False
            m_bc = keep[labels]
    m_hc = m_hc & m_bc
    return MaskPair(m_hc=m_hc, m_bc=m_bc, tau_hc=float(tau_hc), tau_bc=float(tau_bc))


def save_mask_png(mask: np.ndarray, path) -> None:
    """8-bit single-channel PNG, 0 = background, 255 = foreground."""
    img = Image.fromarray((mask.astype(np.uint8)) * 255, mode="L")
    img.save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return arr >= 128


def records_to_csv(records: list[GazeRecord]) -> str:
    lines = [",".join(GAZE_CSV_FIELDS)]
    for rec in records:
        lines.append(f"{rec.x:.6f},{rec.y:.6f},{rec.duration_ms:.3f},{rec.confidence:.4f}")
    return "\n".join(lines) + "\n"
