"""Deterministic synthetic scenes for full-pipeline verification.

Each scene is a star-convex bright blob on a darker textured background, with
an exact ground-truth mask, a simulated fixation log (on-lesion fixations with
jitter plus uniform distractors), and a rule-based lesion report standing in
for a vision-language provider. Everything is a pure function of the seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import ConvexHull, QhullError

from .gaze import GazeRecord, records_to_csv, save_mask_png
from .reports import LesionReport, canonical_json

# Radial wobble of the blob outline is capped so the mask area stays inside
# bounds implied by the configured radius interval.
MAX_WOBBLE = 0.35
# Crack-perimeter isoperimetric ratio of a digital disk is ~pi^2/16 ~ 0.617;
# wobbly outlines fall well below this.
CLEAR_BOUNDARY_MIN_RATIO = 0.5
SMOOTH_MAX_CONVEXITY_DEFECT = 0.02


@dataclass(frozen=True)
class SceneSpec:
    image_side: int = 64
    lesion_count: int = 1
    radius_min: float = 7.0
    radius_max: float = 14.0
    texture_noise: float = 0.08
    gaze_points: int = 40
    gaze_jitter_px: float = 1.5
    distractor_rate: float = 0.25
    seed: int = 1234

    @classmethod
    def from_config(cls, cfg: dict) -> "SceneSpec":
        return cls(
            image_side=cfg["scene.image_side"],
            lesion_count=cfg["scene.lesion_count"],
            radius_min=cfg["scene.radius_min"],
            radius_max=cfg["scene.radius_max"],
            texture_noise=cfg["scene.texture_noise"],
            gaze_points=cfg["scene.gaze_points"],
            gaze_jitter_px=cfg["scene.gaze_jitter_px"],
            distractor_rate=cfg["scene.distractor_rate"],
            seed=cfg["scene.seed"],
        )


def _radial_profile(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Cosine-harmonic wobble (amplitudes, phases); total amplitude <= MAX_WOBBLE."""
    orders = np.arange(2, 6)
    amplitudes = rng.uniform(0.0, 1.0, size=orders.size) * (0.3 / orders)
    total = amplitudes.sum()
    if total > MAX_WOBBLE:
        amplitudes *= MAX_WOBBLE / total
    phases = rng.uniform(0.0, 2.0 * np.pi, size=orders.size)
    return amplitudes, phases


def gen_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Returns (image float in [0,1], exact ground-truth bool mask)."""
    side = spec.image_side
    rng = np.random.default_rng(spec.seed)
    margin = spec.radius_max * (1.0 + MAX_WOBBLE) + 1.0
    cy = rng.uniform(margin, side - margin)
    cx = rng.uniform(margin, side - margin)
    r0 = rng.uniform(spec.radius_min, spec.radius_max)
    amplitudes, phases = _radial_profile(rng)

    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    dy = ys - cy
    dx = xs - cx
    distance = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    wobble = np.zeros_like(theta)
    for order, amp, phase in zip(range(2, 6), amplitudes, phases):
        wobble += amp * np.cos(order * theta + phase)
    radius_at = r0 * (1.0 + wobble)
    gt_mask = distance <= radius_at

    bg_level = rng.uniform(0.30, 0.40)
    fg_level = rng.uniform(0.70, 0.80)
    image = np.where(gt_mask, fg_level, bg_level)
    if spec.texture_noise > 0:
        image = image + rng.normal(0.0, spec.texture_noise, size=image.shape)
    return np.clip(image, 0.0, 1.0), gt_mask


def simulate_gaze(gt_mask: np.ndarray, spec: SceneSpec, seed: int | None = None) -> list[GazeRecord]:
    """Fixation log: on-lesion fixations with jitter, uniform distractors at the set rate."""
    gt_mask = np.asarray(gt_mask).astype(bool)
    if not gt_mask.any():
        raise ValueError("simulate_gaze needs a nonempty ground-truth mask")
    height, width = gt_mask.shape
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    fg = np.argwhere(gt_mask)
    records = []
    for _ in range(spec.gaze_points):
        is_distractor = rng.random() < spec.distractor_rate
        jitter = rng.normal(0.0, 1.0, size=2)
        if is_distractor:
            row = rng.uniform(0.0, height - 1.0)
            col = rng.uniform(0.0, width - 1.0)
        else:
            py, px = fg[rng.integers(0, len(fg))]
            row = float(py) + jitter[0] * spec.gaze_jitter_px
            col = float(px) + jitter[1] * spec.gaze_jitter_px
        row = min(max(row, 0.0), height - 1.0)
        col = min(max(col, 0.0), width - 1.0)
        duration = float(rng.lognormal(mean=np.log(200.0), sigma=0.35))
        confidence = float(rng.uniform(0.7, 1.0))
        records.append(
            GazeRecord(
                x=col / (width - 1) if width > 1 else 0.0,
                y=row / (height - 1) if height > 1 else 0.0,
                duration_ms=duration,
                confidence=confidence,
            )
        )
    return records


def crack_perimeter(mask: np.ndarray) -> int:
    """Count of foreground/background 4-adjacencies, image border as background."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    total = 0
    for shifted in (
        padded[:-2, 1:-1],
        padded[2:, 1:-1],
        padded[1:-1, :-2],
        padded[1:-1, 2:],
    ):
        total += int((m & ~shifted).sum())
    return total


def isoperimetric_ratio(mask: np.ndarray) -> float:
    """4*pi*A / P^2 with the crack perimeter; 0 for empty masks."""
    area = int(np.asarray(mask).astype(bool).sum())
    if area == 0:
        return 0.0
    perimeter = crack_perimeter(mask)
    return float(4.0 * np.pi * area / perimeter**2)


def convexity_defect(mask: np.ndarray) -> float:
    """1 - area/hull_area over pixel centers, clamped at 0."""
    m = np.asarray(mask).astype(bool)
    pts = np.argwhere(m).astype(np.float64)
    if len(pts) < 4:
        return 0.0
    try:
        hull_area = ConvexHull(pts).volume
    except QhullError:  # collinear pixel sets
        return 0.0
    if hull_area <= 0:
        return 0.0
    return max(0.0, 1.0 - len(pts) / hull_area)


def simulate_report(gt_mask: np.ndarray) -> LesionReport:
    """Rule-based report: quadrant of the centroid, exact area, shape descriptors."""
    m = np.asarray(gt_mask).astype(bool)
    if not m.any():
        raise ValueError("simulate_report needs a nonempty mask")
    height, width = m.shape
    cy, cx = np.argwhere(m).mean(axis=0)
    vertical = "upper" if cy < height / 2 else "lower"
    horizontal = "left" if cx < width / 2 else "right"
    area_percent = 100.0 * m.sum() / (height * width)
    boundary = "clear" if isoperimetric_ratio(m) >= CLEAR_BOUNDARY_MIN_RATIO else "irregular"
    shape = "smooth" if convexity_defect(m) <= SMOOTH_MAX_CONVEXITY_DEFECT else "lobulated"
    return LesionReport(
        location=f"{vertical}_{horizontal}",
        boundary=boundary,
        characteristics=(shape,),
        area_percent=float(area_percent),
        confidence="high",
        remarks="",
    )


def _save_image_png(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0


def write_dataset(
    out_dir: str | Path,
    spec: SceneSpec,
    count: int,
    val_fraction: float = 0.2,
    test_fraction: float = 0.1,
) -> dict:
    """Materialize a dataset directory; returns the manifest (also written to disk).

    Layout: images/*.png, masks/*.png, gaze/*.csv, reports/*.json plus
    manifest.json carrying the spec, the seed, per-item sub-seeds, and split
    assignments. Content is a pure function of the spec, so the manifest hash
    identifies the dataset.
    """
    out = Path(out_dir)
    for sub in ("images", "masks", "gaze", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    seed_seq = np.random.SeedSequence(spec.seed)
    item_seeds = [int(s.generate_state(1)[0]) for s in seed_seq.spawn(count)]
    split_rng = np.random.default_rng(seed_seq.spawn(1)[0])
    order = split_rng.permutation(count)
    n_val = int(round(val_fraction * count))
    n_test = int(round(test_fraction * count))
    split_of = {}
    for rank, index in enumerate(order):
        if rank < n_val:
            split_of[int(index)] = "val"
        elif rank < n_val + n_test:
            split_of[int(index)] = "test"
        else:
            split_of[int(index)] = "train"

    items = []
    for i in range(count):
        item_id = f"{i:04d}"
        item_spec = SceneSpec(**{**asdict(spec), "seed": item_seeds[i]})
        image, gt_mask = gen_scene(item_spec)
        records = simulate_gaze(gt_mask, item_spec, seed=item_seeds[i] + 1)
        report = simulate_report(gt_mask)
        _save_image_png(image, out / "images" / f"{item_id}.png")
        save_mask_png(gt_mask, out / "masks" / f"{item_id}.png")
        (out / "gaze" / f"{item_id}.csv").write_text(records_to_csv(records), encoding="utf-8")
        (out / "reports" / f"{item_id}.json").write_text(canonical_json(report), encoding="utf-8")
        items.append({"id": item_id, "seed": item_seeds[i], "split": split_of[i]})

    manifest = {
        "spec": asdict(spec),
        "count": count,
        "val_fraction": val_fraction,
        "test_fraction": test_fraction,
        "items": items,
    }
    manifest_text = json.dumps(manifest, indent=2, sort_keys=True)
    (out / "manifest.json").write_text(manifest_text, encoding="utf-8")
    manifest["manifest_sha256"] = hashlib.sha256(manifest_text.encode("utf-8")).hexdigest()
    return manifest
