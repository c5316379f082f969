"""Loading a dataset directory into training-ready items.

Pseudo-masks are rebuilt from the stored gaze logs with the configured density
and threshold parameters, and report text is embedded once per item. The
`text_source` switch swaps the structured report text for random or constant
filler, which is the offline analogue of degrading the provider prompt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gaze import MaskPair, density_map, load_gaze, load_mask_png, threshold_masks
from .reports import LesionReport, canonical_text, validate_report
from .synth import load_image_png
from .textenc import TextEmbedding

class DatasetError(ValueError):
    """Inconsistent dataset contents (e.g. image/mask shape mismatch)."""


_FILLER_VOCAB = (
    "murk", "velt", "oxen", "prill", "sably", "crone", "dimet", "fauve",
    "glim", "harsk", "ilex", "jorum", "kelp", "lurid", "moset", "norn",
)


def _variant_text(source: str, canonical: str, item_id: str, seed: int) -> str:
    if source == "structured":
        return canonical
    if source == "constant":
        return "none"
    if source == "random":
        rng = np.random.default_rng((seed, int(item_id, 10)))
        n_tokens = len(canonical.split())
        return " ".join(rng.choice(_FILLER_VOCAB, size=max(1, n_tokens)))
    raise ValueError(f"unknown text source {source!r}")


@dataclass
class SceneItem:
    item_id: str
    image: np.ndarray  # (H, W) float32 in [0, 1]
    gt_mask: np.ndarray  # (H, W) bool
    masks: MaskPair
    report: LesionReport
    text: TextEmbedding
    split: str

    @property
    def empty_hc(self) -> bool:
        return not self.masks.m_hc.any()


class SceneDataset:
    """All items of a dataset directory, filtered by split on access."""

    def __init__(self, root: str | Path, cfg: dict, encoder):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.is_file():
            raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
        self.manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        side = int(self.manifest["spec"]["image_side"])
        sigma_px = max(cfg["gaze.sigma_frac"] * side, 0.5)

        self.items: list[SceneItem] = []
        for entry in self.manifest["items"]:
            item_id = entry["id"]
            image_path = self.root / "images" / f"{item_id}.png"
            mask_path = self.root / "masks" / f"{item_id}.png"
            gaze_path = self.root / "gaze" / f"{item_id}.csv"
            report_path = self.root / "reports" / f"{item_id}.json"
            for path, what in (
                (image_path, "image"),
                (mask_path, "mask"),
                (gaze_path, "gaze log"),
                (report_path, "report"),
            ):
                if not path.is_file():
                    raise DatasetError(f"missing {what} file: {path}")
            image = load_image_png(image_path)
            gt_mask = load_mask_png(mask_path)
            if image.shape != gt_mask.shape:
                raise DatasetError(
                    f"shape mismatch between {image_path} {image.shape} "
                    f"and {mask_path} {gt_mask.shape}"
                )
            records, _ = load_gaze(gaze_path.read_bytes(), fmt="csv")
            dm = density_map(records, *image.shape, sigma_px=sigma_px)
            masks = threshold_masks(
                dm,
                tau_hc=cfg["gaze.tau_hc"],
                tau_bc=cfg["gaze.tau_bc"],
                min_component_px=cfg["gaze.min_component_px"],
            )
            report = validate_report(report_path.read_text(encoding="utf-8"))
            text = encoder.encode(
                _variant_text(cfg["text.source"], canonical_text(report), item_id, cfg["text.seed"])
            )
            self.items.append(
                SceneItem(
                    item_id=item_id,
                    image=image.astype(np.float32),
                    gt_mask=gt_mask,
                    masks=masks,
                    report=report,
                    text=text,
                    split=entry["split"],
                )
            )

    def split(self, name: str) -> list[SceneItem]:
        return [item for item in self.items if item.split == name]

    @property
    def image_side(self) -> int:
        return int(self.manifest["spec"]["image_side"])
