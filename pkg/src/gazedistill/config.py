"""Flat key-value run configuration.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Keys are dotted (``train.lr_init``); every key has a typed default below and
unknown keys are rejected. CLI ``--set key=value`` overrides win over the file.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Bad config key, value, or file. Maps to CLI exit code 3."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


DEFAULTS: dict[str, Any] = {
    # synthetic scene generation
    "scene.image_side": 64,
    "scene.lesion_count": 1,
    "scene.radius_min": 7.0,
    "scene.radius_max": 14.0,
    "scene.texture_noise": 0.08,
    "scene.gaze_points": 30,
    "scene.gaze_jitter_px": 2.5,
    "scene.distractor_rate": 0.35,
    "scene.count": 256,
    "scene.seed": 1234,
    # dataset split fractions (train is the remainder)
    "split.val": 0.2,
    "split.test": 0.1,
    # gaze density -> pseudo-mask construction
    "gaze.sigma_frac": 0.03,
    "gaze.tau_hc": 0.7,
    "gaze.tau_bc": 0.3,
    "gaze.min_component_px": 16,
    # vision-language provider client
    "report.mode": "replay",
    "report.endpoint": "",
    "report.credential_env": "VLM_API_KEY",
    "report.timeout_s": 30.0,
    "report.fixture_dir": "fixtures",
    "report.provider_id": "replay",
    "report.max_concurrency": 4,
    # text encoder
    "text.backend": "deterministic_test",
    "text.width": 768,
    "text.model_name": "roberta-base",
    "text.seed": 7,
    "text.allow_fallback": False,
    "text.source": "structured",  # structured | random | constant
    # networks
    "model.classes": 2,
    "model.base_channels": 16,
    "model.student_channels": 8,
    "model.heads": 4,
    "model.fusion_stages": [1, 2, 3, 4],
    "model.fusion_scale_init": 0.1,
    # losses
    "loss.lambda_afc": 0.1,
    "loss.lambda_cwc": 1.0,
    "loss.beta": 1.0,
    "loss.epsilon": 1e-6,
    "loss.tau_pos": 0.8,
    "loss.tau_neg": 0.2,
    "loss.teacher_bg_labels": True,
    # disagreement-aware random masking
    "darm.enabled": True,
    "darm.tau_dis": 0.5,
    "darm.patch": 4,
    "darm.rate": 0.5,
    # training
    "train.epochs": 20,
    "train.batch_size": 16,
    "train.lr_init": 1e-2,
    "train.seed": 42,
    "train.warmup_epochs": 0,  # 0 -> 10% of epochs, at least 1
    "train.clip_norm": 5.0,
    # evaluation
    "eval.spacing": 1.0,
    "eval.checkpoint": "best",  # best | final
    # ablation matrix
    "ablate.seeds": [1, 2, 3],
    # output layout
    "run.root": "runs",
}

_LIST_KEYS = {"model.fusion_stages", "ablate.seeds"}


def _coerce(key: str, raw: Any) -> Any:
    """Coerce a raw (possibly string) value to the type of the default."""
    default = DEFAULTS[key]
    if key in _LIST_KEYS:
        if isinstance(raw, (list, tuple)):
            items = list(raw)
        else:
            items = [p for p in str(raw).replace("[", "").replace("]", "").split(",") if p.strip()]
        try:
            return [int(p) for p in items]
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}", key)
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {raw!r}", key)
    if isinstance(default, int):
        try:
            return int(str(raw).strip())
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {raw!r}", key)
    if isinstance(default, float):
        try:
            return float(str(raw).strip())
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {raw!r}", key)
    return str(raw).strip()


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse ``key = value`` lines into a raw override dict."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_config(
    path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """Resolve the full config: defaults <- file <- overrides. Validates keys."""
    resolved = dict(DEFAULTS)
    stages = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        stages.append(parse_config_text(p.read_text(encoding="utf-8")))
    if overrides:
        stages.append(dict(overrides))
    for stage in stages:
        for key, raw in stage.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}", key)
            resolved[key] = _coerce(key, raw)
    _validate(resolved)
    return resolved


def _validate(cfg: dict[str, Any]) -> None:
    def bad(key: str, why: str) -> ConfigError:
        return ConfigError(f"{key}: {why} (got {cfg[key]!r})", key)

    if cfg["scene.image_side"] < 8:
        raise bad("scene.image_side", "must be >= 8")
    if cfg["scene.lesion_count"] != 1:
        raise bad("scene.lesion_count", "only single-lesion scenes are supported")
    if not (0 < cfg["scene.radius_min"] <= cfg["scene.radius_max"]):
        raise bad("scene.radius_min", "need 0 < radius_min <= radius_max")
    if cfg["scene.radius_max"] * 1.5 >= cfg["scene.image_side"] / 2:
        raise bad("scene.radius_max", "lesion must fit inside the image")
    if not 0.0 <= cfg["scene.distractor_rate"] <= 1.0:
        raise bad("scene.distractor_rate", "must be in [0,1]")
    if not (0.0 < cfg["gaze.tau_bc"] <= cfg["gaze.tau_hc"] <= 1.0):
        raise bad("gaze.tau_hc", "need 0 < tau_bc <= tau_hc <= 1")
    if cfg["split.val"] < 0 or cfg["split.test"] < 0 or cfg["split.val"] + cfg["split.test"] >= 1:
        raise bad("split.val", "val + test fractions must leave a training split")
    if cfg["report.mode"] not in ("live", "replay"):
        raise bad("report.mode", "must be 'live' or 'replay'")
    if cfg["text.backend"] not in ("pretrained", "deterministic_test"):
        raise bad("text.backend", "must be 'pretrained' or 'deterministic_test'")
    if cfg["text.source"] not in ("structured", "random", "constant"):
        raise bad("text.source", "must be structured|random|constant")
    if cfg["text.width"] < cfg["model.heads"]:
        raise bad("text.width", "must be at least the head count")
    if cfg["model.classes"] != 2:
        raise bad("model.classes", "binary segmentation only")
    if cfg["model.base_channels"] % cfg["model.heads"] != 0:
        raise bad("model.heads", "head count must divide model.base_channels")
    stages = cfg["model.fusion_stages"]
    if not stages or any(s not in (1, 2, 3, 4) for s in stages) or len(set(stages)) != len(stages):
        raise bad("model.fusion_stages", "must be a nonempty subset of 1..4")
    if cfg["loss.lambda_afc"] < 0 or cfg["loss.lambda_cwc"] < 0:
        raise bad("loss.lambda_afc", "loss weights must be >= 0")
    if cfg["loss.epsilon"] <= 0:
        raise bad("loss.epsilon", "must be > 0")
    if not (0 < cfg["loss.tau_neg"] < 1 and 0 < cfg["loss.tau_pos"] < 1):
        raise bad("loss.tau_pos", "thresholds must lie in (0,1)")
    if not 0 < cfg["darm.tau_dis"] < 1:
        raise bad("darm.tau_dis", "must be in (0,1)")
    if cfg["darm.patch"] < 1:
        raise bad("darm.patch", "must be >= 1")
    if not 0 <= cfg["darm.rate"] <= 1:
        raise bad("darm.rate", "must be in [0,1]")
    if cfg["train.epochs"] < 1:
        raise bad("train.epochs", "must be >= 1")
    if cfg["train.lr_init"] < 0:
        raise bad("train.lr_init", "must be >= 0")
    if cfg["train.batch_size"] < 1:
        raise bad("train.batch_size", "must be >= 1")
    if cfg["eval.checkpoint"] not in ("best", "final"):
        raise bad("eval.checkpoint", "must be 'best' or 'final'")


def config_hash(cfg: dict[str, Any], keys: list[str] | None = None) -> str:
    """Stable sha256 over the selected (default: all) resolved entries."""
    subset = {k: cfg[k] for k in (keys if keys is not None else sorted(cfg))}
    blob = json.dumps(subset, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# Keys that determine network architecture; checkpoints embed a hash of these
# so that e.g. loss-weight ablations can share one teacher checkpoint.
ARCH_KEYS = [
    "scene.image_side",
    "model.classes",
    "model.base_channels",
    "model.student_channels",
    "model.heads",
    "model.fusion_stages",
    "text.width",
]


def arch_hash(cfg: dict[str, Any]) -> str:
    return config_hash(cfg, ARCH_KEYS)


def dump_config(cfg: dict[str, Any]) -> str:
    """Render a resolved config back to the flat file format."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
