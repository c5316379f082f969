"""Ablation matrices over the config switches.

Each axis is a named list of config overrides. Variants that leave the teacher
untouched share one teacher checkpoint per seed; axes that alter the teacher
(fusion depth, text source) retrain it per variant. Results are mean/std test
Dice over the configured seeds.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .train import evaluate_checkpoint, load_dataset, train_student, train_teacher

# axis -> (teacher_varies, {variant: overrides})
AXES: dict[str, tuple[bool, dict[str, dict]]] = {
    "student_losses": (
        False,
        {
            "wo_both": {"loss.lambda_afc": 0.0, "loss.lambda_cwc": 0.0},
            "wo_cwc": {"loss.lambda_cwc": 0.0},
            "wo_afc": {"loss.lambda_afc": 0.0},
            "full": {},
        },
    ),
    "darm": (
        False,
        {
            "wo_darm": {"darm.enabled": False},
            "w_darm": {"darm.enabled": True},
        },
    ),
    "thresholds": (
        False,
        {
            "neg0.1_pos0.9": {"loss.tau_neg": 0.1, "loss.tau_pos": 0.9},
            "neg0.2_pos0.8": {"loss.tau_neg": 0.2, "loss.tau_pos": 0.8},
            "neg0.3_pos0.7": {"loss.tau_neg": 0.3, "loss.tau_pos": 0.7},
            "neg0.4_pos0.6": {"loss.tau_neg": 0.4, "loss.tau_pos": 0.6},
        },
    ),
    "fusion_depth": (
        True,
        {
            "stages1": {"model.fusion_stages": [1]},
            "stages2": {"model.fusion_stages": [1, 2]},
            "stages3": {"model.fusion_stages": [1, 2, 3]},
            "stages4": {"model.fusion_stages": [1, 2, 3, 4]},
        },
    ),
    "text_source": (
        True,
        {
            "random_text": {"text.source": "random"},
            "constant_text": {"text.source": "constant"},
            "structured_text": {"text.source": "structured"},
        },
    ),
}


def run_ablation(cfg: dict, axis: str, dataset_dir: str | Path, run_dir: str | Path) -> dict:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; have {sorted(AXES)}")
    teacher_varies, variants = AXES[axis]
    run_dir = Path(run_dir)
    seeds = cfg["ablate.seeds"]
    ckpt_kind = cfg["eval.checkpoint"]

    results: dict[str, dict] = {name: {"per_seed": {}} for name in variants}
    for seed in seeds:
        shared_teacher = None
        shared_dataset = None
        if not teacher_varies:
            seed_cfg = {**cfg, "train.seed": seed}
            shared_dataset = load_dataset(seed_cfg, dataset_dir)
            teacher_dir = run_dir / f"seed{seed}" / "teacher"
            summary = train_teacher(seed_cfg, shared_dataset, teacher_dir)
            shared_teacher = summary["checkpoints"][ckpt_kind]

        for name, overrides in variants.items():
            variant_cfg = {**cfg, "train.seed": seed, **overrides}
            variant_dir = run_dir / f"seed{seed}" / name
            if teacher_varies:
                dataset = load_dataset(variant_cfg, dataset_dir)
                t_summary = train_teacher(variant_cfg, dataset, variant_dir / "teacher")
                teacher_ckpt = t_summary["checkpoints"][ckpt_kind]
            else:
                dataset = shared_dataset
                teacher_ckpt = shared_teacher
            s_summary = train_student(variant_cfg, teacher_ckpt, dataset, variant_dir / "student")
            report = evaluate_checkpoint(
                variant_cfg, s_summary["checkpoints"][ckpt_kind], dataset, split="test"
            )
            results[name]["per_seed"][str(seed)] = report["aggregate"]["dice"]["mean"]

    for name, entry in results.items():
        values = np.array(list(entry["per_seed"].values()), dtype=np.float64)
        entry["dice_mean"] = float(values.mean())
        entry["dice_std"] = float(values.std(ddof=0))
    return {"axis": axis, "seeds": list(seeds), "variants": results}
