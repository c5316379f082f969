"""Two-stage training orchestration.

Stage one fits the teacher with partial cross-entropy on the high-confidence
pseudo-mask (text fused at the enabled encoder stages). Stage two freezes the
teacher and trains the student on the broad-coverage mask under the combined
objective: masked cross-entropy, angular feature alignment, and warm-ramped
confidence-weighted consistency. Everything is deterministic given (seed,
config, dataset).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .config import arch_hash
from .data import SceneDataset, SceneItem
from .losses import (
    ConfidentRegions,
    DarmConfig,
    LossWeights,
    afc_loss,
    ce_loss,
    confident_regions,
    cwc_loss,
    darm_mask,
    partial_labels,
    pce_loss,
    student_objective,
)
from .models import (
    SegmentationNet,
    StudentNet,
    build_student,
    build_teacher,
    load_checkpoint,
    save_checkpoint,
    state_digest,
)
from .textenc import make_encoder


class TrainerError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str
    epochs: int
    batch_size: int
    lr_init: float
    seed: int
    warmup_epochs: int
    clip_norm: float
    weights: LossWeights
    darm_enabled: bool
    darm: DarmConfig
    tau_pos: float
    tau_neg: float
    fusion_stages: tuple[int, ...]
    teacher_bg_labels: bool

    @classmethod
    def from_config(cls, cfg: dict, stage: str) -> "TrainConfig":
        epochs = cfg["train.epochs"]
        warmup = cfg["train.warmup_epochs"] or max(1, round(0.1 * epochs))
        return cls(
            stage=stage,
            epochs=epochs,
            batch_size=cfg["train.batch_size"],
            lr_init=cfg["train.lr_init"],
            seed=cfg["train.seed"],
            warmup_epochs=warmup,
            clip_norm=cfg["train.clip_norm"],
            weights=LossWeights(
                lambda_afc=cfg["loss.lambda_afc"],
                lambda_cwc_max=cfg["loss.lambda_cwc"],
                beta=cfg["loss.beta"],
                epsilon=cfg["loss.epsilon"],
            ),
            darm_enabled=cfg["darm.enabled"],
            darm=DarmConfig(
                tau_dis=cfg["darm.tau_dis"],
                patch_side=cfg["darm.patch"],
                rate=cfg["darm.rate"],
                rng_seed=0,
            ),
            tau_pos=cfg["loss.tau_pos"],
            tau_neg=cfg["loss.tau_neg"],
            fusion_stages=tuple(cfg["model.fusion_stages"]),
            teacher_bg_labels=cfg["loss.teacher_bg_labels"],
        )


@dataclass
class RunRecord:
    epochs: list[dict] = field(default_factory=list)

    def add(self, row: dict) -> None:
        self.epochs.append(row)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(row, sort_keys=True) for row in self.epochs) + "\n"


def cosine_lr(step: int, total_steps: int, lr_init: float) -> float:
    """lr_init * 0.5 * (1 + cos(pi * step / total_steps))."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def warmup_factor(epoch: int, warmup_epochs: int) -> float:
    """Linear ramp over 1-based epochs; hits 1.0 exactly at warmup_epochs."""
    if warmup_epochs < 1:
        return 1.0
    return min(1.0, epoch / warmup_epochs)


def _batches(indices: np.ndarray, batch_size: int):
    """Full batches only; the final partial batch is dropped unless it is all we have."""
    n = len(indices)
    if n == 0:
        return
    if n < batch_size:
        yield indices
        return
    for start in range(0, n - batch_size + 1, batch_size):
        yield indices[start : start + batch_size]


def _image_tensor(items: list[SceneItem]) -> torch.Tensor:
    return torch.from_numpy(np.stack([it.image for it in items])).unsqueeze(1)


def _dice_of_probs(probs: torch.Tensor, gt_masks: list[np.ndarray]) -> list[float]:
    pred = probs.argmax(dim=1).cpu().numpy().astype(bool)
    return [metrics.dice(pred[i], gt_masks[i]) for i in range(len(gt_masks))]


def _validate(model, items: list[SceneItem], batch_size: int, with_text: bool) -> float | None:
    if not items:
        return None
    scores: list[float] = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            images = _image_tensor(chunk)
            if with_text:
                bundle = model(images, [it.text for it in chunk])
            else:
                bundle = model(images)
            scores.extend(_dice_of_probs(bundle.probs, [it.gt_mask for it in chunk]))
    model.train()
    return float(np.mean(scores))


def make_run_dir(root: str | Path, cfg: dict, tag: str) -> Path:
    from .config import config_hash

    stamp = time.strftime("%Y%m%d-%H%M%S")
    digest = config_hash(cfg)[:8]
    run_dir = Path(root) / f"{stamp}-{tag}-{digest}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_run_outputs(run_dir: Path, cfg: dict, record: RunRecord) -> None:
    from .config import dump_config

    (run_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    (run_dir / "records.jsonl").write_text(record.to_jsonl(), encoding="utf-8")


def train_teacher(cfg: dict, dataset: SceneDataset, run_dir: str | Path) -> dict:
    """Stage one: optimize the fused teacher with partial cross-entropy."""
    run_dir = Path(run_dir)
    tc = TrainConfig.from_config(cfg, stage="teacher")
    torch.manual_seed(tc.seed)
    model = build_teacher(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=tc.lr_init)

    train_items = dataset.split("train")
    val_items = dataset.split("val")
    usable = [it for it in train_items if not it.empty_hc]
    skipped_empty = len(train_items) - len(usable)
    if not usable:
        raise TrainerError("no training items with a nonempty high-confidence mask")

    steps_per_epoch = max(1, len(usable) // tc.batch_size) if len(usable) >= tc.batch_size else 1
    total_steps = tc.epochs * steps_per_epoch
    record = RunRecord()
    best = {"val_dice": -1.0, "epoch": 0}
    global_step = 0

    for epoch in range(1, tc.epochs + 1):
        tic = time.perf_counter()
        rng = np.random.default_rng((tc.seed, epoch))
        order = rng.permutation(len(usable))
        epoch_losses = []
        last_lr = tc.lr_init
        for batch_idx in _batches(order, tc.batch_size):
            items = [usable[i] for i in batch_idx]
            images = _image_tensor(items)
            fg_labels = torch.stack(
                [partial_labels(torch.from_numpy(it.masks.m_hc)) for it in items]
            )
            last_lr = cosine_lr(global_step, total_steps, tc.lr_init)
            for group in optimizer.param_groups:
                group["lr"] = last_lr
            optimizer.zero_grad()
            bundle = model(images, [it.text for it in items])
            # the sparse foreground set is orders of magnitude smaller than the
            # confident-background set; average the two partial terms so neither
            # class drowns the other
            fg_loss, fg_count = pce_loss(bundle.probs, fg_labels)
            if tc.teacher_bg_labels:
                bg_labels = torch.stack(
                    [
                        partial_labels(
                            torch.zeros_like(torch.from_numpy(it.masks.m_hc)),
                            torch.from_numpy(it.masks.m_bc),
                        )
                        for it in items
                    ]
                )
                bg_loss, bg_count = pce_loss(bundle.probs, bg_labels)
            else:
                bg_loss, bg_count = fg_loss * 0.0, 0
            labeled = fg_count + bg_count
            if fg_count and bg_count:
                loss = 0.5 * fg_loss + 0.5 * bg_loss
            else:
                loss = fg_loss if fg_count else bg_loss
            if labeled == 0:
                global_step += 1
                continue
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip_norm)
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
            global_step += 1

        val_dice = _validate(model, val_items, tc.batch_size, with_text=True)
        row = {
            "epoch": epoch,
            "pce": float(np.mean(epoch_losses)) if epoch_losses else 0.0,
            "lr": last_lr,
            "val_dice": val_dice,
            "wall_time_s": time.perf_counter() - tic,
            "skipped_empty_hc": skipped_empty,
        }
        record.add(row)
        if val_dice is not None and val_dice > best["val_dice"]:
            best = {"val_dice": val_dice, "epoch": epoch}
            save_checkpoint(
                model, run_dir / "checkpoints" / "best", arch_hash(cfg), "teacher",
                tc.seed, global_step, tc.fusion_stages,
            )

    save_checkpoint(
        model, run_dir / "checkpoints" / "final", arch_hash(cfg), "teacher",
        tc.seed, global_step, tc.fusion_stages,
    )
    if best["epoch"] == 0:  # no val split; fall back to final weights
        save_checkpoint(
            model, run_dir / "checkpoints" / "best", arch_hash(cfg), "teacher",
            tc.seed, global_step, tc.fusion_stages,
        )
    _write_run_outputs(run_dir, cfg, record)
    return {
        "run_dir": str(run_dir),
        "stage": "teacher",
        "records": record.epochs,
        "best_epoch": best["epoch"],
        "checkpoints": {
            "best": str(run_dir / "checkpoints" / "best"),
            "final": str(run_dir / "checkpoints" / "final"),
        },
    }


def _darm_seed(base_seed: int, step: int, sample: int) -> int:
    return int(np.random.SeedSequence([base_seed, step, sample]).generate_state(1)[0])


def train_student(
    cfg: dict, teacher_ckpt: str | Path, dataset: SceneDataset, run_dir: str | Path
) -> dict:
    """Stage two: distill the frozen teacher into the text-free student."""
    run_dir = Path(run_dir)
    tc = TrainConfig.from_config(cfg, stage="student")
    torch.manual_seed(tc.seed)

    teacher = build_teacher(cfg)
    load_checkpoint(teacher, teacher_ckpt, arch_hash(cfg))
    teacher.eval()
    for param in teacher.parameters():
        param.requires_grad_(False)
    teacher_digest_before = state_digest(teacher)

    student = build_student(cfg)
    optimizer = torch.optim.Adam(student.parameters(), lr=tc.lr_init)

    train_items = dataset.split("train")
    val_items = dataset.split("val")
    if not train_items:
        raise TrainerError("dataset has no training split")

    steps_per_epoch = (
        max(1, len(train_items) // tc.batch_size) if len(train_items) >= tc.batch_size else 1
    )
    total_steps = tc.epochs * steps_per_epoch
    record = RunRecord()
    best = {"val_dice": -1.0, "epoch": 0}
    global_step = 0

    for epoch in range(1, tc.epochs + 1):
        tic = time.perf_counter()
        rng = np.random.default_rng((tc.seed, epoch))
        order = rng.permutation(len(train_items))
        sums = {"ce": [], "afc": [], "cwc": [], "total": []}
        empty_pos_steps = 0
        empty_neg_steps = 0
        ramp = warmup_factor(epoch, tc.warmup_epochs)
        last_lr = tc.lr_init
        for batch_idx in _batches(order, tc.batch_size):
            items = [train_items[i] for i in batch_idx]
            images = _image_tensor(items)
            with torch.no_grad():
                t_bundle = teacher(images, [it.text for it in items])
            s_bundle = student(images)

            afc = afc_loss(
                s_bundle.features, t_bundle.features,
                beta=tc.weights.beta, epsilon=tc.weights.epsilon,
            )
            regions = confident_regions(
                t_bundle.probs, s_bundle.probs, tau_pos=tc.tau_pos, tau_neg=tc.tau_neg
            )
            if not bool(regions.omega_pos.any()):
                empty_pos_steps += 1
            if not bool(regions.omega_neg.any()):
                empty_neg_steps += 1
            cwc = cwc_loss(t_bundle.probs, s_bundle.probs, regions)

            targets = []
            for i, item in enumerate(items):
                if tc.darm_enabled:
                    darm_cfg = DarmConfig(
                        tau_dis=tc.darm.tau_dis,
                        patch_side=tc.darm.patch_side,
                        rate=tc.darm.rate,
                        rng_seed=_darm_seed(tc.seed, global_step, i),
                    )
                    masked, _ = darm_mask(
                        t_bundle.probs[i], s_bundle.probs[i].detach(),
                        item.masks.m_bc, darm_cfg,
                    )
                else:
                    masked = item.masks.m_bc
                targets.append(torch.from_numpy(masked.astype(np.float32)))
            ce = ce_loss(s_bundle.probs, torch.stack(targets))

            total = student_objective(ce, afc, cwc, tc.weights, warmup_factor=ramp)

            last_lr = cosine_lr(global_step, total_steps, tc.lr_init)
            for group in optimizer.param_groups:
                group["lr"] = last_lr
            optimizer.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(student.parameters(), tc.clip_norm)
            optimizer.step()

            sums["ce"].append(float(ce.detach()))
            sums["afc"].append(float(afc.detach()))
            sums["cwc"].append(float(cwc.detach()))
            sums["total"].append(float(total.detach()))
            global_step += 1

        val_dice = _validate(student, val_items, tc.batch_size, with_text=False)
        row = {
            "epoch": epoch,
            "ce": float(np.mean(sums["ce"])),
            "afc": float(np.mean(sums["afc"])),
            "cwc": float(np.mean(sums["cwc"])),
            "total": float(np.mean(sums["total"])),
            "cwc_weight": ramp * tc.weights.lambda_cwc_max,
            "lr": last_lr,
            "val_dice": val_dice,
            "wall_time_s": time.perf_counter() - tic,
            "empty_omega_pos_steps": empty_pos_steps,
            "empty_omega_neg_steps": empty_neg_steps,
        }
        record.add(row)
        if val_dice is not None and val_dice > best["val_dice"]:
            best = {"val_dice": val_dice, "epoch": epoch}
            save_checkpoint(
                student, run_dir / "checkpoints" / "best", arch_hash(cfg), "student",
                tc.seed, global_step,
            )

    teacher_digest_after = state_digest(teacher)
    if teacher_digest_after != teacher_digest_before:
        raise TrainerError("teacher parameters changed during the student stage")

    save_checkpoint(
        student, run_dir / "checkpoints" / "final", arch_hash(cfg), "student",
        tc.seed, global_step,
    )
    if best["epoch"] == 0:
        save_checkpoint(
            student, run_dir / "checkpoints" / "best", arch_hash(cfg), "student",
            tc.seed, global_step,
        )
    _write_run_outputs(run_dir, cfg, record)
    return {
        "run_dir": str(run_dir),
        "stage": "student",
        "records": record.epochs,
        "best_epoch": best["epoch"],
        "teacher_frozen": True,
        "checkpoints": {
            "best": str(run_dir / "checkpoints" / "best"),
            "final": str(run_dir / "checkpoints" / "final"),
        },
    }


def load_model_for_eval(cfg: dict, ckpt_dir: str | Path) -> tuple[torch.nn.Module, str]:
    manifest = json.loads((Path(ckpt_dir) / "manifest.json").read_text(encoding="utf-8"))
    role = manifest.get("role", "student")
    model = build_teacher(cfg) if role == "teacher" else build_student(cfg)
    load_checkpoint(model, ckpt_dir, arch_hash(cfg))
    model.eval()
    return model, role


def evaluate_checkpoint(
    cfg: dict, ckpt_dir: str | Path, dataset: SceneDataset, split: str = "test"
) -> dict:
    """Per-image and aggregate Dice/mIoU/HD95/ASD on one split."""
    model, role = load_model_for_eval(cfg, ckpt_dir)
    items = dataset.split(split)
    if not items:
        raise TrainerError(f"dataset has no items in split {split!r}")
    spacing = cfg["eval.spacing"]
    per_image = []
    with torch.no_grad():
        for start in range(0, len(items), cfg["train.batch_size"]):
            chunk = items[start : start + cfg["train.batch_size"]]
            images = _image_tensor(chunk)
            if role == "teacher":
                bundle = model(images, [it.text for it in chunk])
            else:
                bundle = model(images)
            preds = bundle.probs.argmax(dim=1).cpu().numpy().astype(bool)
            for i, item in enumerate(chunk):
                pred = preds[i]
                row = {
                    "id": item.item_id,
                    "dice": metrics.dice(pred, item.gt_mask),
                    "miou": metrics.miou(pred, item.gt_mask),
                }
                try:
                    row["hd95"] = metrics.hd95(pred, item.gt_mask, spacing)
                    row["asd"] = metrics.asd(pred, item.gt_mask, spacing)
                except metrics.UndefinedMetricError:
                    row["hd95"] = None
                    row["asd"] = None
                per_image.append(row)
    aggregate = {
        name: metrics.summarize([row[name] for row in per_image])
        for name in ("dice", "miou", "hd95", "asd")
    }
    return {
        "role": role,
        "split": split,
        "checkpoint": str(ckpt_dir),
        "per_image": per_image,
        "aggregate": aggregate,
    }


def make_text_encoder(cfg: dict):
    return make_encoder(
        backend=cfg["text.backend"],
        width=cfg["text.width"],
        seed=cfg["text.seed"],
        model_name=cfg["text.model_name"],
        allow_fallback=cfg["text.allow_fallback"],
    )


def load_dataset(cfg: dict, dataset_dir: str | Path) -> SceneDataset:
    return SceneDataset(dataset_dir, cfg, make_text_encoder(cfg))
