"""Supervision and distillation objectives for the teacher-student pipeline.

Probability maps are laid out (B, C, H, W) (a leading batch dim is added when
absent); masks and label maps are (B, H, W). All losses are differentiable
torch expressions with logs floored at 1e-12 so saturated probabilities never
produce infinities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

IGNORE_LABEL = -1
LOG_FLOOR = 1e-12


class LossShapeError(ValueError):
    """Operand shapes disagree; message names the offending dimension."""


@dataclass(frozen=True)
class LossWeights:
    lambda_afc: float = 0.1
    lambda_cwc_max: float = 1.0
    beta: float = 1.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.lambda_afc < 0 or self.lambda_cwc_max < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class ConfidentRegions:
    omega_pos: torch.Tensor  # (B, H, W) bool
    omega_neg: torch.Tensor  # (B, H, W) bool
    tau_pos: float
    tau_neg: float


@dataclass(frozen=True)
class DarmConfig:
    tau_dis: float = 0.5
    patch_side: int = 8
    rate: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau_dis < 1.0:
            raise ValueError(f"tau_dis must be in (0,1), got {self.tau_dis}")
        if self.patch_side < 1:
            raise ValueError(f"patch_side must be >= 1, got {self.patch_side}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"rate must be in [0,1], got {self.rate}")


def _batched_probs(probs: torch.Tensor) -> torch.Tensor:
    if probs.dim() == 3:
        probs = probs.unsqueeze(0)
    if probs.dim() != 4:
        raise LossShapeError(f"probabilities must be (B,C,H,W) or (C,H,W), got {tuple(probs.shape)}")
    return probs


def _batched_map(mask: torch.Tensor, probs: torch.Tensor, name: str) -> torch.Tensor:
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    if mask.dim() != 3:
        raise LossShapeError(f"{name} must be (B,H,W) or (H,W), got {tuple(mask.shape)}")
    if mask.shape[0] != probs.shape[0] or mask.shape[-2:] != probs.shape[-2:]:
        raise LossShapeError(
            f"{name} shape {tuple(mask.shape)} does not match probabilities {tuple(probs.shape)}"
        )
    return mask


def pce_loss(probs: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Partial cross-entropy over labeled pixels only.

    ``labels`` is an integer map with -1 marking unlabeled pixels; a boolean
    mask is taken as foreground labels (class 1) with everything else
    unlabeled. Returns (loss, labeled-pixel count); an all-unlabeled map gives
    a zero loss with count 0 so the caller can log the skip.
    """
    probs = _batched_probs(probs)
    if labels.dtype == torch.bool:
        labels = torch.where(labels, 1, IGNORE_LABEL)
    labels = _batched_map(labels, probs, "labels").long()
    labeled = labels != IGNORE_LABEL
    count = int(labeled.sum())
    if count == 0:
        return probs.sum() * 0.0, 0
    gathered = probs.gather(1, labels.clamp_min(0).unsqueeze(1)).squeeze(1)
    nll = -gathered.clamp_min(LOG_FLOOR).log()
    return nll[labeled].mean(), count


def partial_labels(m_hc: torch.Tensor, m_bc: torch.Tensor | None = None) -> torch.Tensor:
    """Teacher label map: foreground on m_hc, background outside m_bc, rest ignored.

    Without a broad mask only the foreground pixels carry labels.
    """
    labels = torch.where(m_hc.bool(), 1, IGNORE_LABEL)
    if m_bc is not None:
        if m_bc.shape != m_hc.shape:
            raise LossShapeError(f"m_bc shape {tuple(m_bc.shape)} != m_hc {tuple(m_hc.shape)}")
        labels = torch.where(~m_bc.bool(), torch.zeros_like(labels), labels)
    return labels


def afc_loss(
    student_feats: list[torch.Tensor],
    teacher_feats: list[torch.Tensor],
    beta: float = 1.0,
    epsilon: float = 1e-6,
) -> torch.Tensor:
    """Angular alignment of matched stage features.

    Per spatial position: 1 - <z, x> / (|z||x| + eps) with norms over the
    channel dim, averaged over positions then stages, scaled by beta.
    """
    if len(student_feats) != len(teacher_feats):
        raise LossShapeError(
            f"stage count mismatch: {len(student_feats)} vs {len(teacher_feats)}"
        )
    stage_means = []
    for k, (z, x) in enumerate(zip(student_feats, teacher_feats), start=1):
        if z.shape != x.shape:
            raise LossShapeError(f"stage {k}: student {tuple(z.shape)} vs teacher {tuple(x.shape)}")
        zb = _batched_probs(z)
        xb = _batched_probs(x)
        inner = (zb * xb).sum(dim=1)
        denom = zb.norm(dim=1) * xb.norm(dim=1) + epsilon
        stage_means.append((1.0 - inner / denom).mean())
    return beta * torch.stack(stage_means).mean()


def confident_regions(
    probs_t: torch.Tensor,
    probs_s: torch.Tensor,
    tau_pos: float = 0.8,
    tau_neg: float = 0.2,
) -> ConfidentRegions:
    """Pixels where teacher and student are jointly confident (positive/negative)."""
    if not (0.0 < tau_pos < 1.0 and 0.0 < tau_neg < 1.0):
        raise ValueError(f"thresholds must lie in (0,1), got tau_pos={tau_pos}, tau_neg={tau_neg}")
    probs_t = _batched_probs(probs_t)
    probs_s = _batched_probs(probs_s)
    if probs_t.shape != probs_s.shape:
        raise LossShapeError(
            f"teacher probs {tuple(probs_t.shape)} vs student {tuple(probs_s.shape)}"
        )
    omega_pos = (probs_t.max(dim=1).values >= tau_pos) & (probs_s.max(dim=1).values >= tau_pos)
    omega_neg = (probs_t.min(dim=1).values <= tau_neg) & (probs_s.min(dim=1).values <= tau_neg)
    return ConfidentRegions(
        omega_pos=omega_pos, omega_neg=omega_neg, tau_pos=float(tau_pos), tau_neg=float(tau_neg)
    )


def _inverse_loss(probs_s: torch.Tensor, teacher_class: torch.Tensor) -> torch.Tensor:
    """-log(1 - p_student(flipped class)): penalize student mass opposite the teacher.

    Binary-only by construction; the class index flip is 1 - argmax.
    """
    if probs_s.shape[1] != 2:
        raise LossShapeError(f"inverse consistency needs 2 classes, got {probs_s.shape[1]}")
    flipped = 1 - teacher_class
    p_opposite = probs_s.gather(1, flipped.unsqueeze(1)).squeeze(1)
    return -(1.0 - p_opposite).clamp_min(LOG_FLOOR).log()


def cwc_loss(
    probs_t: torch.Tensor,
    probs_s: torch.Tensor,
    regions: ConfidentRegions,
) -> torch.Tensor:
    """Confidence-weighted consistency over the jointly-confident regions.

    Positive term: teacher-max-weighted cross-entropy toward the teacher's
    argmax class. Negative term: teacher-min-weighted inverse loss pushing
    student mass off the opposite class. Empty regions contribute zero.
    """
    probs_t = _batched_probs(probs_t)
    probs_s = _batched_probs(probs_s)
    if probs_t.shape != probs_s.shape:
        raise LossShapeError(
            f"teacher probs {tuple(probs_t.shape)} vs student {tuple(probs_s.shape)}"
        )
    teacher_class = probs_t.argmax(dim=1)
    zero = probs_s.sum() * 0.0

    total = zero
    if bool(regions.omega_pos.any()):
        w = probs_t.max(dim=1).values
        p_agree = probs_s.gather(1, teacher_class.unsqueeze(1)).squeeze(1)
        ce = -p_agree.clamp_min(LOG_FLOOR).log()
        total = total + (w * ce)[regions.omega_pos].mean()
    if bool(regions.omega_neg.any()):
        w_neg = probs_t.min(dim=1).values
        inv = _inverse_loss(probs_s, teacher_class)
        total = total + (w_neg * inv)[regions.omega_neg].mean()
    return total


def darm_mask(
    probs_t: np.ndarray | torch.Tensor,
    probs_s: np.ndarray | torch.Tensor,
    m_bc: np.ndarray,
    cfg: DarmConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Disagreement-aware random masking of the broad-coverage supervision.

    Disagreement set D = {p : max_c |p_T - p_S| >= tau_dis}. The image is
    tiled from the origin into non-overlapping patch_side x patch_side tiles
    (edge remainders keep their clipped extent); tiles fully inside D are
    candidates and each is dropped independently with probability `rate`
    using the seeded generator. Returns (masked supervision, selected-patch
    indicator).
    """
    if isinstance(probs_t, torch.Tensor):
        probs_t = probs_t.detach().cpu().numpy()
    if isinstance(probs_s, torch.Tensor):
        probs_s = probs_s.detach().cpu().numpy()
    probs_t = np.asarray(probs_t, dtype=np.float64)
    probs_s = np.asarray(probs_s, dtype=np.float64)
    if probs_t.shape != probs_s.shape:
        raise LossShapeError(f"teacher probs {probs_t.shape} vs student {probs_s.shape}")
    if probs_t.ndim != 3:
        raise LossShapeError(f"darm operates per image on (C,H,W), got {probs_t.shape}")
    supervision = np.asarray(m_bc).astype(bool)
    if supervision.shape != probs_t.shape[1:]:
        raise LossShapeError(
            f"m_bc shape {supervision.shape} does not match probabilities {probs_t.shape}"
        )
    disagreement = np.abs(probs_t - probs_s).max(axis=0) >= cfg.tau_dis
    height, width = supervision.shape
    selected = np.zeros_like(supervision, dtype=bool)
    rng = np.random.default_rng(cfg.rng_seed)
    s = cfg.patch_side
    for top in range(0, height, s):
        for left in range(0, width, s):
            window = (slice(top, min(top + s, height)), slice(left, min(left + s, width)))
            if disagreement[window].all():
                if rng.random() < cfg.rate:
                    selected[window] = True
    return supervision & ~selected, selected


def ce_loss(probs_s: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of the foreground probability against a binary map."""
    probs_s = _batched_probs(probs_s)
    if probs_s.shape[1] != 2:
        raise LossShapeError(f"binary cross-entropy needs 2 classes, got {probs_s.shape[1]}")
    target = _batched_map(target, probs_s, "target").to(probs_s.dtype)
    p_fg = probs_s[:, 1]
    loss = -(
        target * p_fg.clamp_min(LOG_FLOOR).log()
        + (1.0 - target) * (1.0 - p_fg).clamp_min(LOG_FLOOR).log()
    )
    return loss.mean()


def student_objective(
    ce: torch.Tensor | float,
    afc: torch.Tensor | float,
    cwc: torch.Tensor | float,
    weights: LossWeights,
    warmup_factor: float = 1.0,
) -> torch.Tensor | float:
    """ce + lambda_afc * afc + warmup * lambda_cwc_max * cwc."""
    if not 0.0 <= warmup_factor <= 1.0:
        raise ValueError(f"warmup_factor must be in [0,1], got {warmup_factor}")
    return ce + weights.lambda_afc * afc + warmup_factor * weights.lambda_cwc_max * cwc
