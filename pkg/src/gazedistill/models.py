"""Segmentation backbones and the text-vision fusion block.

The teacher is a 4-stage encoder-decoder UNet whose encoder features are
enriched at enabled stages by multi-head cross-attention into the report
embedding (visual queries with learnable positional embeddings, text keys and
values, residual scaled by a learnable scalar, then channel layer-norm). The
student is the same topology at half width with no text path; 1x1 projections
align its stage features to the teacher's widths for distillation.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .textenc import TextEmbedding


class FusionShapeError(ValueError):
    """Operand dimensions disagree; message names the offending dimension."""


class CheckpointCompatError(RuntimeError):
    """Checkpoint manifest does not match the live configuration."""


STAGE_COUNT = 4


@dataclass
class StageBundle:
    probs: torch.Tensor  # (B, C, H, W), rows sum to 1 per pixel
    features: list[torch.Tensor]  # 4 stage maps (post-fusion teacher / projected student)


def _as_text_tensor(f_t, dtype, device) -> torch.Tensor:
    if isinstance(f_t, TextEmbedding):
        f_t = f_t.vectors
    if isinstance(f_t, np.ndarray):
        f_t = torch.from_numpy(f_t)
    return f_t.to(dtype=dtype, device=device)


def flatten_grid(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C), row-major positions."""
    return x.flatten(2).transpose(1, 2)


def unflatten_grid(tokens: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of flatten_grid."""
    return tokens.transpose(1, 2).reshape(tokens.shape[0], tokens.shape[2], height, width)


class CrossAttentionFusion(nn.Module):
    """One fusion stage: visual queries attend into text keys/values.

    Built for a fixed stage grid (the positional table is sized to it). The
    text sequence length is free; batches mixing different lengths fall back
    to a per-sample loop.
    """

    def __init__(
        self,
        channels: int,
        text_width: int,
        grid_hw: tuple[int, int],
        heads: int = 4,
        fusion_scale_init: float = 0.1,
    ):
        super().__init__()
        if channels % heads != 0:
            raise FusionShapeError(f"heads={heads} must divide channels={channels}")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.grid_hw = tuple(grid_hw)
        n_positions = grid_hw[0] * grid_hw[1]
        self.query_proj = nn.Linear(channels, channels)
        self.key_proj = nn.Linear(text_width, channels)
        self.value_proj = nn.Linear(text_width, channels)
        self.out_proj = nn.Linear(channels, channels)
        self.pos_embed = nn.Parameter(torch.zeros(n_positions, channels))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.fusion_scale = nn.Parameter(torch.tensor(float(fusion_scale_init)))
        self.norm = nn.LayerNorm(channels)

    def _attend(self, queries: torch.Tensor, f_t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """queries (B,N,C), f_t (B,L,Ct) -> (mhatt (B,N,C), weights (B,h,N,L))."""
        batch, n_pos, _ = queries.shape
        length = f_t.shape[1]
        keys = self.key_proj(f_t)
        values = self.value_proj(f_t)
        q = queries.view(batch, n_pos, self.heads, self.head_dim).transpose(1, 2)
        k = keys.view(batch, length, self.heads, self.head_dim).transpose(1, 2)
        v = values.view(batch, length, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = scores.softmax(dim=-1)
        heads_out = weights @ v
        merged = heads_out.transpose(1, 2).reshape(batch, n_pos, self.channels)
        return self.out_proj(merged), weights

    def forward(self, x: torch.Tensor, f_t, return_attention: bool = False):
        if x.dim() != 4:
            raise FusionShapeError(f"expected (B,C,H,W) features, got {tuple(x.shape)}")
        if x.shape[1] != self.channels:
            raise FusionShapeError(f"channel dim {x.shape[1]} != fusion width {self.channels}")
        if tuple(x.shape[2:]) != self.grid_hw:
            raise FusionShapeError(
                f"grid {tuple(x.shape[2:])} != positional table grid {self.grid_hw}"
            )
        batch = x.shape[0]
        texts = f_t if isinstance(f_t, (list, tuple)) else [f_t] * batch
        if len(texts) != batch:
            raise FusionShapeError(f"got {len(texts)} text embeddings for batch of {batch}")
        texts = [_as_text_tensor(t, x.dtype, x.device) for t in texts]
        for t in texts:
            if t.dim() != 2:
                raise FusionShapeError(f"text embedding must be (L,Ct), got {tuple(t.shape)}")
            if t.shape[1] != self.key_proj.in_features:
                raise FusionShapeError(
                    f"text width {t.shape[1]} != fusion text width {self.key_proj.in_features}"
                )

        tokens = flatten_grid(x)
        queries = self.query_proj(tokens) + self.pos_embed

        lengths = {t.shape[0] for t in texts}
        if len(lengths) == 1:
            mhatt, weights = self._attend(queries, torch.stack(texts, dim=0))
        else:
            outs, weights = [], []
            for i in range(batch):
                out_i, w_i = self._attend(queries[i : i + 1], texts[i].unsqueeze(0))
                outs.append(out_i)
                weights.append(w_i)
            mhatt = torch.cat(outs, dim=0)
            weights = None if not return_attention else weights

        fused = self.norm(tokens + self.fusion_scale * mhatt)
        out = unflatten_grid(fused, *self.grid_hw)
        if return_attention:
            return out, weights
        return out


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    # group-normalized double conv: keeps logits bounded at the default 1e-2
    # learning rate (batch-independent, so training stays deterministic)
    groups = min(8, out_ch)
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.GroupNorm(groups, out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.GroupNorm(groups, out_ch),
        nn.ReLU(inplace=True),
    )


class SegmentationNet(nn.Module):
    """4-stage UNet; optional per-stage cross-attention fusion on the encoder."""

    def __init__(
        self,
        image_side: int,
        base_channels: int = 16,
        classes: int = 2,
        in_channels: int = 1,
        text_width: int | None = None,
        fusion_stages: tuple[int, ...] = (),
        heads: int = 4,
        fusion_scale_init: float = 0.1,
    ):
        super().__init__()
        if image_side % 8 != 0:
            raise FusionShapeError(f"image side {image_side} must be divisible by 8")
        widths = [base_channels * (2**k) for k in range(STAGE_COUNT)]
        self.image_side = image_side
        self.widths = widths
        self.fusion_stages = tuple(sorted(fusion_stages))
        self.classes = classes

        self.encoders = nn.ModuleList(
            [_conv_block(in_channels if k == 0 else widths[k - 1], widths[k]) for k in range(STAGE_COUNT)]
        )
        self.pool = nn.MaxPool2d(2)
        self.upsamplers = nn.ModuleList(
            [nn.ConvTranspose2d(widths[k], widths[k - 1], 2, stride=2) for k in range(STAGE_COUNT - 1, 0, -1)]
        )
        self.decoders = nn.ModuleList(
            [_conv_block(widths[k - 1] * 2, widths[k - 1]) for k in range(STAGE_COUNT - 1, 0, -1)]
        )
        self.head = nn.Conv2d(widths[0], classes, 1)

        self.fusions = nn.ModuleDict()
        if self.fusion_stages:
            if text_width is None:
                raise FusionShapeError("fusion stages configured but no text width given")
            for stage in self.fusion_stages:
                side = image_side // (2 ** (stage - 1))
                self.fusions[str(stage)] = CrossAttentionFusion(
                    channels=widths[stage - 1],
                    text_width=text_width,
                    grid_hw=(side, side),
                    heads=heads,
                    fusion_scale_init=fusion_scale_init,
                )

    def forward(self, image: torch.Tensor, f_t=None) -> StageBundle:
        if image.dim() != 4:
            raise FusionShapeError(f"expected (B,1,H,W) images, got {tuple(image.shape)}")
        if self.fusion_stages and f_t is None:
            raise FusionShapeError("this network fuses text; pass a text embedding")
        feats: list[torch.Tensor] = []
        x = image
        for k in range(STAGE_COUNT):
            if k > 0:
                x = self.pool(x)
            x = self.encoders[k](x)
            key = str(k + 1)
            if key in self.fusions:
                x = self.fusions[key](x, f_t)
            feats.append(x)
        y = feats[-1]
        for i, (up, dec) in enumerate(zip(self.upsamplers, self.decoders)):
            skip = feats[STAGE_COUNT - 2 - i]
            y = dec(torch.cat([up(y), skip], dim=1))
        probs = self.head(y).softmax(dim=1)
        return StageBundle(probs=probs, features=feats)


class StudentNet(nn.Module):
    """Half-width UNet plus 1x1 projections aligning features to teacher widths."""

    def __init__(
        self,
        image_side: int,
        channels: int = 8,
        teacher_channels: int = 16,
        classes: int = 2,
        in_channels: int = 1,
    ):
        super().__init__()
        self.backbone = SegmentationNet(
            image_side=image_side,
            base_channels=channels,
            classes=classes,
            in_channels=in_channels,
        )
        self.projections = nn.ModuleList(
            [
                nn.Conv2d(channels * (2**k), teacher_channels * (2**k), 1)
                for k in range(STAGE_COUNT)
            ]
        )

    def forward(self, image: torch.Tensor) -> StageBundle:
        bundle = self.backbone(image)
        projected = [proj(f) for proj, f in zip(self.projections, bundle.features)]
        return StageBundle(probs=bundle.probs, features=projected)


def build_teacher(cfg: dict) -> SegmentationNet:
    return SegmentationNet(
        image_side=cfg["scene.image_side"],
        base_channels=cfg["model.base_channels"],
        classes=cfg["model.classes"],
        text_width=cfg["text.width"],
        fusion_stages=tuple(cfg["model.fusion_stages"]),
        heads=cfg["model.heads"],
        fusion_scale_init=cfg["model.fusion_scale_init"],
    )


def build_student(cfg: dict) -> StudentNet:
    return StudentNet(
        image_side=cfg["scene.image_side"],
        channels=cfg["model.student_channels"],
        teacher_channels=cfg["model.base_channels"],
        classes=cfg["model.classes"],
    )


def save_checkpoint(
    model: nn.Module,
    directory: str | Path,
    arch_hash: str,
    role: str,
    seed: int,
    step: int,
    fusion_stages: list[int] | tuple[int, ...] = (),
) -> Path:
    """Write a manifest plus one .npy blob per named parameter/buffer."""
    directory = Path(directory)
    params_dir = directory / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        fname = name.replace("/", "_") + ".npy"
        np.save(params_dir / fname, arr)
        index[name] = {"file": f"params/{fname}", "shape": list(arr.shape), "dtype": str(arr.dtype)}
    manifest = {
        "format": 1,
        "role": role,
        "arch_hash": arch_hash,
        "fusion_stages": list(fusion_stages),
        "seed": int(seed),
        "step": int(step),
        "params": index,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    return directory


def load_checkpoint(model: nn.Module, directory: str | Path, arch_hash: str) -> dict:
    """Load blobs into the model; reject manifests built for another architecture."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointCompatError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("arch_hash") != arch_hash:
        raise CheckpointCompatError(
            f"checkpoint arch hash {manifest.get('arch_hash')!r} does not match live config {arch_hash!r}"
        )
    state = {}
    expected = model.state_dict()
    for name, meta in manifest["params"].items():
        if name not in expected:
            raise CheckpointCompatError(f"unexpected parameter {name!r} in checkpoint")
        arr = np.load(directory / meta["file"])
        if list(arr.shape) != list(expected[name].shape):
            raise CheckpointCompatError(
                f"{name}: checkpoint shape {list(arr.shape)} != model shape {list(expected[name].shape)}"
            )
        state[name] = torch.from_numpy(arr)
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointCompatError(f"checkpoint is missing parameters: {sorted(missing)}")
    model.load_state_dict(state)
    return manifest


def checkpoint_digest(directory: str | Path) -> str:
    """Content hash over the manifest's parameter blobs, order-independent."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    h = hashlib.sha256()
    for name in sorted(manifest["params"]):
        h.update(name.encode("utf-8"))
        h.update((directory / manifest["params"][name]["file"]).read_bytes())
    return h.hexdigest()


def state_digest(model: nn.Module) -> str:
    """In-memory hash of all parameters/buffers (frozen-teacher audits)."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
