"""Progressive garment try-on: coarse multi-scale TPS warping, fined mapping,
and pixel-level composition.

The three stages train jointly, but each stage consumes detached copies of
the previous stage's outputs so errors never cross a stage boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from . import synthdata as sd
from .checkpoint import Checkpoint
from .config import Config
from .errors import ValidationError
from .metrics import PerceptualEncoder, default_encoder, perceptual_distance
from .nets import SelfAttention2d, UNet
from .training import (LossLog, check_finite, config_from_checkpoint, iteration_rng,
                       load_model_state, make_checkpoint, restore_optimizer)

MODULE_ID = "ptm"
LOG_COLUMNS = ("iteration", "loss", "coarse", "mapping", "composition", "n3", "n4", "n5", "n6")


def extract_shape_pyramid(mask: torch.Tensor, encoder: PerceptualEncoder | None = None) -> list[torch.Tensor]:
    """Frozen-encoder features of a single-channel mask at strides 1, 2, 4, 8."""
    encoder = encoder or default_encoder()
    return encoder(mask.expand(-1, 3, -1, -1))


class PatchEmbedder(nn.Module):
    """Resample every pyramid level to ``h1 x w1``, project to ``d1`` channels,
    concatenate garment and target features, and add a learned positional
    embedding. One projection per level is shared by both pyramids."""

    def __init__(self, level_channels, d1=32, h1=8, w1=6):
        super().__init__()
        self.size = (h1, w1)
        self.proj = nn.ModuleList(nn.Conv2d(c, d1, 1) for c in level_channels)
        self.pos = nn.Parameter(torch.randn(len(level_channels) * h1 * w1, 2 * d1) * 0.02)

    def tokens(self, pyramid):
        out = []
        for level, proj in zip(pyramid, self.proj):
            x = F.interpolate(level, size=self.size, mode="bilinear", align_corners=False)
            out.append(proj(x).flatten(2).transpose(1, 2))
        return torch.cat(out, dim=1)

    def forward(self, pyr_garment, pyr_target):
        return torch.cat([self.tokens(pyr_garment), self.tokens(pyr_target)], dim=-1) + self.pos


class Aggregator(nn.Module):
    """Pre-norm transformer block that also returns its attention map."""

    def __init__(self, width, heads=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, x):
        n = self.norm1(x)
        a, weights = self.attn(n, n, n, need_weights=True)
        x = x + a
        return x + self.mlp(self.norm2(x)), weights


class TPSHead(nn.Module):
    """One head for every scale: shared trunk, per-scale final linear layer.

    The final layers start at zero so every scale begins as the identity warp.
    """

    def __init__(self, n_tokens, width, hidden=256, max_offset=0.5, scales=geometry.SCALES):
        super().__init__()
        self.max_offset = max_offset
        self.scales = tuple(scales)
        self.reduce = nn.Linear(width, 8)
        self.trunk = nn.Sequential(nn.Linear(n_tokens * 8, hidden), nn.GELU())
        self.out = nn.ModuleDict({str(s): nn.Linear(hidden, 2 * s * s) for s in self.scales})
        for lin in self.out.values():
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, tokens):
        h = self.trunk(self.reduce(tokens).flatten(1))
        grids = {}
        for s in self.scales:
            off = torch.tanh(self.out[str(s)](h)).view(-1, s, s, 2) * self.max_offset
            grids[s] = geometry.static_grid(s, off.dtype, off.device) + off
        return grids


class CoarseWarper(nn.Module):
    def __init__(self, encoder_width=16, d1=32, h1=8, w1=6, max_offset=0.5, blocks=3, heads=4):
        super().__init__()
        self.encoder_width = encoder_width
        channels = default_encoder(encoder_width).channels
        self.embed = PatchEmbedder(channels, d1, h1, w1)
        self.blocks = nn.ModuleList(Aggregator(2 * d1, heads) for _ in range(blocks))
        self.head = TPSHead(len(channels) * h1 * w1, 2 * d1, max_offset=max_offset)

    def embed_patches(self, garment_mask, target_mask):
        enc = default_encoder(self.encoder_width)
        return self.embed(extract_shape_pyramid(garment_mask, enc), extract_shape_pyramid(target_mask, enc))

    def predict_theta(self, tokens):
        attn = []
        for blk in self.blocks:
            tokens, a = blk(tokens)
            attn.append(a)
        return self.head(tokens), attn

    def forward(self, garment_mask, target_mask):
        return self.predict_theta(self.embed_patches(garment_mask, target_mask))


class FinedMapper(nn.Module):
    """Encoder-decoder with global self-attention at the bottleneck.

    Input is an image plus the shape it should be mapped to; output is an
    RGB image in [0, 1].
    """

    def __init__(self, widths=(24, 48, 96), attention_blocks=1):
        super().__init__()
        neck = nn.Sequential(*[SelfAttention2d(widths[-1]) for _ in range(attention_blocks)])
        self.body = UNet(4, 3, widths, bottleneck=neck)

    def forward(self, image, mask):
        return torch.sigmoid(self.body(torch.cat([image, mask], dim=1)))


class CompositionNet(nn.Module):
    # the mapper starts untrained, so the blend initially leans on the warp
    INITIAL_BIAS = -2.0

    def __init__(self, widths=(16, 32, 64)):
        super().__init__()
        self.body = UNet(6, 1, widths)
        nn.init.constant_(self.body.head.bias, self.INITIAL_BIAS)

    def forward(self, warped, mapped):
        return torch.sigmoid(self.body(torch.cat([warped, mapped], dim=1)))


class ProgressiveTryOn(nn.Module):
    def __init__(self, cfg: Config | None = None):
        super().__init__()
        cfg = cfg or Config()
        self.warp = CoarseWarper(cfg.encoder_width, cfg.d1, cfg.h1, cfg.w1, cfg.max_offset)
        self.map = FinedMapper()
        self.compose = CompositionNet()


def predict_theta(tokens, model: CoarseWarper):
    return model.predict_theta(tokens)


def fined_map(image, target_mask, model: FinedMapper):
    if image.shape[-2:] != target_mask.shape[-2:]:
        raise ValidationError(f"image {tuple(image.shape)} and mask {tuple(target_mask.shape)} disagree on H x W")
    return model(image, target_mask)


def predict_composition_mask(warped, mapped, model: CompositionNet):
    return model(warped, mapped)


# losses ------------------------------------------------------------------


def coarse_warp_loss(candidates: geometry.WarpCandidateSet, target_mask, lambda3=3.0, lambda4=0.3):
    shape = sum((candidates.masks[s] - target_mask).abs().mean() for s in candidates.scales)
    return lambda3 * shape + lambda4 * geometry.grid_regularization(candidates.grid_pairs())


def fined_map_loss(mapped, remapped, warped, target, xi=0.3, lambda5=6.0, lambda6=0.2, encoder=None):
    """Pixel and perceptual supervision of the mapping and its consistency pass.

    ``mapped`` comes from (warped, target shape); ``remapped`` from
    (mapped, warped shape) and must return to ``warped``.
    """
    if not 0.0 <= xi <= 1.0:
        raise ValidationError(f"xi={xi} outside [0, 1]")
    encoder = encoder or default_encoder()

    def terms(dist):
        return xi * dist(mapped, warped) + (1 - xi) * dist(mapped, target) + dist(remapped, warped)

    def pixel(a, b):
        return (a - b).abs().mean()

    def percep(a, b):
        return perceptual_distance(a, b, encoder)

    return lambda5 * terms(pixel) + lambda6 * terms(percep)


def composition_loss(composited, warped, target, target_mask, warped_mask, xi=0.3):
    """Aligned-region fidelity to the warp plus full-image fidelity to the target.

    The aligned region is the product of the two soft masks; its term is a
    per-sample mean over that region (zero when the region is empty).
    """
    if not 0.0 <= xi <= 1.0:
        raise ValidationError(f"xi={xi} outside [0, 1]")
    region = target_mask * warped_mask
    c = composited.shape[1]
    diff = (composited - warped).abs() * region
    mass = region.flatten(1).sum(1) * c
    num = diff.flatten(1).sum(1)
    safe = torch.where(mass > 0, mass, torch.ones_like(mass))
    aligned = torch.where(mass > 0, num / safe, torch.zeros_like(num)).mean()
    return xi * aligned + (1 - xi) * (composited - target).abs().mean()


# training ----------------------------------------------------------------


@dataclass
class StepOutputs:
    candidates: geometry.WarpCandidateSet
    selected: torch.Tensor
    warped: torch.Tensor
    warped_mask: torch.Tensor
    mapped: torch.Tensor
    remapped: torch.Tensor
    comp_mask: torch.Tensor
    composited: torch.Tensor
    coarse: torch.Tensor
    mapping: torch.Tensor
    composition: torch.Tensor

    @property
    def total(self):
        return self.coarse + self.mapping + self.composition


def ptm_step(model: ProgressiveTryOn, batch: dict, cfg: Config) -> StepOutputs:
    """One joint forward pass over the three stages with detached hand-offs."""
    g_mask, g_img = batch["garment_mask"], batch["garment"]
    target, target_img = batch["pg_mask"], batch["pg_image"]
    grids, _ = model.warp(g_mask, target)
    cands = geometry.warp_candidates(g_img, g_mask, grids)
    coarse = coarse_warp_loss(cands, target, cfg.lambda3, cfg.lambda4)

    selected = geometry.select_optimal(cands, target, g_mask, cfg.tau)
    warped = geometry.gather_selected(cands.stacked_images(), selected).detach().clone()
    warped_mask = geometry.gather_selected(cands.stacked_masks(), selected).detach().clone()
    mapped = model.map(warped, target)
    remapped = model.map(mapped, warped_mask)
    mapping = fined_map_loss(mapped, remapped, warped, target_img, cfg.xi, cfg.lambda5, cfg.lambda6,
                             default_encoder(cfg.encoder_width))

    mapped_d = mapped.detach().clone()
    comp_mask = model.compose(warped, mapped_d)
    composited = geometry.composite(mapped_d, warped, comp_mask)
    composition = composition_loss(composited, warped, target_img, target, warped_mask, cfg.xi)
    return StepOutputs(cands, selected, warped, warped_mask, mapped, remapped, comp_mask, composited,
                       coarse, mapping, composition)


def build_model(cfg: Config) -> ProgressiveTryOn:
    torch.manual_seed(cfg.seed + 23)
    return ProgressiveTryOn(cfg)


def train_ptm(samples, cfg: Config, iterations: int | None = None, resume: Checkpoint | None = None,
              callback=None):
    """Joint training of the three stages. Returns (model, checkpoint).

    ``callback(row, outputs, batch)`` sees every step, including the
    candidate masks and the selected scales.
    """
    samples = [s for s in samples if s.split == "train"] or list(samples)
    if not samples:
        raise ValidationError("PTM training needs samples")
    data = sd.to_tensors(samples)
    n = len(samples)
    total = cfg.ptm_iterations if iterations is None else iterations
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.ptm_lr)
    log = LossLog(LOG_COLUMNS)
    start = 0
    if resume is not None:
        load_model_state(model, resume)
        restore_optimizer(resume, opt)
        log = LossLog.unpack(resume, LOG_COLUMNS)
        start = int(resume.metadata.get("iterations", 0))
    model.train()
    for it in range(start, total):
        rng = iteration_rng(cfg.seed, it)
        idx = rng.choice(n, size=min(cfg.ptm_batch, n), replace=False)
        batch = {k: v[idx] for k, v in data.items()}
        out = ptm_step(model, batch, cfg)
        for stage, value in (("coarse", out.coarse), ("mapping", out.mapping), ("composition", out.composition)):
            check_finite(value, f"{MODULE_ID}.{stage}", it)
        opt.zero_grad()
        out.total.backward()
        opt.step()
        counts = [(out.selected == s).sum().item() for s in geometry.SCALES]
        row = {"iteration": it, "loss": out.total.item(), "coarse": out.coarse.item(),
               "mapping": out.mapping.item(), "composition": out.composition.item(),
               "n3": counts[0], "n4": counts[1], "n5": counts[2], "n6": counts[3]}
        log.append(row)
        if callback is not None:
            callback(row, out, batch)
    model.eval()
    return model, make_checkpoint(MODULE_ID, cfg, model, opt, log, total)


def load_ptm(ckpt: Checkpoint) -> ProgressiveTryOn:
    if ckpt.module_id != MODULE_ID:
        raise ValidationError(f"expected a {MODULE_ID} checkpoint, got {ckpt.module_id!r}")
    model = build_model(config_from_checkpoint(ckpt))
    load_model_state(model, ckpt)
    return model.eval()


# inference ---------------------------------------------------------------


@torch.no_grad()
def tryon_garment(garment, garment_mask, target_mask, model: ProgressiveTryOn, tau: float = 0.2):
    """Warp, select, map and composite a new garment onto a target shape.

    Returns the garment image masked to ``target_mask``.
    """
    model.eval()
    grids, _ = model.warp(garment_mask, target_mask)
    cands = geometry.warp_candidates(garment, garment_mask, grids)
    selected = geometry.select_optimal(cands, target_mask, garment_mask, tau)
    warped = geometry.gather_selected(cands.stacked_images(), selected)
    mapped = model.map(warped, target_mask)
    comp = model.compose(warped, mapped)
    return geometry.composite(mapped, warped, comp) * target_mask
