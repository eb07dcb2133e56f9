"""Re-naked skin inpainting.

Self-supervised: erase a random rectangle from the upper-skin mask, encode
the remaining skin pixels into a position-free latent, and regenerate the
full skin region from that latent plus a spatial seed computed from the
target skin mask. At test time skin is only synthesised when the try-on
exposes skin the source photo does not show.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import synthdata as sd
from .checkpoint import Checkpoint
from .config import Config
from .errors import ValidationError
from .metrics import default_encoder, perceptual_distance
from .training import (LossLog, check_finite, config_from_checkpoint, iteration_rng,
                       load_model_state, make_checkpoint, restore_optimizer)

MODULE_ID = "rsim"
LATENT_DIM = 1536
LEVEL_DIM = LATENT_DIM // 4
MAPPING_LAYERS = 8
LOG_COLUMNS = ("iteration", "loss", "pixel", "perceptual", "erased")
MAX_ERASE_ATTEMPTS = 100


@dataclass(frozen=True)
class ErasureSpec:
    probability: float = 0.5
    area_range: tuple = (0.02, 0.30)
    aspect_range: tuple = (0.3, 3.33)

    def __post_init__(self):
        lo, hi = self.area_range
        if not 0.0 <= self.probability <= 1.0:
            raise ValidationError(f"erase probability {self.probability} outside [0, 1]")
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValidationError(f"bad area range {self.area_range}")
        if not 0.0 < self.aspect_range[0] <= self.aspect_range[1]:
            raise ValidationError(f"bad aspect range {self.aspect_range}")


def erasure_ladder(level: int) -> ErasureSpec:
    """Erasure strength for levels 1..9; level 5 is the recommended setting.

    Probability rises 0.1 per level and the upper area bound 0.06 per level,
    so level 5 is (0.5, [0.02, 0.30]).
    """
    if not isinstance(level, (int, np.integer)) or not 1 <= level <= 9:
        raise ValidationError(f"erasure level {level!r} outside 1..9")
    return ErasureSpec(round(0.1 * level, 10), (0.02, round(0.06 * level, 10)), (0.3, 3.33))


def ladder_tsv() -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, delimiter="\t", lineterminator="\n")
    wr.writerow(["level", "probability", "area_lo", "area_hi", "aspect_lo", "aspect_hi"])
    for level in range(1, 10):
        e = erasure_ladder(level)
        wr.writerow([level, e.probability, *e.area_range, *e.aspect_range])
    return buf.getvalue()


def sample_erase_box(height: int, width: int, spec: ErasureSpec, rng: np.random.Generator):
    """Draw ``(top, left, h, w)`` or ``None`` when this draw does not erase.

    Area fraction ~ U(area_range), aspect (h / w) ~ U(aspect_range); boxes
    that do not fit the frame are redrawn. Rounding to whole pixels moves
    the area by at most one row or column.
    """
    if rng.random() >= spec.probability:
        return None
    total = height * width
    for _ in range(MAX_ERASE_ATTEMPTS):
        area = rng.uniform(*spec.area_range) * total
        aspect = rng.uniform(*spec.aspect_range)
        h = max(1, int(round(math.sqrt(area * aspect))))
        if h > height:
            continue
        w = max(1, int(round(area / h)))
        if w > width:
            continue
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        return top, left, h, w
    # unreachable for sane ranges; fall back to the largest box that fits
    h = min(height, max(1, int(round(math.sqrt(spec.area_range[1] * total)))))
    w = min(width, max(1, int(round(spec.area_range[1] * total / h))))
    return 0, 0, h, w


def random_erase(mask, spec: ErasureSpec, rng: np.random.Generator):
    """Zero one random rectangle of ``mask`` (last two dims are H x W)."""
    h, w = mask.shape[-2:]
    box = sample_erase_box(h, w, spec, rng)
    if box is None:
        return mask.clone() if isinstance(mask, torch.Tensor) else np.array(mask, copy=True)
    top, left, bh, bw = box
    out = mask.clone() if isinstance(mask, torch.Tensor) else np.array(mask, copy=True)
    out[..., top:top + bh, left:left + bw] = 0
    return out


# networks ----------------------------------------------------------------


class SkinEncoder(nn.Module):
    """Frozen pyramid features -> 1x1 conv to 384 channels -> global average
    pool -> concatenated 1536-d latent."""

    def __init__(self, encoder_width=16):
        super().__init__()
        self.encoder_width = encoder_width
        chans = default_encoder(encoder_width).channels
        self.reduce = nn.ModuleList(nn.Conv2d(c, LEVEL_DIM, 1) for c in chans)

    def forward(self, image):
        feats = default_encoder(self.encoder_width)(image)
        # a 1x1 conv commutes with global average pooling; pooling first is cheaper
        pooled = [r(F.adaptive_avg_pool2d(f, 1)).flatten(1) for r, f in zip(self.reduce, feats)]
        return torch.cat(pooled, dim=1)


class MappingNetwork(nn.Module):
    def __init__(self, dim=LATENT_DIM, layers=MAPPING_LAYERS):
        super().__init__()
        mods = []
        for _ in range(layers):
            mods += [nn.Linear(dim, dim), nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*mods)

    def forward(self, z):
        return self.net(z)


class AdaIN(nn.Module):
    """Instance-normalise, then apply a per-channel scale/shift taken from w."""

    def __init__(self, channels, style_dim=LATENT_DIM):
        super().__init__()
        self.affine = nn.Linear(style_dim, 2 * channels)
        nn.init.zeros_(self.affine.weight)
        nn.init.zeros_(self.affine.bias)

    def forward(self, x, w):
        gamma, beta = self.affine(w).chunk(2, dim=1)
        x = F.instance_norm(x, eps=1e-5)
        return x * (1 + gamma[..., None, None]) + beta[..., None, None]


class ModulatedConv(nn.Module):
    """3x3 conv whose weights are scaled per input channel by w and demodulated."""

    def __init__(self, cin, cout, style_dim=LATENT_DIM):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(cout, cin, 3, 3) / math.sqrt(cin * 9))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.affine = nn.Linear(style_dim, cin)
        nn.init.zeros_(self.affine.weight)
        nn.init.ones_(self.affine.bias)

    def forward(self, x, w):
        b, cin, h, wd = x.shape
        style = self.affine(w)                                       # (B, cin)
        weight = self.weight[None] * style[:, None, :, None, None]   # (B, cout, cin, 3, 3)
        demod = torch.rsqrt((weight ** 2).sum(dim=(2, 3, 4)) + 1e-8)
        weight = weight * demod[..., None, None, None]
        out = F.conv2d(x.reshape(1, b * cin, h, wd), weight.reshape(-1, cin, 3, 3), padding=1, groups=b)
        return out.reshape(b, -1, h, wd) + self.bias[None, :, None, None]


def unit_clamp(x: torch.Tensor) -> torch.Tensor:
    """Clamp to [0, 1] with an identity gradient.

    Mostly-zero targets push a sigmoid head into saturation within a few
    steps, after which the skin region can no longer recover.
    """
    return x + (x.clamp(0, 1) - x).detach()


class SkinGenerator(nn.Module):
    """Spatially seeded, noise-free style generator.

    The seed (deepest pyramid level of the target skin mask) replaces the
    usual constant input. Four style-modulated stages, three of them
    preceded by a 2x upsampling, bring it back to full resolution.
    """

    def __init__(self, seed_channels=128, widths=(128, 64, 32, 16), demodulate=False):
        super().__init__()
        self.demodulate = demodulate
        self.convs = nn.ModuleList()
        self.styles = nn.ModuleList()
        cin = seed_channels
        for cout in widths:
            if demodulate:
                self.convs.append(ModulatedConv(cin, cout))
                self.styles.append(nn.Identity())
            else:
                self.convs.append(nn.Conv2d(cin, cout, 3, padding=1))
                self.styles.append(AdaIN(cout))
            cin = cout
        self.to_rgb = nn.Conv2d(cin, 3, 1)

    def forward(self, w, seed):
        x = seed
        for i, (conv, style) in enumerate(zip(self.convs, self.styles)):
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            if self.demodulate:
                x = conv(x, w)
            else:
                x = style(conv(x), w)
            x = F.leaky_relu(x, 0.2)
        return unit_clamp(self.to_rgb(x) + 0.5)


class SkinInpainter(nn.Module):
    def __init__(self, cfg: Config | None = None):
        super().__init__()
        cfg = cfg or Config()
        self.encoder_width = cfg.encoder_width
        self.encode = SkinEncoder(cfg.encoder_width)
        self.mapping = MappingNetwork()
        self.generator = SkinGenerator(8 * cfg.encoder_width, demodulate=cfg.demodulate)

    def spatial_seed(self, mask):
        return default_encoder(self.encoder_width)(mask.expand(-1, 3, -1, -1))[-1]

    def forward(self, skin_image, target_mask):
        z = self.encode(skin_image)
        w = self.mapping(z)
        return self.generator(w, self.spatial_seed(target_mask))


def encode_skin(image, model: SkinInpainter):
    return model.encode(image)


def map_latent(z, model: SkinInpainter):
    return model.mapping(z)


def spatial_seed(mask, model: SkinInpainter):
    return model.spatial_seed(mask)


def generate_skin(w, seed, model: SkinInpainter):
    return model.generator(w, seed)


def rsim_loss(pred, target, lambda7=6.0, lambda8=0.2, encoder=None):
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return lambda7 * (pred - target).abs().mean() + lambda8 * perceptual_distance(pred, target, encoder)


# training ----------------------------------------------------------------


def build_model(cfg: Config) -> SkinInpainter:
    torch.manual_seed(cfg.seed + 37)
    return SkinInpainter(cfg)


def erase_batch(masks: torch.Tensor, spec: ErasureSpec, rng: np.random.Generator):
    out = masks.clone()
    erased = 0
    for i in range(masks.shape[0]):
        box = sample_erase_box(masks.shape[-2], masks.shape[-1], spec, rng)
        if box is not None:
            top, left, h, w = box
            out[i, ..., top:top + h, left:left + w] = 0
            erased += 1
    return out, erased


def train_rsim(samples, cfg: Config, iterations: int | None = None, resume: Checkpoint | None = None,
               callback=None):
    """Self-supervised skin inpainting. Returns (model, checkpoint)."""
    samples = [s for s in samples if s.split == "train"] or list(samples)
    if not samples:
        raise ValidationError("RSIM training needs samples")
    data = sd.to_tensors(samples)
    n = len(samples)
    total = cfg.rsim_iterations if iterations is None else iterations
    spec = erasure_ladder(cfg.erasure_level)
    enc = default_encoder(cfg.encoder_width)
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.rsim_lr)
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
        idx = rng.choice(n, size=min(cfg.rsim_batch, n), replace=False)
        person = data["person"][idx]
        skin_mask = data["ps_mask"][idx]
        skin = data["ps_image"][idx]
        erased_mask, n_erased = erase_batch(skin_mask, spec, rng)
        pred = model(erased_mask * person, skin_mask)
        pixel = (pred - skin).abs().mean()
        percep = perceptual_distance(pred, skin, enc)
        loss = cfg.lambda7 * pixel + cfg.lambda8 * percep
        check_finite(loss, MODULE_ID, it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {"iteration": it, "loss": loss.item(), "pixel": pixel.item(),
               "perceptual": percep.item(), "erased": n_erased}
        log.append(row)
        if callback is not None:
            callback(row, model)
    model.eval()
    return model, make_checkpoint(MODULE_ID, cfg, model, opt, log, total,
                                  erasure_level=cfg.erasure_level)


def load_rsim(ckpt: Checkpoint) -> SkinInpainter:
    if ckpt.module_id != MODULE_ID:
        raise ValidationError(f"expected a {MODULE_ID} checkpoint, got {ckpt.module_id!r}")
    model = build_model(config_from_checkpoint(ckpt))
    load_model_state(model, ckpt)
    return model.eval()


# inference ---------------------------------------------------------------


def binarize(mask, threshold=0.5):
    return (mask > threshold).to(mask.dtype) if isinstance(mask, torch.Tensor) else (np.asarray(mask) > threshold)


def needs_inpainting(tryon_skin, person_skin) -> bool:
    """True when the try-on exposes skin outside the source skin region."""
    ts = binarize(tryon_skin) > 0
    ps = binarize(person_skin) > 0
    return bool((ts & ~ps).any())


def inpaint_if_needed(tryon_skin, person_skin, person_skin_image, person, model=None):
    """Skin layer of the try-on image.

    Masks are binarised at 0.5. Without newly exposed skin this is a plain
    Boolean cover of the source photo. Otherwise the generator paints the new
    region and real skin is kept wherever it was already visible.
    ``model`` may be a loader callable, invoked only when the gate fires.
    """
    ts = binarize(tryon_skin)
    ps = binarize(person_skin)
    if not needs_inpainting(ts, ps):
        return ts * person
    if callable(model) and not isinstance(model, nn.Module):
        model = model()
    if model is None:
        raise ValidationError("skin inpainting required but no RSIM model was given")
    model.eval()
    with torch.no_grad():
        generated = model(person_skin_image, ts)
    kept = ts * ps
    return (ts - kept) * generated + kept * person
