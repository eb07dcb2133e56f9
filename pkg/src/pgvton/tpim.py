"""Try-on parsing inference.

Predicts the 7-category parsing of the person wearing a new garment from the
remainder parsing, the dense pose, and the new garment's mask. Trained
without try-on ground truth through a two-pass cycle: dress the person in an
unpaired garment, then put the paired garment back on the predicted
remainder and require the original parsing.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import synthdata as sd
from .checkpoint import Checkpoint
from .config import Config
from .errors import ValidationError
from .nets import UNet
from .training import (LossLog, check_finite, config_from_checkpoint, iteration_rng,
                       load_model_state, make_checkpoint, restore_optimizer)

MODULE_ID = "tpim"
IN_CHANNELS = sd.NUM_CATEGORIES + 3 + 1
REMAINDER = list(sd.REMAINDER_CHANNELS)
LOG_COLUMNS = ("iteration", "loss", "remainder", "cycle")


class ParsingNet(nn.Module):
    """11 -> 7 channel encoder-decoder ending in a per-pixel softmax."""

    def __init__(self, widths=(16, 32, 64, 64)):
        super().__init__()
        self.body = UNet(IN_CHANNELS, sd.NUM_CATEGORIES, widths)

    def forward(self, remainder, pose, garment_mask):
        x = torch.cat([remainder, pose, garment_mask], dim=1)
        return torch.softmax(self.body(x), dim=1)


@dataclass
class TryOnParsing:
    parsing: torch.Tensor  # M_t, (B, 7, H, W)

    @property
    def garment(self):
        return self.parsing[:, sd.UPPER_GARMENT:sd.UPPER_GARMENT + 1]

    @property
    def skin(self):
        return self.parsing[:, sd.UPPER_SKIN:sd.UPPER_SKIN + 1]

    @property
    def remainder(self):
        return sd.derive_remainder(self.parsing)


def split_tryon(parsing: torch.Tensor):
    """Return (garment, skin, remainder); remainder keeps all 7 channels."""
    t = TryOnParsing(parsing)
    return t.garment, t.skin, t.remainder


def infer_parsing(remainder, pose, garment_mask, model: ParsingNet) -> TryOnParsing:
    shapes = {tuple(t.shape[-2:]) for t in (remainder, pose, garment_mask)}
    if len(shapes) != 1:
        raise ValidationError(f"inputs disagree on H x W: {sorted(shapes)}")
    if remainder.shape[1] != sd.NUM_CATEGORIES or pose.shape[1] != 3 or garment_mask.shape[1] != 1:
        raise ValidationError("expected 7-channel remainder, 3-channel pose, 1-channel garment mask")
    return TryOnParsing(model(remainder, pose, garment_mask))


def tpim_loss(remainder_pred, remainder, parsing_pred, parsing, lambda1=2.0, lambda2=2.0):
    """Weighted L1 on the remainder channels plus L1 on the reconstructed parsing.

    Remainder tensors may carry all 7 channels or only the 4 remainder ones.
    """
    if remainder_pred.shape[1] == sd.NUM_CATEGORIES:
        remainder_pred = remainder_pred[:, REMAINDER]
    if remainder.shape[1] == sd.NUM_CATEGORIES:
        remainder = remainder[:, REMAINDER]
    if remainder_pred.shape != remainder.shape or parsing_pred.shape != parsing.shape:
        raise ValidationError("prediction and target shapes differ")
    first = (remainder_pred - remainder).abs().mean()
    second = (parsing_pred - parsing).abs().mean()
    return lambda1 * first + lambda2 * second


def cycle_forward(model, batch, partner):
    """Both passes of the cycle. Returns (M_t, M_tr, reconstructed M_p)."""
    pass1 = model(batch["pr_parsing"], batch["pose"], batch["garment_mask"][partner])
    _, _, tryon_remainder = split_tryon(pass1)
    recon = model(tryon_remainder, batch["pose"], batch["garment_mask"])
    return pass1, tryon_remainder, recon


def build_model(cfg: Config | None = None) -> ParsingNet:
    torch.manual_seed((cfg.seed if cfg else 0) + 11)
    return ParsingNet()


def train_tpim(samples, cfg: Config, iterations: int | None = None, resume: Checkpoint | None = None,
               callback=None):
    """Cycle-consistency training. Returns (model, checkpoint)."""
    samples = [s for s in samples if s.split == "train"] or list(samples)
    if len(samples) < 2:
        raise ValidationError("TPIM training needs at least two samples")
    data = sd.to_tensors(samples)
    n = len(samples)
    total = cfg.tpim_iterations if iterations is None else iterations
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.tpim_lr)
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
        bsz = min(cfg.tpim_batch, n)
        idx = rng.choice(n, size=bsz, replace=False)
        batch = {k: v[idx] for k, v in data.items()}
        partner = torch.as_tensor(sd.unpaired_partners(bsz, rng)) if bsz > 1 else torch.zeros(1, dtype=torch.long)
        _, tryon_remainder, recon = cycle_forward(model, batch, partner)
        first = (tryon_remainder[:, REMAINDER] - batch["pr_parsing"][:, REMAINDER]).abs().mean()
        second = (recon - batch["parsing"]).abs().mean()
        loss = cfg.lambda1 * first + cfg.lambda2 * second
        check_finite(loss, MODULE_ID, it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {"iteration": it, "loss": loss.item(), "remainder": first.item(), "cycle": second.item()}
        log.append(row)
        if callback is not None:
            callback(row, model)
    model.eval()
    return model, make_checkpoint(MODULE_ID, cfg, model, opt, log, total)


def load_tpim(ckpt: Checkpoint) -> ParsingNet:
    if ckpt.module_id != MODULE_ID:
        raise ValidationError(f"expected a {MODULE_ID} checkpoint, got {ckpt.module_id!r}")
    model = build_model(config_from_checkpoint(ckpt))
    load_model_state(model, ckpt)
    return model.eval()
