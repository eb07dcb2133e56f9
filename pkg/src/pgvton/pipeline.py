"""End-to-end try-on: parsing inference, garment try-on, skin inpainting and
final assembly, plus the evaluation helpers behind the CLI."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import metrics, ptm, rsim, tpim
from . import synthdata as sd
from .checkpoint import load_checkpoint
from .errors import AssemblyError, CheckpointError, ValidationError

OVERLAP_TOLERANCE = 1e-6
CHECKPOINT_NAMES = {"tpim": "tpim.ckpt", "ptm": "ptm.ckpt", "rsim": "rsim.ckpt"}


def assemble_tryon(garment_img, garment_mask, skin_img, skin_mask, person, remainder):
    """Compose the try-on image from its three foreground parts.

    Remainder pixels are copied from the source photo, weighted by the summed
    remainder channels; whatever weight is left over is background, also
    filled from the source photo. Tensors are ``B x C x H x W``.
    """
    rem = remainder.sum(dim=1, keepdim=True)
    fg = garment_mask + skin_mask + rem
    excess = (fg - 1).max().item()
    if excess > OVERLAP_TOLERANCE:
        raise AssemblyError(f"try-on masks overlap (coverage exceeds 1 by {excess:.3g})")
    bg = (1 - fg).clamp(min=0)
    return garment_mask * garment_img + skin_mask * skin_img + rem * person + bg * person


def harden(parsing: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax as a one-hot parsing."""
    idx = parsing.argmax(dim=1)
    return torch.nn.functional.one_hot(idx, parsing.shape[1]).permute(0, 3, 1, 2).to(parsing.dtype)


@dataclass
class TryOnModels:
    tpim: tpim.ParsingNet
    ptm: ptm.ProgressiveTryOn
    rsim_path: Path | None = None
    _rsim: rsim.SkinInpainter | None = None

    def rsim_model(self) -> rsim.SkinInpainter:
        if self._rsim is None:
            if self.rsim_path is None:
                raise CheckpointError("RSIM checkpoint required (new skin is exposed) but none configured")
            self._rsim = rsim.load_rsim(load_checkpoint(self.rsim_path, rsim.MODULE_ID))
        return self._rsim


def load_models(ckpt_dir) -> TryOnModels:
    d = Path(ckpt_dir)
    t = tpim.load_tpim(load_checkpoint(d / CHECKPOINT_NAMES["tpim"], tpim.MODULE_ID))
    p = ptm.load_ptm(load_checkpoint(d / CHECKPOINT_NAMES["ptm"], ptm.MODULE_ID))
    return TryOnModels(t, p, d / CHECKPOINT_NAMES["rsim"])


@dataclass
class TryOnResult:
    image: np.ndarray          # H x W x 3
    parsing: np.ndarray        # hardened try-on parsing, H x W x 7
    inpainted: bool


@torch.no_grad()
def run_tryon(person: sd.Sample, garment: sd.Sample, models: TryOnModels, tau: float = 0.2) -> TryOnResult:
    p = sd.to_tensors([person])
    g = sd.to_tensors([garment])
    if p["person"].shape[-2:] != g["garment"].shape[-2:]:
        raise ValidationError("person and garment images differ in size")
    soft = tpim.infer_parsing(p["pr_parsing"], p["pose"], g["garment_mask"], models.tpim).parsing
    parsing = harden(soft)
    m_tg, m_ts, m_tr = tpim.split_tryon(parsing)
    i_tg = ptm.tryon_garment(g["garment"], g["garment_mask"], m_tg, models.ptm, tau)
    inpaint = rsim.needs_inpainting(m_ts, p["ps_mask"])
    i_ts = rsim.inpaint_if_needed(m_ts, p["ps_mask"], p["ps_image"], p["person"], models.rsim_model)
    out = assemble_tryon(i_tg, m_tg, i_ts, m_ts, p["person"], m_tr)
    img = out[0].permute(1, 2, 0).numpy().astype(np.float32)
    return TryOnResult(np.clip(img, 0, 1), parsing[0].permute(1, 2, 0).numpy(), inpaint)


def save_png(image: np.ndarray, path):
    from PIL import Image

    q = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def evaluate(samples, models: TryOnModels, tau: float = 0.2) -> list[tuple]:
    """Paired reconstruction quality: each person re-dressed in their own garment.

    Rows are ``(id, mse, psnr, ssim)``.
    """
    samples = list(samples)
    if not samples:
        raise ValidationError("evaluation split is empty")
    rows = []
    for s in samples:
        res = run_tryon(s, s, models, tau)
        rows.append((s.sample_id, metrics.mse_image(res.image, s.person),
                     metrics.psnr(res.image, s.person), metrics.ssim(res.image, s.person)))
    return rows


def parse_tau_range(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0:
                raise ValueError
            n = int(round((stop - start) / step)) + 1
            values = [round(start + i * step, 10) for i in range(n)]
        else:
            values = [float(x) for x in text.split(",")]
    except ValueError:
        raise ValidationError(f"cannot parse tau range {text!r}") from None
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"tau={v} outside [0, 1]")
    return values


def to_tsv(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, delimiter="\t", lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([f"{x:.6g}" if isinstance(x, float) else x for x in r])
    return buf.getvalue()
