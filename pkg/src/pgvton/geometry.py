"""Thin-plate-spline warping core.

Coordinates are normalised to [-1, 1] with x across the width and y down the
height; pixel centres sit at ``(2j + 1) / W - 1``. Grids are tensors of shape
``(..., s, s, 2)`` holding (x, y) pairs, rows running along y.

Warping is backward: the spline is fitted from the static lattice (laid over
the *output* image) to the warped grid (positions in the *source* image), so
evaluating it at every output pixel centre gives the source coordinate to
sample from.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import NumericalError, ValidationError

SCALES = (3, 4, 5, 6)
TPS_REGULARIZATION = 1e-6


def static_grid(scale: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Uniform ``scale x scale`` lattice over [-1, 1]^2."""
    t = torch.linspace(-1.0, 1.0, scale, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(t, t, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


@dataclass
class ControlGrid:
    scale: int
    points: torch.Tensor  # (..., s, s, 2)

    @classmethod
    def uniform(cls, scale, dtype=torch.float32):
        return cls(scale, static_grid(scale, dtype))

    def offsets(self) -> torch.Tensor:
        return self.points - static_grid(self.scale, self.points.dtype, self.points.device)


@dataclass
class TPSCoefficients:
    centers: torch.Tensor  # (n, 2) control points in output space
    kernel: torch.Tensor   # (B, n, 2)
    affine: torch.Tensor   # (B, 3, 2) rows: constant, x, y


def tps_kernel(d2: torch.Tensor) -> torch.Tensor:
    """U(r) = r^2 log r^2 evaluated from squared distances, with U(0) = 0."""
    safe = torch.where(d2 > 0, d2, torch.ones_like(d2))
    return torch.where(d2 > 0, d2 * torch.log(safe), torch.zeros_like(d2))


def _pairwise_d2(a, b):
    diff = a[..., :, None, :] - b[..., None, :, :]
    return (diff * diff).sum(-1)


def tps_fit(static: torch.Tensor, warped: torch.Tensor, eps: float = TPS_REGULARIZATION) -> TPSCoefficients:
    """Fit the spline mapping ``static`` control points onto ``warped``.

    ``static`` is ``(s, s, 2)``; ``warped`` is ``(s, s, 2)`` or batched
    ``(B, s, s, 2)``. The kernel block carries a Tikhonov term ``eps``.
    """
    scale = static.shape[-2]
    if static.shape[-3:] != warped.shape[-3:]:
        raise ValidationError(f"grid shapes differ: {tuple(static.shape)} vs {tuple(warped.shape)}")
    if warped.dim() == 3:
        warped = warped[None]
    b = warped.shape[0]
    c = static.reshape(-1, 2).to(warped.dtype)
    n = c.shape[0]
    k = tps_kernel(_pairwise_d2(c, c))
    p = torch.cat([torch.ones(n, 1, dtype=c.dtype, device=c.device), c], dim=1)
    top = torch.cat([k, p], dim=1)
    bottom = torch.cat([p.T, torch.zeros(3, 3, dtype=c.dtype, device=c.device)], dim=1)
    system = torch.cat([top, bottom], dim=0)
    ridge = torch.zeros(n + 3, dtype=c.dtype, device=c.device)
    ridge[:n] = eps
    rhs = torch.cat([warped.reshape(b, n, 2),
                     torch.zeros(b, 3, 2, dtype=c.dtype, device=c.device)], dim=1)
    lu, piv, info = torch.linalg.lu_factor_ex(system + torch.diag(ridge))
    if info.item() != 0:
        raise NumericalError(f"singular TPS system at scale {scale}")
    sol = torch.linalg.lu_solve(lu, piv, rhs)
    # one refinement step against the unregularised system restores exact
    # interpolation (residual ~ eps^2) while keeping the regularised factorisation
    sol = sol + torch.linalg.lu_solve(lu, piv, rhs - system @ sol)
    if not torch.isfinite(sol).all():
        raise NumericalError(f"singular TPS system at scale {scale}")
    return TPSCoefficients(c, sol[:, :n], sol[:, n:])


def tps_apply(coeffs: TPSCoefficients, points: torch.Tensor) -> torch.Tensor:
    """Evaluate the spline at ``points`` of shape ``(m, 2)``; returns ``(B, m, 2)``."""
    points = points.to(coeffs.kernel.dtype)
    u = tps_kernel(_pairwise_d2(points, coeffs.centers))           # (m, n)
    p = torch.cat([torch.ones_like(points[:, :1]), points], dim=1)  # (m, 3)
    return torch.einsum("mn,bnk->bmk", u, coeffs.kernel) + torch.einsum("mj,bjk->bmk", p, coeffs.affine)


def pixel_lattice(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """``(H, W, 2)`` normalised pixel-centre coordinates (the identity field)."""
    ys = (2 * torch.arange(height, dtype=dtype, device=device) + 1) / height - 1
    xs = (2 * torch.arange(width, dtype=dtype, device=device) + 1) / width - 1
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def build_sampling_field(coeffs: TPSCoefficients, height: int, width: int) -> torch.Tensor:
    """Source coordinate for every output pixel centre, ``(B, H, W, 2)``."""
    lattice = pixel_lattice(height, width, coeffs.kernel.dtype, coeffs.kernel.device)
    out = tps_apply(coeffs, lattice.reshape(-1, 2))
    return out.reshape(-1, height, width, 2)


def _snap(p: torch.Tensor, size: int) -> torch.Tensor:
    # Coordinates within rounding noise of a pixel centre land on it exactly,
    # so identity and integer-shift fields reproduce the input bit-for-bit.
    # The straight-through form keeps the gradient.
    r = torch.round(p)
    tol = 16 * torch.finfo(p.dtype).eps * max(size, 1)
    close = ((p - r).abs() < tol).to(p.dtype)
    return p + ((r - p) * close).detach()


def warp_image(image: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Bilinear backward warp with zero padding.

    ``image`` is ``(B, C, H, W)``; ``field`` is ``(B, Ho, Wo, 2)`` (or
    ``(Ho, Wo, 2)``, broadcast over the batch). Differentiable in both.
    """
    if image.dim() != 4:
        raise ValidationError("image must be B x C x H x W")
    if field.dim() == 3:
        field = field[None].expand(image.shape[0], -1, -1, -1)
    if field.shape[0] != image.shape[0] or field.shape[-1] != 2:
        raise ValidationError(f"field shape {tuple(field.shape)} does not match image {tuple(image.shape)}")
    b, c, h, w = image.shape
    ho, wo = field.shape[1:3]
    x = _snap(((field[..., 0] + 1) * w - 1) / 2, w)
    y = _snap(((field[..., 1] + 1) * h - 1) / 2, h)
    x0 = torch.floor(x).detach()
    y0 = torch.floor(y).detach()
    fx = x - x0
    fy = y - y0
    flat = image.reshape(b, c, h * w)
    out = image.new_zeros(b, c, ho * wo)
    for dx, wx in ((0, 1 - fx), (1, fx)):
        for dy, wy in ((0, 1 - fy), (1, fy)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).long().reshape(b, 1, -1)
            vals = flat.gather(2, idx.expand(b, c, -1))
            weight = (wx * wy * valid.to(image.dtype)).reshape(b, 1, -1)
            out = out + vals * weight
    return out.reshape(b, c, ho, wo)


@dataclass
class WarpCandidateSet:
    """Per-scale warped images/masks and control grids, keyed by scale."""

    images: dict
    masks: dict
    static: dict
    warped: dict

    @property
    def scales(self):
        return tuple(sorted(self.masks))

    def grid_pairs(self):
        return [(self.warped[s], self.static[s]) for s in self.scales]

    def stacked_masks(self) -> torch.Tensor:
        """``(B, S, 1, H, W)`` masks in ascending scale order."""
        return torch.stack([self.masks[s] for s in self.scales], dim=1)

    def stacked_images(self) -> torch.Tensor:
        return torch.stack([self.images[s] for s in self.scales], dim=1)


def warp_candidates(image: torch.Tensor, mask: torch.Tensor, warped_grids: dict) -> WarpCandidateSet:
    """Warp an image and its mask with one spline per scale."""
    h, w = image.shape[-2:]
    images, masks, statics = {}, {}, {}
    for s, grid in sorted(warped_grids.items()):
        static = static_grid(s, grid.dtype, grid.device)
        field = build_sampling_field(tps_fit(static, grid), h, w)
        images[s] = warp_image(image, field)
        masks[s] = warp_image(mask, field)
        statics[s] = static
    return WarpCandidateSet(images, masks, statics, dict(warped_grids))


def selection_costs(masks: torch.Tensor, target: torch.Tensor, source: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-candidate selection cost, ``(B, S)`` for masks ``(B, S, 1, H, W)``."""
    dims = tuple(range(2, masks.dim()))
    t = (masks - target[:, None]).abs().mean(dim=dims)
    s = (masks - source[:, None]).abs().mean(dim=dims)
    return tau * t + (1 - tau) * s


def select_optimal(candidates, target_mask: torch.Tensor, source_mask: torch.Tensor, tau: float) -> torch.Tensor:
    """Scale whose warped mask best trades target fit against source fidelity.

    ``candidates`` is a :class:`WarpCandidateSet` or a ``(B, S, 1, H, W)``
    tensor of masks in ascending scale order (scales 3..6). Ties go to the
    lowest scale. Returns a ``(B,)`` long tensor of scale values.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau={tau} outside [0, 1]")
    if isinstance(candidates, WarpCandidateSet):
        scales = candidates.scales
        masks = candidates.stacked_masks()
    else:
        masks = candidates
        scales = SCALES[:masks.shape[1]]
    with torch.no_grad():
        cost = selection_costs(masks, target_mask, source_mask, tau)
        # torch.argmin returns the first minimum, i.e. the lowest scale on ties
        idx = torch.argmin(cost, dim=1)
    return torch.as_tensor(scales, device=idx.device)[idx]


def gather_selected(stacked: torch.Tensor, selected: torch.Tensor, scales=SCALES) -> torch.Tensor:
    """Pick per-sample candidate ``selected`` (scale values) from ``(B, S, ...)``."""
    lookup = {s: i for i, s in enumerate(scales)}
    idx = torch.tensor([lookup[int(s)] for s in selected], device=stacked.device)
    return stacked[torch.arange(stacked.shape[0], device=stacked.device), idx]


def grid_regularization(pairs) -> torch.Tensor:
    """Sum over scales of the mean squared control-point displacement."""
    total = None
    for warped, static in pairs:
        term = ((warped - static) ** 2).mean()
        total = term if total is None else total + term
    return total


def composite(mapped: torch.Tensor, warped: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Blend ``mapped * mask + warped * (1 - mask)``."""
    if mapped.shape != warped.shape:
        raise ValidationError(f"image shapes differ: {tuple(mapped.shape)} vs {tuple(warped.shape)}")
    return mapped * mask + warped * (1 - mask)
