"""Procedural paired (person, in-shop garment) samples.

A 2-D layered cut-out rasterizer stands in for a photo dataset plus its
human-parsing and dense-pose predictors. Every sample carries exact ground
truth: a one-hot 7-category parsing, a 3-channel dense-pose map
(part index, U, V) and the flat in-shop render of the garment it wears.

All geometry is expressed in units of the image height so that any
resolution renders the same figure. Arrays are ``H x W x C`` float32 in
[0, 1].
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, ValidationError

# parsing categories
BACKGROUND, HAIR, FACE, UPPER_SKIN, UPPER_GARMENT, LEG, LOWER_GARMENT = range(7)
CATEGORIES = ("background", "hair", "face", "upper_skin", "upper_garment", "leg", "lower_garment")
NUM_CATEGORIES = 7
REMAINDER_CHANNELS = (HAIR, FACE, LEG, LOWER_GARMENT)
REMAINDER_MASK = np.array([0, 1, 1, 0, 0, 1, 1], dtype=np.float32)

# dense-pose part indices; 0 is reserved for "no body"
TORSO, HEAD, NECK, L_UPPER_ARM, L_FOREARM, R_UPPER_ARM, R_FOREARM, L_HAND, R_HAND, L_LEG, R_LEG, HIPS = range(1, 13)
NUM_PARTS = 12

TEXTURES = ("solid", "stripes", "logo", "checker")

SHOULDER_RANGE = (0.05, 0.6)
ELBOW_RANGE = (-1.5, 0.4)

# figure layout, in units of image height
_HEAD_Y, _HEAD_R, _HAIR_R = 0.13, 0.075, 0.085
_NECK_HW, _NECK_TOP, _NECK_BOTTOM = 0.03, 0.17, 0.27
_TORSO_TOP, _TORSO_BOTTOM, _TORSO_HW_TOP, _TORSO_HW_BOTTOM = 0.25, 0.58, 0.125, 0.105
_SHOULDER_DX, _SHOULDER_Y = 0.11, 0.285
_UPPER_ARM, _FOREARM, _ARM_R = 0.15, 0.135, 0.032
_HAND_R, _HAND_AHEAD = 0.038, 0.02
_HIPS_TOP, _HIPS_BOTTOM, _HIPS_HW = 0.56, 0.72, 0.115
_LEG_DX, _LEG_TOP, _LEG_BOTTOM, _LEG_HW = 0.055, 0.60, 0.97, 0.045
# flat in-shop layout
_FLAT_TOP, _FLAT_BOTTOM, _FLAT_HW = 0.22, 0.60, 0.14
_FLAT_SLEEVE_ANGLE, _FLAT_SLEEVE_HW, _FLAT_SLEEVE_SCALE = 0.55, 0.036, 0.85
# product shots are framed larger than the garment appears on a body
_FLAT_ZOOM, _FLAT_CENTER_Y = 1.25, 0.41


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to render one sample deterministically.

    ``body_pose`` is (left shoulder, left elbow, right shoulder, right elbow)
    in radians. Shoulder angles are measured from the arm hanging straight
    down, positive away from the body; elbow angles are relative to the
    upper arm, positive further outward. The reachable range
    (``SHOULDER_RANGE``, ``ELBOW_RANGE``) keeps hands inside the frame.
    """

    rng_seed: int
    body_pose: tuple = (0.3, 0.0, 0.3, 0.0)
    skin_tone: tuple = (0.85, 0.65, 0.5)
    garment_texture_id: str = "solid"
    garment_color: tuple = (0.2, 0.4, 0.8)
    sleeve_length: float = 0.5
    image_height: int = 64
    image_width: int = 48

    def validate(self):
        if len(self.body_pose) != 4:
            raise ValidationError("body_pose needs 4 angles")
        for i, a in enumerate(self.body_pose):
            lo, hi = SHOULDER_RANGE if i % 2 == 0 else ELBOW_RANGE
            if not lo <= a <= hi:
                joint = ("left shoulder", "left elbow", "right shoulder", "right elbow")[i]
                raise ValidationError(f"{joint} angle {a:.3f} outside reachable range [{lo}, {hi}]")
        if not 0.0 <= self.sleeve_length <= 1.0:
            raise ValidationError(f"sleeve_length {self.sleeve_length} outside [0, 1]")
        if self.garment_texture_id not in TEXTURES:
            raise ValidationError(f"unknown garment texture {self.garment_texture_id!r}")
        for name in ("skin_tone", "garment_color"):
            c = getattr(self, name)
            if len(c) != 3 or min(c) < 0 or max(c) > 1:
                raise ValidationError(f"{name} must be an RGB triple in [0, 1]")
        if self.image_height < 8 or self.image_width < 8:
            raise ValidationError("image too small")


def random_scene(seed: int, height: int = 64, width: int = 48) -> SceneSpec:
    rng = np.random.default_rng(seed)
    pose = (
        rng.uniform(*SHOULDER_RANGE), rng.uniform(*ELBOW_RANGE),
        rng.uniform(*SHOULDER_RANGE), rng.uniform(*ELBOW_RANGE),
    )
    base = rng.uniform(0.35, 0.95)
    skin = (base, base * rng.uniform(0.7, 0.85), base * rng.uniform(0.5, 0.7))
    return SceneSpec(
        rng_seed=int(seed),
        body_pose=tuple(float(a) for a in pose),
        skin_tone=tuple(float(c) for c in skin),
        garment_texture_id=TEXTURES[int(rng.integers(len(TEXTURES)))],
        garment_color=tuple(float(c) for c in rng.uniform(0.05, 0.95, size=3)),
        sleeve_length=float(rng.choice([0.0, 0.25, 0.5, 0.75, 1.0])),
        image_height=height,
        image_width=width,
    )


@dataclass
class Sample:
    sample_id: str
    seed: int
    person: np.ndarray          # I_p, H x W x 3
    parsing: np.ndarray         # M_p, H x W x 7 one-hot
    pose: np.ndarray            # P, H x W x 3
    garment: np.ndarray         # I_g', H x W x 3, zero outside the garment
    garment_mask: np.ndarray    # M_g', H x W
    split: str = "train"
    spec: SceneSpec | None = field(default=None, compare=False)

    @property
    def pg_mask(self):
        return self.parsing[..., UPPER_GARMENT]

    @property
    def ps_mask(self):
        return self.parsing[..., UPPER_SKIN]

    @property
    def pr_parsing(self):
        return derive_remainder(self.parsing)

    @property
    def pg_image(self):
        return self.person * self.pg_mask[..., None]

    @property
    def ps_image(self):
        return self.person * self.ps_mask[..., None]

    @property
    def pr_image(self):
        return self.person * self.pr_parsing.sum(-1, keepdims=True)


def derive_remainder(parsing):
    """Zero the background, upper-skin and upper-garment channels.

    The result is deliberately not renormalised. Works on numpy ``...x7``
    arrays and on torch ``Nx7xHxW`` tensors.
    """
    if isinstance(parsing, np.ndarray):
        return parsing * REMAINDER_MASK.astype(parsing.dtype)
    mask = parsing.new_tensor(REMAINDER_MASK).view(1, -1, 1, 1)
    return parsing * mask


# rendering ---------------------------------------------------------------


def _capsule(px, py, ax, ay, bx, by, r):
    dx, dy = bx - ax, by - ay
    length2 = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / length2, 0.0, 1.0)
    cx, cy = ax + t * dx, ay + t * dy
    dist = np.hypot(px - cx, py - cy)
    length = math.sqrt(length2)
    cross = (dx * (py - ay) - dy * (px - ax)) / length
    across = np.clip(0.5 + 0.5 * cross / r, 0.0, 1.0)
    return dist <= r, t, across


def _texture(kind, color, a, b, region):
    """Garment colour at garment-local coordinates.

    ``region`` is "torso" (a = across, b = down) or "sleeve"
    (a = along the arm, b = across the sleeve).
    """
    color = np.asarray(color, dtype=np.float32)
    second = (0.25 + 0.5 * (1.0 - color)).astype(np.float32)
    out = np.broadcast_to(color, a.shape + (3,)).copy()
    if kind == "stripes":
        band = (np.floor((b if region == "torso" else a) * 6.0) % 2).astype(bool)
        out[band] = second
    elif kind == "checker":
        if region == "torso":
            cell = (np.floor(a * 4.0) + np.floor(b * 5.0)) % 2
        else:
            cell = (np.floor(a * 4.0) + np.floor(b * 2.0)) % 2
        out[cell.astype(bool)] = second
    elif kind == "logo" and region == "torso":
        logo = np.hypot((a - 0.5) * 1.2, b - 0.3) < 0.18
        out[logo] = second
    return out


class _Canvas:
    """Painter's-algorithm buffers; later paints overwrite earlier ones."""

    def __init__(self, h, w):
        self.label = np.zeros((h, w), dtype=np.int64)
        self.color = np.zeros((h, w, 3), dtype=np.float32)
        self.part = np.zeros((h, w), dtype=np.int64)
        self.uv = np.zeros((h, w, 2), dtype=np.float32)

    def paint(self, region, label, color, part=0, u=None, v=None):
        self.label[region] = label
        self.color[region] = color[region] if np.ndim(color) == 3 else color
        self.part[region] = part
        if u is not None:
            self.uv[region, 0] = np.broadcast_to(u, region.shape)[region]
            self.uv[region, 1] = np.broadcast_to(v, region.shape)[region]


def _shade(x, lo=0.85):
    return (lo + (1.0 - lo) * np.cos(np.pi * (x - 0.5))).astype(np.float32)


def _arm_geometry(side, shoulder, elbow, cx):
    """Joint positions of one arm. ``side`` is -1 for left, +1 for right."""
    sx, sy = cx + side * _SHOULDER_DX, _SHOULDER_Y
    a1 = shoulder
    ex, ey = sx + side * math.sin(a1) * _UPPER_ARM, sy + math.cos(a1) * _UPPER_ARM
    a2 = shoulder + elbow
    wx, wy = ex + side * math.sin(a2) * _FOREARM, ey + math.cos(a2) * _FOREARM
    hx, hy = wx + side * math.sin(a2) * _HAND_AHEAD, wy + math.cos(a2) * _HAND_AHEAD
    return (sx, sy), (ex, ey), (wx, wy), (hx, hy)


def arm_extent(spec: SceneSpec):
    """Bounding box (x0, y0, x1, y1) of both arms and hands, in pixels."""
    h = spec.image_height
    cx = 0.5 * spec.image_width / h
    xs, ys = [], []
    for side, (s, e) in ((-1, spec.body_pose[:2]), (1, spec.body_pose[2:])):
        joints = _arm_geometry(side, s, e, cx)
        for (x, y), r in zip(joints, (_ARM_R, _ARM_R, _ARM_R, _HAND_R)):
            xs += [x - r, x + r]
            ys += [y - r, y + r]
    return min(xs) * h, min(ys) * h, max(xs) * h, max(ys) * h


def render_sample(spec: SceneSpec, sample_id: str | None = None, split: str = "train") -> Sample:
    spec.validate()
    h, w = spec.image_height, spec.image_width
    rng = np.random.default_rng(spec.rng_seed + 7_919)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = (xx + 0.5) / h, (yy + 0.5) / h
    cx = 0.5 * w / h
    skin = np.asarray(spec.skin_tone, dtype=np.float32)
    hair_color = rng.uniform(0.05, 0.35, size=3).astype(np.float32)
    lower_color = rng.uniform(0.1, 0.5, size=3).astype(np.float32)
    bg_level = rng.uniform(0.6, 0.95)
    bg_tint = rng.uniform(-0.05, 0.05, size=3)

    cv = _Canvas(h, w)
    bg = (bg_level - 0.1 * (py / py.max()))[..., None] + bg_tint
    cv.color[:] = np.clip(bg, 0, 1).astype(np.float32)

    # legs
    for part, side in ((L_LEG, -1), (R_LEG, 1)):
        lx = cx + side * _LEG_DX
        region = (np.abs(px - lx) <= _LEG_HW) & (py >= _LEG_TOP) & (py <= _LEG_BOTTOM)
        u = (px - lx + _LEG_HW) / (2 * _LEG_HW)
        v = (py - _LEG_TOP) / (_LEG_BOTTOM - _LEG_TOP)
        cv.paint(region, LEG, skin * _shade(u)[..., None], part, u, v)

    # lower garment
    region = (np.abs(px - cx) <= _HIPS_HW) & (py >= _HIPS_TOP) & (py <= _HIPS_BOTTOM)
    u = (px - cx + _HIPS_HW) / (2 * _HIPS_HW)
    v = (py - _HIPS_TOP) / (_HIPS_BOTTOM - _HIPS_TOP)
    cv.paint(region, LOWER_GARMENT, lower_color * _shade(u, 0.8)[..., None], HIPS, u, v)

    # torso, always covered by the upper garment
    v = (py - _TORSO_TOP) / (_TORSO_BOTTOM - _TORSO_TOP)
    half = _TORSO_HW_TOP + (_TORSO_HW_BOTTOM - _TORSO_HW_TOP) * np.clip(v, 0, 1)
    region = (np.abs(px - cx) <= half) & (v >= 0) & (v <= 1)
    u = (px - cx + half) / (2 * half)
    tex = _texture(spec.garment_texture_id, spec.garment_color, u, v, "torso")
    cv.paint(region, UPPER_GARMENT, tex * _shade(u, 0.9)[..., None], TORSO, u, v)

    # neck
    region = (np.abs(px - cx) <= _NECK_HW) & (py >= _NECK_TOP) & (py <= _NECK_BOTTOM)
    u = (px - cx + _NECK_HW) / (2 * _NECK_HW)
    v = (py - _NECK_TOP) / (_NECK_BOTTOM - _NECK_TOP)
    cv.paint(region, UPPER_SKIN, skin * _shade(u)[..., None], NECK, u, v)

    # head: face disc with hair over the crown
    dist = np.hypot(px - cx, py - _HEAD_Y)
    u = np.clip((px - cx + _HAIR_R) / (2 * _HAIR_R), 0, 1)
    v = np.clip((py - _HEAD_Y + _HAIR_R) / (2 * _HAIR_R), 0, 1)
    face = dist <= _HEAD_R
    cv.paint(face, FACE, skin * 0.95, HEAD, u, v)
    hair = (dist <= _HAIR_R) & ((py < _HEAD_Y - 0.3 * _HEAD_R) | ~face)
    hair &= py < _HEAD_Y + 0.5 * _HEAD_R
    cv.paint(hair, HAIR, hair_color, HEAD, u, v)

    # arms, drawn over the torso so a folded forearm occludes the garment
    total = _UPPER_ARM + _FOREARM
    arms = ((-1, spec.body_pose[0], spec.body_pose[1], L_UPPER_ARM, L_FOREARM, L_HAND),
            (1, spec.body_pose[2], spec.body_pose[3], R_UPPER_ARM, R_FOREARM, R_HAND))
    for side, shoulder, elbow, upper_part, fore_part, hand_part in arms:
        (sx, sy), (ex, ey), (wx, wy), (hx, hy) = _arm_geometry(side, shoulder, elbow, cx)
        segs = ((upper_part, (sx, sy), (ex, ey), 0.0, _UPPER_ARM),
                (fore_part, (ex, ey), (wx, wy), _UPPER_ARM, _FOREARM))
        for part, (ax, ay), (bx, by), offset, length in segs:
            inside, t, across = _capsule(px, py, ax, ay, bx, by, _ARM_R)
            t_arm = (offset + t * length) / total
            sleeve = inside & (t_arm <= spec.sleeve_length)
            bare = inside & ~sleeve
            shade = _shade(across)[..., None]
            cv.paint(bare, UPPER_SKIN, skin * shade, part, t, across)
            tex = _texture(spec.garment_texture_id, spec.garment_color, t_arm, across, "sleeve")
            cv.paint(sleeve, UPPER_GARMENT, tex * shade, part, t, across)
        dist = np.hypot(px - hx, py - hy)
        hand = dist <= _HAND_R
        u = np.clip((px - hx + _HAND_R) / (2 * _HAND_R), 0, 1)
        v = np.clip((py - hy + _HAND_R) / (2 * _HAND_R), 0, 1)
        cv.paint(hand, UPPER_SKIN, skin * _shade(u, 0.9)[..., None], hand_part, u, v)

    parsing = np.eye(NUM_CATEGORIES, dtype=np.float32)[cv.label]
    pose = np.zeros((h, w, 3), dtype=np.float32)
    body = cv.part > 0
    pose[..., 0] = cv.part / NUM_PARTS
    pose[..., 1:] = cv.uv * body[..., None]
    garment, garment_mask = _render_flat_garment(spec, px, py, cx)
    return Sample(
        sample_id=sample_id if sample_id is not None else f"s{spec.rng_seed:06d}",
        seed=spec.rng_seed,
        person=np.clip(cv.color, 0.0, 1.0),
        parsing=parsing,
        pose=pose,
        garment=garment,
        garment_mask=garment_mask,
        split=split,
        spec=spec,
    )


def _render_flat_garment(spec, px, py, cx):
    """In-shop render: same garment-local texture, canonical flat layout."""
    h, w = px.shape
    px = cx + (px - cx) / _FLAT_ZOOM
    py = _FLAT_CENTER_Y + (py - _FLAT_CENTER_Y) / _FLAT_ZOOM
    color = np.zeros((h, w, 3), dtype=np.float32)
    mask = np.zeros((h, w), dtype=bool)
    total = (_UPPER_ARM + _FOREARM) * _FLAT_SLEEVE_SCALE
    if spec.sleeve_length > 0:
        for side in (-1, 1):
            ax, ay = cx + side * _FLAT_HW, _FLAT_TOP + 0.02
            dx, dy = side * math.sin(_FLAT_SLEEVE_ANGLE), math.cos(_FLAT_SLEEVE_ANGLE)
            along = (px - ax) * dx + (py - ay) * dy
            cross = side * ((px - ax) * dy - (py - ay) * dx)
            region = (along >= 0) & (along <= spec.sleeve_length * total) & (np.abs(cross) <= _FLAT_SLEEVE_HW)
            t = along / total
            across = np.clip(0.5 + 0.5 * cross / _FLAT_SLEEVE_HW, 0, 1)
            tex = _texture(spec.garment_texture_id, spec.garment_color, t, across, "sleeve")
            color[region] = tex[region]
            mask |= region
    u = (px - cx + _FLAT_HW) / (2 * _FLAT_HW)
    v = (py - _FLAT_TOP) / (_FLAT_BOTTOM - _FLAT_TOP)
    region = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    tex = _texture(spec.garment_texture_id, spec.garment_color, u, v, "torso")
    color[region] = tex[region]
    mask |= region
    return np.clip(color, 0, 1), mask.astype(np.float32)


def generate(count: int, seed: int = 0, height: int = 64, width: int = 48,
             test_fraction: float = 0.2) -> list[Sample]:
    """Render ``count`` samples; the last ``test_fraction`` go to the test split."""
    n_test = int(round(count * test_fraction))
    out = []
    for i in range(count):
        s = seed * 1_000_003 + i
        split = "test" if i >= count - n_test else "train"
        out.append(render_sample(random_scene(s, height, width), sample_id=f"s{i:05d}", split=split))
    return out


def unpaired_partners(n: int, rng: np.random.Generator) -> np.ndarray:
    """For each index pick a uniformly random *other* index (never itself)."""
    if n < 2:
        raise ValidationError("need at least two samples to draw unpaired garments")
    return (np.arange(n) + rng.integers(1, n, size=n)) % n


# dataset directory I/O ---------------------------------------------------

_RAW_MAGIC = b"PGVT"
_RAW_VERSION = 1


def write_raw(path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(_RAW_MAGIC + struct.pack("<III", _RAW_VERSION, h, w))
        fh.write(arr.tobytes())


def read_raw(path, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != _RAW_MAGIC:
        raise ValueError("bad header")
    version, h, w = struct.unpack("<III", data[4:16])
    if version != _RAW_VERSION:
        raise ValueError(f"unsupported raw version {version}")
    expected = h * w * channels * 4
    if len(data) - 16 != expected:
        raise ValueError(f"payload is {len(data) - 16} bytes, expected {expected}")
    return np.frombuffer(data[16:], dtype="<f4").reshape(h, w, channels).astype(np.float32)


def _to_png(arr, path):
    q = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(q).save(path)


def _from_png(path, mode):
    with Image.open(path) as im:
        return np.asarray(im.convert(mode), dtype=np.float32) / 255.0


def write_dataset(samples, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        _to_png(s.person, d / f"{s.sample_id}_person.png")
        write_raw(d / f"{s.sample_id}_parsing.raw", s.parsing)
        write_raw(d / f"{s.sample_id}_pose.raw", s.pose)
        _to_png(s.garment, d / f"{s.sample_id}_garment.png")
        _to_png(s.garment_mask, d / f"{s.sample_id}_garmask.png")
    manifest = d / "manifest.tsv"
    with open(manifest, "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(["id", "seed", "split"])
        for s in samples:
            wr.writerow([s.sample_id, s.seed, s.split])
    return manifest


def read_manifest(directory) -> list[tuple[str, int, str]]:
    manifest = Path(directory) / "manifest.tsv"
    if not manifest.exists():
        return []
    with open(manifest, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or rows[0] != ["id", "seed", "split"]:
        raise DatasetError(f"{manifest}: bad header")
    out = []
    for row in rows[1:]:
        if not row:
            continue
        if len(row) != 3:
            raise DatasetError(f"{manifest}: malformed row {row!r}")
        out.append((row[0], int(row[1]), row[2]))
    return out


def read_sample(directory, sample_id: str, seed: int = 0, split: str = "train") -> Sample:
    d = Path(directory)
    try:
        parsing = read_raw(d / f"{sample_id}_parsing.raw", NUM_CATEGORIES)
        pose = read_raw(d / f"{sample_id}_pose.raw", 3)
        person = _from_png(d / f"{sample_id}_person.png", "RGB")
        garment = _from_png(d / f"{sample_id}_garment.png", "RGB")
        garmask = _from_png(d / f"{sample_id}_garmask.png", "L")
    except (OSError, ValueError) as exc:
        raise DatasetError(f"sample {sample_id!r}: {exc}") from exc
    if person.shape[:2] != parsing.shape[:2] or pose.shape[:2] != parsing.shape[:2]:
        raise DatasetError(f"sample {sample_id!r}: inconsistent image sizes")
    return Sample(sample_id, seed, person, parsing, pose, garment, garmask, split)


def read_dataset(directory, split: str | None = None) -> list[Sample]:
    return [read_sample(directory, sid, seed, sp)
            for sid, seed, sp in read_manifest(directory)
            if split is None or sp == split]


# tensor helpers ----------------------------------------------------------


def to_tensors(samples, dtype=None) -> dict:
    """Stack samples into ``N x C x H x W`` torch tensors."""
    import torch

    dtype = dtype or torch.float32

    def stack(arrs):
        a = np.stack(arrs)
        if a.ndim == 3:
            a = a[..., None]
        return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2))).to(dtype)

    parsing = stack([s.parsing for s in samples])
    person = stack([s.person for s in samples])
    pg = parsing[:, UPPER_GARMENT:UPPER_GARMENT + 1]
    ps = parsing[:, UPPER_SKIN:UPPER_SKIN + 1]
    return {
        "person": person,
        "parsing": parsing,
        "pose": stack([s.pose for s in samples]),
        "garment": stack([s.garment for s in samples]),
        "garment_mask": stack([s.garment_mask for s in samples]),
        "pg_mask": pg,
        "ps_mask": ps,
        "pr_parsing": derive_remainder(parsing),
        "pg_image": person * pg,
        "ps_image": person * ps,
    }
