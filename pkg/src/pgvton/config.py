"""Flat ``key = value`` configuration shared by all training commands.

Defaults are the full-scale training settings. Iteration counts are the
full-scale values; smoke runs override them on the command line.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ValidationError


@dataclass
class Config:
    # loss weights
    lambda1: float = 2.0
    lambda2: float = 2.0
    lambda3: float = 3.0
    lambda4: float = 0.3
    lambda5: float = 6.0
    lambda6: float = 0.2
    lambda7: float = 6.0
    lambda8: float = 0.2
    # scale-selection and mapping trade-offs
    tau: float = 0.2
    xi: float = 0.3
    # optimisation, one block per module
    tpim_lr: float = 1e-4
    tpim_batch: int = 16
    tpim_iterations: int = 72_000
    ptm_lr: float = 2e-4
    ptm_batch: int = 4
    ptm_iterations: int = 145_000
    rsim_lr: float = 1e-5
    rsim_batch: int = 32
    rsim_iterations: int = 36_000
    # architecture
    encoder_width: int = 16
    d1: int = 32
    h1: int = 8
    w1: int = 6
    max_offset: float = 0.5
    demodulate: bool = False
    erasure_level: int = 5
    # data
    seed: int = 0
    dataset: str = ""
    height: int = 64
    width: int = 48
    log_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("tau", "xi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")
        for f in fields(self):
            if f.name.startswith("lambda") and getattr(self, f.name) < 0:
                raise ValidationError(f"{f.name} must be non-negative")
        for name in ("tpim_batch", "ptm_batch", "rsim_batch", "d1", "h1", "w1", "encoder_width"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not 1 <= self.erasure_level <= 9:
            raise ValidationError(f"erasure_level={self.erasure_level} outside 1..9")
        if self.height % 8 or self.width % 8:
            raise ValidationError("height and width must be divisible by 8")
        if self.max_offset <= 0:
            raise ValidationError("max_offset must be positive")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "Config":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"config line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValidationError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value, types[key])
        return cls(**values)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_text(Path(path).read_text())


def _coerce(key, value, typ):
    try:
        if typ in ("bool", bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ in ("int", int):
            return int(value.replace("_", ""))
        if typ in ("float", float):
            return float(value)
        return value
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {value!r} as {typ}") from None
