"""Bookkeeping shared by the three trainers: resumable optimiser state,
loss logs, and checkpoint packing."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, add_state_dict
from .config import Config
from .errors import CheckpointError, NumericalError

RUNNING_WINDOW = 20


def running_mean(values, window: int = RUNNING_WINDOW) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    out = np.empty_like(v)
    csum = np.cumsum(np.concatenate([[0.0], v]))
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Independent stream per step so a resumed run draws the same batches."""
    return np.random.default_rng([seed, iteration])


def check_finite(value: torch.Tensor, stage: str, iteration: int):
    if not math.isfinite(float(value.detach())):
        raise NumericalError("non-finite loss", stage=stage, iteration=iteration)


class LossLog:
    def __init__(self, columns):
        self.columns = list(columns)
        self.rows = []

    def append(self, row: dict):
        self.rows.append([float(row[c]) for c in self.columns])

    def column(self, name) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=np.float64)

    def __len__(self):
        return len(self.rows)

    def pack(self, ckpt: Checkpoint):
        data = np.array(self.rows, dtype=np.float64).reshape(-1, len(self.columns))
        for i, c in enumerate(self.columns):
            ckpt.arrays[f"log.{c}"] = data[:, i].copy()

    @classmethod
    def unpack(cls, ckpt: Checkpoint, columns) -> "LossLog":
        log = cls(columns)
        cols = [ckpt.arrays.get(f"log.{c}") for c in columns]
        if all(c is not None for c in cols) and cols:
            log.rows = [list(r) for r in np.stack(cols, axis=1)]
        return log

    def write_tsv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
            wr.writerow(self.columns)
            for r in self.rows:
                wr.writerow([int(r[0])] + [f"{x:.6g}" for x in r[1:]])


def pack_optimizer(ckpt: Checkpoint, opt: torch.optim.Optimizer):
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            ckpt.arrays[f"optim.{idx}.{key}"] = torch.as_tensor(val).detach().cpu().numpy()


def restore_optimizer(ckpt: Checkpoint, opt: torch.optim.Optimizer):
    sd = opt.state_dict()
    state = {}
    for name, arr in ckpt.group("optim").items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(arr))
    sd["state"] = state
    opt.load_state_dict(sd)


def make_checkpoint(module_id: str, cfg: Config, model: torch.nn.Module, opt, log: LossLog,
                    iterations: int, **metadata) -> Checkpoint:
    final = float(log.rows[-1][1]) if log.rows else float("nan")
    meta = {"iterations": iterations, "final_loss": final, "config": cfg.to_text()}
    meta.update(metadata)
    ckpt = Checkpoint(module_id, cfg.hash(), {}, meta)
    add_state_dict(ckpt, "model", model.state_dict())
    if opt is not None:
        pack_optimizer(ckpt, opt)
    log.pack(ckpt)
    return ckpt


def load_model_state(model: torch.nn.Module, ckpt: Checkpoint):
    try:
        model.load_state_dict(ckpt.state_dict("model"))
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint for {ckpt.module_id!r} does not match the model: {exc}") from exc


def config_from_checkpoint(ckpt: Checkpoint) -> Config:
    text = ckpt.metadata.get("config")
    if text is None:
        raise CheckpointError(f"checkpoint for {ckpt.module_id!r} carries no config")
    return Config.from_text(text)


def log_path_for(out_path) -> Path:
    p = Path(out_path)
    return p.with_name(p.name + ".log.tsv")
