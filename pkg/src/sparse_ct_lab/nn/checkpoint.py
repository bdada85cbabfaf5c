"""Checkpoint container: one file, JSON header line + float32 blob.

Layout: magic line ``SCTLCKPT 1``, one JSON line (config, epoch, val
loss, and the ordered parameter manifest), then every array concatenated
as little-endian float32 in manifest order. The manifest order is the
``param_plan`` execution order, running statistics included.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .unet import ShapeError, UNetConfig, check_params, param_plan

MAGIC = b"SCTLCKPT 1\n"


def save_checkpoint(path, params: dict, cfg: UNetConfig,
                    epoch: int | None = None, val_loss: float | None = None) -> None:
    names = [name for name, _ in param_plan(cfg)]
    header = {
        "config": dataclasses.asdict(cfg),
        "epoch": epoch,
        "val_loss": val_loss,
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(json.dumps(header).encode() + b"\n")
        for n in names:
            f.write(params[n].astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (params, cfg, meta) with meta = {"epoch", "val_loss"}."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.readline() != MAGIC:
            raise ShapeError(f"{path}: not a checkpoint file")
        header = json.loads(f.readline().decode())
        blob = f.read()
    cfg = UNetConfig(**header["config"])
    params = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(blob[offset:offset + size], dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{path}: truncated blob at {entry['name']}")
        params[entry["name"]] = arr.reshape(shape).copy()
        offset += size
    expected = [name for name, _ in param_plan(cfg)]
    if [e["name"] for e in header["params"]] != expected:
        raise ShapeError(f"{path}: manifest does not match the config plan")
    check_params(params, cfg)
    return params, cfg, {"epoch": header["epoch"], "val_loss": header["val_loss"]}


def save_history(path, history: list[dict]) -> None:
    lines = ["epoch,train_loss,val_loss,lr"]
    for row in history:
        lines.append(f"{row['epoch']},{row['train_loss']:.10g},"
                     f"{row['val_loss']:.10g},{row['lr']:.12g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_history(path) -> list[dict]:
    rows = []
    lines = Path(path).read_text().strip().splitlines()
    for line in lines[1:]:
        epoch, tr, va, lr = line.split(",")
        rows.append({"epoch": int(epoch), "train_loss": float(tr),
                     "val_loss": float(va), "lr": float(lr)})
    return rows
