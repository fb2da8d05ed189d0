"""Checkpoint files.

Layout (little-endian): ``b"PGCK"``, u32 format version, u32 header length,
a UTF-8 JSON header, then the float32 payload of every tensor listed in the
header in order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .diffusion import build_schedule
from .errors import CheckpointError
from .model import Denoiser, DenoiserConfig
from .pipeline import MotionGenerator, MotionScaler

MAGIC = b"PGCK"
VERSION = 1


def write_checkpoint(path, gen: MotionGenerator, extra: dict | None = None) -> None:
    state = {k: v for k, v in gen.model.state_dict().items() if k != "trained_steps"}
    state["scaler.mean"] = gen.scaler.mean
    state["scaler.std"] = gen.scaler.std
    names = sorted(state)
    header = {
        "model": gen.model.cfg.to_dict(),
        "k_steps": gen.schedule.n_steps,
        "frames": gen.n_frames,
        "trained_steps": int(gen.model.trained_steps),
        "tensors": [[n, list(state[n].shape)] for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(state[n].detach().to(torch.float32).numpy().astype("<f4").tobytes() for n in names)
    Path(path).write_bytes(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + payload)


def read_header(raw: bytes) -> tuple[dict, int]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"incompatible checkpoint version {version} (expected {VERSION})")
    return json.loads(raw[12:12 + n].decode()), 12 + n


def read_checkpoint(path) -> tuple[MotionGenerator, dict]:
    """Load a generator and the ``extra`` metadata stored with it."""
    raw = Path(path).read_bytes()
    header, pos = read_header(raw)
    state = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        end = pos + 4 * count
        if end > len(raw):
            raise CheckpointError("truncated checkpoint payload")
        state[name] = torch.from_numpy(np.frombuffer(raw, "<f4", count, pos).astype(np.float32).reshape(shape))
        pos = end
    model = Denoiser(DenoiserConfig(**header["model"]))
    scaler = MotionScaler(state.pop("scaler.mean"), state.pop("scaler.std"))
    state["trained_steps"] = torch.tensor(header["trained_steps"])
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(str(e)) from e
    model.eval()
    return MotionGenerator(model, scaler, build_schedule(header["k_steps"]), header["frames"]), header["extra"]
