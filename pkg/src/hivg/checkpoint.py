"""Binary checkpoint: magic, header length, JSON header, float32 little-endian payload.

Layout::

    b"HIVGCKPT"            8 bytes
    header_len             uint64 little-endian
    header                 UTF-8 JSON, ``header_len`` bytes
    payload                concatenated ``<f4`` blocks

The header records the run config, model seed, HiLoRA stages, epoch, metric
history, the live LoRA factors (module path, stage, rank, alpha, trainable)
and one entry per parameter block (name, shape, byte offset) in the model's
canonical parameter order.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .config import RunConfig, config_from_dict
from .hilora import AdaptedLinear, LoraFactor
from .model import HiVG

MAGIC = b"HIVGCKPT"
FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _factor_records(model: HiVG) -> list[dict[str, Any]]:
    out = []
    for path, mod in model.named_modules():
        if isinstance(mod, AdaptedLinear):
            for f in mod.factors:
                out.append({"module": path, "stage": f.stage, "rank": f.rank, "alpha": f.alpha,
                            "trainable": f.trainable})
    return out


def save_checkpoint(path: str | Path, model: HiVG, cfg: RunConfig, *, epoch: int = 0,
                    stages: dict[str, int] | None = None, metrics: list[dict] | None = None) -> None:
    blocks, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype=PAYLOAD_DTYPE).tobytes()
        blocks.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": PAYLOAD_DTYPE.str,
        "config": cfg.to_dict(),
        "model_seed": model.seed,
        "stages": stages or {},
        "epoch": epoch,
        "metrics": metrics or [],
        "factors": _factor_records(model),
        "blocks": blocks,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=False).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def read_header(path: str | Path) -> tuple[dict[str, Any], int]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (n,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    if "format_version" not in header:
        raise CheckpointError(f"{path}: header has no format_version")
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header['format_version']}")
    return header, len(MAGIC) + 8 + n


def load_checkpoint(path: str | Path) -> tuple[HiVG, RunConfig, dict[str, Any]]:
    header, start = read_header(path)
    cfg = config_from_dict(header["config"])
    model = HiVG(cfg.model, seed=header["model_seed"])
    for rec in header["factors"]:
        layer = model.get_module(rec["module"])
        d, k = layer.weight.shape
        dt = layer.weight.dtype
        factor = LoraFactor(np.zeros((rec["rank"], k), dt), np.zeros((d, rec["rank"]), dt), rec["stage"],
                            rec["alpha"], rec["trainable"])
        layer.attach(factor)
    params = dict(model.named_parameters())
    payload = np.fromfile(path, dtype=np.uint8, offset=start)
    if payload.size != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {payload.size} bytes, header says {header['payload_bytes']}")
    names = [b["name"] for b in header["blocks"]]
    if names != list(params):
        missing = set(params) ^ set(names)
        raise CheckpointError(f"{path}: parameter blocks do not match the model ({sorted(missing)[:5]})")
    for block in header["blocks"]:
        p = params[block["name"]]
        shape = tuple(block["shape"])
        if shape != p.shape:
            raise CheckpointError(f"{path}: block {block['name']} has shape {shape}, model expects {p.shape}")
        n = int(np.prod(shape)) * PAYLOAD_DTYPE.itemsize
        raw = payload[block["offset"]:block["offset"] + n]
        p.data = raw.view(PAYLOAD_DTYPE).reshape(shape).astype(p.dtype)
    return model, cfg, header
