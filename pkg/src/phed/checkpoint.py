"""Checkpoint archive.

Layout (version 1, all integers little-endian)::

    magic        8 bytes   b"PHEDCKPT"
    version      u32
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON: model config, vocabulary,
                 RNG seed/state, training counters
    n_tensors    u32
    n_tensors records:
        name_len u16, name (UTF-8)
        stage    i16       stage tag (0 = base/embedding, i = stage i)
        dtype    u8        1 = float64, 2 = float32, 3 = int64
        ndim     u8, dims  ndim x u64
        data     product(dims) little-endian values

Tensor names are ``model/<parameter>`` for weights and
``optim/<parameter>/<buffer>`` for optimizer moments.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .data import Vocabulary
from .model import ModelConfig, PhedModel

MAGIC = b"PHEDCKPT"
VERSION = 1

_CODES = {torch.float64: (1, "<f8"), torch.float32: (2, "<f4"), torch.int64: (3, "<i8")}
_FROM_CODE = {1: (torch.float64, "<f8"), 2: (torch.float32, "<f4"), 3: (torch.int64, "<i8")}


class CheckpointError(ValueError):
    pass


def write_archive(path: str | Path, meta: dict, tensors: list[tuple[str, int, torch.Tensor]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tag, t in tensors:
            t = t.detach().cpu().contiguous()
            code, np_dtype = _CODES[t.dtype]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<hBB", tag, code, t.dim()))
            fh.write(struct.pack(f"<{t.dim()}Q", *t.shape))
            fh.write(t.numpy().astype(np_dtype, copy=False).tobytes())
    os.replace(tmp, path)


def read_archive(path: str | Path) -> tuple[dict, dict[str, tuple[int, torch.Tensor]]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8
    try:
        version, meta_len = struct.unpack_from("<II", blob, pos)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos += 8
        meta = json.loads(blob[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            tag, code, ndim = struct.unpack_from("<hBB", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            dtype, np_dtype = _FROM_CODE[code]
            count = int(np.prod(dims)) if ndim else 1
            nbytes = count * np.dtype(np_dtype).itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            arr = np.frombuffer(blob, dtype=np_dtype, count=count, offset=pos).reshape(dims)
            pos += nbytes
            tensors[name] = (tag, torch.from_numpy(arr.copy()).to(dtype))
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return meta, tensors


def model_tensors(model: PhedModel) -> list[tuple[str, int, torch.Tensor]]:
    return [(f"model/{n}", model.stage_tag(n), p) for n, p in model.named_parameters()]


def optimizer_tensors(model: PhedModel, optimizer) -> tuple[list, dict]:
    if optimizer is None:
        return [], {}
    names = {id(p): n for n, p in model.named_parameters()}
    out, steps = [], {}
    for p, st in optimizer.state.items():
        name = names[id(p)]
        tag = model.stage_tag(name)
        for key in ("exp_avg", "exp_avg_sq"):
            out.append((f"optim/{name}/{key}", tag, st[key]))
        steps[name] = float(st["step"])
    return out, steps


def save_checkpoint(
    path: str | Path,
    model: PhedModel,
    vocab: Vocabulary,
    rng_seed: int,
    counters: dict | None = None,
    optimizer=None,
    rng_state: bytes | None = None,
    extra: dict | None = None,
) -> None:
    opt_tensors, opt_steps = optimizer_tensors(model, optimizer)
    meta = {
        "format": "phed-checkpoint",
        "model_config": asdict(model.config),
        "vocab": "".join(vocab.chars),
        "rng": {"algorithm": "mt19937", "seed": rng_seed, "state": rng_state.hex() if rng_state else None},
        "counters": counters or {},
        "optimizer_steps": opt_steps,
        "frozen": [s.frozen for s in model.stages],
        "extra": extra or {},
    }
    write_archive(path, meta, model_tensors(model) + opt_tensors)


def load_checkpoint(path: str | Path):
    """Return ``(model, vocab, meta, tensors)``; shapes are validated against the config."""
    meta, tensors = read_archive(path)
    cfg = ModelConfig(**meta["model_config"])
    model = PhedModel(cfg)
    load_model_state(model, tensors, path)
    for stage, frozen in zip(model.stages, meta.get("frozen", [])):
        stage.frozen = frozen
    return model, Vocabulary(meta["vocab"]), meta, tensors


def load_model_state(model: PhedModel, tensors: dict, path="checkpoint") -> None:
    params = dict(model.named_parameters())
    stored = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    missing = set(params) - set(stored)
    unknown = set(stored) - set(params)
    if missing or unknown:
        raise CheckpointError(f"{path}: parameter set mismatch (missing {sorted(missing)[:3]}, unknown {sorted(unknown)[:3]})")
    with torch.no_grad():
        for name, p in params.items():
            tag, t = stored[name]
            if tuple(t.shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: {name} has shape {tuple(t.shape)}, config expects {tuple(p.shape)}")
            if tag != model.stage_tag(name):
                raise CheckpointError(f"{path}: {name} carries stage tag {tag}")
            p.copy_(t.to(p.dtype))


def load_optimizer_state(model: PhedModel, optimizer, tensors: dict, steps: dict) -> None:
    names = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            name = names[id(p)]
            if name not in steps:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(steps[name], dtype=torch.get_default_dtype()),
                "exp_avg": tensors[f"optim/{name}/exp_avg"][1].to(p.dtype).clone(),
                "exp_avg_sq": tensors[f"optim/{name}/exp_avg_sq"][1].to(p.dtype).clone(),
            }
