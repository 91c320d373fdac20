"""Binary checkpoint files.

Layout (little-endian)::

    b"CSEG"  u16 version  u32 entry count
    per entry: u16 name length, name (utf-8), u8 dtype tag, 4 x u32 dims, raw values

Arrays with fewer than four dimensions are stored with trailing dims of 1.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .architecture import ModelParams, build_model
from .config import ArchConfig

MAGIC = b"CSEG"
VERSION = 1
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2, np.dtype("uint8"): 3}


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint."""


def _dims(shape) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise CheckpointError(f"cannot store {len(shape)}-D array")
    return tuple(shape) + (1,) * (4 - len(shape))


def write_tensors(path, tensors: dict[str, np.ndarray], version: int = VERSION) -> None:
    parts = [MAGIC, struct.pack("<HI", version, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B4I", _TAG_OF[arr.dtype], *_dims(arr.shape)))
        parts.append(arr.astype(_TAGS[_TAG_OF[arr.dtype]], copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict[str, np.ndarray]:
    """Entries as 4-D arrays keyed by name."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 10:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    pos = 10
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            tag, *dims = struct.unpack_from("<B4I", raw, pos)
            pos += 17
            dtype = _TAGS[tag]
            size = int(np.prod(dims))
            if pos + size * dtype.itemsize > len(raw):
                raise CheckpointError(f"{path}: entry {name!r} truncated at byte {pos}")
            out[name] = np.frombuffer(raw, dtype=dtype, count=size, offset=pos).reshape(dims).copy()
            pos += size * dtype.itemsize
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt entry table at byte {pos}") from exc
    return out


def model_tensors(model: ModelParams) -> dict[str, np.ndarray]:
    out = {}
    for pname, reg in model.partitions().items():
        for name, t in reg:
            out[f"{pname}/{name}"] = t.data
        for name, bn in reg.bn.items():
            out[f"{pname}/{name}.running_mean"] = bn.running_mean
            out[f"{pname}/{name}.running_var"] = bn.running_var
    return out


def save_checkpoint(path, model: ModelParams, agents=None, round_index: int = 0, extra: dict | None = None) -> None:
    from dataclasses import asdict

    config = {"arch": asdict(model.cfg), **(extra or {})}
    tensors = {
        "__config__": np.frombuffer(json.dumps(config, sort_keys=True).encode(), dtype=np.uint8),
        "__round__": np.array([round_index], dtype=np.int64),
    }
    tensors.update(model_tensors(model))
    for agent in (agents or {}).values():
        tensors[f"opt/{agent.name}/step"] = np.array([agent.step], dtype=np.int64)
        tensors[f"opt/{agent.name}/hyper"] = np.array([agent.base_lr, agent.momentum], dtype=np.float64)
        for key, v in agent.velocity.items():
            tensors[f"opt/{agent.name}/velocity/{key}"] = v
    write_tensors(path, tensors)


def checkpoint_config(tensors: dict[str, np.ndarray]) -> dict:
    if "__config__" not in tensors:
        raise CheckpointError("checkpoint carries no configuration")
    return json.loads(tensors["__config__"].reshape(-1).tobytes().decode())


def restore_model(tensors: dict[str, np.ndarray], model: ModelParams) -> None:
    """Copy parameters and running statistics into ``model`` in place."""
    expected = model_tensors(model)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} model entries, e.g. {missing[0]!r}")
    for name, target in expected.items():
        src = tensors[name]
        if src.size != target.size:
            raise CheckpointError(f"{name}: {src.size} values, model expects {target.size}")
        target[...] = src.reshape(target.shape).astype(target.dtype)


def restore_agents(tensors: dict[str, np.ndarray], agents) -> None:
    for agent in agents.values():
        agent.step = int(tensors[f"opt/{agent.name}/step"].reshape(-1)[0])
        for key, v in agent.velocity.items():
            v[...] = tensors[f"opt/{agent.name}/velocity/{key}"].reshape(v.shape)


def load_model(path, arch: ArchConfig | None = None) -> tuple[ModelParams, dict[str, np.ndarray]]:
    """Rebuild the model described by a checkpoint and load its weights."""
    tensors = read_tensors(path)
    if arch is None:
        arch = ArchConfig(**checkpoint_config(tensors)["arch"])
    model = build_model(arch, 0)
    restore_model(tensors, model)
    return model, tensors
