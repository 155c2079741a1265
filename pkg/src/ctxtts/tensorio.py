"""Binary tensor container shared by checkpoints, style targets and mel outputs.

Layout, repeated once per tensor (all integers unsigned 32-bit little-endian):

    name_len, name (UTF-8), rank, dim_0 ... dim_{rank-1}, float32 LE data (row-major)

Every container is accompanied by a ``<file>.json`` sidecar holding provenance
(seed, config hash, architecture fingerprint).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

_U32 = struct.Struct("<I")


class FormatError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: str | os.PathLike, obj: Any) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    atomic_write_bytes(path, (text + "\n").encode("utf-8"))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def encode_tensors(tensors: Mapping[str, Any]) -> bytes:
    chunks = []
    for name, value in tensors.items():
        arr = np.asarray(_to_numpy(value), dtype="<f4", order="C")
        raw_name = name.encode("utf-8")
        chunks.append(_U32.pack(len(raw_name)))
        chunks.append(raw_name)
        chunks.append(_U32.pack(arr.ndim))
        chunks.extend(_U32.pack(d) for d in arr.shape)
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    pos = 0
    n = len(data)

    def read_u32() -> int:
        nonlocal pos
        if pos + 4 > n:
            raise FormatError("truncated tensor container")
        (v,) = _U32.unpack_from(data, pos)
        pos += 4
        return v

    while pos < n:
        name_len = read_u32()
        if pos + name_len > n:
            raise FormatError("truncated tensor name")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = read_u32()
        shape = tuple(read_u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        nbytes = 4 * count
        if pos + nbytes > n:
            raise FormatError(f"truncated data for tensor {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += nbytes
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        out[name] = arr.astype(np.float32)
    return out


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, Any],
                 sidecar: Mapping[str, Any] | None = None) -> None:
    """Write ``tensors`` atomically; the sidecar (if given) goes to ``path + '.json'``."""
    atomic_write_bytes(path, encode_tensors(tensors))
    if sidecar is not None:
        atomic_write_json(sidecar_path(path), dict(sidecar))


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def load_sidecar(path: str | os.PathLike) -> dict[str, Any]:
    return json.loads(Path(sidecar_path(path)).read_text())


def sidecar_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(obj: Any) -> str:
    text = json.dumps(obj, sort_keys=True, default=_json_default)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _to_numpy(value):
    if hasattr(value, "detach"):
        return value.detach().cpu().numpy()
    return value


# -- torch module checkpoints -------------------------------------------------

def state_dict_to_arrays(module) -> dict[str, np.ndarray]:
    return {k: _to_numpy(v).astype(np.float32) for k, v in module.state_dict().items()}


def state_hash(module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, value in module.state_dict().items():
        arr = np.ascontiguousarray(_to_numpy(value))
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_module(path: str | os.PathLike, module, sidecar: Mapping[str, Any]) -> None:
    save_tensors(path, state_dict_to_arrays(module), sidecar)


def load_module_state(path: str | os.PathLike, module) -> None:
    import torch

    arrays = load_tensors(path)
    own = module.state_dict()
    missing = sorted(set(own) - set(arrays))
    extra = sorted(set(arrays) - set(own))
    if missing or extra:
        raise FormatError(f"checkpoint {path} mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    state = {}
    for name, ref in own.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise FormatError(f"{name}: shape {arr.shape} != {tuple(ref.shape)}")
        state[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    module.load_state_dict(state)
