"""Binary checkpoints.

Layout (little-endian)::

    b"FNKC"  u32 version
    u32 meta_len, meta_len bytes of UTF-8 JSON (sorted keys)
    u32 n_tensors
    n_tensors x { u16 name_len, name bytes, FNK1 tensor }

Tensors are stored rank-4 (left-padded with ones); their true shapes live in
``meta["shapes"]``.  Names are prefixed ``param/``, ``momentum/``, ``buffer/``
or ``sampler/``.  Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import read_tensor, write_tensor

MAGIC = b"FNKC"
VERSION = 1


@dataclass
class Checkpoint:
    model_name: str
    model_text: str
    config_text: str
    iteration: int
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    rng_state: dict
    sampler_perm: np.ndarray | None = None
    sampler_cursor: int = 0
    extra: dict = field(default_factory=dict)


def _as4(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape((1,) * (4 - a.ndim) + a.shape) if a.ndim <= 4 else a.reshape(-1, *a.shape[-3:])


def to_bytes(ck: Checkpoint) -> bytes:
    tensors: dict[str, np.ndarray] = {}
    for prefix, d in (("param/", ck.params), ("momentum/", ck.momentum), ("buffer/", ck.buffers)):
        for k in sorted(d):
            tensors[prefix + k] = d[k]
    if ck.sampler_perm is not None:
        tensors["sampler/perm"] = ck.sampler_perm
    meta = {
        "model_name": ck.model_name, "model": ck.model_text, "config": ck.config_text,
        "iteration": ck.iteration, "rng_state": ck.rng_state, "sampler_cursor": ck.sampler_cursor,
        "shapes": {k: list(np.shape(v)) for k, v in tensors.items()}, "extra": ck.extra,
    }
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    mb = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(mb)) + mb)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        write_tensor(buf, _as4(arr))
    return buf.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    f = io.BytesIO(data)

    def take(n, what):
        pos = f.tell()
        b = f.read(n)
        if len(b) < n:
            raise FormatError(f"truncated checkpoint while reading {what}", pos + len(b))
        return b

    if take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    version, = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    mlen, = struct.unpack("<I", take(4, "meta length"))
    meta = json.loads(take(mlen, "meta").decode())
    count, = struct.unpack("<I", take(4, "tensor count"))
    groups: dict[str, dict] = {"param": {}, "momentum": {}, "buffer": {}, "sampler": {}}
    for _ in range(count):
        nlen, = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        arr = read_tensor(f).reshape(meta["shapes"][name])
        prefix, key = name.split("/", 1)
        groups[prefix][key] = arr
    perm = groups["sampler"].get("perm")
    return Checkpoint(
        meta["model_name"], meta["model"], meta["config"], meta["iteration"],
        groups["param"], groups["momentum"], groups["buffer"], meta["rng_state"],
        perm.astype(np.int64) if perm is not None else None, meta["sampler_cursor"], meta.get("extra", {}),
    )


def save(path: str | Path, ck: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(to_bytes(ck))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
