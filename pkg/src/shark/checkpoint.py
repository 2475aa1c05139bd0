"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"SHARKCKP"                      magic, 8 bytes
    u32 version
    u32 meta_len, meta_len bytes     UTF-8 JSON: model config, progress, optimizer scalars
    u32 n_arrays
    n_arrays x (u32 name_len, name, u32 ndim, ndim x u32 dims)     name table
    concatenated float32 array payloads, in table order
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError
from .network import ModelConfig

MAGIC = b"SHARKCKP"
FORMAT_VERSION = 1
_DIGEST = 32


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def scalars(self) -> dict:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int = 0
    step: int = 0
    batch: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.config == other.config
            and (self.epoch, self.step, self.batch, self.seed, self.version)
            == (other.epoch, other.step, other.batch, other.seed, other.version)
            and self.extra == other.extra
            and self.adam.scalars() == other.adam.scalars()
            and _same_arrays(self.params, other.params)
            and _same_arrays(self.adam.m, other.adam.m)
            and _same_arrays(self.adam.v, other.adam.v)
        )


def _same_arrays(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> bool:
    if list(a) != list(b):
        return False
    return all(a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode(ckpt: Checkpoint) -> bytes:
    meta = {
        "model": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "batch": ckpt.batch,
        "seed": ckpt.seed,
        "adam": ckpt.adam.scalars(),
        "extra": ckpt.extra,
    }
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    arrays.update({f"adam_m/{k}": v for k, v in ckpt.adam.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in ckpt.adam.v.items()})

    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _u32(FORMAT_VERSION), _u32(len(meta_bytes)), meta_bytes, _u32(len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)] + [_u32(d) for d in arr.shape]
    for arr in arrays.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 4 + _DIGEST or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file is corrupt)")

    try:
        pos = len(MAGIC) + 4
        (meta_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        table = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            table.append((name, shape))
        arrays = {}
        for name, shape in table:
            nbytes = 4 * int(np.prod(shape))
            arrays[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += nbytes
        if pos != len(body):
            raise CheckpointError("trailing bytes after array payload")
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc

    def group(prefix):
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    adam_meta = meta["adam"]
    adam = AdamState(group("adam_m/"), group("adam_v/"), **adam_meta)
    return Checkpoint(
        config=ModelConfig(**meta["model"]),
        params=group("param/"),
        adam=adam,
        epoch=meta["epoch"],
        step=meta["step"],
        batch=meta["batch"],
        seed=meta["seed"],
        extra=meta.get("extra", {}),
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a temp file in the target directory is renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
