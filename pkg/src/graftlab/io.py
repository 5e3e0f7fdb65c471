"""Binary persistence: model checkpoints and sample record files.

Checkpoint layout (all integers little-endian)::

    b"TDM1" | u8 version | u32 n_layers | n_layers x (u32 in, u32 out)
            | u32 time_dim | f64 params in declaration order

Record layout::

    b"TDR1" | u8 version | i64 count | i64 dim | i64 N | i64 N_I
            | count x ([f64 latent x dim if N_I >= 0] f64 final x dim, f64 reward)

``N_I = -1`` marks files without latents (e.g. inverse-noise datasets, where
``N`` holds the Euler step count).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .numerics import FieldModel

CKPT_MAGIC = b"TDM1"
REC_MAGIC = b"TDR1"
VERSION = 1


class FormatError(ValueError):
    pass


def checkpoint_bytes(model: FieldModel) -> bytes:
    widths = model.widths
    parts = [CKPT_MAGIC, struct.pack("<B", VERSION),
             struct.pack("<I", model.n_layers)]
    for a, b in zip(widths[:-1], widths[1:]):
        parts.append(struct.pack("<II", a, b))
    parts.append(struct.pack("<I", model.time_dim))
    for p in model.params:
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(buf: bytes) -> FieldModel:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<B", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n_layers,) = struct.unpack_from("<I", buf, 5)
    off = 9
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<II", buf, off))
        off += 8
    (time_dim,) = struct.unpack_from("<I", buf, off)
    off += 4
    dim = dims[-1][1]
    hidden = [b for _, b in dims[:-1]]
    shapes = []
    for a, b in dims:
        shapes += [(a, b), (b,)]
    shapes.append((dim, dim))
    params = []
    for shape in shapes:
        n = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape)
        params.append(arr.astype(np.float64))
        off += 8 * n
    if off != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    return FieldModel(dim, hidden, time_dim, params=params)


def save_checkpoint(model: FieldModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> FieldModel:
    return model_from_bytes(Path(path).read_bytes())


def save_records(path, finals, rewards=None, latents=None, n_steps: int = 0,
                 n_i: int = -1) -> None:
    finals = np.atleast_2d(np.asarray(finals, dtype=np.float64))
    count, dim = finals.shape
    rewards = (np.full(count, np.nan) if rewards is None
               else np.asarray(rewards, dtype=np.float64).reshape(count))
    if (latents is None) != (n_i < 0):
        raise ValueError("latents must be given exactly when N_I >= 0")
    cols = [finals, rewards[:, None]]
    if latents is not None:
        latents = np.asarray(latents, dtype=np.float64).reshape(count, dim)
        cols.insert(0, latents)
    body = np.ascontiguousarray(np.concatenate(cols, axis=1), dtype="<f8")
    header = REC_MAGIC + struct.pack("<B", VERSION) + struct.pack(
        "<qqqq", count, dim, n_steps, n_i)
    Path(path).write_bytes(header + body.tobytes())


def load_records(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != REC_MAGIC:
        raise FormatError("not a record file (bad magic)")
    count, dim, n_steps, n_i = struct.unpack_from("<qqqq", buf, 5)
    width = dim * (2 if n_i >= 0 else 1) + 1
    body = np.frombuffer(buf, dtype="<f8", offset=37).astype(np.float64)
    if body.size != count * width:
        raise FormatError("record body size mismatch")
    body = body.reshape(count, width)
    out = {"N": n_steps, "N_I": n_i, "rewards": body[:, -1]}
    if n_i >= 0:
        out["latents"] = body[:, :dim]
        out["finals"] = body[:, dim:2 * dim]
    else:
        out["latents"] = None
        out["finals"] = body[:, :dim]
    return out
