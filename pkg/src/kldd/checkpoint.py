"""Versioned binary checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  "KLDD"
    u32     format version (currently 1)
    u32     config text length, then that many UTF-8 bytes
    u64     completed epochs
    u64     optimizer step count
    16B     PCG64 state word, 16B increment word
    u8      has_uint32 flag, u32 cached uinteger
    u32     parameter count
    per parameter: u16 name length + UTF-8 name, u8 ndim, u32 per dim,
                   float64 little-endian values
    u8      moments flag; when 1, first-moment then second-moment float64
            blobs for every parameter in the same order

Saving the result of a load reproduces the input byte for byte.
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np

from .errors import DataError

MAGIC = b"KLDD"
VERSION = 1


@dataclasses.dataclass
class CheckpointState:
    """Deserialized checkpoint contents, independent of live objects."""

    config_text: str
    epoch: int
    adam_step: int
    rng_state: dict
    params: dict[str, np.ndarray]
    moments: tuple[dict[str, np.ndarray], dict[str, np.ndarray]] | None


def _pack_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path, state: CheckpointState) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = state.config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    parts.append(struct.pack("<QQ", state.epoch, state.adam_step))
    rs = state.rng_state
    if rs["bit_generator"] != "PCG64":
        raise ValueError(f"unsupported generator {rs['bit_generator']}")
    parts.append(int(rs["state"]["state"]).to_bytes(16, "little"))
    parts.append(int(rs["state"]["inc"]).to_bytes(16, "little"))
    parts.append(struct.pack("<BI", int(rs["has_uint32"]), int(rs["uinteger"])))
    parts.append(struct.pack("<I", len(state.params)))
    for name, arr in state.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(_pack_array(arr))
    if state.moments is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        m, v = state.moments
        for name in state.params:
            parts.append(_pack_array(m[name]))
        for name in state.params:
            parts.append(_pack_array(v[name]))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"truncated checkpoint {self.path}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> CheckpointState:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    config_text = r.take(cfg_len).decode("utf-8")
    epoch, adam_step = r.unpack("<QQ")
    rng_state = {
        "bit_generator": "PCG64",
        "state": {
            "state": int.from_bytes(r.take(16), "little"),
            "inc": int.from_bytes(r.take(16), "little"),
        },
    }
    has32, uinteger = r.unpack("<BI")
    rng_state["has_uint32"] = int(has32)
    rng_state["uinteger"] = int(uinteger)
    (n_params,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
        params[name] = data
    (has_moments,) = r.unpack("<B")
    moments = None
    if has_moments:
        m = {}
        v = {}
        for name, arr in params.items():
            m[name] = np.frombuffer(r.take(8 * arr.size), dtype="<f8").reshape(arr.shape).copy()
        for name, arr in params.items():
            v[name] = np.frombuffer(r.take(8 * arr.size), dtype="<f8").reshape(arr.shape).copy()
        moments = (m, v)
    if r.pos != len(blob):
        raise DataError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return CheckpointState(
        config_text=config_text,
        epoch=epoch,
        adam_step=adam_step,
        rng_state=rng_state,
        params=params,
        moments=moments,
    )
