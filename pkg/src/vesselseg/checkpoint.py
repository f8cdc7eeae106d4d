"""Binary checkpoint container.

Layout (all integers little-endian):

    magic "HMSV" | u32 version |
    u64 config length | config text (utf-8) |
    u64 meta length   | meta text, one "key = value" per line |
    u32 tensor count  | per tensor:
        u16 name length | name | u8 dtype code | u8 rank | u32 dims... | payload

dtype codes: 0 = float32, 1 = float64, 2 = int64.  Saving preserves
insertion order, so save(load(x)) is byte-identical.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"HMSV"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}


class CheckpointError(IOError):
    pass


def _meta_to_text(meta: dict) -> str:
    lines = []
    for key, value in meta.items():
        if isinstance(value, float):
            lines.append(f"{key} = {value!r}")
        else:
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + ("\n" if lines else "")


def _meta_from_text(text: str) -> dict:
    meta: dict = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        value = value.strip()
        try:
            meta[key] = int(value)
        except ValueError:
            try:
                meta[key] = float(value)
            except ValueError:
                meta[key] = value
    return meta


def save_checkpoint(path: str, config_text: str, meta: dict,
                    arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        cfg_bytes = config_text.encode("utf-8")
        fh.write(struct.pack("<Q", len(cfg_bytes)))
        fh.write(cfg_bytes)
        meta_bytes = _meta_to_text(meta).encode("utf-8")
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            le = arr.dtype.newbyteorder("<")
            if le not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
            payload = arr.astype(le, copy=False)
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<BB", _DTYPE_CODES[le], arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(payload.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<Q", _read_exact(fh, 8, "config length"))
        config_text = _read_exact(fh, cfg_len, "config").decode("utf-8")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "meta length"))
        meta = _meta_from_text(_read_exact(fh, meta_len, "meta").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2, "tensor header"))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor dims"))
            dtype = _CODE_DTYPES[code]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            payload = _read_exact(fh, n_bytes, f"tensor {name!r} payload")
            arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return config_text, meta, arrays
