"""Binary checkpoint format shared by every trained component.

Layout (all integers little-endian):

    magic "DDCK" | version u32 | config sha256 digest (32 bytes)
    | record count u32 | records ... | sha256 of all preceding bytes

Each record is: name length u16, name bytes (utf-8), dtype tag u8
(0 = float32, 1 = float64, 2 = int64), rank u8, dims u32 per axis,
then the raw little-endian payload. Round trips are bit-exact; loads
verify the trailing digest and refuse config/checkpoint mismatches.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "CheckpointError",
    "config_digest",
    "save_checkpoint",
    "load_checkpoint",
    "file_digest",
]

_MAGIC = b"DDCK"
_VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_FOR_KIND = {"f4": 0, "f8": 1, "i8": 2}


class CheckpointError(RuntimeError):
    pass


def config_digest(config: dict) -> bytes:
    """sha256 of the canonical JSON rendering of a config document."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).digest()


def _tag_for(arr: np.ndarray) -> int:
    key = arr.dtype.str.lstrip("<>=|")
    if key not in _TAG_FOR_KIND:
        raise CheckpointError(f"unsupported checkpoint dtype {arr.dtype}")
    return _TAG_FOR_KIND[key]


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], config: dict) -> bytes:
    """Write named arrays plus the config digest; returns the file digest.

    The write is atomic (temp file + rename).
    """
    path = Path(path)
    body = bytearray()
    body += _MAGIC
    body += struct.pack("<I", _VERSION)
    body += config_digest(config)
    body += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        tag = _tag_for(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        body += struct.pack("<H", len(name_b))
        body += name_b
        body += struct.pack("<BB", tag, arr.ndim)
        for dim in arr.shape:
            body += struct.pack("<I", dim)
        body += np.ascontiguousarray(le).tobytes()
    digest = hashlib.sha256(bytes(body)).digest()
    body += digest

    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)
    return digest


def load_checkpoint(
    path: str | Path, expected_config: dict | None = None
) -> dict[str, np.ndarray]:
    """Read a checkpoint, verifying content digest and config pairing."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 44 or blob[:4] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise CheckpointError(
            f"checkpoint version {version}, this build reads version {_VERSION}"
        )
    stored_cfg_digest = blob[8:40]
    payload, trailer = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != trailer:
        raise CheckpointError(f"{path}: content digest mismatch (corrupt or truncated)")
    if expected_config is not None:
        want = config_digest(expected_config)
        if want != stored_cfg_digest:
            raise CheckpointError(
                f"{path}: checkpoint was written for config "
                f"{stored_cfg_digest.hex()[:12]}, current config is {want.hex()[:12]}"
            )

    (count,) = struct.unpack_from("<I", blob, 40)
    out: dict[str, np.ndarray] = {}
    offset = 44
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        tag, rank = struct.unpack_from("<BB", blob, offset)
        offset += 2
        dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        dtype = _DTYPE_TAGS.get(tag)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype tag {tag}")
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=offset)
        offset += n * dtype.itemsize
        out[name] = arr.reshape(dims).copy() if rank else arr.copy().reshape(())
    return out


def file_digest(path: str | Path) -> str:
    """Hex sha256 of a file's bytes, used in provenance records."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
