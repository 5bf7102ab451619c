"""Binary containers and Netpbm image files.

Every persisted array artifact (snapshots, kernels, adversarial sets) uses the
same layout::

    magic (8 bytes) | header length (uint64 LE) | JSON header | payloads

Payloads are float64 little-endian, row-major, written in the order listed
under ``header["arrays"]``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

_LE_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stable_hash(obj: Any, length: int = 16) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:length]


def write_container(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    header = dict(header)
    header["endianness"] = "little"
    header["arrays"] = [
        {"name": name, "shape": list(np.shape(a))} for name, a in arrays.items()
    ]
    blob = canonical_json(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype=_LE_F64).tobytes())
    return path


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    if header.get("endianness") != "little":
        raise FormatError(f"{path}: unsupported endianness")
    offset = 16 + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated payload for {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw[offset:end], dtype=_LE_F64).reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays


# -- Netpbm -----------------------------------------------------------------


def to_bytes_image(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 via round(255 x)."""
    return np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)


def write_netpbm(path, img: np.ndarray) -> Path:
    """Write a (H, W) greyscale image as PGM or a (C, H, W) image as PGM/PPM.

    Single-channel images become P5, three-channel images P6.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 2:
        magic, data = b"P5", to_bytes_image(img)
    elif img.ndim == 3 and img.shape[0] == 3:
        magic, data = b"P6", to_bytes_image(np.transpose(img, (1, 2, 0)))
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    h, w = data.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + data.tobytes())
    return path


def read_netpbm(path) -> np.ndarray:
    """Read a binary PGM/PPM into floats in [0, 1], channels first."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise FormatError(f"{path}: unsupported netpbm variant {magic!r}/{maxval}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    if len(raw) - pos != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(raw) - pos}")
    data = np.frombuffer(raw[pos:], dtype=np.uint8).reshape(h, w, channels)
    return np.transpose(data, (2, 0, 1)).astype(np.float64) / 255.0
