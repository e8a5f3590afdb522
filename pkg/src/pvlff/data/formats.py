"""Binary raster and mask-proposal files.

FeatureMap (``.pvfm``)::

    b"PVFM" | u32 version | u32 H | u32 W | u32 C | u32 dtype tag | payload

Payload is little-endian, row-major ``(H, W, C)``. Tags: 0 = f32, 1 = u16, 2 = u8.

Mask proposals (``.bin``)::

    u32 count | per proposal: u32 id | u32 run count | runs as (u32 start, u32 length)

Runs index the row-major flattened frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PVFM"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2"), 2: np.dtype("<u1")}
TAGS = {np.dtype("float32"): 0, np.dtype("uint16"): 1, np.dtype("uint8"): 2}


class FormatError(ValueError):
    pass


def write_feature_map(path: str | Path, data: np.ndarray) -> None:
    """Write an ``(H, W)`` or ``(H, W, C)`` array of f32, u16 or u8."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise FormatError(f"feature map must be 2D or 3D, got shape {arr.shape}")
    tag = TAGS.get(arr.dtype.newbyteorder("="))
    if tag is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    h, w, c = arr.shape
    header = MAGIC + struct.pack("<5I", VERSION, h, w, c, tag)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())


def decode_feature_map(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 24 or data[:4] != MAGIC:
        raise FormatError(f"{source}: not a PVFM feature map")
    version, h, w, c, tag = struct.unpack_from("<5I", data, 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if tag not in DTYPES:
        raise FormatError(f"{source}: unknown dtype tag {tag}")
    dt = DTYPES[tag]
    expected = h * w * c * dt.itemsize
    payload = data[24:]
    if len(payload) != expected:
        raise FormatError(f"{source}: payload length {len(payload)} != expected {expected} for {h}x{w}x{c}")
    return np.frombuffer(payload, dtype=dt).reshape(h, w, c).astype(dt.newbyteorder("="))


def read_feature_map(path: str | Path, squeeze: bool = True) -> np.ndarray:
    """Read a map; single-channel maps come back as ``(H, W)`` unless ``squeeze`` is False."""
    arr = decode_feature_map(Path(path).read_bytes(), str(path))
    return arr[:, :, 0] if squeeze and arr.shape[2] == 1 else arr


# ---------------------------------------------------------------------------
# mask proposals
# ---------------------------------------------------------------------------


@dataclass
class MaskProposal:
    frame: int
    id: int
    mask: np.ndarray  # bool (H, W)

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())

    def pixels(self) -> np.ndarray:
        """Row-major flat indices of the mask pixels (ascending)."""
        return np.flatnonzero(self.mask.ravel())


def rle_encode(mask: np.ndarray) -> np.ndarray:
    """``(K, 2)`` array of ``(start, length)`` runs of True over the flattened mask."""
    flat = np.concatenate([[0], mask.ravel().astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(flat))
    starts, ends = edges[0::2], edges[1::2]
    return np.stack([starts, ends - starts], axis=1).astype(np.int64)


def rle_decode(runs: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    for start, length in np.asarray(runs).reshape(-1, 2):
        if start + length > flat.size:
            raise FormatError(f"run ({start}, {length}) exceeds frame of {flat.size} pixels")
        flat[start : start + length] = True
    return flat.reshape(shape)


def write_masks(path: str | Path, proposals: list[MaskProposal]) -> None:
    parts = [struct.pack("<I", len(proposals))]
    for p in proposals:
        runs = rle_encode(p.mask)
        parts.append(struct.pack("<II", p.id, len(runs)))
        parts.append(runs.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_masks(path: str | Path, shape: tuple[int, int], frame: int = 0) -> list[MaskProposal]:
    data = Path(path).read_bytes()
    try:
        (count,) = struct.unpack_from("<I", data, 0)
        pos = 4
        out = []
        for _ in range(count):
            pid, nruns = struct.unpack_from("<II", data, pos)
            pos += 8
            if pos + 8 * nruns > len(data):
                raise FormatError(f"{path}: truncated proposal {pid}")
            runs = np.frombuffer(data, dtype="<u4", count=2 * nruns, offset=pos).astype(np.int64)
            pos += 8 * nruns
            mask = rle_decode(runs, shape)
            if not mask.any():
                raise FormatError(f"{path}: proposal {pid} is empty")
            out.append(MaskProposal(frame, int(pid), mask))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated mask file") from exc
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out
