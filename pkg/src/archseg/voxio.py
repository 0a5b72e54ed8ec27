"""VOX volume file format.

Little-endian layout::

    magic   4 bytes  b"VOX1"
    dtype   u8       0 = float32 image, 1 = uint8 labels, 2 = float32 x3 field
    dims    u32[3]   nx, ny, nz
    spacing f32[3]   mm per voxel
    payload          x-fastest raveling of the grid
    scheme  u8       labels only: 0=CoA, 1=RAA, 2=DAA, 255=none

dtype 2 stores the three displacement components back to back, each
x-fastest. Write then read reproduces payload bytes exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from archseg.grid import DisplacementField, LabelMap, VesselScheme, Volume3D, scheme_for

MAGIC = b"VOX1"
_SCHEME_IDS = {"CoA": 0, "RAA": 1, "DAA": 2}
_SCHEME_NAMES = {v: k for k, v in _SCHEME_IDS.items()}
_NO_SCHEME = 255


class VoxError(Exception):
    """Base class for VOX format failures."""


class BadMagicError(VoxError):
    """File does not start with the VOX1 magic."""


class TruncatedPayloadError(VoxError):
    """File ends before the declared payload is complete."""


class UnknownDtypeError(VoxError):
    """dtype byte is not one of the defined codes."""


def _ravel_x_fastest(a: np.ndarray) -> np.ndarray:
    return np.asfortranarray(a).ravel(order="F")


def _unravel_x_fastest(buf: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    return np.ascontiguousarray(buf.reshape(dims, order="F"))


def write_vox(path: str | Path, obj: Volume3D | LabelMap | DisplacementField) -> None:
    path = Path(path)
    if isinstance(obj, Volume3D):
        dtype_code = 0
        payload = _ravel_x_fastest(obj.data.astype(np.float32, copy=False)).tobytes()
        trailer = b""
    elif isinstance(obj, LabelMap):
        dtype_code = 1
        payload = _ravel_x_fastest(obj.codes.astype(np.uint8, copy=False)).tobytes()
        sid = _NO_SCHEME if obj.scheme is None else _SCHEME_IDS[obj.scheme.anomaly]
        trailer = struct.pack("<B", sid)
    elif isinstance(obj, DisplacementField):
        dtype_code = 2
        vec = obj.vectors.astype(np.float32, copy=False)
        payload = b"".join(_ravel_x_fastest(vec[c]).tobytes() for c in range(3))
        trailer = b""
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as VOX")
    dims = obj.dims
    header = MAGIC + struct.pack("<B3I3f", dtype_code, *dims, *obj.spacing)
    path.write_bytes(header + payload + trailer)


def read_vox(path: str | Path) -> Volume3D | LabelMap | DisplacementField:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}")
    head_fmt = "<B3I3f"
    head_size = struct.calcsize(head_fmt)
    if len(raw) < 4 + head_size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    dtype_code, nx, ny, nz, sx, sy, sz = struct.unpack_from(head_fmt, raw, 4)
    dims = (nx, ny, nz)
    spacing = (sx, sy, sz)
    n = nx * ny * nz
    body = raw[4 + head_size :]

    if dtype_code == 0:
        need = 4 * n
        if len(body) < need:
            raise TruncatedPayloadError(f"{path}: payload {len(body)} < {need} bytes")
        data = np.frombuffer(body[:need], dtype="<f4", count=n)
        return Volume3D(_unravel_x_fastest(data, dims), spacing)
    if dtype_code == 1:
        need = n + 1
        if len(body) < need:
            raise TruncatedPayloadError(f"{path}: payload {len(body)} < {need} bytes")
        codes = np.frombuffer(body[:n], dtype=np.uint8, count=n)
        sid = body[n]
        scheme: VesselScheme | None
        if sid == _NO_SCHEME:
            scheme = None
        elif sid in _SCHEME_NAMES:
            scheme = scheme_for(_SCHEME_NAMES[sid])
        else:
            raise UnknownDtypeError(f"{path}: unknown scheme id {sid}")
        return LabelMap(_unravel_x_fastest(codes, dims), spacing, scheme)
    if dtype_code == 2:
        need = 12 * n
        if len(body) < need:
            raise TruncatedPayloadError(f"{path}: payload {len(body)} < {need} bytes")
        flat = np.frombuffer(body[:need], dtype="<f4", count=3 * n)
        vec = np.stack(
            [_unravel_x_fastest(flat[c * n : (c + 1) * n], dims) for c in range(3)]
        )
        return DisplacementField(vec, spacing)
    raise UnknownDtypeError(f"{path}: unknown dtype code {dtype_code}")
