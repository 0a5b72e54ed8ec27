"""Named parameter sets and the CKP1 checkpoint format.

A ParamSet is an ordered name -> Tensor map for trainable arrays, plus
non-trainable buffers (batch-norm running statistics) and per-array
optimizer state. Checkpoints hold params and buffers, all float32, and
round-trip bitwise.

CKP1 layout (little-endian)::

    magic  4 bytes  b"CKP1"
    count  u32
    entry  u16 name length, UTF-8 name, u8 ndim, u32 dims[ndim], f32 payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from archseg.autodiff.tensor import Tensor

CKP_MAGIC = b"CKP1"


class CheckpointError(Exception):
    pass


class ParamSet:
    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.opt_state: dict[str, dict[str, np.ndarray]] = {}

    # -- registration ---------------------------------------------------------

    def _check_name(self, name: str) -> None:
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate parameter name {name!r}")
        if len(name.encode()) > 65535:
            raise ValueError("parameter name too long for checkpoint format")

    def param(self, name: str, array: np.ndarray) -> Tensor:
        self._check_name(name)
        t = Tensor(np.ascontiguousarray(array, dtype=np.float32), requires_grad=True)
        self._params[name] = t
        return t

    def buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        self._check_name(name)
        buf = np.ascontiguousarray(array, dtype=np.float32)
        self._buffers[name] = buf
        return buf

    # -- access -----------------------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params or name in self._buffers

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def buffers(self) -> dict[str, np.ndarray]:
        return self._buffers

    def n_values(self) -> int:
        return sum(int(t.value.size) for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    # -- state transfer ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {k: t.value for k, t in self._params.items()}
        out.update(self._buffers)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            if name in self._params:
                tgt = self._params[name].value
            elif name in self._buffers:
                tgt = self._buffers[name]
            else:
                raise CheckpointError(f"unknown entry {name!r} for this network")
            if tgt.shape != arr.shape:
                raise CheckpointError(
                    f"{name}: shape {arr.shape} != expected {tgt.shape}"
                )
            tgt[...] = arr

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}


def save_checkpoint(path: str | Path, ps: ParamSet) -> None:
    entries = ps.state_arrays()
    blobs = [CKP_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        nb = name.encode()
        blobs.append(struct.pack("<H", len(nb)))
        blobs.append(nb)
        blobs.append(struct.pack("<B", arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(arr.tobytes())
    Path(path).write_bytes(b"".join(blobs))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKP_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            out[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out
