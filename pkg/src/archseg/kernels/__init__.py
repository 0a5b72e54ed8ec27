"""Hot-kernel backend selection.

Two interchangeable implementations exist: a compiled extension
(``archseg.kernels._fast``) and a pure-numpy fallback
(``archseg.kernels.pyref``). The environment variable ``ARCHSEG_KERNELS``
picks one at import time:

* ``auto`` (default): compiled if importable, else the numpy fallback
* ``native``: compiled, raising if the extension is missing
* ``python``: the numpy fallback unconditionally

``BACKEND`` records which one won.
"""

from __future__ import annotations

import os

import numpy as np

from . import pyref

_choice = os.environ.get("ARCHSEG_KERNELS", "auto").strip().lower()
if _choice not in ("auto", "native", "python"):
    raise ValueError(
        f"ARCHSEG_KERNELS must be one of auto/native/python, got {_choice!r}"
    )

BACKEND = "python"
_impl = pyref
if _choice in ("auto", "native"):
    try:
        from . import _fast as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        if _choice == "native":
            raise ImportError(
                "ARCHSEG_KERNELS=native but the compiled extension "
                "archseg.kernels._fast is not available"
            )


def _contig(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


def im2col3d(x: np.ndarray, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    return _impl.im2col3d(_contig(x), k, stride, pad)


def col2im3d(
    cols: np.ndarray,
    shape: tuple[int, int, int, int],
    k: int,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    return _impl.col2im3d(_contig(cols), tuple(shape), k, stride, pad)


def trilinear_gather(vol: np.ndarray, coords: np.ndarray) -> np.ndarray:
    vol = _contig(vol)
    coords = np.ascontiguousarray(coords, dtype=vol.dtype)
    return _impl.trilinear_gather(vol, coords)


def trilinear_gather_grad(
    vol: np.ndarray, coords: np.ndarray, gout: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    vol = _contig(vol)
    coords = np.ascontiguousarray(coords, dtype=vol.dtype)
    gout = np.ascontiguousarray(gout, dtype=vol.dtype)
    return _impl.trilinear_gather_grad(vol, coords, gout)


def box_sum3d(x: np.ndarray, r: int) -> np.ndarray:
    return _impl.box_sum3d(_contig(x), r)


__all__ = [
    "BACKEND",
    "im2col3d",
    "col2im3d",
    "trilinear_gather",
    "trilinear_gather_grad",
    "box_sum3d",
]
