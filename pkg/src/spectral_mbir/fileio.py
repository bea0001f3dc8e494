"""Self-describing binary containers for images and sinograms.

Image file:    magic 'SMBIMG\\0\\0', u32 version, u32 dtype tag (1 = float64
little-endian), u32 ndim, u32 dims[ndim], payload row-major.
Sinogram file: magic 'SMBSIN\\0\\0', u32 version, u32 dtype tag, u32 E, u32
n_views, u32 n_channels, line-integral payload, counts plane, u8 mask plane.

All writes are atomic (temp file + rename) and round-trip bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FileFormatError
from .images import SpectralSinogram

IMAGE_MAGIC = b"SMBIMG\x00\x00"
SINO_MAGIC = b"SMBSIN\x00\x00"
VERSION = 1
DTYPE_F64_LE = 1


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh, n, path, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FileFormatError(f"{path}: truncated while reading {what}")
    return buf


def write_image(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    header = IMAGE_MAGIC + struct.pack("<III", VERSION, DTYPE_F64_LE, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    _atomic_write(path, header + arr.tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8, path, "magic")
        if magic != IMAGE_MAGIC:
            raise FileFormatError(f"{path}: not an image file (magic {magic!r})")
        version, dtype, ndim = struct.unpack("<III", _read_exact(fh, 12, path, "header"))
        if version != VERSION:
            raise FileFormatError(f"{path}: unsupported image file version {version}")
        if dtype != DTYPE_F64_LE:
            raise FileFormatError(f"{path}: unsupported dtype tag {dtype}")
        if not 1 <= ndim <= 4:
            raise FileFormatError(f"{path}: implausible ndim {ndim}")
        dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path, "dims"))
        count = int(np.prod(dims))
        payload = _read_exact(fh, 8 * count, path, "payload")
        if fh.read(1):
            raise FileFormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def write_sinogram(path, sino: SpectralSinogram) -> None:
    y = np.ascontiguousarray(sino.line_integrals, dtype="<f8")
    counts = np.ascontiguousarray(sino.counts, dtype="<f8")
    mask = np.ascontiguousarray(sino.mask, dtype=np.uint8)
    header = SINO_MAGIC + struct.pack("<IIIII", VERSION, DTYPE_F64_LE,
                                      sino.n_bins, sino.n_views, sino.n_channels)
    _atomic_write(path, header + y.tobytes() + counts.tobytes() + mask.tobytes())


def read_sinogram(path) -> SpectralSinogram:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8, path, "magic")
        if magic != SINO_MAGIC:
            raise FileFormatError(f"{path}: not a sinogram file (magic {magic!r})")
        version, dtype, e, v, c = struct.unpack(
            "<IIIII", _read_exact(fh, 20, path, "header"))
        if version != VERSION:
            raise FileFormatError(f"{path}: unsupported sinogram file version {version}")
        if dtype != DTYPE_F64_LE:
            raise FileFormatError(f"{path}: unsupported dtype tag {dtype}")
        n = e * v * c
        y = np.frombuffer(_read_exact(fh, 8 * n, path, "line integrals"),
                          dtype="<f8").reshape(e, v, c).copy()
        counts = np.frombuffer(_read_exact(fh, 8 * n, path, "counts"),
                               dtype="<f8").reshape(e, v, c).copy()
        mask = np.frombuffer(_read_exact(fh, v * c, path, "mask"),
                             dtype=np.uint8).reshape(v, c).copy()
        if fh.read(1):
            raise FileFormatError(f"{path}: trailing bytes after payload")
    return SpectralSinogram(y, counts, mask)


def write_checkpoint(path, x_image: np.ndarray, iteration: int, cost: float) -> None:
    """Reconstruction checkpoint: the image container plus a JSON sidecar."""
    write_image(path, x_image)
    meta = {"iteration": int(iteration), "cost": float(cost)}
    _atomic_write(str(path) + ".json", json.dumps(meta).encode())


def read_checkpoint(path) -> tuple[np.ndarray, int, float]:
    arr = read_image(path)
    try:
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
        return arr, int(meta["iteration"]), float(meta["cost"])
    except (OSError, KeyError, ValueError) as exc:
        raise FileFormatError(f"bad checkpoint sidecar for {path}: {exc}") from exc
