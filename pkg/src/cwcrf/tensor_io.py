"""Tensor, image and label-map I/O plus probability-map validation.

In memory everything is a numpy array:

* probability maps: float array of shape ``(C, H, W)``
* label maps: integer array of shape ``(H, W)``
* rasters: ``uint8`` array of shape ``(H, W, channels)`` with 1 or 3 channels

On disk tensors use the little "CWT1" container::

    magic  b"CWT1"            4 bytes
    ndim   u8                 1 byte
    dims   u32 LE * ndim
    dtype  u8                 1 = f32 LE, 2 = u8
    payload, row-major
"""

import logging
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedFormatError, ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"CWT1"
DTYPE_F32 = 1
DTYPE_U8 = 2
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}
# Largest payload we agree to allocate (elements); guards against hostile headers.
MAX_ELEMENTS = 1 << 34

SIMPLEX_TOL = 1e-5
NEGATIVE_TOL = 1e-6


def encode_tensor(array):
    """Serialize ``array`` (float32-castable or uint8) to CWT1 bytes."""
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code = DTYPE_U8
    else:
        code = DTYPE_F32
        as_f32 = array.astype("<f4")
        if not np.all(np.isfinite(as_f32)):
            raise ValidationError("tensor contains non-finite values")
        array = as_f32
    if array.ndim > 255:
        raise ValueError("too many dimensions for CWT1")
    if any(d >= 1 << 32 for d in array.shape):
        raise ValueError("extent does not fit in u32")
    header = MAGIC + struct.pack("<B", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack("<B", code)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf, path=None):
    """Parse CWT1 bytes. Raises FormatError carrying the failing byte offset."""
    buf = memoryview(buf)
    if len(buf) < 5:
        raise FormatError("truncated header", offset=len(buf), path=path)
    if bytes(buf[:4]) != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}", offset=0, path=path)
    ndim = buf[4]
    pos = 5
    if len(buf) < pos + 4 * ndim + 1:
        raise FormatError("truncated header", offset=len(buf), path=path)
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = 1
    for i, d in enumerate(dims):
        count *= d
        if count > MAX_ELEMENTS:
            raise FormatError("dimension overflow", offset=5 + 4 * i, path=path)
    code = buf[pos]
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=pos, path=path)
    pos += 1
    dtype = _DTYPES[code]
    need = count * dtype.itemsize
    have = len(buf) - pos
    if have < need:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {have}",
            offset=len(buf),
            path=path,
        )
    if have > need:
        raise FormatError("trailing bytes after payload", offset=pos + need, path=path)
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    if code == DTYPE_F32:
        bad = np.flatnonzero(~np.isfinite(data.reshape(-1)))
        if bad.size:
            raise FormatError(
                "non-finite value", offset=pos + int(bad[0]) * 4, path=path
            )
    return data.copy()


def read_tensor(path):
    path = Path(path)
    return decode_tensor(path.read_bytes(), path=path)


def write_tensor(path, array):
    Path(path).write_bytes(encode_tensor(array))


# -- Netpbm -----------------------------------------------------------------


def _next_token(buf, pos, path):
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated netpbm header", offset=start, path=path)
    return buf[start:pos], pos


def decode_netpbm(buf, path=None):
    """Decode binary P5/P6 bytes into an ``(H, W, channels)`` uint8 array."""
    buf = bytes(buf)
    magic = buf[:2]
    if magic in (b"P2", b"P3", b"P1", b"P4"):
        raise UnsupportedFormatError(f"ASCII/bitmap netpbm {magic.decode()}", offset=0, path=path)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"bad netpbm magic {magic!r}", offset=0, path=path)
    channels = 3 if magic == b"P6" else 1
    pos = 2
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _next_token(buf, pos, path)
        if not tok.isdigit():
            raise FormatError(f"non-numeric header field {tok!r}", offset=start, path=path)
        fields.append((int(tok), start))
    (width, _), (height, _), (maxval, mv_off) = fields
    if maxval != 255:
        raise UnsupportedFormatError(f"maxval {maxval} (only 255 supported)", offset=mv_off, path=path)
    # exactly one whitespace byte separates header and raster
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("missing header terminator", offset=pos, path=path)
    pos += 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise FormatError(
            f"truncated raster: need {need} bytes, have {len(buf) - pos}",
            offset=len(buf),
            path=path,
        )
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(height, width, channels).copy()


def encode_netpbm(array):
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3 or array.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W), (H, W, 1) or (H, W, 3), got {array.shape}")
    if array.dtype != np.uint8:
        if array.size and (array.min() < 0 or array.max() > 255):
            raise ValueError("values outside 0..255 cannot be stored as 8-bit netpbm")
        array = array.astype(np.uint8)
    h, w, ch = array.shape
    magic = b"P6" if ch == 3 else b"P5"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(array).tobytes()


def read_ppm(path):
    """Read a binary PPM (P6) or PGM (P5) file with maxval 255."""
    path = Path(path)
    return decode_netpbm(path.read_bytes(), path=path)


def write_pgm(path, array):
    """Write a label map or raster; 1-channel data becomes P5, 3-channel P6."""
    Path(path).write_bytes(encode_netpbm(array))


write_ppm = write_pgm


def read_labels(path):
    """Read a label map from either a PGM or a 2-D CWT1 u8 tensor."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] == MAGIC:
        labels = decode_tensor(buf, path=path)
        if labels.ndim != 2:
            raise FormatError(f"label tensor must be 2-D, got {labels.ndim}-D", path=path)
        return labels
    raster = decode_netpbm(buf, path=path)
    if raster.shape[2] != 1:
        raise FormatError("label map must be single-channel", path=path)
    return raster[:, :, 0]


# -- probability maps ---------------------------------------------------------


def argmax_labels(prob):
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    # np.argmax returns the first maximal index, which is the tie rule we want.
    return np.argmax(np.asarray(prob), axis=0)


def validate_probability_map(tensor, tol=SIMPLEX_TOL, negative_tol=NEGATIVE_TOL):
    """Check the per-pixel simplex condition and return a clean ``(C, H, W)`` map.

    Values in ``[-negative_tol, 0)`` are clamped to zero.
    """
    t = np.asarray(tensor)
    if t.ndim != 3:
        raise ValidationError(f"probability map must be 3-D (C, H, W), got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        idx = np.argwhere(~np.isfinite(t))[0]
        raise ValidationError(f"non-finite value at class {idx[0]}, pixel ({idx[1]}, {idx[2]})",
                              pixel=(int(idx[1]), int(idx[2])))
    neg = t < -negative_tol
    if neg.any():
        c, i, j = (int(v) for v in np.argwhere(neg)[0])
        raise ValidationError(
            f"negative probability {t[c, i, j]:.3g} at class {c}, pixel ({i}, {j})", pixel=(i, j)
        )
    big = t > 1 + negative_tol
    if big.any():
        c, i, j = (int(v) for v in np.argwhere(big)[0])
        raise ValidationError(
            f"probability {t[c, i, j]:.6g} > 1 at class {c}, pixel ({i}, {j})", pixel=(i, j)
        )
    sums = t.sum(axis=0, dtype=np.float64)
    off = np.abs(sums - 1.0) > tol
    if off.any():
        i, j = (int(v) for v in np.argwhere(off)[0])
        raise ValidationError(
            f"pixel ({i}, {j}) sums to {sums[i, j]:.8g}, outside simplex tolerance {tol:g}",
            pixel=(i, j),
        )
    return np.where(t < 0, t.dtype.type(0), t)


def one_hot(labels, num_classes, dtype=np.float64):
    labels = np.asarray(labels)
    out = np.zeros((num_classes,) + labels.shape, dtype=dtype)
    np.put_along_axis(out, labels[None].astype(np.intp), 1, axis=0)
    return out
