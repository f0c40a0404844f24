"""On-disk formats: tensor files, binary PGM/PPM, and heatmap rendering.

Tensor file layout (all integers little-endian):

    magic   4 bytes  b"RLXT"
    version 2 bytes  unsigned, currently 1
    dtype   1 byte   1 = float32 little-endian (the only code defined)
    rank    1 byte   number of dimensions, 1..8
    dims    rank * 4 bytes, unsigned
    payload row-major float32 values, exactly prod(dims) * 4 bytes

Readers validate every field in order and raise :class:`TensorFormatError`
naming the first violated field.  All writers in this module go through a
write-to-temp-then-rename step, so a crashed run never leaves a partial file
at the destination path.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from relax.core import Image

TENSOR_MAGIC = b"RLXT"
TENSOR_VERSION = 1
DTYPE_F32 = 1
MAX_RANK = 8


class TensorFormatError(ValueError):
    """Malformed tensor file; ``field`` names the first violated header field."""

    def __init__(self, field: str, detail: str):
        self.field = field
        super().__init__(f"bad tensor file: {field}: {detail}")


class NetpbmError(ValueError):
    pass


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def tensor_to_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise ValueError(f"tensor rank must be 1..{MAX_RANK}, got {arr.ndim}")
    header = TENSOR_MAGIC + struct.pack("<HBB", TENSOR_VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.tobytes(order="C")


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 4 or data[:4] != TENSOR_MAGIC:
        raise TensorFormatError("magic", f"expected {TENSOR_MAGIC!r}, got {data[:4]!r}")
    if len(data) < 6:
        raise TensorFormatError("version", "truncated before version field")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != TENSOR_VERSION:
        raise TensorFormatError("version", f"expected {TENSOR_VERSION}, got {version}")
    if len(data) < 7:
        raise TensorFormatError("dtype", "truncated before dtype field")
    dtype = data[6]
    if dtype != DTYPE_F32:
        raise TensorFormatError("dtype", f"expected code {DTYPE_F32} (float32), got {dtype}")
    if len(data) < 8:
        raise TensorFormatError("rank", "truncated before rank field")
    rank = data[7]
    if rank < 1 or rank > MAX_RANK:
        raise TensorFormatError("rank", f"rank must be 1..{MAX_RANK}, got {rank}")
    dims_end = 8 + 4 * rank
    if len(data) < dims_end:
        raise TensorFormatError("dims", f"truncated: need {4 * rank} bytes of dims")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = 1
    for d in dims:
        count *= d
    expected = count * 4
    payload = data[dims_end:]
    if len(payload) != expected:
        raise TensorFormatError(
            "payload length", f"expected {expected} bytes for dims {dims}, got {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    return flat.reshape(dims).copy()


def write_tensor(path: str, array: np.ndarray) -> None:
    atomic_write_bytes(path, tensor_to_bytes(array))


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        return tensor_from_bytes(handle.read())


# ---------------------------------------------------------------------------
# Binary PGM (P5) / PPM (P6), maxval 255.


def netpbm_to_bytes(data: np.ndarray) -> bytes:
    arr = np.asarray(data)
    if arr.dtype != np.uint8:
        raise NetpbmError(f"pixel data must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"expected (H, W) or (H, W, 3), got shape {arr.shape}")
    height, width = arr.shape[0], arr.shape[1]
    header = b"%s\n%d %d\n255\n" % (magic, width, height)
    return header + np.ascontiguousarray(arr).tobytes()


def netpbm_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise NetpbmError(f"bad magic: expected P5 or P6, got {data[:2]!r}")
    magic = data[:2]
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] not in (0x0A, 0x0D):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        tokens.append(data[start:pos])
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise NetpbmError(f"non-integer header tokens {tokens!r}") from None
    if width < 1 or height < 1:
        raise NetpbmError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte between maxval and pixel data
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    payload = data[pos:]
    if len(payload) != expected:
        raise NetpbmError(f"pixel data length: expected {expected} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, 3).copy()


def write_netpbm(path: str, data: np.ndarray) -> None:
    atomic_write_bytes(path, netpbm_to_bytes(data))


def read_netpbm(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        return netpbm_from_bytes(handle.read())


def load_image(path: str) -> Image:
    return Image.from_array(read_netpbm(path))


def save_image(path: str, image: Image) -> None:
    arr = np.rint(image.data.astype(np.float64) * 255.0).astype(np.uint8)
    if image.channels == 1:
        arr = arr[:, :, 0]
    write_netpbm(path, arr)


# ---------------------------------------------------------------------------
# Heatmap rendering.


def heatmap_rgb(grid: np.ndarray, overlay: np.ndarray | None = None) -> np.ndarray:
    """Render a scalar grid to RGB bytes with a fixed diverging colormap.

    The grid is min-max normalized (a constant grid maps everywhere to 0.5);
    0 maps to blue (0, 0, 255), 0.5 to white, 1 to red (255, 0, 0), linearly
    per channel.  NaN entries (undefined uncertainty) render at the low
    anchor.  With ``overlay`` (uint8 RGB or grayscale of the same height and
    width), the heatmap is alpha-blended onto it at alpha 0.5.
    """
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"heatmap grid must be 2-D, got shape {arr.shape}")
    finite = np.isfinite(arr)
    if not finite.any():
        t = np.full(arr.shape, 0.5)
    else:
        lo = arr[finite].min()
        hi = arr[finite].max()
        if hi == lo:
            t = np.full(arr.shape, 0.5)
        else:
            t = (arr - lo) / (hi - lo)
        t = np.where(finite, t, 0.0)

    rgb = np.empty(arr.shape + (3,), dtype=np.float64)
    low = t <= 0.5
    u = np.where(low, t / 0.5, (t - 0.5) / 0.5)
    rgb[:, :, 0] = np.where(low, 255.0 * u, 255.0)
    rgb[:, :, 1] = np.where(low, 255.0 * u, 255.0 * (1.0 - u))
    rgb[:, :, 2] = np.where(low, 255.0, 255.0 * (1.0 - u))

    if overlay is not None:
        base = np.asarray(overlay)
        if base.dtype != np.uint8:
            raise ValueError(f"overlay must be uint8, got {base.dtype}")
        if base.ndim == 2:
            base = np.repeat(base[:, :, np.newaxis], 3, axis=2)
        if base.shape[:2] != arr.shape:
            raise ValueError(f"overlay shape {base.shape[:2]} != grid shape {arr.shape}")
        rgb = 0.5 * rgb + 0.5 * base.astype(np.float64)

    return np.rint(rgb).astype(np.uint8)


def render_heatmap(path: str, grid: np.ndarray, overlay: np.ndarray | None = None) -> np.ndarray:
    """Write a PPM heatmap of ``grid`` to ``path``; returns the RGB bytes."""
    rgb = heatmap_rgb(grid, overlay=overlay)
    write_netpbm(path, rgb)
    return rgb
