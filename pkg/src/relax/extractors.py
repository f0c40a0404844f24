"""Image-to-embedding feature extractors.

Built-in extractors are pure functions of their settings and the input, so
two runs with the same seed produce bitwise-identical embeddings.  They all
accept a single (H, W, C) float array or a batch (B, H, W, C); the batched
entry points exist because histogram binning and matrix projection are far
cheaper when vectorized across a few dozen masked images at a time.

The external extractor talks to a child process over a framed stdin/stdout
protocol; see :class:`ExternalExtractor` for the byte layout.
"""

from __future__ import annotations

import os
import select
import struct
import subprocess
from dataclasses import dataclass

import numpy as np

from relax.core import RngSpec, seeded_rng

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def to_gray(data: np.ndarray) -> np.ndarray:
    """Luma grayscale of (..., H, W, C) image data, float64 (..., H, W)."""
    data = np.asarray(data, dtype=np.float64)
    if data.shape[-1] == 1:
        return data[..., 0]
    if data.shape[-1] == 3:
        r, g, b = GRAY_WEIGHTS
        return r * data[..., 0] + g * data[..., 1] + b * data[..., 2]
    raise ValueError(f"expected 1 or 3 channels, got {data.shape[-1]}")


def _as_batch(data: np.ndarray) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 4:
        raise ValueError(f"expected batch (B, H, W, C), got shape {data.shape}")
    return data


class Extractor:
    """Base class: subclasses implement ``batch`` and ``out_dim``."""

    #: True when the map image -> embedding is exactly linear (no bias).
    is_linear = False

    def batch(self, data: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_dim(self, height: int, width: int, channels: int) -> int:
        raise NotImplementedError

    def __call__(self, data: np.ndarray) -> np.ndarray:
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"expected (H, W, C) image data, got shape {data.shape}")
        return self.batch(data[np.newaxis])[0]

    def descriptor(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class HogParams:
    """Canonical histogram-of-oriented-gradients settings.

    cell: pixels per cell side; block: cells per block side; bins:
    orientation bins over [0, 180) degrees (or [0, 360) when ``signed``);
    norm_eps: guard added inside the block normalization square root.
    """

    cell: int = 8
    block: int = 2
    bins: int = 9
    signed: bool = False
    norm_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.cell < 1 or self.block < 1 or self.bins < 1:
            raise ValueError(
                f"cell, block, bins must be >= 1, got {self.cell}, {self.block}, {self.bins}"
            )
        if self.norm_eps <= 0.0:
            raise ValueError(f"norm_eps must be positive, got {self.norm_eps}")


class HogExtractor(Extractor):
    """Gradient-orientation histograms with overlapping normalized blocks.

    Pipeline: luma grayscale; [-1, 0, 1] central differences with replicated
    borders; per-pixel magnitude and orientation; each magnitude voted into
    the two nearest orientation bins by linear interpolation between bin
    centers at k*width (wrapping); cell histograms on a floor(H/cell) x
    floor(W/cell) grid (trailing pixels dropped); overlapping block x block
    cell groups at stride one cell, each L2-normalized as
    v / sqrt(sum(v^2) + norm_eps^2); blocks concatenated row-major, cells
    row-major within a block.  There is no intra-block spatial interpolation
    of votes.  All outputs are non-negative, so cosine similarities between
    these embeddings land in [0, 1].
    """

    def __init__(self, params: HogParams = HogParams()):
        self.params = params

    def _cells(self, height: int, width: int) -> tuple[int, int]:
        p = self.params
        cells_y, cells_x = height // p.cell, width // p.cell
        if cells_y < p.block or cells_x < p.block:
            raise ValueError(
                f"image {height}x{width} too small: need at least "
                f"{p.block * p.cell} pixels per side for {p.block}x{p.block} blocks "
                f"of {p.cell}-pixel cells"
            )
        return cells_y, cells_x

    def out_dim(self, height: int, width: int, channels: int) -> int:
        p = self.params
        cells_y, cells_x = self._cells(height, width)
        return (cells_y - p.block + 1) * (cells_x - p.block + 1) * p.block**2 * p.bins

    def batch(self, data: np.ndarray) -> np.ndarray:
        p = self.params
        data = _as_batch(data)
        B, H, W = data.shape[0], data.shape[1], data.shape[2]
        cells_y, cells_x = self._cells(H, W)
        gray = to_gray(data)

        padded = np.pad(gray, ((0, 0), (1, 1), (1, 1)), mode="edge")
        gx = padded[:, 1:-1, 2:] - padded[:, 1:-1, :-2]
        gy = padded[:, 2:, 1:-1] - padded[:, :-2, 1:-1]
        magnitude = np.hypot(gx, gy)
        period = 2.0 * np.pi if p.signed else np.pi
        angle = np.arctan2(gy, gx) % period

        bin_width = period / p.bins
        t = angle / bin_width
        k0 = np.floor(t).astype(np.intp)
        frac = t - k0
        k0 %= p.bins  # t == bins can occur from rounding at the period edge
        k1 = (k0 + 1) % p.bins

        # Crop to whole cells, then accumulate both votes per pixel into
        # (B, cells_y, cells_x, bins) histograms via flat bincounts.
        Hc, Wc = cells_y * p.cell, cells_x * p.cell
        magnitude = magnitude[:, :Hc, :Wc]
        k0 = k0[:, :Hc, :Wc]
        k1 = k1[:, :Hc, :Wc]
        frac = frac[:, :Hc, :Wc]

        b_idx = np.arange(B)[:, None, None]
        cy_idx = (np.arange(Hc) // p.cell)[None, :, None]
        cx_idx = (np.arange(Wc) // p.cell)[None, None, :]
        base = ((b_idx * cells_y + cy_idx) * cells_x + cx_idx) * p.bins
        size = B * cells_y * cells_x * p.bins
        hist = np.bincount(
            (base + k0).ravel(), weights=(magnitude * (1.0 - frac)).ravel(), minlength=size
        )
        hist += np.bincount(
            (base + k1).ravel(), weights=(magnitude * frac).ravel(), minlength=size
        )
        hist = hist.reshape(B, cells_y, cells_x, p.bins)

        by, bx = cells_y - p.block + 1, cells_x - p.block + 1
        blocks = np.concatenate(
            [
                hist[:, i : i + by, j : j + bx]
                for i in range(p.block)
                for j in range(p.block)
            ],
            axis=-1,
        )
        norms = np.sqrt(np.sum(blocks**2, axis=-1, keepdims=True) + p.norm_eps**2)
        return (blocks / norms).reshape(B, by * bx * p.block**2 * p.bins)

    def descriptor(self) -> str:
        p = self.params
        return (
            f"hog(cell={p.cell},block={p.block},bins={p.bins},"
            f"signed={p.signed},norm_eps={p.norm_eps!r})"
        )


def hog_descriptor(data: np.ndarray, params: HogParams = HogParams()) -> np.ndarray:
    """Descriptor of one (H, W, C) image; see :class:`HogExtractor`."""
    return HogExtractor(params)(data)


class DownsampleFlattenExtractor(Extractor):
    """Adaptive average pooling to a target grid, flattened row-major.

    Row/column boundaries are floor(i * H / pool_h), so pooling regions tile
    the image with near-equal sizes; with pool equal to the image size the
    extractor is an exact identity flatten.  The map is linear in the input.
    """

    is_linear = True

    def __init__(self, pool_h: int = 8, pool_w: int = 8):
        if pool_h < 1 or pool_w < 1:
            raise ValueError(f"pool grid must be positive, got {pool_h}x{pool_w}")
        self.pool_h = pool_h
        self.pool_w = pool_w

    def out_dim(self, height: int, width: int, channels: int) -> int:
        if height < self.pool_h or width < self.pool_w:
            raise ValueError(
                f"image {height}x{width} smaller than pool grid {self.pool_h}x{self.pool_w}"
            )
        return self.pool_h * self.pool_w * channels

    def batch(self, data: np.ndarray) -> np.ndarray:
        data = _as_batch(data)
        B, H, W, C = data.shape
        self.out_dim(H, W, C)
        ys = [(i * H) // self.pool_h for i in range(self.pool_h + 1)]
        xs = [(j * W) // self.pool_w for j in range(self.pool_w + 1)]
        out = np.empty((B, self.pool_h, self.pool_w, C), dtype=np.float64)
        for i in range(self.pool_h):
            rows = data[:, ys[i] : ys[i + 1]]
            for j in range(self.pool_w):
                out[:, i, j] = rows[:, :, xs[j] : xs[j + 1]].mean(axis=(1, 2))
        return out.reshape(B, -1)

    def descriptor(self) -> str:
        return f"downsample(pool={self.pool_h}x{self.pool_w})"


class LinearProjectionExtractor(Extractor):
    """Seeded random Gaussian projection of the flattened image.

    The (D, H*W*C) matrix is a pure function of (seed, input shape), so the
    gradient of the embedding is the matrix itself and can be recovered
    exactly by probing with single-pixel basis images.
    """

    is_linear = True

    _MATRIX_STREAM = 100  # private stream id: projection entries

    def __init__(self, out_dim_: int = 64, seed: int = 0):
        if out_dim_ < 1:
            raise ValueError(f"output dim must be positive, got {out_dim_}")
        self._dim = out_dim_
        self.seed = seed
        self._matrices: dict[tuple[int, int, int], np.ndarray] = {}

    def out_dim(self, height: int, width: int, channels: int) -> int:
        return self._dim

    def matrix(self, height: int, width: int, channels: int) -> np.ndarray:
        key = (height, width, channels)
        if key not in self._matrices:
            rng = seeded_rng(RngSpec(self.seed, self._MATRIX_STREAM), *key)
            self._matrices[key] = rng.standard_normal((self._dim, height * width * channels))
        return self._matrices[key]

    def batch(self, data: np.ndarray) -> np.ndarray:
        data = _as_batch(data)
        B, H, W, C = data.shape
        return data.reshape(B, H * W * C) @ self.matrix(H, W, C).T

    def descriptor(self) -> str:
        return f"linproj(dim={self._dim},seed={self.seed})"


# ---------------------------------------------------------------------------
# External extractor protocol client.
#
# All traffic is framed: a 4-byte little-endian unsigned payload length, then
# the payload.  The parent opens with a frame b"RLXP" + uint16 version (=1);
# the child answers b"RLXP" + uint16 version + uint32 embedding dim.  After
# the handshake each request frame holds one tensor and is answered by
# exactly one response frame holding one tensor.  Tensor payloads are:
# 1-byte dtype code (1 = float32 LE), 1-byte rank, rank x 4-byte LE dims,
# then row-major data.  Requests are (B, C, H, W); responses are (B, D).  A
# response payload whose first byte is 0 is an error report: the remaining
# bytes are a UTF-8 message (this code is otherwise an invalid dtype, so the
# two cannot collide).

PROTOCOL_MAGIC = b"RLXP"
PROTOCOL_VERSION = 1
WIRE_DTYPE_F32 = 1
WIRE_ERROR_CODE = 0


class ProtocolError(RuntimeError):
    pass


def pack_tensor(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    return (
        struct.pack("<BB", WIRE_DTYPE_F32, arr.ndim)
        + struct.pack(f"<{arr.ndim}I", *arr.shape)
        + arr.tobytes(order="C")
    )


def unpack_tensor(payload: bytes) -> np.ndarray:
    if len(payload) < 2:
        raise ProtocolError(f"tensor payload truncated at {len(payload)} bytes")
    dtype, rank = payload[0], payload[1]
    if dtype == WIRE_ERROR_CODE:
        raise ProtocolError(f"peer reported error: {payload[1:].decode('utf-8', 'replace')}")
    if dtype != WIRE_DTYPE_F32:
        raise ProtocolError(f"unsupported wire dtype code {dtype}")
    dims_end = 2 + 4 * rank
    if len(payload) < dims_end:
        raise ProtocolError("tensor dims truncated")
    dims = struct.unpack_from(f"<{rank}I", payload, 2)
    count = 1
    for d in dims:
        count *= d
    if len(payload) != dims_end + 4 * count:
        raise ProtocolError(
            f"tensor payload length {len(payload) - dims_end} != expected {4 * count} "
            f"for dims {dims}"
        )
    return np.frombuffer(payload, dtype="<f4", offset=dims_end).reshape(dims).copy()


class ExternalExtractor(Extractor):
    """Client for an embedding server child process.

    ``command`` is the child's argv.  The session is single-lane: requests
    and responses are strictly ordered, and parallelism comes from batching
    ``batch_size`` images per request.  Protocol failures (version mismatch,
    malformed frames, child death, timeout) raise :class:`ProtocolError`
    with the tail of the child's stderr attached when available.
    """

    def __init__(
        self,
        command: list[str],
        batch_size: int = 32,
        timeout: float = 60.0,
    ):
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        if timeout <= 0:
            raise ValueError(f"timeout must be positive, got {timeout}")
        self.command = list(command)
        self.batch_size = batch_size
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._dim: int | None = None

    # -- session management -------------------------------------------------

    def start(self) -> None:
        if self._proc is not None:
            return
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
        )
        try:
            self._send_frame(PROTOCOL_MAGIC + struct.pack("<H", PROTOCOL_VERSION))
            reply = self._recv_frame()
        except ProtocolError:
            self.close()
            raise
        if len(reply) != 10 or reply[:4] != PROTOCOL_MAGIC:
            self.close()
            raise ProtocolError(
                f"handshake magic mismatch: expected {PROTOCOL_MAGIC!r}, got {reply[:4]!r}"
            )
        (version,) = struct.unpack_from("<H", reply, 4)
        if version != PROTOCOL_VERSION:
            self.close()
            raise ProtocolError(
                f"handshake version mismatch: expected {PROTOCOL_VERSION}, got {version}"
            )
        (self._dim,) = struct.unpack_from("<I", reply, 6)
        if self._dim < 1:
            self.close()
            raise ProtocolError(f"peer announced invalid embedding dim {self._dim}")

    def close(self) -> None:
        if self._proc is None:
            return
        proc, self._proc = self._proc, None
        for stream in (proc.stdin, proc.stdout, proc.stderr):
            if stream is not None:
                try:
                    stream.close()
                except OSError:
                    pass
        if proc.poll() is None:
            proc.terminate()
            try:
                proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def __enter__(self) -> "ExternalExtractor":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- framing ------------------------------------------------------------

    def _stderr_tail(self, limit: int = 2000) -> str:
        proc = self._proc
        if proc is None or proc.stderr is None:
            return ""
        try:
            os.set_blocking(proc.stderr.fileno(), False)
            data = proc.stderr.read() or b""
        except (OSError, ValueError):
            return ""
        text = data.decode("utf-8", "replace").strip()
        return text[-limit:]

    def _fail(self, message: str) -> ProtocolError:
        tail = self._stderr_tail()
        self.close()
        if tail:
            message = f"{message}; child stderr: {tail}"
        return ProtocolError(message)

    def _send_frame(self, payload: bytes) -> None:
        assert self._proc is not None and self._proc.stdin is not None
        try:
            self._proc.stdin.write(struct.pack("<I", len(payload)) + payload)
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            raise self._fail("child closed its input pipe") from None

    def _read_exact(self, n: int, deadline: float) -> bytes:
        import time

        assert self._proc is not None and self._proc.stdout is not None
        fd = self._proc.stdout.fileno()
        chunks = []
        got = 0
        while got < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise self._fail(f"timeout after {self.timeout}s waiting for {n} bytes")
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                continue
            chunk = os.read(fd, n - got)
            if not chunk:
                raise self._fail(f"child closed the stream after {got} of {n} frame bytes")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _recv_frame(self) -> bytes:
        import time

        deadline = time.monotonic() + self.timeout
        header = self._read_exact(4, deadline)
        (length,) = struct.unpack("<I", header)
        return self._read_exact(length, deadline)

    # -- extractor interface --------------------------------------------------

    def out_dim(self, height: int, width: int, channels: int) -> int:
        self.start()
        assert self._dim is not None
        return self._dim

    def batch(self, data: np.ndarray) -> np.ndarray:
        self.start()
        data = _as_batch(data)
        outputs = []
        for start in range(0, data.shape[0], self.batch_size):
            chunk = data[start : start + self.batch_size]
            request = np.ascontiguousarray(np.moveaxis(chunk, 3, 1))  # (B, C, H, W)
            self._send_frame(pack_tensor(request))
            payload = self._recv_frame()
            try:
                response = unpack_tensor(payload)
            except ProtocolError as exc:
                raise self._fail(str(exc)) from None
            if response.ndim != 2 or response.shape[0] != chunk.shape[0]:
                raise self._fail(
                    f"expected response shape ({chunk.shape[0]}, D), got {response.shape}"
                )
            if response.shape[1] != self._dim:
                raise self._fail(
                    f"response dim {response.shape[1]} != handshake dim {self._dim}"
                )
            outputs.append(response.astype(np.float64))
        return np.concatenate(outputs, axis=0)

    def descriptor(self) -> str:
        return f"external(command={' '.join(self.command)!r},batch={self.batch_size})"
