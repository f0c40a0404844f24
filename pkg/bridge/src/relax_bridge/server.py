"""Reference embedding server for the external-extractor wire protocol.

Frames are a 4-byte little-endian unsigned length followed by the payload,
over this process's standard input and output.  The parent opens with
``b"RLXP"`` plus a 2-byte version; the server replies ``b"RLXP"``, the
version, and a 4-byte embedding length D, then answers each float32
``(B, C, H, W)`` tensor frame with a float32 ``(B, D)`` tensor frame,
flushing after every response.  Tensor payloads carry a 1-byte dtype code
(1 = little-endian float32), a rank byte, rank 4-byte dims, then row-major
data; a payload whose first byte is 0 is an error frame with UTF-8 text.

Identity mode echoes each image as its flattened pixel vector.  Because the
handshake announces D before any request arrives, identity mode takes D from
the ``--dim`` startup flag.  Model mode loads a TorchScript encoder instead;
the import is lazy so the package itself needs no ML runtime.

Everything here is standard library on purpose: the module doubles as an
executable description of the protocol for third-party servers.
"""

from __future__ import annotations

import argparse
import struct
import sys

MAGIC = b"RLXP"
VERSION = 1
DTYPE_F32 = 1
ERROR_CODE = 0

_HEADER = struct.Struct("<I")
_VERSION_FIELD = struct.Struct("<H")


class FrameError(Exception):
    """Protocol violation by the peer; answered with an error frame, exit 2."""


def read_exact(stream, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise EOFError(f"stream closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(stream) -> bytes | None:
    """Payload of the next frame, or None on clean end-of-stream."""
    first = stream.read(1)
    if not first:
        return None
    header = first + read_exact(stream, 3)
    (length,) = _HEADER.unpack(header)
    return read_exact(stream, length)


def write_frame(stream, payload: bytes) -> None:
    stream.write(_HEADER.pack(len(payload)) + payload)
    stream.flush()


def write_error(stream, message: str) -> None:
    try:
        write_frame(stream, bytes([ERROR_CODE]) + message.encode("utf-8"))
    except (BrokenPipeError, OSError):
        pass  # parent already gone; the exit code still reports the failure


def parse_request(payload: bytes) -> tuple[tuple[int, int, int, int], bytes]:
    """Dims and raw data of a (B, C, H, W) float32 request frame."""
    if len(payload) < 2:
        raise FrameError(f"request truncated at {len(payload)} bytes")
    if payload[0] == ERROR_CODE:
        raise FrameError("peer sent an error frame as a request")
    if payload[0] != DTYPE_F32:
        raise FrameError(f"unsupported wire dtype code {payload[0]}")
    rank = payload[1]
    if rank != 4:
        raise FrameError(f"expected rank 4 (B, C, H, W), got rank {rank}")
    dims_end = 2 + 4 * rank
    if len(payload) < dims_end:
        raise FrameError("request dims truncated")
    dims = struct.unpack_from("<4I", payload, 2)
    count = dims[0] * dims[1] * dims[2] * dims[3]
    data = payload[dims_end:]
    if len(data) != 4 * count:
        raise FrameError(
            f"request payload length {len(data)} != expected {4 * count} for dims {dims}"
        )
    return dims, data


class IdentityResponder:
    """Echo each image as its flattened float32 vector (D = C*H*W)."""

    def __init__(self, dim: int | None):
        if dim is None:
            raise RuntimeError(
                "identity mode requires --dim: the handshake announces the "
                "embedding length before any request arrives"
            )
        if dim < 1:
            raise RuntimeError(f"--dim must be positive, got {dim}")
        self.dim = dim

    def respond(self, dims: tuple[int, int, int, int], data: bytes) -> bytes:
        batch, channels, height, width = dims
        flat = channels * height * width
        if flat != self.dim:
            raise FrameError(
                f"request images flatten to {flat} values, announced dim is {self.dim}"
            )
        return struct.pack("<BBII", DTYPE_F32, 2, batch, self.dim) + data


class ModelResponder:
    """Run a TorchScript encoder on each batch; rows are flattened outputs.

    D comes from the encoder's ``out_dim`` attribute, or from ``--dim`` when
    the attribute is absent.  Any load problem aborts before the handshake.
    """

    def __init__(self, path: str, dim_override: int | None):
        try:
            import torch
        except ImportError as exc:
            raise RuntimeError(f"model mode needs torch installed: {exc}") from exc
        self._torch = torch
        try:
            self.model = torch.jit.load(path, map_location="cpu")
        except Exception as exc:
            raise RuntimeError(f"cannot load encoder {path!r}: {exc}") from exc
        self.model.eval()
        dim = dim_override if dim_override is not None else getattr(self.model, "out_dim", None)
        if dim is None:
            raise RuntimeError("encoder announces no out_dim; pass --dim")
        if int(dim) < 1:
            raise RuntimeError(f"embedding dim must be positive, got {dim}")
        self.dim = int(dim)

    def respond(self, dims: tuple[int, int, int, int], data: bytes) -> bytes:
        torch = self._torch
        batch, channels, height, width = dims
        flat = torch.frombuffer(bytearray(data), dtype=torch.float32)
        images = flat.reshape(batch, channels, height, width)
        with torch.no_grad():
            out = self.model(images)
        out = out.detach().to(torch.float32).reshape(batch, -1).contiguous()
        if out.shape[1] != self.dim:
            raise FrameError(
                f"encoder produced dim {out.shape[1]}, announced {self.dim}"
            )
        values = out.reshape(-1).tolist()
        header = struct.pack("<BBII", DTYPE_F32, 2, batch, self.dim)
        return header + struct.pack(f"<{len(values)}f", *values)


def _make_responder(args: argparse.Namespace):
    if args.mode == "identity":
        return IdentityResponder(args.dim)
    if not args.model:
        raise RuntimeError("model mode requires --model")
    return ModelResponder(args.model, args.dim)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="relax-bridge", description=__doc__.splitlines()[0]
    )
    parser.add_argument(
        "--mode", choices=("identity", "model"), default="identity",
        help="identity echoes flattened images; model runs a TorchScript encoder",
    )
    parser.add_argument("--dim", type=int, help="embedding length (identity mode)")
    parser.add_argument("--model", help="TorchScript encoder path (model mode)")
    args = parser.parse_args(argv)

    stdin = sys.stdin.buffer
    stdout = sys.stdout.buffer

    try:
        responder = _make_responder(args)
    except RuntimeError as exc:
        print(f"relax-bridge: {exc}", file=sys.stderr)
        return 2

    try:
        hello = read_frame(stdin)
    except EOFError as exc:
        print(f"relax-bridge: {exc}", file=sys.stderr)
        return 2
    if hello is None:
        return 0
    if len(hello) != 6 or hello[:4] != MAGIC:
        message = f"handshake magic mismatch: got {hello[:6]!r}"
        write_error(stdout, message)
        print(f"relax-bridge: {message}", file=sys.stderr)
        return 2
    (version,) = _VERSION_FIELD.unpack_from(hello, 4)
    if version != VERSION:
        message = f"unsupported protocol version {version}, this server speaks {VERSION}"
        write_error(stdout, message)
        print(f"relax-bridge: {message}", file=sys.stderr)
        return 2
    write_frame(
        stdout, MAGIC + _VERSION_FIELD.pack(VERSION) + struct.pack("<I", responder.dim)
    )

    while True:
        try:
            payload = read_frame(stdin)
        except EOFError as exc:
            print(f"relax-bridge: {exc}", file=sys.stderr)
            return 2
        if payload is None:
            return 0
        try:
            response = responder.respond(*parse_request(payload))
        except FrameError as exc:
            write_error(stdout, str(exc))
            print(f"relax-bridge: {exc}", file=sys.stderr)
            return 2
        try:
            write_frame(stdout, response)
        except (BrokenPipeError, OSError):
            return 2


if __name__ == "__main__":
    sys.exit(main())
