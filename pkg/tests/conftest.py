"""Shared fixtures: a scripted protocol child for external-extractor tests.

The child script implements the wire protocol independently with struct so
the tests exercise the documented byte layout, not the package's own
pack/unpack helpers talking to themselves.
"""

import sys

import pytest

CHILD_SOURCE = r'''
import struct
import sys
import time

import numpy as np

KIND = sys.argv[1]
DIM = int(sys.argv[2]) if len(sys.argv) > 2 else 4

stdin = sys.stdin.buffer
stdout = sys.stdout.buffer


def read_exact(n):
    buf = b""
    while len(buf) < n:
        chunk = stdin.read(n - len(buf))
        if not chunk:
            sys.exit(3)
        buf += chunk
    return buf


def read_frame():
    (length,) = struct.unpack("<I", read_exact(4))
    return read_exact(length)


def write_frame(payload):
    stdout.write(struct.pack("<I", len(payload)))
    stdout.write(payload)
    stdout.flush()


hello = read_frame()
assert hello[:4] == b"RLXP", hello
(version,) = struct.unpack("<H", hello[4:6])

if KIND == "bad-magic":
    write_frame(b"XXXP" + struct.pack("<HI", version, DIM))
    sys.exit(0)
if KIND == "wrong-version":
    write_frame(b"RLXP" + struct.pack("<HI", 99, DIM))
    sys.exit(0)

write_frame(b"RLXP" + struct.pack("<HI", version, DIM))

while True:
    payload = read_frame()
    dtype = payload[0]
    rank = payload[1]
    assert dtype == 1, dtype
    dims = struct.unpack("<" + "I" * rank, payload[2 : 2 + 4 * rank])
    data = np.frombuffer(payload[2 + 4 * rank :], dtype="<f4").reshape(dims)
    batch = dims[0]

    if KIND == "die":
        print("child exploding now", file=sys.stderr, flush=True)
        sys.exit(7)
    if KIND == "truncate":
        stdout.write(struct.pack("<I", 100))
        stdout.write(b"\x01short")
        stdout.flush()
        sys.exit(0)
    if KIND == "slow":
        time.sleep(5.0)
    if KIND == "error-frame":
        write_frame(b"\x00" + b"synthetic failure for testing")
        continue
    if KIND == "wrong-shape":
        out = np.zeros((batch + 1, DIM), dtype="<f4")
    else:  # identity: flatten CHW and keep the first DIM values
        flat = data.reshape(batch, -1)
        if flat.shape[1] < DIM:
            raise SystemExit("batch feature size below DIM")
        out = np.ascontiguousarray(flat[:, :DIM], dtype="<f4")
    header = bytes([1, 2]) + struct.pack("<II", out.shape[0], out.shape[1])
    write_frame(header + out.tobytes())
'''


@pytest.fixture(scope="session")
def child_command(tmp_path_factory):
    """Factory: (kind, dim) -> argv list for a protocol child subprocess."""
    script = tmp_path_factory.mktemp("protochild") / "child.py"
    script.write_text(CHILD_SOURCE)

    def make(kind: str, dim: int = 4) -> list[str]:
        return [sys.executable, str(script), kind, str(dim)]

    return make
