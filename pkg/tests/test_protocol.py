import struct

import numpy as np
import pytest

from relax.extractors import (
    PROTOCOL_MAGIC,
    PROTOCOL_VERSION,
    ExternalExtractor,
    ProtocolError,
    pack_tensor,
    unpack_tensor,
)


class TestTensorWire:
    def test_pack_layout(self):
        arr = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        payload = pack_tensor(arr)
        assert payload[0] == 1  # dtype code f32
        assert payload[1] == 2  # rank
        assert struct.unpack_from("<2I", payload, 2) == (2, 2)
        assert payload[10:] == arr.tobytes()

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        for shape in [(3,), (2, 5), (1, 3, 4, 4), (2, 1, 1)]:
            arr = rng.standard_normal(shape).astype(np.float32)
            out = unpack_tensor(pack_tensor(arr))
            assert out.shape == arr.shape
            assert np.array_equal(out.view(np.uint32), arr.view(np.uint32))

    def test_error_frame_decodes_as_exception(self):
        with pytest.raises(ProtocolError, match="wired a failure"):
            unpack_tensor(b"\x00" + "wired a failure".encode())

    def test_bad_dtype(self):
        with pytest.raises(ProtocolError, match="dtype"):
            unpack_tensor(bytes([7, 1]) + struct.pack("<I", 0))

    def test_truncated(self):
        payload = pack_tensor(np.ones((2, 2), dtype=np.float32))
        with pytest.raises(ProtocolError, match="truncated|expected"):
            unpack_tensor(payload[:-3])
        with pytest.raises(ProtocolError, match="truncated"):
            unpack_tensor(payload[:1])
        with pytest.raises(ProtocolError, match="dims truncated"):
            unpack_tensor(payload[:5])


class TestExternalSession:
    def test_identity_round_trip(self, child_command):
        data = np.arange(4, dtype=np.float64).reshape(1, 2, 2, 1) / 10.0
        with ExternalExtractor(child_command("identity", dim=4)) as ex:
            assert ex.out_dim(2, 2, 1) == 4
            emb = ex.batch(data)
        # child flattens the (C, H, W) request per image: same order as (H, W)
        assert emb.shape == (1, 4)
        assert np.allclose(emb[0], data.reshape(-1), atol=1e-7)

    def test_multi_batch_ordering(self, child_command):
        rng = np.random.default_rng(3)
        data = rng.random((7, 2, 2, 1))
        with ExternalExtractor(child_command("identity", dim=4), batch_size=3) as ex:
            emb = ex.batch(data)
        assert emb.shape == (7, 4)
        assert np.allclose(emb, data.reshape(7, 4), atol=1e-7)

    def test_channels_first_on_wire(self, child_command):
        # identity child flattens (C, H, W); with C=2 the channel planes come
        # out separated, proving the parent sent channels-first data
        data = np.zeros((1, 2, 2, 2))
        data[0, :, :, 0] = 0.25
        data[0, :, :, 1] = 0.75
        with ExternalExtractor(child_command("identity", dim=8)) as ex:
            emb = ex.batch(data)
        assert np.allclose(emb[0][:4], 0.25, atol=1e-7)
        assert np.allclose(emb[0][4:], 0.75, atol=1e-7)

    def test_bad_magic(self, child_command):
        ex = ExternalExtractor(child_command("bad-magic"))
        with pytest.raises(ProtocolError, match="magic"):
            ex.start()

    def test_wrong_version(self, child_command):
        ex = ExternalExtractor(child_command("wrong-version"))
        with pytest.raises(ProtocolError, match="version"):
            ex.start()

    def test_child_death_reports_stderr(self, child_command):
        ex = ExternalExtractor(child_command("die", dim=4))
        with pytest.raises(ProtocolError, match="child exploding"):
            ex.batch(np.zeros((1, 2, 2, 1)))

    def test_truncated_frame(self, child_command):
        ex = ExternalExtractor(child_command("truncate", dim=4))
        with pytest.raises(ProtocolError, match="closed the stream"):
            ex.batch(np.zeros((1, 2, 2, 1)))

    def test_timeout(self, child_command):
        ex = ExternalExtractor(child_command("slow", dim=4), timeout=0.5)
        with pytest.raises(ProtocolError, match="timeout"):
            ex.batch(np.zeros((1, 2, 2, 1)))

    def test_error_frame(self, child_command):
        ex = ExternalExtractor(child_command("error-frame", dim=4))
        with pytest.raises(ProtocolError, match="synthetic failure"):
            ex.batch(np.zeros((1, 2, 2, 1)))

    def test_wrong_shape_rejected(self, child_command):
        ex = ExternalExtractor(child_command("wrong-shape", dim=4))
        with pytest.raises(ProtocolError, match="shape"):
            ex.batch(np.zeros((1, 2, 2, 1)))

    def test_close_idempotent(self, child_command):
        ex = ExternalExtractor(child_command("identity", dim=4))
        ex.start()
        ex.close()
        ex.close()

    def test_restart_after_close(self, child_command):
        ex = ExternalExtractor(child_command("identity", dim=4))
        with ex:
            first = ex.batch(np.full((1, 2, 2, 1), 0.5))
        with ex:
            second = ex.batch(np.full((1, 2, 2, 1), 0.5))
        assert np.array_equal(first, second)

    def test_handshake_constants(self):
        assert PROTOCOL_MAGIC == b"RLXP"
        assert PROTOCOL_VERSION == 1
