import os
import struct

import numpy as np
import pytest

from relax.core import Image
from relax.formats import (
    NetpbmError,
    TensorFormatError,
    atomic_write_bytes,
    heatmap_rgb,
    load_image,
    netpbm_from_bytes,
    netpbm_to_bytes,
    read_netpbm,
    read_tensor,
    render_heatmap,
    save_image,
    tensor_from_bytes,
    tensor_to_bytes,
    write_netpbm,
    write_tensor,
)


def hand_tensor_bytes(array: np.ndarray) -> bytes:
    """Independent byte-level encoding straight from the format description."""
    arr = np.asarray(array, dtype="<f4")
    out = b"RLXT"
    out += struct.pack("<H", 1)
    out += bytes([1, arr.ndim])
    for d in arr.shape:
        out += struct.pack("<I", d)
    out += arr.tobytes(order="C")
    return out


class TestTensorFormat:
    def test_exact_byte_layout(self):
        arr = np.array([[1.5, -2.0]], dtype=np.float32)
        assert tensor_to_bytes(arr) == hand_tensor_bytes(arr)

    def test_round_trip_bitwise(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            rank = int(rng.integers(1, 5))
            dims = tuple(int(d) for d in rng.integers(1, 6, size=rank))
            arr = rng.standard_normal(dims).astype(np.float32)
            back = tensor_from_bytes(tensor_to_bytes(arr))
            assert back.dtype == np.float32
            assert back.shape == arr.shape
            assert np.array_equal(
                back.view(np.uint32), arr.view(np.uint32)
            ), "round trip must be bit-exact"

    def test_nan_payload_round_trips(self):
        arr = np.array([np.nan, np.inf, -0.0], dtype=np.float32)
        back = tensor_from_bytes(tensor_to_bytes(arr))
        assert np.array_equal(back.view(np.uint32), arr.view(np.uint32))

    def test_named_error_magic(self):
        data = hand_tensor_bytes(np.zeros(2, dtype=np.float32))
        with pytest.raises(TensorFormatError) as err:
            tensor_from_bytes(b"XXXX" + data[4:])
        assert err.value.field == "magic"

    def test_named_error_version(self):
        data = bytearray(hand_tensor_bytes(np.zeros(2, dtype=np.float32)))
        data[4:6] = struct.pack("<H", 9)
        with pytest.raises(TensorFormatError) as err:
            tensor_from_bytes(bytes(data))
        assert err.value.field == "version"

    def test_named_error_dtype(self):
        data = bytearray(hand_tensor_bytes(np.zeros(2, dtype=np.float32)))
        data[6] = 7
        with pytest.raises(TensorFormatError) as err:
            tensor_from_bytes(bytes(data))
        assert err.value.field == "dtype"

    def test_named_error_rank(self):
        data = bytearray(hand_tensor_bytes(np.zeros(2, dtype=np.float32)))
        data[7] = 0
        with pytest.raises(TensorFormatError) as err:
            tensor_from_bytes(bytes(data))
        assert err.value.field == "rank"
        data[7] = 9
        with pytest.raises(TensorFormatError) as err:
            tensor_from_bytes(bytes(data))
        assert err.value.field == "rank"

    def test_named_error_dims_truncated(self):
        data = hand_tensor_bytes(np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(TensorFormatError) as err:
            tensor_from_bytes(data[:10])
        assert err.value.field == "dims"

    def test_named_error_payload_truncated(self):
        data = hand_tensor_bytes(np.zeros(4, dtype=np.float32))
        with pytest.raises(TensorFormatError) as err:
            tensor_from_bytes(data[:-4])
        assert err.value.field == "payload length"

    def test_named_error_payload_trailing(self):
        data = hand_tensor_bytes(np.zeros(4, dtype=np.float32))
        with pytest.raises(TensorFormatError) as err:
            tensor_from_bytes(data + b"junk")
        assert err.value.field == "payload length"

    def test_file_round_trip(self, tmp_path):
        arr = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
        path = tmp_path / "grid.rlxt"
        write_tensor(path, arr)
        assert np.array_equal(read_tensor(path), arr)

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        path = tmp_path / "out.bin"
        atomic_write_bytes(str(path), b"payload")
        assert path.read_bytes() == b"payload"
        assert os.listdir(tmp_path) == ["out.bin"]

    def test_failed_write_leaves_nothing(self, tmp_path, monkeypatch):
        path = tmp_path / "out.bin"

        def boom(src, dst):
            raise OSError("disk full")

        monkeypatch.setattr(os, "replace", boom)
        with pytest.raises(OSError):
            atomic_write_bytes(str(path), b"payload")
        monkeypatch.undo()
        assert os.listdir(tmp_path) == []


class TestNetpbm:
    def test_pgm_round_trip(self, tmp_path):
        arr = np.arange(12, dtype=np.uint8).reshape(3, 4)
        path = tmp_path / "a.pgm"
        write_netpbm(path, arr)
        assert np.array_equal(read_netpbm(path), arr)

    def test_ppm_round_trip(self):
        arr = np.arange(24, dtype=np.uint8).reshape(2, 4, 3)
        assert np.array_equal(netpbm_from_bytes(netpbm_to_bytes(arr)), arr)

    def test_header_with_comments_and_whitespace(self):
        pixels = bytes(range(6))
        raw = b"P5\n# comment line\n  3 # trailing\n2\n255\n" + pixels
        arr = netpbm_from_bytes(raw)
        assert arr.shape == (2, 3)
        assert arr.tobytes() == pixels

    def test_bad_magic(self):
        with pytest.raises(NetpbmError, match="magic"):
            netpbm_from_bytes(b"P3\n1 1\n255\n0")

    def test_bad_maxval(self):
        with pytest.raises(NetpbmError, match="maxval"):
            netpbm_from_bytes(b"P5\n1 1\n65535\n\x00\x00")

    def test_payload_length_checked(self):
        with pytest.raises(NetpbmError, match="length"):
            netpbm_from_bytes(b"P5\n2 2\n255\n\x00\x00\x00")

    def test_uint8_required(self):
        with pytest.raises(NetpbmError, match="uint8"):
            netpbm_to_bytes(np.zeros((2, 2), dtype=np.float32))

    def test_image_save_load_quantized(self, tmp_path):
        img = Image(np.linspace(0, 1, 24, dtype=np.float32).reshape(2, 4, 3))
        path = tmp_path / "img.ppm"
        save_image(path, img)
        back = load_image(path)
        quantized = np.rint(img.data.astype(np.float64) * 255.0) / 255.0
        assert np.allclose(back.data, quantized, atol=1e-7)
        save_image(tmp_path / "round2.ppm", back)
        assert (tmp_path / "round2.ppm").read_bytes() == path.read_bytes()


class TestHeatmap:
    def test_anchor_colors(self):
        rgb = heatmap_rgb(np.array([[0.0, 1.0]]))
        assert tuple(rgb[0, 0]) == (0, 0, 255)
        assert tuple(rgb[0, 1]) == (255, 0, 0)

    def test_midpoint_white(self):
        rgb = heatmap_rgb(np.array([[0.0, 0.5, 1.0]]))
        assert tuple(rgb[0, 1]) == (255, 255, 255)

    def test_constant_grid_white(self):
        rgb = heatmap_rgb(np.full((3, 3), 7.25))
        assert (rgb == 255).all()

    def test_normalization_invariance(self):
        grid = np.random.default_rng(1).random((5, 6))
        assert np.array_equal(heatmap_rgb(grid), heatmap_rgb(5.0 * grid + 2.0))

    def test_nan_renders_low_anchor(self):
        rgb = heatmap_rgb(np.array([[np.nan, 0.0, 1.0]]))
        assert tuple(rgb[0, 0]) == (0, 0, 255)

    def test_overlay_blend(self):
        base = np.full((1, 2, 3), 100, dtype=np.uint8)
        rgb = heatmap_rgb(np.array([[0.0, 1.0]]), overlay=base)
        assert tuple(rgb[0, 0]) == (50, 50, 178)  # 0.5*(0,0,255)+0.5*100
        assert tuple(rgb[0, 1]) == (178, 50, 50)

    def test_overlay_shape_checked(self):
        with pytest.raises(ValueError, match="shape"):
            heatmap_rgb(np.zeros((2, 2)), overlay=np.zeros((3, 3), dtype=np.uint8))

    def test_render_writes_valid_ppm(self, tmp_path):
        grid = np.array([[0.0, 1.0], [0.25, 0.75]])
        path = tmp_path / "h.ppm"
        rgb = render_heatmap(path, grid)
        assert np.array_equal(read_netpbm(path), rgb)
