"""PGM/PPM codec round trips and header validation."""

import numpy as np
import pytest

from nightbev.core import Tensor3
from nightbev.formats import read_pgm, read_ppm, write_pgm, write_ppm


class TestPgm:
    def test_round_trip_bytes(self, tmp_path):
        rng = np.random.default_rng(3)
        plane = rng.integers(0, 256, size=(5, 7)).astype(np.float64) / 255.0
        path = tmp_path / "m.pgm"
        write_pgm(plane, path)
        back = read_pgm(path)
        assert back.shape == (1, 5, 7)
        write_pgm(back, tmp_path / "again.pgm")
        assert (tmp_path / "again.pgm").read_bytes() == path.read_bytes()

    def test_values_scaled_by_255(self, tmp_path):
        path = tmp_path / "m.pgm"
        write_pgm(np.full((2, 2), 0.5), path)
        back = read_pgm(path)
        assert back.data == pytest.approx(np.full((1, 2, 2), 128 / 255))

    def test_header_comments_skipped(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n# a comment\n2 1\n255\n\x00\xff")
        back = read_pgm(path)
        assert back.data[0, 0, 0] == 0.0
        assert back.data[0, 0, 1] == 1.0

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(ValueError, match="magic"):
            read_pgm(path)

    def test_non_8bit_rejected(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(ValueError, match="8-bit"):
            read_pgm(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n2 2\n255\n\x00")
        with pytest.raises(ValueError, match="truncated"):
            read_pgm(path)

    def test_multichannel_write_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="1 channel"):
            write_pgm(Tensor3.zeros(3, 2, 2), tmp_path / "m.pgm")

    def test_out_of_range_values_clamped(self, tmp_path):
        path = tmp_path / "m.pgm"
        write_pgm(np.array([[-0.5, 1.5]]), path)
        back = read_pgm(path)
        np.testing.assert_array_equal(back.data[0], [[0.0, 1.0]])


class TestPpm:
    def test_round_trip_bytes(self, tmp_path):
        rng = np.random.default_rng(5)
        img = Tensor3(rng.integers(0, 256, size=(3, 4, 6)).astype(np.float64) / 255.0)
        path = tmp_path / "i.ppm"
        write_ppm(img, path)
        back = read_ppm(path)
        assert back.shape == (3, 4, 6)
        write_ppm(back, tmp_path / "again.ppm")
        assert (tmp_path / "again.ppm").read_bytes() == path.read_bytes()

    def test_channel_layout(self, tmp_path):
        img = np.zeros((3, 1, 2))
        img[0, 0, 0] = 1.0  # red in the first pixel
        img[2, 0, 1] = 1.0  # blue in the second
        path = tmp_path / "i.ppm"
        write_ppm(Tensor3(img), path)
        payload = path.read_bytes().split(b"\n", 3)[3]
        assert payload == bytes([255, 0, 0, 0, 0, 255])

    def test_wrong_channel_count_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="3 channels"):
            write_ppm(Tensor3.zeros(1, 2, 2), tmp_path / "i.ppm")
