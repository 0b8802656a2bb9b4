import os

import numpy as np
import pytest
from PIL import Image

from edrain.errors import UnsupportedFormat
from edrain.imageio import dequantize, load_image, quantize, save_image


class TestLoad:
    def test_gray_levels(self, tmp_path):
        path = tmp_path / "g.png"
        Image.fromarray(np.array([[0, 85], [170, 255]], dtype=np.uint8)).save(path)
        img = load_image(path)
        assert img.shape == (1, 2, 2)
        np.testing.assert_allclose(img[0].ravel(), [0.0, 1 / 3, 2 / 3, 1.0], atol=1e-6)

    def test_rgb_is_chw(self, tmp_path):
        arr = np.zeros((3, 4, 3), dtype=np.uint8)
        arr[..., 1] = 255
        Image.fromarray(arr).save(tmp_path / "c.png")
        img = load_image(tmp_path / "c.png")
        assert img.shape == (3, 3, 4)
        assert np.all(img[1] == 1.0) and not img[0].any()

    def test_rgba_drops_alpha(self, tmp_path):
        Image.fromarray(np.full((2, 2, 4), 51, dtype=np.uint8)).save(tmp_path / "a.png")
        assert load_image(tmp_path / "a.png").shape == (3, 2, 2)

    def test_sixteen_bit(self, tmp_path):
        Image.fromarray(np.full((4, 4), 40000, dtype=np.uint16)).save(tmp_path / "s.png")
        with pytest.raises(UnsupportedFormat, match="s.png"):
            load_image(tmp_path / "s.png")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "nope.png")

    def test_garbage(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not a png")
        with pytest.raises(OSError, match="bad.png"):
            load_image(tmp_path / "bad.png")


class TestSave:
    def test_round_trip_bound(self, tmp_path, rng):
        x = rng.random((3, 9, 11))
        save_image(tmp_path / "x.png", x)
        y = load_image(tmp_path / "x.png")
        assert np.max(np.abs(x - y)) <= 1 / 510 + 1e-12

    def test_gray_round_trip(self, tmp_path, rng):
        x = rng.random((1, 5, 5))
        save_image(tmp_path / "g.png", x)
        assert load_image(tmp_path / "g.png").shape == (1, 5, 5)

    def test_clamps(self, tmp_path):
        save_image(tmp_path / "c.png", np.array([[[-0.5, 1.5]]]))
        np.testing.assert_array_equal(load_image(tmp_path / "c.png")[0, 0], [0.0, 1.0])

    def test_round_half_up(self):
        np.testing.assert_array_equal(quantize(np.array([0.5 / 255, 1.5 / 255, 2.49 / 255])), [1, 2, 2])
        np.testing.assert_array_equal(dequantize(np.array([0, 255], dtype=np.uint8)), [0.0, 1.0])

    def test_no_partial_output(self, tmp_path):
        with pytest.raises(Exception):
            save_image(tmp_path / "bad.png", np.zeros((2, 2, 2, 2, 2)))
        assert os.listdir(tmp_path) == []

    def test_missing_dir(self, tmp_path):
        with pytest.raises(OSError):
            save_image(tmp_path / "no" / "x.png", np.zeros((1, 2, 2)))
