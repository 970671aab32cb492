import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsrlab.videocore import (
    VideoError,
    VideoTensor,
    degrade,
    gaussian_kernel,
    load_video,
    rgb_to_y,
    save_video,
)


def rand_video(rng, t, h, w, c=3):
    return VideoTensor(rng.random((t, h, w, c)))


class TestVideoTensor:
    def test_rejects_out_of_range(self):
        with pytest.raises(VideoError, match="outside"):
            VideoTensor(np.full((1, 2, 2, 3), 1.5))

    def test_rejects_bad_channels(self):
        with pytest.raises(VideoError, match="channel"):
            VideoTensor(np.zeros((1, 2, 2, 2)))

    def test_properties(self):
        v = VideoTensor(np.zeros((5, 4, 6, 3)))
        assert (v.frame_count, v.height, v.width, v.channels) == (5, 4, 6, 3)


class TestSaveLoadRoundTrip:
    def test_round_trip_quantization_bound(self, tmp_path):
        rng = np.random.default_rng(0)
        v = rand_video(rng, 4, 12, 10)
        save_video(v, tmp_path / "v")
        back = load_video(tmp_path / "v")
        assert back.data.shape == v.data.shape
        assert np.abs(back.data - v.data).max() <= 1.0 / 510.0 + 1e-12

    def test_zeros_gives_black_frames(self, tmp_path):
        save_video(VideoTensor(np.zeros((2, 6, 6, 3))), tmp_path / "v")
        back = load_video(tmp_path / "v")
        assert np.all(back.data == 0.0)

    def test_zero_padded_numeric_names(self, tmp_path):
        paths = save_video(VideoTensor(np.zeros((100, 4, 4, 3))), tmp_path / "v")
        names = [p.name for p in paths]
        assert len(names) == 100
        assert names[0] == "00000000.png"
        assert names[99] == "00000099.png"
        assert names == sorted(names)

    def test_load_paper_resolution(self, tmp_path):
        # 720x1280 RGB frames load to [T, 720, 1280, 3]
        v = VideoTensor(np.zeros((2, 720, 1280, 3)))
        save_video(v, tmp_path / "v")
        assert load_video(tmp_path / "v").data.shape == (2, 720, 1280, 3)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(VideoError, match="does not exist"):
            load_video(tmp_path / "nope")

    def test_mixed_dimensions_reports_filename(self, tmp_path):
        from PIL import Image

        d = tmp_path / "v"
        d.mkdir()
        Image.new("RGB", (8, 8)).save(d / "00000000.png")
        Image.new("RGB", (9, 8)).save(d / "00000001.png")
        with pytest.raises(VideoError, match="00000001.png"):
            load_video(d)

    def test_undecodable_reports_filename(self, tmp_path):
        from PIL import Image

        d = tmp_path / "v"
        d.mkdir()
        Image.new("RGB", (8, 8)).save(d / "00000000.png")
        (d / "00000001.png").write_bytes(b"not a png")
        with pytest.raises(VideoError, match="00000001.png"):
            load_video(d)


def dense_gaussian_blur(frame: np.ndarray, sigma: float) -> np.ndarray:
    """Independent oracle: direct dense 2-D convolution with symmetric
    (edge-including) reflection padding."""
    k1 = gaussian_kernel(sigma)
    kernel = np.outer(k1, k1)
    r = (len(k1) - 1) // 2
    out = np.zeros_like(frame)
    padded = np.pad(frame, ((r, r), (r, r), (0, 0)), mode="symmetric")
    h, w, c = frame.shape
    for y in range(h):
        for x in range(w):
            patch = padded[y:y + 2 * r + 1, x:x + 2 * r + 1, :]
            out[y, x] = np.tensordot(kernel, patch, axes=([0, 1], [0, 1]))
    return out


class TestDegrade:
    def test_shape_x4(self):
        v = VideoTensor(np.zeros((1, 64, 64, 3)))
        assert degrade(v, 1.5, 4).data.shape == (1, 16, 16, 3)

    def test_constant_frame_stays_constant(self):
        v = VideoTensor(np.full((2, 16, 16, 3), 0.37))
        out = degrade(v, 1.5, 4)
        assert np.allclose(out.data, 0.37, atol=1e-12)
        assert out.data.shape == (2, 4, 4, 3)

    def test_impulse_matches_dense_convolution_oracle(self):
        frame = np.zeros((24, 24, 3))
        frame[11, 13, :] = 1.0
        expected = dense_gaussian_blur(frame, 1.5)[::4, ::4, :]
        got = degrade(VideoTensor(frame[None]), 1.5, 4).data[0]
        assert np.abs(got - expected).max() <= 1e-6

    def test_non_divisible_dims_error(self):
        with pytest.raises(VideoError, match="divisible"):
            degrade(VideoTensor(np.zeros((1, 30, 32, 3))), 1.5, 4)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_linearity(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.random((2, 16, 16, 3))
        y = rng.random((2, 16, 16, 3))
        a, b = 0.3, 0.45
        lhs = degrade(VideoTensor(a * x + b * y), 1.5, 4).data
        rhs = a * degrade(VideoTensor(x), 1.5, 4).data + b * degrade(VideoTensor(y), 1.5, 4).data
        assert np.abs(lhs - rhs).max() <= 1e-9

    def test_commutes_with_temporal_concat(self):
        rng = np.random.default_rng(1)
        x = rng.random((2, 16, 16, 3))
        y = rng.random((3, 16, 16, 3))
        joined = degrade(VideoTensor(np.concatenate([x, y])), 1.5, 4).data
        parts = np.concatenate([
            degrade(VideoTensor(x), 1.5, 4).data,
            degrade(VideoTensor(y), 1.5, 4).data,
        ])
        assert np.array_equal(joined, parts)

    def test_kernel_radius_and_normalization(self):
        k = gaussian_kernel(1.5)
        assert len(k) == 2 * 5 + 1  # ceil(3 * 1.5) = 5
        assert abs(k.sum() - 1.0) < 1e-12


class TestRgbToY:
    def test_black(self):
        y = rgb_to_y(np.zeros((2, 2, 3)))
        assert y.shape == (2, 2, 1)
        assert np.allclose(y, 16.0 / 255.0, atol=1e-12)

    def test_white(self):
        y = rgb_to_y(np.ones((2, 2, 3)))
        assert np.allclose(y, 235.0 / 255.0, atol=1e-12)

    def test_wrong_channel_count(self):
        with pytest.raises(VideoError, match="RGB"):
            rgb_to_y(np.zeros((2, 2, 1)))
