"""CAM extraction, normalization conventions and overlay rendering."""

from __future__ import annotations

import numpy as np
import pytest

from iconoforge.explain import (
    CamMap,
    colormap,
    compute_cam,
    read_raw_map,
    render_overlay,
    write_raw_map,
)
from iconoforge.model import ModelConfig, Prediction, build_model, predict

from conftest import TEST_STATS


def _prediction(maps: np.ndarray, input_size: int = 64) -> Prediction:
    maps = maps.astype(np.float32)
    means = maps.mean(axis=(1, 2)).astype(np.float64)
    scores = 1.0 / (1.0 + np.exp(-means))
    return Prediction(record_id="r", class_maps=maps, scores=scores,
                      predicted=None, threshold=0.5, input_size=input_size)


class TestComputeCam:
    def test_constant_map_flat_half(self):
        maps = np.full((10, 4, 4), 2.5)
        cam = compute_cam(_prediction(maps), "11F")
        assert np.allclose(cam.upsampled, 0.5)

    def test_single_peak_location(self):
        maps = np.zeros((10, 8, 8))
        maps[0, 2, 5] = 10.0
        cam = compute_cam(_prediction(maps, input_size=64),
                          "11H(ANTONY OF PADUA)")
        x, y = cam.peak_location
        # peak within one upsampling cell (64/8 = 8 px) of the raw argmax
        assert abs(x - (5 + 0.5) * 8) <= 8
        assert abs(y - (2 + 0.5) * 8) <= 8
        assert cam.upsampled.max() == 1.0
        assert cam.upsampled.min() == 0.0

    def test_mean_equals_presigmoid_logit(self, tiny_weights):
        config = ModelConfig(backbone="tiny", weights_source=str(tiny_weights),
                             input_size=96, channel_stats=TEST_STATS,
                             head_lr=0.5, backbone_lr=0.05)
        model = build_model(config)
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(96, 96, 3), dtype=np.uint8)
        prediction = predict(model, img)
        for code, idx in model.class_index_map.items():
            cam = compute_cam(prediction, code)
            logit = float(cam.raw_map.astype(np.float64).mean())
            expected = 1.0 / (1.0 + np.exp(-logit))
            assert abs(expected - prediction.scores[idx]) < 1e-6

    def test_unknown_class_error(self):
        with pytest.raises(KeyError):
            compute_cam(_prediction(np.zeros((10, 4, 4))), "11H(NOBODY)")

    def test_flip_equivariance(self):
        rng = np.random.default_rng(5)
        maps = rng.standard_normal((10, 6, 6))
        cam = compute_cam(_prediction(maps, input_size=96), "11F")
        flipped_maps = maps[:, :, ::-1].copy()
        cam_flipped = compute_cam(_prediction(flipped_maps, input_size=96),
                                  "11F")
        assert np.abs(cam_flipped.upsampled
                      - cam.upsampled[:, ::-1]).max() < 1e-3

    def test_tie_breaks_smallest_row_major(self):
        maps = np.zeros((10, 4, 4))
        maps[9, 1, 1] = 5.0
        maps[9, 2, 2] = 5.0
        cam = compute_cam(_prediction(maps, input_size=8), "11F")
        flat = cam.upsampled.argmax()
        assert flat == np.flatnonzero(
            cam.upsampled == cam.upsampled.max())[0]


class TestRenderOverlay:
    def _cam(self, side=64):
        up = np.linspace(0, 1, side * side, dtype=np.float32)
        return CamMap(record_id=None, icon_class="11F",
                      raw_map=np.zeros((4, 4), dtype=np.float32),
                      upsampled=up.reshape(side, side),
                      peak_location=(side - 1, side - 1))

    def test_alpha_zero_returns_padded_original(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(40, 60, 3), dtype=np.uint8)
        out = render_overlay(img, self._cam(), alpha=0.0, fill=(1, 2, 3))
        assert out.shape == (60, 60, 3)
        assert (out[10:50] == img).all()
        assert (out[:10] == np.array([1, 2, 3])).all()

    def test_alpha_one_pure_colormap(self):
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        out = render_overlay(img, self._cam(), alpha=1.0)
        expected = colormap(self._cam().upsampled)
        assert (out == expected).all()

    def test_output_matches_padded_square_dimensions(self):
        img = np.zeros((30, 100, 3), dtype=np.uint8)
        out = render_overlay(img, self._cam(), alpha=0.5)
        assert out.shape == (100, 100, 3)

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            render_overlay(np.zeros((8, 8, 3), dtype=np.uint8),
                           self._cam(), alpha=1.5)

    def test_colormap_endpoints_blue_to_red(self):
        lo = colormap(np.zeros((1, 1)))
        hi = colormap(np.ones((1, 1)))
        assert lo[0, 0, 2] > lo[0, 0, 0]  # blue end
        assert hi[0, 0, 0] > hi[0, 0, 2]  # red end


class TestRawMapFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        raw = rng.standard_normal((6, 7)).astype(np.float32)
        cam = CamMap(record_id=None, icon_class="11F", raw_map=raw,
                     upsampled=np.zeros((8, 8), dtype=np.float32),
                     peak_location=(0, 0))
        path = tmp_path / "cam.txt"
        write_raw_map(cam, path)
        loaded = read_raw_map(path)
        assert loaded.shape == (6, 7)
        assert np.abs(loaded - raw.astype(np.float64)).max() < 1e-6
        header = path.read_text().splitlines()[0]
        assert header == "iconoforge-cam-raw v1 6 7"

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "x.txt"
        path.write_text("something-else v1 2 2\n0 0\n0 0\n")
        with pytest.raises(ValueError):
            read_raw_map(path)
