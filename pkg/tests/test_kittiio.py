"""Depth PNG codec, sample round trips, crops, visualization export."""

import numpy as np
import pytest
from PIL import Image

from depthfusion import kittiio, simdata


class TestDepthCodec:
    def test_hundred_meters_is_25600(self, tmp_path):
        p = tmp_path / "d.png"
        kittiio.write_depth_png(np.full((4, 4), 100.0), p)
        img = np.asarray(Image.open(p))
        assert img.dtype == np.uint16
        assert np.all(img == 25600)
        back = kittiio.read_depth_png(p)
        assert np.all(back == np.float32(100.0))

    def test_zero_means_invalid(self, tmp_path):
        p = tmp_path / "d.png"
        kittiio.write_depth_png(np.array([[0.0, -1.0], [2.0, 0.5]]), p)
        back = kittiio.read_depth_png(p)
        assert back[0, 0] == 0.0 and back[0, 1] == 0.0
        assert back[1, 0] == 2.0 and back[1, 1] == 0.5

    def test_round_trip_bit_exact_on_grid(self, tmp_path):
        rng = np.random.default_rng(0)
        grid = np.round(rng.uniform(0, 250, size=(16, 16)) * 256) / 256
        grid = grid.astype(np.float32)
        p = tmp_path / "d.png"
        kittiio.write_depth_png(grid, p)
        assert np.array_equal(kittiio.read_depth_png(p), grid)

    def test_quantization_error_bounded(self, tmp_path):
        rng = np.random.default_rng(1)
        depth = rng.uniform(0.5, 200.0, size=(8, 8))
        p = tmp_path / "d.png"
        kittiio.write_depth_png(depth, p)
        back = kittiio.read_depth_png(p)
        assert np.abs(back - depth).max() <= 1.0 / 512.0

    def test_out_of_range_rejected(self, tmp_path):
        with pytest.raises(kittiio.RangeError):
            kittiio.write_depth_png(np.array([[300.0]]), tmp_path / "d.png")
        with pytest.raises(kittiio.RangeError):
            kittiio.write_depth_png(np.array([[np.nan]]), tmp_path / "d.png")

    def test_eight_bit_file_rejected(self, tmp_path):
        p = tmp_path / "bad.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8), mode="L").save(p)
        with pytest.raises(kittiio.FormatError):
            kittiio.read_depth_png(p)

    def test_rgb_file_rejected_as_depth(self, tmp_path):
        p = tmp_path / "bad.png"
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8), mode="RGB").save(p)
        with pytest.raises(kittiio.FormatError):
            kittiio.read_depth_png(p)

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(kittiio.IoError):
            kittiio.read_depth_png(tmp_path / "absent.png")


class TestSampleIo:
    def test_synthetic_round_trip_equals_original(self, tmp_path):
        s = simdata.generate_scene_sample(simdata.SceneSpec(seed=17))
        kittiio.write_sample(tmp_path, "x", s)
        r = kittiio.read_sample(tmp_path, "x")
        assert np.array_equal(r.rgb, s.rgb)
        assert np.array_equal(r.lidar, s.lidar)
        assert np.array_equal(r.gt, s.gt)
        assert np.array_equal(r.dense_truth, s.dense_truth)
        assert np.array_equal(r.artifact_mask, s.artifact_mask)

    def test_triplet_without_truth_loads(self, tmp_path):
        s = simdata.generate_scene_sample(simdata.SceneSpec(seed=18))
        s.dense_truth = None
        s.artifact_mask = None
        kittiio.write_sample(tmp_path, "t", s)
        r = kittiio.read_sample(tmp_path, "t")
        assert r.dense_truth is None and r.artifact_mask is None
        assert r.lidar.shape == (64, 192)

    def test_bottom_crop_arithmetic(self, tmp_path):
        # full-size driving frame cropped to its bottom 256 rows
        h, w = 375, 1242
        rng = np.random.default_rng(2)
        s = simdata.SceneSample(
            rgb=rng.random((3, h, w)).astype(np.float32),
            lidar=np.zeros((h, w), dtype=np.float32),
            gt=np.round(rng.uniform(1, 80, (h, w)) * 256).astype(np.float32) / 256)
        kittiio.write_sample(tmp_path, "k", s)
        r = kittiio.read_sample(tmp_path, "k", crop_h=256)
        assert r.rgb.shape == (3, 256, 1242)
        assert r.gt.shape == (256, 1242)
        assert np.allclose(r.gt, s.gt[-256:, :])

    def test_misaligned_modalities_rejected(self, tmp_path):
        s = simdata.generate_scene_sample(simdata.SceneSpec(seed=19))
        kittiio.write_sample(tmp_path, "m", s)
        kittiio.write_depth_png(np.ones((32, 192)), tmp_path / "m_lidar.png")
        with pytest.raises(kittiio.AlignmentError):
            kittiio.read_sample(tmp_path, "m")

    def test_manifest_round_trip(self, tmp_path):
        (tmp_path / "manifest.txt").write_text("00000 train\n00001 val\n")
        assert kittiio.read_manifest(tmp_path) == [("00000", "train"), ("00001", "val")]
        with pytest.raises(kittiio.IoError):
            kittiio.read_manifest(tmp_path / "nowhere")


class TestVisualization:
    def test_constant_map_constant_color(self, tmp_path):
        out = kittiio.export_visualization(np.full((8, 8), 5.0), tmp_path / "v.png",
                                           vmin=0.0, vmax=10.0)
        img = np.asarray(Image.open(out))
        assert img.shape == (8, 8, 3)
        assert (img == img[0, 0]).all()

    def test_scale_recorded_in_filename(self, tmp_path):
        out = kittiio.export_visualization(np.full((4, 4), 2.0), tmp_path / "v.png",
                                           vmin=0.5, vmax=20.0)
        assert out.name == "v_vmin0.50_vmax20.00.png"

    def test_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(3)
        depth = rng.uniform(1, 30, size=(16, 16))
        a = kittiio.export_visualization(depth, tmp_path / "a.png", vmin=0, vmax=40)
        b = kittiio.export_visualization(depth, tmp_path / "b.png", vmin=0, vmax=40)
        assert a.read_bytes() == b.read_bytes()

    def test_invalid_pixels_black(self, tmp_path):
        depth = np.array([[0.0, 10.0], [20.0, 0.0]])
        out = kittiio.export_visualization(depth, tmp_path / "v.png", vmin=1, vmax=30)
        img = np.asarray(Image.open(out))
        assert np.all(img[0, 0] == 0) and np.all(img[1, 1] == 0)
        assert img[0, 1].sum() > 0
