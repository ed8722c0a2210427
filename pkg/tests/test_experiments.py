import numpy as np

from duostream.core import ImageBuffer, RngState
from duostream.experiments import (AdaptationRow, _render_table,
                                   _shift_dataset, photometric_shift)
from duostream.synthgen import generate_toy_dataset

from conftest import rand_image


class TestPhotometricShift:
    def test_analytic_values(self):
        img = ImageBuffer(np.full((4, 4, 3), 0.5))
        out = photometric_shift(img)
        expected = 0.55 * 0.5 ** 1.4 + 0.05
        assert np.allclose(out.data, expected, rtol=0, atol=1e-15)

    def test_darkens_midtones(self):
        img = rand_image(16, 16, seed=2)
        out = photometric_shift(img)
        assert out.data.mean() < img.data.mean()

    def test_output_in_range(self):
        img = rand_image(16, 16, seed=3)
        out = photometric_shift(img, gain=2.0, bias=0.5)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_deterministic(self):
        img = rand_image()
        assert np.array_equal(photometric_shift(img).data,
                              photometric_shift(img).data)

    def test_custom_parameters(self):
        img = ImageBuffer(np.full((2, 2, 3), 0.25))
        out = photometric_shift(img, gain=1.0, bias=0.0, gamma=2.0)
        assert np.allclose(out.data, 0.0625, rtol=0, atol=1e-15)


class TestShiftDataset:
    def test_masks_dropped_for_unlabeled_stream(self, tmp_path):
        src = generate_toy_dataset(tmp_path / "src", count=3, canvas_size=16,
                                   rng=RngState(5))
        out = _shift_dataset(src, tmp_path / "dst", keep_masks=False,
                             split="train")
        assert len(out) == 3
        assert all(r.mask_path is None for r in out)
        assert all(r.domain_tag == "toy-shifted" for r in out)
        assert (tmp_path / "dst" / "images" / "000000.png").is_file()
        assert not (tmp_path / "dst" / "masks").exists()

    def test_masks_copied_verbatim_when_kept(self, tmp_path):
        src = generate_toy_dataset(tmp_path / "src", count=2, canvas_size=16,
                                   rng=RngState(5))
        out = _shift_dataset(src, tmp_path / "dst", keep_masks=True,
                             split="test")
        assert all(r.mask_path is not None for r in out)
        assert all(r.split == "test" for r in out)
        assert (tmp_path / "src" / "masks" / "000000.png").read_bytes() == \
               (tmp_path / "dst" / "masks" / "000000.png").read_bytes()

    def test_images_actually_shifted(self, tmp_path):
        from duostream.core import load_image
        src = generate_toy_dataset(tmp_path / "src", count=1, canvas_size=16,
                                   rng=RngState(5))
        _shift_dataset(src, tmp_path / "dst", keep_masks=False, split="train")
        orig = load_image(tmp_path / "src" / "images" / "000000.png")
        moved = load_image(tmp_path / "dst" / "images" / "000000.png")
        assert moved.data.mean() < orig.data.mean()


class TestRenderTable:
    def test_side_by_side(self):
        rows = (AdaptationRow("dual-stream", 10, 0.71234, 0.6),
                AdaptationRow("segmentation-only", 10, 0.65, 0.5))
        table = _render_table(rows)
        lines = table.splitlines()
        assert len(lines) == 4
        assert "dual-stream" in lines[2]
        assert "0.712" in lines[2]
        assert "segmentation-only" in lines[3]
