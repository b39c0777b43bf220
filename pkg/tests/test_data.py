import numpy as np
import pytest

from salfau.data import (
    FG_RANGE, DatasetManifest, NetpbmError, Sample, apply_geometry, gen_synthetic, load_samples,
    parse_netpbm, preprocess_test, preprocess_train, quantize, read_image, restore, to_unit,
    train_geometry, write_pgm, write_ppm,
)


class ForcedRng:
    """Stands in for a Generator with fixed crop offsets and flip decision."""

    def __init__(self, top=0, left=0, flip=False):
        self.offsets = np.array([top, left])
        self.flip = flip

    def integers(self, low, high, size=None):
        return self.offsets

    def random(self):
        return 0.0 if self.flip else 0.9


def random_sample(size, seed=0):
    rng = np.random.default_rng(seed)
    return Sample(rng.uniform(size=(3, size, size)).astype(np.float32),
                  rng.uniform(size=(1, size, size)).astype(np.float32), "x")


class TestNetpbm:
    def test_hand_decoded_p5(self):
        raster = parse_netpbm(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
        assert raster.shape == (1, 2, 2) and raster.dtype == np.uint8
        np.testing.assert_allclose(to_unit(raster)[0], [[0, 1], [0.50196, 0.25098]], atol=1e-5)

    def test_header_comments(self):
        raster = parse_netpbm(b"P5\n# made by hand\n2 1 # trailing\n255\n" + bytes([7, 9]))
        np.testing.assert_array_equal(raster[0], [[7, 9]])

    def test_p6_channel_order(self):
        raster = parse_netpbm(b"P6 2 1 255\n" + bytes([1, 2, 3, 4, 5, 6]))
        np.testing.assert_array_equal(raster[:, 0, :], [[1, 4], [2, 5], [3, 6]])

    def test_ascii_variant_rejected(self):
        with pytest.raises(NetpbmError, match="unsupported magic"):
            parse_netpbm(b"P3\n1 1\n255\n0 0 0\n")

    def test_truncated_payload_reports_offset(self):
        with pytest.raises(NetpbmError, match="byte 13"):
            parse_netpbm(b"P5\n2 2\n255\n" + bytes([1, 2]))

    def test_maxval_rejected(self):
        with pytest.raises(NetpbmError, match="maxval"):
            parse_netpbm(b"P5\n1 1\n65535\n\x00\x00")

    def test_truncated_header(self):
        with pytest.raises(NetpbmError, match="truncated header"):
            parse_netpbm(b"P5\n2 ")


class TestWritePgm:
    @pytest.mark.parametrize("value, byte", [(1.0, 255), (0.5, 128), (0.0, 0)])
    def test_constants(self, tmp_path, value, byte):
        path = tmp_path / "m.pgm"
        write_pgm(path, np.full((1, 3, 2), value, np.float32))
        data = path.read_bytes()
        assert data.startswith(b"P5\n2 3\n255\n")
        assert set(data[len(b"P5\n2 3\n255\n"):]) == {byte}

    def test_out_of_range(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "m.pgm", np.full((2, 2), 1.01))
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "m.pgm", np.full((2, 2), -0.1))

    def test_round_trip_on_quantized_maps(self, tmp_path):
        rng = np.random.default_rng(0)
        for k in range(20):
            q = rng.integers(0, 256, size=(1, 5 + k, 7)).astype(np.uint8)
            write_pgm(tmp_path / "m.pgm", q.astype(np.float64) / 255)
            np.testing.assert_array_equal(read_image(tmp_path / "m.pgm"), q)

    def test_ppm_round_trip(self, tmp_path):
        raster = np.random.default_rng(1).integers(0, 256, size=(3, 4, 6)).astype(np.uint8)
        write_ppm(tmp_path / "i.ppm", raster)
        np.testing.assert_array_equal(read_image(tmp_path / "i.ppm"), raster)

    def test_quantize_half_up(self):
        np.testing.assert_array_equal(quantize(np.array([0.5, 1 / 255, 0.2])), [128, 1, 51])


class TestPreprocessTrain:
    def test_geometry_scales(self):
        assert train_geometry(288) == (320, 288)
        assert train_geometry(64) == (72, 64)

    def test_forced_top_left_window(self):
        s = random_sample(320)
        out = preprocess_train(s, ForcedRng(), size=288)
        np.testing.assert_array_equal(out.image, s.image[:, :288, :288])
        np.testing.assert_array_equal(out.mask, s.mask[:, :288, :288])

    def test_flip_involution(self):
        s = random_sample(72, 1)
        flipped = preprocess_train(s, ForcedRng(3, 5, True), size=64)
        again = apply_geometry(flipped, 64, 64, 0, 0, True)
        np.testing.assert_array_equal(again.image, preprocess_train(s, ForcedRng(3, 5), size=64).image)

    def test_paired_delta(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            r, c = rng.integers(0, 36, size=2)
            mask = np.zeros((1, 36, 36), np.float32)
            mask[0, r, c] = 1
            image = np.repeat(mask, 3, axis=0) * np.array([0.2, 0.5, 1.0], np.float32)[:, None, None]
            out = preprocess_train(Sample(image, mask, "d"), rng, size=32)
            np.testing.assert_allclose(out.image[2], out.mask[0], rtol=0, atol=1e-6)
            if out.mask.max() > 0:
                assert np.argmax(out.image[0]) == np.argmax(out.mask[0])

    def test_deterministic_given_rng(self):
        s = random_sample(40, 3)
        a = preprocess_train(s, np.random.default_rng(7), size=32)
        b = preprocess_train(s, np.random.default_rng(7), size=32)
        np.testing.assert_array_equal(a.image, b.image)
        assert a.image.shape == (3, 32, 32)

    def test_mask_stays_continuous(self):
        s = random_sample(20, 4)
        s.mask[...] = (s.mask > 0.5)
        out = preprocess_train(s, np.random.default_rng(0), size=16)
        assert np.any((out.mask > 0) & (out.mask < 1))


class TestPreprocessTest:
    def test_identity_size(self):
        raster = np.random.default_rng(0).integers(0, 256, size=(3, 320, 320)).astype(np.uint8)
        x, orig = preprocess_test(raster)
        assert orig == (320, 320)
        np.testing.assert_array_equal(x[0], to_unit(raster))

    def test_records_original(self):
        x, orig = preprocess_test(np.zeros((3, 480, 640), np.uint8))
        assert x.shape == (1, 3, 320, 320) and orig == (480, 640)

    def test_restore_shape(self):
        x, orig = preprocess_test(np.full((3, 30, 50), 200, np.uint8), target=32)
        restored = restore(x[0, :1], orig)
        assert restored.shape == (1, 30, 50)
        np.testing.assert_allclose(restored, 200 / 255, atol=1e-6)

    def test_gray_expands(self):
        x, _ = preprocess_test(np.zeros((1, 8, 8), np.uint8), target=16)
        assert x.shape == (1, 3, 16, 16)


class TestSynthetic:
    def test_count_and_files(self, tmp_path):
        manifest = gen_synthetic(10, 32, 0, tmp_path)
        assert len(manifest) == 10
        assert all(img.exists() and mask.exists() for img, mask in manifest.pairs)
        assert len(DatasetManifest.read(tmp_path / "manifest.txt")) == 10

    def test_byte_identical(self, tmp_path):
        gen_synthetic(5, 32, 11, tmp_path / "a")
        gen_synthetic(5, 32, 11, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 11
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        a = gen_synthetic(1, 32, 1, tmp_path / "a").pairs[0][0].read_bytes()
        b = gen_synthetic(1, 32, 2, tmp_path / "b").pairs[0][0].read_bytes()
        assert a != b

    def test_masks_are_valid_ground_truth(self, tmp_path):
        for sample in load_samples(gen_synthetic(40, 32, 5, tmp_path)):
            values = np.unique(sample.mask)
            assert set(values.tolist()) <= {0.0, 1.0}
            assert FG_RANGE[0] <= sample.mask.mean() <= FG_RANGE[1]

    def test_rejects_bad_arguments(self, tmp_path):
        with pytest.raises(ValueError):
            gen_synthetic(0, 32, 0, tmp_path)
        with pytest.raises(ValueError):
            gen_synthetic(1, 8, 0, tmp_path)


class TestManifest:
    def test_comments_and_relative_paths(self, tmp_path):
        (tmp_path / "m.txt").write_text("# header\n\nimg/a.ppm\tgt/a.pgm\n", encoding="utf-8")
        m = DatasetManifest.read(tmp_path / "m.txt")
        assert m.pairs == [(tmp_path / "img/a.ppm", tmp_path / "gt/a.pgm")]

    def test_duplicates_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="duplicate"):
            DatasetManifest([(tmp_path / "a.ppm", tmp_path / "x.pgm"), (tmp_path / "b/a.ppm", tmp_path / "y.pgm")])

    def test_malformed_line(self, tmp_path):
        (tmp_path / "m.txt").write_text("only-one-column\n", encoding="utf-8")
        with pytest.raises(ValueError, match="m.txt:1"):
            DatasetManifest.read(tmp_path / "m.txt")

    def test_missing_file_at_load(self, tmp_path):
        with pytest.raises(OSError):
            load_samples(DatasetManifest([(tmp_path / "nope.ppm", tmp_path / "nope.pgm")]))

    def test_sample_size_mismatch(self):
        with pytest.raises(ValueError):
            Sample(np.zeros((3, 4, 4), np.float32), np.zeros((1, 4, 5), np.float32), "bad")
