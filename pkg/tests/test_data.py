import numpy as np
import pytest

from eroseg import data, sgt
from eroseg.errors import ValidationError

# Published splitmix64 outputs for seed 1234567 (Rosetta Code reference).
SPLITMIX_1234567 = [
    6457827717110365317,
    3203168211198807973,
    9817491932198370423,
    4593380528125082431,
    16408922859458223821,
]


class TestPrng:
    def test_reference_sequence(self):
        rng = data.Prng(1234567)
        assert [rng.next() for _ in range(5)] == SPLITMIX_1234567

    def test_block_matches_scalar_stream(self):
        a, b = data.Prng(42), data.Prng(42)
        block = a.next_block(1000)
        assert block.tolist() == [b.next() for _ in range(1000)]
        assert a.next() == b.next()

    def test_uniform_from_top_53_bits(self):
        raw = data.Prng(7).next()
        assert data.Prng(7).uniform() == (raw >> 11) * 2.0 ** -53
        u = data.Prng(7).uniform_block(10000)
        assert u.min() >= 0.0 and u.max() < 1.0

    def test_uniform_block_matches_scalar(self):
        a, b = data.Prng(99), data.Prng(99)
        assert a.uniform_block(50).tolist() == [b.uniform() for _ in range(50)]

    def test_seed_wraps_to_64_bits(self):
        assert data.Prng(2 ** 64 + 5).next() == data.Prng(5).next()


@pytest.fixture(scope="module")
def world():
    return data.generate(123, 256, 32, 32)


class TestGenerate:
    def test_shapes_and_ranges(self, world):
        assert world.images.shape == (256, 3, 32, 32)
        assert world.labels.shape == (256, 32, 32)
        assert world.labels.dtype == np.uint32
        assert world.images.min() >= 0.0 and world.images.max() <= 1.0

    def test_deterministic_bytes(self, tmp_path):
        a, b = data.generate(5, 8, 16, 20), data.generate(5, 8, 16, 20)
        data.save(a, tmp_path / "a")
        data.save(b, tmp_path / "b")
        for name in ("images.sgt", "labels.sgt", "manifest.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_different_seed_differs(self):
        assert not np.array_equal(data.generate(1, 2, 16, 16).images, data.generate(2, 2, 16, 16).images)

    def test_background_fraction(self, world):
        bg = (world.labels == 0).mean(axis=(1, 2))
        assert bg.min() > 0.4

    def test_all_classes_present(self, world):
        assert set(np.unique(world.labels).tolist()) == {0, 1, 2, 3}

    def test_foreground_is_minority(self, world):
        assert (world.labels != 0).mean() < 0.5

    def test_labels_consistent_with_geometry(self, world):
        rng = np.random.default_rng(0)
        for i in range(len(world)):
            ys, xs = rng.integers(0, 32, 100), rng.integers(0, 32, 100)
            for y, x in zip(ys, xs):
                expected = 0
                for shape in world.shapes[i]:
                    if shape.contains(y, x):
                        expected = shape.cls
                assert world.labels[i, y, x] == expected

    def test_shapes_do_not_overlap(self, world):
        for shapes in world.shapes[:64]:
            cover = sum(s.raster(32, 32).astype(int) for s in shapes)
            assert cover.max() <= 1
            assert 1 <= len(shapes) <= 3

    def test_colors_follow_palette(self, world):
        # mean colour per class sits at the documented base (noise is zero-mean)
        for cls, color in [(0, data.BACKGROUND_COLOR)] + list(data.CLASS_COLORS.items()):
            sel = world.labels == cls
            means = [world.images[:, c][sel].mean() for c in range(3)]
            np.testing.assert_allclose(means, color, atol=0.01)

    def test_noise_amplitude(self, world):
        base = np.array([data.BACKGROUND_COLOR] + [data.CLASS_COLORS[c] for c in (1, 2, 3)])
        expected = base[world.labels].transpose(0, 3, 1, 2)
        dev = np.abs(world.images - np.clip(expected, 0, 1))
        assert dev.max() <= data.NOISE + 1e-12

    @pytest.mark.parametrize("h, w", [(8, 32), (32, 15)])
    def test_too_small(self, h, w):
        with pytest.raises(ValidationError):
            data.generate(0, 1, h, w)

    def test_class_count_fixed(self):
        with pytest.raises(ValidationError):
            data.generate(0, 1, 16, 16, num_classes=5)


class TestLoadPair:
    def test_round_trip(self, tmp_path):
        ds = data.generate(11, 4, 16, 16)
        data.save(ds, tmp_path)
        back = data.load_dir(tmp_path)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)
        assert back.seed == 11

    def test_manifest_keys(self, tmp_path):
        data.save(data.generate(3, 2, 16, 24, split="val"), tmp_path)
        m = data.read_manifest(tmp_path / "manifest.txt")
        assert (m["seed"], m["N"], m["H"], m["W"], m["C"], m["split"]) == ("3", "2", "16", "24", "4", "val")

    def test_label_out_of_range(self, tmp_path):
        sgt.save(tmp_path / "i.sgt", np.zeros((1, 3, 16, 16)))
        labels = np.zeros((1, 16, 16), dtype=np.uint32)
        labels[0, 2, 3] = 4
        sgt.save(tmp_path / "l.sgt", labels)
        with pytest.raises(ValidationError, match="max legal class 3") as err:
            data.load_pair(tmp_path / "i.sgt", tmp_path / "l.sgt")
        assert "l.sgt" in str(err.value)

    def test_image_out_of_range(self, tmp_path):
        images = np.zeros((1, 3, 16, 16))
        images[0, 1, 4, 5] = 1.5
        sgt.save(tmp_path / "i.sgt", images)
        sgt.save(tmp_path / "l.sgt", np.zeros((1, 16, 16), dtype=np.uint32))
        with pytest.raises(ValidationError, match=r"\[0, 1, 4, 5\]"):
            data.load_pair(tmp_path / "i.sgt", tmp_path / "l.sgt")

    def test_dim_mismatch(self, tmp_path):
        sgt.save(tmp_path / "i.sgt", np.zeros((2, 3, 16, 16)))
        sgt.save(tmp_path / "l.sgt", np.zeros((2, 16, 17), dtype=np.uint32))
        with pytest.raises(ValidationError, match="l.sgt"):
            data.load_pair(tmp_path / "i.sgt", tmp_path / "l.sgt")

    def test_bad_label_dtype(self, tmp_path):
        sgt.save(tmp_path / "i.sgt", np.zeros((1, 3, 16, 16)))
        sgt.save(tmp_path / "l.sgt", np.zeros((1, 16, 16)))
        with pytest.raises(ValidationError, match="uint32"):
            data.load_pair(tmp_path / "i.sgt", tmp_path / "l.sgt")
