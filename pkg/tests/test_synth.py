import numpy as np
import pytest

from hsiclust.cluster_eval import compute_metrics, spherical_kmeans
from hsiclust.pngio import class_map_to_png, write_palette_png
from hsiclust.synth import SynthSpec, class_signatures, generate


class TestGenerate:
    def test_noiseless_two_class_has_two_spectra(self):
        spec = SynthSpec(height=16, width=16, bands=8, classes=2, regions=4,
                         noise_std=0.0, seed=1)
        cube, raster = generate(spec)
        unique = np.unique(cube.pixels(), axis=0)
        assert unique.shape[0] == 2
        assert set(np.unique(raster.labels)) == {1, 2}

    def test_single_region_constant_labels(self):
        spec = SynthSpec(height=8, width=8, bands=4, classes=1, regions=1, seed=2)
        _, raster = generate(spec)
        assert (raster.labels == 1).all()

    def test_deterministic_per_seed(self):
        spec = SynthSpec(seed=3)
        c1, r1 = generate(spec)
        c2, r2 = generate(spec)
        assert np.array_equal(c1.data, c2.data)
        assert np.array_equal(r1.labels, r2.labels)

    def test_class_means_recover_signatures(self):
        spec = SynthSpec(height=48, width=48, bands=12, classes=3, regions=6,
                         noise_std=0.2, seed=4)
        cube, raster = generate(spec)
        sigs = class_signatures(spec, np.random.default_rng(spec.seed))
        flat = cube.pixels()
        labels = raster.labels.reshape(-1)
        for k in range(3):
            members = flat[labels == k + 1]
            tol = 3 * spec.noise_std / np.sqrt(members.shape[0])
            assert np.max(np.abs(members.mean(axis=0) - sigs[k])) < 4 * tol

    def test_holdout_fraction(self):
        spec = SynthSpec(height=32, width=32, holdout_fraction=0.3, seed=5)
        _, raster = generate(spec)
        frac = (raster.labels == 0).mean()
        assert 0.2 < frac < 0.4

    def test_noiseless_pixel_kmeans_perfect(self):
        spec = SynthSpec(height=24, width=24, bands=10, classes=4, regions=8,
                         noise_std=0.0, seed=6)
        cube, raster = generate(spec)
        flat = cube.pixels()
        z = flat / np.linalg.norm(flat, axis=1, keepdims=True)
        best_acc = 0.0
        for seed in range(5):
            labels, _, _ = spherical_kmeans(z, 4, np.random.default_rng(seed))
            report = compute_metrics(labels.reshape(raster.labels.shape), raster, k=4)
            best_acc = max(best_acc, report.acc)
        assert best_acc == 1.0

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            SynthSpec(classes=5, regions=3)
        with pytest.raises(ValueError):
            SynthSpec(noise_std=-1.0)


class TestPngWriter:
    def test_roundtrip_via_signature_and_size(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 16, size=(20, 30))
        path = tmp_path / "map.png"
        write_palette_png(path, img)
        raw = path.read_bytes()
        assert raw[:8] == b"\x89PNG\r\n\x1a\n"
        assert b"PLTE" in raw and b"IDAT" in raw and b"IEND" in raw

    def test_decodes_back_with_zlib(self, tmp_path):
        import struct
        import zlib

        img = np.array([[0, 1, 2], [3, 4, 5]], dtype=np.uint8)
        path = tmp_path / "tiny.png"
        write_palette_png(path, img)
        raw = path.read_bytes()
        i = raw.index(b"IDAT")
        length = struct.unpack(">I", raw[i - 4: i])[0]
        payload = zlib.decompress(raw[i + 4: i + 4 + length])
        rows = [payload[r * 4 + 1: r * 4 + 4] for r in range(2)]  # skip filter byte
        assert rows[0] == b"\x00\x01\x02"
        assert rows[1] == b"\x03\x04\x05"

    def test_class_map_zero_is_black(self, tmp_path):
        labels = np.array([[0, 1], [17, 2]])
        path = tmp_path / "cls.png"
        class_map_to_png(path, labels)  # label 17 wraps into the palette
        assert path.exists()

    def test_out_of_range_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_palette_png(tmp_path / "bad.png", np.array([[99]]))
