import numpy as np
import pytest

from centerpred import dataio


class TestPointCloud:
    def test_roundtrip(self, tmp_path):
        pts = np.random.default_rng(0).uniform(-1, 1, size=(37, 3))
        path = str(tmp_path / "a.pc")
        dataio.write_pointcloud(path, pts)
        back = dataio.read_pointcloud(path)
        assert back.shape == (37, 3)
        assert np.allclose(back, pts, atol=1e-6)   # float32 storage

    def test_header_layout(self, tmp_path):
        path = str(tmp_path / "b.pc")
        dataio.write_pointcloud(path, np.zeros((2, 3)))
        blob = open(path, "rb").read()
        assert blob.startswith(b"GCAR-PC1\ncount: 2\ncolumns: x y z\n\n")

    def test_bad_magic_rejected(self, tmp_path):
        path = str(tmp_path / "c.pc")
        with open(path, "wb") as fh:
            fh.write(b"NOPE\ncount: 0\ncolumns: x y z\n\n")
        with pytest.raises(ValueError):
            dataio.read_pointcloud(path)

    def test_size_mismatch_rejected(self, tmp_path):
        path = str(tmp_path / "d.pc")
        with open(path, "wb") as fh:
            fh.write(b"GCAR-PC1\ncount: 3\ncolumns: x y z\n\n\x00\x00\x00\x00")
        with pytest.raises(ValueError):
            dataio.read_pointcloud(path)

    def test_nonfinite_rejected(self, tmp_path):
        pts = np.array([[0.0, 0.0, np.nan]])
        with pytest.raises(ValueError):
            dataio.write_pointcloud(str(tmp_path / "e.pc"), pts)


class TestRawArray:
    def test_reads_documented_format(self, tmp_path):
        arr = np.arange(24, dtype="<f4").reshape(2, 3, 4)
        raw = tmp_path / "vol.raw"
        arr.tofile(raw)
        (tmp_path / "vol.hdr").write_text(
            "shape: 2 3 4\ndtype: float32\nbyte_order: little\nangle: 0.5\n")
        back, meta = dataio.read_array(str(raw))
        assert back.shape == (2, 3, 4)
        assert np.array_equal(back.ravel(), np.arange(24, dtype=np.float32))
        assert meta["angle"] == "0.5"

    def test_wrong_dtype_rejected(self, tmp_path):
        raw = tmp_path / "x.raw"
        np.zeros(4, dtype="<f8").tofile(raw)
        (tmp_path / "x.hdr").write_text(
            "shape: 4\ndtype: float64\nbyte_order: little\n")
        with pytest.raises(ValueError):
            dataio.read_array(str(raw))

    def test_short_body_rejected(self, tmp_path):
        raw = tmp_path / "y.raw"
        np.zeros(3, dtype="<f4").tofile(raw)
        (tmp_path / "y.hdr").write_text(
            "shape: 2 3\ndtype: float32\nbyte_order: little\n")
        with pytest.raises(ValueError):
            dataio.read_array(str(raw))


class TestManifest:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            dataio.load_manifest(str(tmp_path))

    def test_missing_keys_rejected(self, tmp_path):
        (tmp_path / "dataset.json").write_text('{"geometry": {}}')
        with pytest.raises(ValueError):
            dataio.load_manifest(str(tmp_path))
