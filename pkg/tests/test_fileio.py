import struct

import numpy as np
import pytest

from conftest import small_rig
from itofuse.errors import DimensionOverflowError, FormatError, MagicMismatchError, TruncatedFileError, ValidationError
from itofuse.fileio import (
    decode_checkpoint, decode_dmap, encode_checkpoint, encode_dmap, read_calibration, read_checkpoint, read_dmap,
    read_ppm, rig_to_dict, write_calibration, write_checkpoint, write_dmap, write_ppm,
)
from itofuse.geometry import rotation_z


class TestDmap:
    def test_round_trip_with_invalid(self, rng, tmp_path):
        d = rng.uniform(0.5, 5, (7, 9)).astype(np.float32)
        d[2, 3] = np.nan
        d[4, 4] = np.inf
        write_dmap(tmp_path / "a.dmap", d)
        back = read_dmap(tmp_path / "a.dmap")
        assert back.shape == (7, 9) and back.dtype == np.float32
        ok = np.isfinite(d)
        assert back[ok].tobytes() == d[ok].tobytes()
        assert np.isnan(back[~ok]).all()
        assert read_dmap(tmp_path / "a.dmap").tobytes() == back.tobytes()

    def test_layout(self):
        buf = encode_dmap(np.array([[1.0, np.nan]], dtype=np.float32))
        assert buf[:4] == b"DMAP"
        assert struct.unpack("<II", buf[4:12]) == (2, 1)
        assert struct.unpack("<f", buf[12:16])[0] == 1.0
        assert buf[16:20] == struct.pack("<I", 0x7FC00000)

    def test_errors_are_distinct(self):
        good = encode_dmap(np.ones((3, 4), np.float32))
        with pytest.raises(MagicMismatchError):
            decode_dmap(b"XMAP" + good[4:])
        with pytest.raises(TruncatedFileError):
            decode_dmap(good[:-1])
        with pytest.raises(TruncatedFileError):
            decode_dmap(good[:8])
        with pytest.raises(DimensionOverflowError):
            decode_dmap(b"DMAP" + struct.pack("<II", 1 << 20, 1 << 20))
        with pytest.raises(FormatError):
            decode_dmap(good + b"\0")

    def test_rejects_non_2d(self):
        with pytest.raises(ValidationError):
            encode_dmap(np.ones(3))


class TestPpm:
    def test_round_trip(self, rng, tmp_path):
        img = rng.integers(0, 256, (5, 6, 3)).astype(np.uint8)
        write_ppm(tmp_path / "a.ppm", img)
        back = read_ppm(tmp_path / "a.ppm")
        assert back.dtype == np.float32 and back.shape == (5, 6, 3)
        np.testing.assert_array_equal(np.rint(back * 255).astype(np.uint8), img)
        write_ppm(tmp_path / "b.ppm", back)
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    def test_header_comment(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
        np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm")[0], [[1, 0, 0], [0, 0, 1]])

    def test_errors(self, tmp_path):
        (tmp_path / "m.ppm").write_bytes(b"P5\n1 1\n255\n\0")
        with pytest.raises(MagicMismatchError):
            read_ppm(tmp_path / "m.ppm")
        (tmp_path / "t.ppm").write_bytes(b"P6\n2 2\n255\n\0\0\0")
        with pytest.raises(TruncatedFileError):
            read_ppm(tmp_path / "t.ppm")
        (tmp_path / "b.ppm").write_bytes(b"P6\n1 1\n65535\n\0\0\0\0\0\0")
        with pytest.raises(FormatError):
            read_ppm(tmp_path / "b.ppm")


class TestCalibration:
    def test_round_trip(self, tmp_path):
        rig = small_rig()
        write_calibration(tmp_path / "rig.json", rig)
        back = read_calibration(tmp_path / "rig.json")
        assert rig_to_dict(back) == rig_to_dict(rig)

    def test_non_orthonormal_names_matrix(self, tmp_path):
        d = rig_to_dict(small_rig())
        d["R"] = [1, 0.01, 0, 0, 1, 0, 0, 0, 1]
        (tmp_path / "bad.json").write_text(__import__("json").dumps(d))
        with pytest.raises(ValidationError, match="matrix R"):
            read_calibration(tmp_path / "bad.json")

    def test_missing_key(self, tmp_path):
        d = rig_to_dict(small_rig())
        del d["itof"]["fx"]
        (tmp_path / "bad.json").write_text(__import__("json").dumps(d))
        with pytest.raises(ValidationError, match="fx"):
            read_calibration(tmp_path / "bad.json")

    def test_rotated_round_trip(self, tmp_path):
        import dataclasses
        from itofuse.geometry import RigidTransform
        rig = dataclasses.replace(small_rig(), extrinsic=RigidTransform(rotation_z(17.0), [0.1, 0.2, 0.3]))
        write_calibration(tmp_path / "r.json", rig)
        np.testing.assert_array_equal(read_calibration(tmp_path / "r.json").extrinsic.r, rig.extrinsic.r)

    def test_invalid_json(self, tmp_path):
        (tmp_path / "x.json").write_text("{nope")
        with pytest.raises(FormatError):
            read_calibration(tmp_path / "x.json")


class TestCheckpoint:
    def entries(self, rng):
        return {"a.w": rng.normal(size=(4, 3, 3, 3)).astype(np.float32), "b": np.float32(2.5) * np.ones(()),
                "c": rng.normal(size=7).astype(np.float32)}

    def test_byte_identity(self, rng, tmp_path):
        buf = encode_checkpoint(self.entries(rng))
        write_checkpoint(tmp_path / "a.ckpt", decode_checkpoint(buf))
        assert (tmp_path / "a.ckpt").read_bytes() == buf
        back = read_checkpoint(tmp_path / "a.ckpt")
        assert list(back) == ["a.w", "b", "c"] and back["b"].shape == ()

    def test_errors(self, rng):
        buf = encode_checkpoint(self.entries(rng))
        with pytest.raises(MagicMismatchError):
            decode_checkpoint(b"KPTC" + buf[4:])
        with pytest.raises(TruncatedFileError):
            decode_checkpoint(buf[:-3])
        with pytest.raises(FormatError):
            decode_checkpoint(buf[:4] + struct.pack("<I", 9) + buf[8:])
        with pytest.raises(FormatError):
            decode_checkpoint(buf + b"x")
        bad_rank = b"CKPT" + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"a" + struct.pack("<I", 99)
        with pytest.raises(DimensionOverflowError):
            decode_checkpoint(bad_rank)
