"""TensorFile / checkpoint containers, PGM, CSV and heatmap export."""
import numpy as np
import pytest

from lorun.errors import ContractError, FormatError
from lorun.fileio import (Checkpoint, decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor,
                          export_heatmap, read_checkpoint, read_matrix_csv, read_pgm, read_rows, read_tensor,
                          write_checkpoint, write_pgm, write_rows, write_tensor)
from lorun.lora import init_adapter


# ---------------------------------------------------------------------------
# tensors and checkpoints
# ---------------------------------------------------------------------------

class TestTensorFile:
    def test_file_keeps_dtype_and_shape(self, tmp_path, rng):
        for dt in (np.float32, np.float64):
            arr = rng.standard_normal((2, 3, 4)).astype(dt)
            write_tensor(tmp_path / "t.lrtn", arr)
            back = read_tensor(tmp_path / "t.lrtn")
            assert back.dtype == dt
            np.testing.assert_array_equal(back, arr)
        assert not (tmp_path / "t.lrtn.tmp").exists()

    def test_header_layout(self):
        buf = encode_tensor(np.zeros((2, 5), dtype=np.float32))
        assert buf[:4] == b"LRTN"
        assert buf[4:7] == bytes([1, 0, 2])
        assert len(buf) == 7 + 2 * 4 + 10 * 4

    def test_bad_magic(self):
        with pytest.raises(FormatError) as exc:
            decode_tensor(b"NOPE" + bytes(12))
        assert exc.value.offset == 0

    def test_truncated_payload(self):
        buf = encode_tensor(np.zeros(4))
        with pytest.raises(FormatError) as exc:
            decode_tensor(buf[:-8])
        assert exc.value.offset == 7 + 4

    def test_unknown_dtype_code(self):
        buf = bytearray(encode_tensor(np.zeros(1)))
        buf[5] = 9
        with pytest.raises(FormatError) as exc:
            decode_tensor(bytes(buf))
        assert exc.value.offset == 5

    def test_integer_arrays_rejected(self):
        with pytest.raises(ContractError):
            encode_tensor(np.arange(3))


class TestCheckpoint:
    def _ckpt(self, rng):
        return Checkpoint({"phase": "finetune", "stages": 2},
                          {"backbone.head.weight": rng.standard_normal((1, 4, 1, 1)),
                           "stage1.rho_raw": np.array(0.3),
                           "stage1.head.weight.lora_A": np.zeros((1, 1), dtype=np.float32)})

    def test_file_contents(self, tmp_path, rng):
        ckpt = self._ckpt(rng)
        write_checkpoint(tmp_path / "m.ckpt", ckpt)
        back = read_checkpoint(tmp_path / "m.ckpt")
        assert back.header == {"phase": "finetune", "stages": 2, "schema_version": 1}
        assert set(back.tensors) == set(ckpt.tensors)
        np.testing.assert_array_equal(back.tensors["backbone.head.weight"], ckpt.tensors["backbone.head.weight"])
        assert back.tensors["stage1.rho_raw"].shape == ()

    def test_encoding_is_order_independent(self, rng):
        ckpt = self._ckpt(rng)
        shuffled = Checkpoint(dict(reversed(list(ckpt.header.items()))),
                              dict(reversed(list(ckpt.tensors.items()))))
        assert encode_checkpoint(shuffled) == encode_checkpoint(ckpt)

    def test_accessors(self, rng):
        ckpt = self._ckpt(rng)
        assert set(ckpt.backbone()) == {"head.weight"}
        assert set(ckpt.stage_scalars(1)) == {"rho"}
        assert ckpt.adapter_names() == ["stage1.head.weight.lora_A"]
        assert ckpt.phase == "finetune"

    def test_trailing_bytes(self, rng):
        buf = encode_checkpoint(self._ckpt(rng))
        with pytest.raises(FormatError) as exc:
            decode_checkpoint(buf + b"\0")
        assert exc.value.offset == len(buf)

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_checkpoint(b"LRTN" + bytes(20))


# ---------------------------------------------------------------------------
# PGM / CSV
# ---------------------------------------------------------------------------

class TestPgm:
    def test_binary(self, tmp_path):
        pixels = np.array([[0, 128], [255, 10]])
        write_pgm(tmp_path / "a.pgm", pixels)
        back, maxval = read_pgm(tmp_path / "a.pgm")
        assert maxval == 255
        np.testing.assert_array_equal(back, pixels)

    def test_ascii_with_comment(self, tmp_path):
        (tmp_path / "b.pgm").write_bytes(b"P2\n# made by hand\n2 1\n255\n128 255\n")
        back, maxval = read_pgm(tmp_path / "b.pgm")
        np.testing.assert_array_equal(back, [[128, 255]])

    def test_short_raster(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(3))
        with pytest.raises(FormatError):
            read_pgm(tmp_path / "c.pgm")

    def test_not_pgm(self, tmp_path):
        (tmp_path / "d.pgm").write_bytes(b"P6\n1 1\n255\n\0\0\0")
        with pytest.raises(FormatError) as exc:
            read_pgm(tmp_path / "d.pgm")
        assert exc.value.offset == 0


class TestCsv:
    def test_comment_line_is_skipped(self, tmp_path):
        write_rows(tmp_path / "r.csv", ["id", "psnr"], [{"id": "a", "psnr": "30.5"}], comment="task=cs")
        text = (tmp_path / "r.csv").read_text()
        assert text.startswith("# task=cs\nid,psnr\n")
        assert read_rows(tmp_path / "r.csv") == [{"id": "a", "psnr": "30.5"}]


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

class TestHeatmap:
    def test_scaled_pgm_and_raw_csv(self, tmp_path):
        m = np.array([[-1.0, 0.0], [1.0, 0.5]])
        paths = export_heatmap(m, tmp_path / "w")
        gray, _ = read_pgm(paths["pgm"])
        np.testing.assert_array_equal(gray, [[0, 128], [255, 191]])
        np.testing.assert_allclose(read_matrix_csv(paths["csv"]), m)

    def test_constant_matrix_is_black(self, tmp_path):
        paths = export_heatmap(np.full((3, 3), 7.0), tmp_path / "c")
        gray, _ = read_pgm(paths["pgm"])
        np.testing.assert_array_equal(gray, 0)

    def test_zero_adapter_delta(self, tmp_path, rng):
        a = init_adapter("enc0.conv1.weight", (4, 2, 3, 3), 1, rng, dtype=np.float64)
        paths = export_heatmap(a.delta().data, tmp_path / "stage1.enc0.conv1.weight.delta")
        assert paths["csv"].name == "stage1.enc0.conv1.weight.delta.csv"
        mat = read_matrix_csv(paths["csv"])
        assert mat.shape == (12, 6)
        np.testing.assert_array_equal(mat, 0.0)

    def test_empty_tensor(self, tmp_path):
        with pytest.raises(ContractError):
            export_heatmap(np.zeros((0, 3)), tmp_path / "e")
