"""Quality metrics, the evaluation table and sample ingestion."""
import math

import numpy as np
import pytest

from lorun.data import ImageSample, ingest, parse_synthetic, stack, synthesize
from lorun.denoisers import DenoiserConfig
from lorun.errors import ConfigError, ContractError, ShapeError
from lorun.fileio import write_pgm, write_tensor
from lorun.metrics import EvalRow, evaluate, mean_row, psnr, ssim
from lorun.operators import CsOperator, add_noise
from lorun.tensor import Tensor
from lorun.unfolding import StageParams, UnfoldingModel


def _identity_model(rho=1.0, lam=0.0):
    op = CsOperator(np.eye(4), (2, 2), learnable=False, dtype=np.float64)
    stages = [StageParams.init(1, rho=rho, lam=lam, dtype=np.float64)]
    return UnfoldingModel("pgd", op, DenoiserConfig("soft_threshold"), stages, backbone={})


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

class TestPsnr:
    def test_uniform_error(self):
        ref = np.zeros((8, 8))
        assert psnr(ref + 0.1, ref) == pytest.approx(20.0)

    def test_identical_is_inf(self, rng):
        x = rng.random((4, 4))
        assert psnr(x, x) == math.inf

    def test_matches_definition(self, rng):
        x, ref = rng.random((3, 5, 5)), rng.random((3, 5, 5))
        mse = np.mean((x - ref) ** 2)
        assert psnr(x, ref) == pytest.approx(10 * np.log10(1.0 / mse))

    def test_decreases_with_noise(self, rng):
        ref = rng.random((16, 16))
        vals = [psnr(ref + s * rng.standard_normal(ref.shape), ref) for s in (0.01, 0.05, 0.2)]
        assert vals[0] > vals[1] > vals[2]

    def test_errors(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros(3), np.zeros(4))
        with pytest.raises(ContractError):
            psnr(np.zeros(3), np.zeros(3), peak=0.0)


class TestSsim:
    def test_identical(self, rng):
        x = rng.random((16, 16))
        assert ssim(x, x) == pytest.approx(1.0)

    def test_constant_images(self):
        c1 = (0.01 * 1.0) ** 2
        assert ssim(np.ones((12, 12)), np.zeros((12, 12))) == pytest.approx(c1 / (1 + c1))

    def test_symmetric(self, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a))

    def test_multichannel(self, rng):
        x = rng.random((3, 16, 16))
        assert ssim(x, x) == pytest.approx(1.0)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestEvaluate:
    def test_identity_model_is_perfect(self):
        samples = synthesize("synthetic:count=2,size=16,seed=4")
        rows = evaluate(_identity_model(), samples, trajectory=True)
        assert [r.id for r in rows] == ["syn0000", "syn0001"]
        for r in rows:
            assert r.psnr == math.inf and r.baseline_psnr == math.inf
            assert r.ssim == pytest.approx(1.0)
            assert r.trajectory == [math.inf]

    def test_threads_do_not_change_rows(self):
        model = _identity_model(rho=0.5, lam=0.01)
        samples = synthesize("synthetic:count=4,size=16,seed=5")
        serial = evaluate(model, samples, noise_sigma=0.05, seed=3)
        threaded = evaluate(model, samples, noise_sigma=0.05, seed=3, threads=2)
        assert serial == threaded

    def test_out_of_range_output_is_scored_raw(self):
        model = _identity_model()
        sample = synthesize("synthetic:count=1,size=16,seed=6")[0]
        row = evaluate(model, [sample], noise_sigma=0.3, seed=1)[0]
        x = Tensor(sample.clean[None].astype(np.float64))
        y = add_noise(model.operator.forward(x), 0.3, 1, purpose="eval.noise.0")
        out = model.operator.adjoint(y).data[0]  # Phi = I, rho = 1, lambda = 0: x_K is Phi^T y
        assert out.min() < 0.0 or out.max() > 1.0
        assert row.psnr == pytest.approx(psnr(out, sample.clean))
        assert row.ssim == pytest.approx(ssim(out, sample.clean))
        assert row.baseline_ssim == pytest.approx(row.ssim)

    def test_mean_row(self):
        rows = [EvalRow("a", 30.0, 0.8, 20.0, 0.5), EvalRow("b", 32.0, 0.9, 22.0, 0.7)]
        assert mean_row(rows) == pytest.approx({"psnr": 31.0, "ssim": 0.85, "baseline_psnr": 21.0,
                                                "baseline_ssim": 0.6})
        with pytest.raises(ContractError):
            mean_row([])


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

class TestSynthetic:
    def test_deterministic(self):
        a = synthesize("synthetic:count=3,size=8,seed=9")
        b = synthesize("synthetic:count=3,size=8,seed=9")
        for s, t in zip(a, b):
            np.testing.assert_array_equal(s.clean, t.clean)
        assert not np.array_equal(a[0].clean, synthesize("synthetic:count=1,size=8,seed=10")[0].clean)

    def test_geometry_and_range(self):
        gray = synthesize("synthetic:count=2,size=8,seed=1")
        assert gray[1].id == "syn0001" and gray[0].shape == (1, 8, 8)
        bands = synthesize("synthetic:count=1,size=8,bands=5,seed=1")
        assert bands[0].shape == (5, 8, 8)
        assert 0.0 <= bands[0].clean.min() and bands[0].clean.max() <= 1.0

    def test_parse_errors(self):
        assert parse_synthetic("synthetic:count=2")["size"] == 32
        for bad in ("synthetic:colour=1", "synthetic:count", "synthetic:count=x", "synthetic:count=0"):
            with pytest.raises(ConfigError):
                parse_synthetic(bad)


class TestIngest:
    def test_tensorfile_batch(self, tmp_path, rng):
        write_tensor(tmp_path / "set.lrtn", rng.random((3, 1, 4, 4)))
        samples = ingest(str(tmp_path / "set.lrtn"))
        assert [s.id for s in samples] == ["set_0000", "set_0001", "set_0002"]

    def test_directory_skips_bad_files(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.full((4, 4), 255))
        (tmp_path / "b.pgm").write_bytes(b"garbage")
        (tmp_path / "notes.txt").write_text("ignored")
        samples = ingest(str(tmp_path))
        assert [s.id for s in samples] == ["a"]
        np.testing.assert_array_equal(samples[0].clean, 1.0)

    def test_missing_path(self, tmp_path):
        with pytest.raises(ConfigError):
            ingest(str(tmp_path / "nowhere"))

    def test_synthetic_source(self):
        assert len(ingest("synthetic:count=2,size=8")) == 2

    def test_stack(self):
        s = [ImageSample(np.zeros((4, 4)), "a"), ImageSample(np.ones((1, 4, 4)), "b")]
        assert stack(s).shape == (2, 1, 4, 4)
        with pytest.raises(ContractError):
            stack(s + [ImageSample(np.zeros((6, 6)), "c")])
