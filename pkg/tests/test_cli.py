"""Command line: exit codes, verify/params output and the toy pretrain -> finetune -> eval pipeline."""
import json
import os
import subprocess
import sys

import pytest

from conftest import REPO, TINY_CONFIG
from lorun.cli import EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main
from lorun.fileio import read_rows
from lorun.verify import CHECKS, run_checks


def _lines(capsys):
    return [l for l in capsys.readouterr().out.splitlines() if l]


# ---------------------------------------------------------------------------
# usage
# ---------------------------------------------------------------------------

class TestUsage:
    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_help(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "pretrain" in capsys.readouterr().out

    def test_missing_config(self, tmp_path):
        assert main(["pretrain", "--config", str(tmp_path / "nope.toml")]) == EXIT_USAGE

    def test_unknown_fault(self):
        assert main(["verify", "--inject-fault", "gram"]) == EXIT_USAGE


class TestEntryPoint:
    """tools/lorun_cli.py run as a script, the way the shell drivers call it."""

    def _run(self, *args):
        env = dict(os.environ, PYTHONPATH=str(REPO), LORUN_QUIET="1")
        return subprocess.run([sys.executable, str(REPO / "tools" / "lorun_cli.py"), *args],
                              capture_output=True, text=True, env=env, cwd=str(REPO / "tools"), timeout=600)

    def test_params(self, tiny_config):
        proc = self._run("params", "--config", str(tiny_config))
        assert proc.returncode == EXIT_OK, proc.stderr
        assert proc.stdout.startswith("arch,stages,gamma,backbone")

    def test_verify_subset(self):
        proc = self._run("verify", "--only", "adjoint")
        assert proc.returncode == EXIT_OK, proc.stderr
        assert all(json.loads(l)["passed"] for l in proc.stdout.splitlines() if l)

    def test_usage_error(self):
        assert self._run().returncode == EXIT_USAGE


# ---------------------------------------------------------------------------
# verify / params
# ---------------------------------------------------------------------------

class TestVerify:
    def test_injected_adjoint_fault_fails(self, capsys):
        assert main(["verify", "--inject-fault", "adjoint", "--only", "adjoint"]) == EXIT_VERIFY
        rows = {r["check"]: r for r in map(json.loads, _lines(capsys))}
        assert rows["adjoint.cs"]["passed"] is False
        assert rows["adjoint.cs"]["metric"] > rows["adjoint.cs"]["threshold"]

    def test_selected_checks_pass(self, capsys):
        assert main(["verify", "--only", "adjoint", "cassi.width"]) == EXIT_OK
        rows = [json.loads(l) for l in _lines(capsys)]
        expected = [n for n in CHECKS if n.startswith(("adjoint", "cassi.width"))]
        assert [r["check"] for r in rows] == expected
        assert all(r["passed"] for r in rows)

    def test_fresh_build_passes_every_check(self):
        rows = run_checks()
        assert [r["check"] for r in rows] == list(CHECKS)
        failed = [(r["check"], r.get("error") or r["metric"]) for r in rows if not r["passed"]]
        assert not failed

    def test_every_primitive_has_a_gradient_check(self):
        for name in ("matmul", "conv2d.zero", "conv2d.circular", "softmax", "layer_norm", "soft_threshold"):
            assert f"grad.{name}" in CHECKS


class TestParams:
    def test_sweep(self, tiny_config, capsys):
        assert main(["params", "--config", str(tiny_config), "--sweep-k", "12"]) == EXIT_OK
        lines = _lines(capsys)
        assert lines[0].startswith("arch,stages,gamma,backbone")
        assert lines[1].startswith("unet,2,25,")
        sweep = [l.split(",") for l in lines[3:]]
        assert [int(r[0]) for r in sweep] == list(range(1, 13))
        ratios = [float(r[3]) for r in sweep]
        assert ratios[0] > 1.0
        assert all(b < a for a, b in zip(ratios, ratios[1:]))


# ---------------------------------------------------------------------------
# end to end on the tiny config
# ---------------------------------------------------------------------------

@pytest.fixture
def trained(tiny_config, tmp_path):
    """Pretrained backbone plus two LoRA checkpoints (different seeds) over it."""
    run = tmp_path / "run"
    assert main(["pretrain", "--config", str(tiny_config)]) == EXIT_OK
    assert main(["finetune", "--config", str(tiny_config), "--backbone", str(run / "backbone.lrck")]) == EXIT_OK
    assert main(["finetune", "--config", str(tiny_config), "--backbone", str(run / "backbone.lrck"),
                 "--seed", "5", "--out", str(tmp_path / "other")]) == EXIT_OK
    return run, tmp_path / "other" / "lorun.lrck"


class TestPipeline:
    def test_outputs(self, trained):
        run, _ = trained
        for name in ("backbone.lrck", "lorun.lrck", "pretrain_loss.csv", "finetune_loss.csv",
                     "resolved_config.toml"):
            assert (run / name).is_file(), name
        assert read_rows(run / "pretrain_loss.csv")

    def test_pretrain_is_reproducible(self, trained, tiny_config, tmp_path):
        run, _ = trained
        assert main(["pretrain", "--config", str(tiny_config), "--out", str(tmp_path / "again")]) == EXIT_OK
        assert (tmp_path / "again" / "backbone.lrck").read_bytes() == (run / "backbone.lrck").read_bytes()

    def test_eval_table(self, trained, tiny_config, capsys):
        run, _ = trained
        capsys.readouterr()
        assert main(["eval", "--model", str(run / "lorun.lrck"), "--config", str(tiny_config)]) == EXIT_OK
        lines = _lines(capsys)
        assert lines[0].startswith("# task=cs strategy=lorun stages=2")
        assert lines[1] == "id,psnr,ssim,baseline_psnr,baseline_ssim"
        assert [l.split(",")[0] for l in lines[2:]] == ["syn0000", "syn0001", "mean"]
        rows = read_rows(run / "eval.csv")
        assert rows[-1]["id"] == "mean"
        assert float(rows[-1]["psnr"]) == pytest.approx((float(rows[0]["psnr"]) + float(rows[1]["psnr"])) / 2,
                                                        abs=1e-5)

    def test_trajectory_columns(self, trained, tiny_config, tmp_path, capsys):
        run, _ = trained
        capsys.readouterr()
        assert main(["eval", "--model", str(run / "lorun.lrck"), "--config", str(tiny_config),
                     "--trajectory", "--csv", str(tmp_path / "t.csv")]) == EXIT_OK
        rows = read_rows(tmp_path / "t.csv")
        assert "stage2_psnr" in rows[0]
        assert rows[0]["stage2_psnr"] == rows[0]["psnr"]

    def test_swap_is_an_involution(self, trained, tmp_path):
        run, other = trained
        there, back = tmp_path / "swapped.lrck", tmp_path / "back.lrck"
        assert main(["lora", "swap", "--target", str(run / "lorun.lrck"), "--donor", str(other),
                     "--out", str(there)]) == EXIT_OK
        assert there.read_bytes() != (run / "lorun.lrck").read_bytes()
        assert main(["lora", "swap", "--target", str(there), "--donor", str(run / "lorun.lrck"),
                     "--out", str(back)]) == EXIT_OK
        assert back.read_bytes() == (run / "lorun.lrck").read_bytes()

    def test_merge_matches_adapters(self, trained, tiny_config, tmp_path):
        run, _ = trained
        merged = tmp_path / "merged.lrck"
        assert main(["lora", "merge", "--model", str(run / "lorun.lrck"), "--out", str(merged)]) == EXIT_OK
        for name, model in (("a.csv", run / "lorun.lrck"), ("m.csv", merged)):
            assert main(["eval", "--model", str(model), "--config", str(tiny_config),
                         "--csv", str(tmp_path / name)]) == EXIT_OK
        a, m = read_rows(tmp_path / "a.csv"), read_rows(tmp_path / "m.csv")
        for ra, rm in zip(a, m):
            assert abs(float(ra["psnr"]) - float(rm["psnr"])) < 1e-4

    def test_inspect(self, trained, tmp_path, capsys):
        run, _ = trained
        capsys.readouterr()
        assert main(["lora", "inspect", "--model", str(run / "lorun.lrck"),
                     "--out-dir", str(tmp_path / "heat")]) == EXIT_OK
        lines = _lines(capsys)
        assert lines[0] == "stage,target,rank,fro_norm,max_abs"
        assert (tmp_path / "heat" / "stage1.enc0.conv1.weight.csv").is_file()
        assert (tmp_path / "heat" / "stage2.head.weight.pgm").is_file()

    def test_untileable_eval_data(self, trained):
        run, _ = trained
        assert main(["eval", "--model", str(run / "lorun.lrck"), "--data", "synthetic:count=1,size=12"]) == EXIT_USAGE

    def test_backbone_config_mismatch(self, trained, tmp_path, capsys):
        run, _ = trained
        wide = tmp_path / "wide.toml"
        wide.write_text(TINY_CONFIG.replace("base_channels = 4", "base_channels = 8"), encoding="utf-8")
        capsys.readouterr()
        code = main(["finetune", "--config", str(wide), "--backbone", str(run / "backbone.lrck"),
                     "--out", str(tmp_path / "wide")])
        assert code == EXIT_USAGE
        assert "expected digest" in capsys.readouterr().err
