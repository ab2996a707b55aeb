"""Loss, optimizer and the pretrain -> finetune -> baseline phases on a tiny CS toy."""
from dataclasses import replace

import numpy as np
import pytest

from conftest import CONFIGS
from lorun.config import load_config
from lorun.data import ingest, synthesize
from lorun.denoisers import DenoiserConfig, weight_shapes
from lorun.errors import CheckpointSchemaError, ConfigError, ContractError, FrozenWeightDriftError, ShapeError
from lorun.fileio import decode_checkpoint, encode_checkpoint
from lorun.metrics import evaluate, mean_row
from lorun.operators import CsOperator
from lorun.tensor import Tensor, backward
from lorun.training import (TrainConfig, TrainState, adam_step, check_frozen, clip_by_global_norm, finetune_lora,
                            iterate_batches, load_model, loss_l2, pretrain_backbone, snapshot, train_baseline)

TOY = DenoiserConfig("unet", image_channels=1, base_channels=4, depth=1)


def _cfg(phase, **kw):
    base = dict(phase=phase, denoiser=TOY, epochs=2, batch_size=4, K=2, gamma=25.0, patch_size=8, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


def _op(ratio=0.25):
    return CsOperator.random(ratio, 8, seed=0, learnable=True, dtype=np.float64)


@pytest.fixture(scope="module")
def dataset():
    return synthesize("synthetic:count=8,size=8,seed=1")


@pytest.fixture(scope="module")
def backbone_ckpt(dataset):
    return pretrain_backbone(_cfg("pretrain"), dataset, _op())


@pytest.fixture(scope="module")
def lorun_ckpt(backbone_ckpt, dataset):
    return finetune_lora(_cfg("finetune"), backbone_ckpt, dataset, _op())


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

class TestLoss:
    def test_zero_for_equal(self, rng):
        x = rng.random((2, 1, 4, 4))
        assert loss_l2(Tensor(x), Tensor(x)).item() == 0.0

    def test_uniform_offset(self):
        x = np.zeros((1, 100))
        assert loss_l2(Tensor(x + 0.1), Tensor(x)).item() == pytest.approx(1.0)

    def test_list_form_matches_batch_form(self, rng):
        p, t = rng.random((3, 2, 2)), rng.random((3, 2, 2))
        a = loss_l2([Tensor(v) for v in p], [Tensor(v) for v in t]).item()
        assert a == pytest.approx(loss_l2(Tensor(p), Tensor(t)).item())

    def test_gradient(self, rng):
        p = Tensor(rng.random((2, 3)), requires_grad=True, name="p")
        t = rng.random((2, 3))
        g = backward(loss_l2(p, Tensor(t)), {"p": p})["p"]
        np.testing.assert_allclose(g, (2.0 / 2) * (p.data - t))

    def test_errors(self):
        with pytest.raises(ContractError):
            loss_l2([], [])
        with pytest.raises(ShapeError):
            loss_l2(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


class TestAdam:
    def _param(self, value):
        return {"p": Tensor(np.array(value, dtype=np.float64), requires_grad=True, name="p")}

    def test_zero_gradient_keeps_params(self):
        params = self._param([1.0, -2.0])
        adam_step(TrainState(), params, {"p": np.zeros(2)}, lr=0.1)
        np.testing.assert_array_equal(params["p"].data, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        params = self._param([0.0, 0.0, 0.0])
        adam_step(TrainState(), params, {"p": np.ones(3)}, lr=0.01)
        np.testing.assert_allclose(params["p"].data, -0.01, rtol=1e-6)

    def test_converges_on_quadratic(self):
        c = np.array([0.5, -0.3, 0.2])
        params = self._param([0.0, 0.0, 0.0])
        state = TrainState()
        for _ in range(300):
            adam_step(state, params, {"p": 2.0 * (params["p"].data - c)}, lr=0.05)
        assert np.linalg.norm(params["p"].data - c) < 1e-2
        assert state.step == 300

    def test_misaligned_gradients(self):
        with pytest.raises(ContractError):
            adam_step(TrainState(), self._param([1.0]), {"q": np.zeros(1)}, lr=0.1)

    def test_clip_by_global_norm(self):
        clipped, norm = clip_by_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
        same, _ = clip_by_global_norm({"a": np.array([0.3])}, 1.0)
        np.testing.assert_array_equal(same["a"], [0.3])


class TestBatches:
    def test_every_image_once_per_epoch(self):
        images = np.arange(10, dtype=np.float64).reshape(10, 1, 1, 1) * np.ones((1, 1, 6, 6))
        seen = []
        for batch in iterate_batches(images, 4, 4, np.random.default_rng(0)):
            assert batch.shape[1:] == (1, 4, 4)
            seen.extend(batch[:, 0, 0, 0].tolist())
        assert sorted(seen) == list(range(10))


class TestConfig:
    def test_bad_phase_and_strategy(self):
        with pytest.raises(ConfigError):
            _cfg("warmup").validate()
        with pytest.raises(ConfigError):
            _cfg("baseline", strategy="block_n").validate()

    def test_bad_betas(self):
        with pytest.raises(ConfigError):
            _cfg("pretrain", adam_betas=(0.9, 1.0)).validate()


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------

class TestPretrain:
    def test_checkpoint_layout(self, backbone_ckpt):
        h = backbone_ckpt.header
        assert h["phase"] == "pretrain" and h["stages"] == 1
        assert "op.phi" in backbone_ckpt.tensors
        assert "stage1.rho_raw" in backbone_ckpt.tensors
        assert set(backbone_ckpt.backbone()) == set(weight_shapes(TOY))
        assert len(backbone_ckpt.history) == 2 * 2  # epochs x batches

    def test_full_batch_loss_decreases(self):
        data = synthesize("synthetic:count=8,size=8,seed=3")
        ckpt = pretrain_backbone(_cfg("pretrain", epochs=8, batch_size=8), data, _op())
        losses = [v for _, v in ckpt.history]
        assert losses[-1] < losses[0]

    def test_deterministic(self, dataset, backbone_ckpt):
        again = pretrain_backbone(_cfg("pretrain"), dataset, _op())
        assert encode_checkpoint(again) == encode_checkpoint(backbone_ckpt)
        assert again.history == backbone_ckpt.history

    def test_shared_stage_variant(self, dataset):
        ckpt = pretrain_backbone(_cfg("pretrain", epochs=1, pretrain_shared_stages=True), dataset, _op())
        assert ckpt.header["stages"] == 2
        assert "stage2.rho_raw" in ckpt.tensors

    def test_channel_mismatch(self):
        rgb = synthesize("synthetic:count=2,size=8,channels=3,seed=1")
        with pytest.raises(ShapeError):
            pretrain_backbone(_cfg("pretrain"), rgb, _op())

    def test_wrong_phase(self, dataset):
        with pytest.raises(ContractError):
            pretrain_backbone(_cfg("finetune"), dataset, _op())


class TestFinetune:
    def test_backbone_bit_identical(self, backbone_ckpt, lorun_ckpt):
        before, after = backbone_ckpt.backbone(), lorun_ckpt.backbone()
        assert set(before) == set(after)
        for name in before:
            assert before[name].tobytes() == after[name].tobytes(), name

    def test_adapters_and_scalars_per_stage(self, lorun_ckpt):
        names = set(lorun_ckpt.tensors)
        for k in (1, 2):
            assert f"stage{k}.enc0.conv1.weight.lora_A" in names
            assert f"stage{k}.lambda_raw" in names
        assert not any(n.endswith("bias.lora_A") for n in names)
        assert lorun_ckpt.header["phase"] == "finetune"
        assert lorun_ckpt.header["ranks"]["enc0.conv1.weight"] == 1  # ceil(min(2, 4) * 0.25)

    def test_adapters_moved(self, lorun_ckpt):
        assert any(np.any(a != 0) for n, a in lorun_ckpt.tensors.items() if n.endswith(".lora_A"))

    def test_reload_is_frozen_lorun(self, lorun_ckpt):
        model = load_model(decode_checkpoint(encode_checkpoint(lorun_ckpt)))
        assert model.mode == "lorun" and model.K == 2
        assert model.trainable() == {}

    def test_schema_mismatch(self, backbone_ckpt, dataset):
        wider = replace(_cfg("finetune"), denoiser=DenoiserConfig("unet", 1, 8, 1))
        with pytest.raises(CheckpointSchemaError) as exc:
            finetune_lora(wider, backbone_ckpt, dataset, _op())
        assert exc.value.expected_digest and exc.value.found_digest
        assert exc.value.expected_digest != exc.value.found_digest

    def test_other_ratio_backbone(self, backbone_ckpt, dataset):
        op = _op(ratio=0.5)
        ckpt = finetune_lora(_cfg("finetune", epochs=1), backbone_ckpt, dataset, op)
        assert ckpt.tensors["op.phi"].shape == (32, 64)

    def test_drift_detection(self, lorun_ckpt):
        model = load_model(lorun_ckpt)
        frozen = snapshot(model.frozen())
        name = "backbone.head.bias"
        model.named_tensors()[name].data = model.named_tensors()[name].data + 1.0
        with pytest.raises(FrozenWeightDriftError) as exc:
            check_frozen(model, frozen)
        assert exc.value.names == [name]


class TestBaseline:
    def test_block_k_from_scratch(self, dataset):
        ckpt = train_baseline(_cfg("baseline", strategy="block_k", epochs=1), dataset, _op())
        assert ckpt.header["strategy"] == "block_k"
        assert "stage2.backbone.head.weight" in ckpt.tensors
        assert not ckpt.backbone()
        assert ckpt.history

    def test_block_share_from_backbone(self, dataset, backbone_ckpt):
        ckpt = train_baseline(_cfg("baseline", strategy="block_share", epochs=1), dataset, _op(), backbone_ckpt)
        assert ckpt.header["strategy"] == "block_share"
        assert load_model(ckpt).mode == "block_share"

    def test_lorun_is_not_a_baseline(self, dataset):
        with pytest.raises(ConfigError):
            train_baseline(_cfg("baseline", strategy="lorun"), dataset, _op())


# ---------------------------------------------------------------------------
# shipped toy config, end to end
# ---------------------------------------------------------------------------

@pytest.mark.slow
class TestToyCsQuality:
    def test_lorun_beats_adjoint_baseline(self):
        cfg = load_config(CONFIGS / "toy_cs.toml")
        train = ingest(cfg.train_data)
        backbone = pretrain_backbone(cfg.train_config("pretrain"), train, cfg.build_operator())
        ckpt = finetune_lora(cfg.train_config("finetune"), backbone, train, cfg.build_operator())
        assert all(np.isfinite(loss) for _, loss in ckpt.history)
        rows = evaluate(load_model(ckpt), ingest(cfg.test_data), cfg.noise_sigma, cfg.seed)
        mean = mean_row(rows)
        assert mean["psnr"] > mean["baseline_psnr"]
