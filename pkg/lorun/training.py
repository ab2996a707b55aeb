"""Two-phase training: backbone pretraining, then frozen-backbone LoRA fine-tuning.

Baselines (Block-K, Block-share) train every denoiser weight end to end on the
same loop so their loss curves are comparable.
"""
import time
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from . import log
from .data import stack
from .denoisers import DenoiserConfig, as_weights, init_weights, weight_shapes
from .errors import CheckpointSchemaError, ConfigError, ContractError, FrozenWeightDriftError, ShapeError
from .fileio import SCHEMA_VERSION, Checkpoint, digest
from .lora import adapter_from_arrays
from .operators import DegradationModel, add_noise, operator_from_state
from .rng import make_rng
from .tensor import Tensor, as_tensor, backward, mul, scale, sub, sum as tsum
from .unfolding import (ALGORITHMS, STAGE_SCALARS, StageParams, UnfoldingModel, build_block_k,
                        build_block_share, build_lorun, run_model)

PHASES = ("pretrain", "finetune", "baseline")
STRATEGIES = ("lorun", "block_k", "block_share")
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    algorithm: str = "pgd"
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    K: int = 3
    gamma: float = 10.0
    strategy: str = "lorun"
    gdm: bool = True
    clip_norm: float = 1.0
    patch_size: int = 32
    noise_sigma: float = 0.0
    pretrain_shared_stages: bool = False
    dtype: str = "float32"
    run_config: Dict[str, object] = field(default_factory=dict)

    def validate(self) -> "TrainConfig":
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if self.epochs < 1 or self.batch_size < 1 or self.K < 1 or self.patch_size < 1:
            raise ConfigError("epochs, batch_size, stages and patch_size must be >= 1")
        if self.learning_rate <= 0 or self.gamma <= 0 or self.clip_norm <= 0:
            raise ConfigError("learning_rate, gamma and clip_norm must be > 0")
        if not all(0 <= b < 1 for b in self.adam_betas) or self.adam_eps <= 0:
            raise ConfigError(f"bad Adam settings betas={self.adam_betas} eps={self.adam_eps}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        self.denoiser.validate()
        return self

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]


@dataclass
class TrainState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    history: List[Tuple[int, float]] = field(default_factory=list)

    def record(self, loss: float) -> None:
        self.history.append((self.step, float(loss)))


# ---------- loss / optimizer ----------

def loss_l2(predictions, targets) -> Tensor:
    """(1/b) sum_i ||x_hat_i - x_i||^2 over a batch (leading axis, or a list of tensors)."""
    if isinstance(predictions, (list, tuple)):
        if len(predictions) != len(targets):
            raise ShapeError(f"{len(predictions)} predictions for {len(targets)} targets")
        if not predictions:
            raise ContractError("empty batch")
        total = None
        for p, t in zip(predictions, targets):
            p = as_tensor(p)
            t = as_tensor(t, like=p)
            if p.shape != t.shape:
                raise ShapeError(f"prediction {p.shape} vs target {t.shape}")
            d = sub(p, t)
            s = tsum(mul(d, d))
            total = s if total is None else total + s
        return scale(total, 1.0 / len(predictions))
    predictions = as_tensor(predictions)
    targets = as_tensor(targets, like=predictions)
    if predictions.shape != targets.shape:
        raise ShapeError(f"prediction {predictions.shape} vs target {targets.shape}")
    if predictions.ndim == 0 or predictions.shape[0] == 0:
        raise ContractError("empty batch")
    d = sub(predictions, targets)
    return scale(tsum(mul(d, d)), 1.0 / predictions.shape[0])


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    f = max_norm / norm
    return {n: g * f for n, g in grads.items()}, norm


def adam_step(state: TrainState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> Dict[str, np.ndarray]:
    """Bias-corrected Adam. Every trainable param needs a gradient and nothing else may have one."""
    trainable = {n: p for n, p in params.items() if p.requires_grad}
    if set(grads) != set(trainable):
        missing = sorted(set(trainable) - set(grads))
        extra = sorted(set(grads) - set(trainable))
        raise ContractError(f"gradients do not match trainable params (missing {missing}, extra {extra})")
    if state.m and set(state.m) != set(trainable):
        raise ContractError("trainable parameter set changed between Adam steps")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    out = {}
    for name in sorted(trainable):
        p = trainable[name]
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs param {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(p.data)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p.data)) + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        p.data = np.ascontiguousarray((p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype))
        out[name] = p.data
    return out


# ---------- batches ----------

def iterate_batches(images: np.ndarray, batch_size: int, patch: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled batches of random patch x patch crops (whole images when smaller)."""
    N, _, H, W = images.shape
    ph, pw = min(patch, H), min(patch, W)
    order = rng.permutation(N)
    for start in range(0, N, batch_size):
        idx = order[start:start + batch_size]
        tops = rng.integers(0, H - ph + 1, size=len(idx))
        lefts = rng.integers(0, W - pw + 1, size=len(idx))
        yield np.stack([images[i, :, t:t + ph, l:l + pw] for i, t, l in zip(idx, tops, lefts)])


def _images(dataset, cfg: TrainConfig, operator: DegradationModel) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        images = dataset.astype(cfg.np_dtype)
    else:
        images = stack(list(dataset), cfg.np_dtype)
    if images.ndim != 4 or len(images) == 0:
        raise ShapeError(f"dataset must be N x C x H x W with N >= 1, got {images.shape}")
    _, C, H, W = images.shape
    if C != cfg.denoiser.image_channels:
        raise ShapeError(f"dataset has {C} channels, denoiser expects {cfg.denoiser.image_channels}")
    operator.measurement_shape((1, C, min(cfg.patch_size, H), min(cfg.patch_size, W)))
    return images


# ---------- loop ----------

def snapshot(tensors: Mapping[str, Tensor]) -> Dict[str, bytes]:
    return {n: t.data.tobytes() for n, t in tensors.items()}


def check_frozen(model: UnfoldingModel, before: Mapping[str, bytes]) -> None:
    now = model.named_tensors()
    drifted = sorted(n for n, b in before.items() if n not in now or now[n].data.tobytes() != b)
    if drifted:
        raise FrozenWeightDriftError(drifted)


def fit(model: UnfoldingModel, images: np.ndarray, cfg: TrainConfig, tag: str,
        frozen: Optional[Mapping[str, bytes]] = None) -> TrainState:
    """Adam on the l2 loss of x_K; loss recorded per step, one log line per epoch."""
    trainable = model.trainable()
    op = model.operator
    state = TrainState()
    t0 = time.time()
    for epoch in range(cfg.epochs):
        rng = make_rng(cfg.seed, f"{tag}.epoch{epoch}")
        losses = []
        for bi, batch in enumerate(iterate_batches(images, cfg.batch_size, cfg.patch_size, rng)):
            x = Tensor(batch)
            y = add_noise(op.forward(x), cfg.noise_sigma, cfg.seed, purpose=f"{tag}.noise.{epoch}.{bi}")
            x_hat, _ = run_model(model, y)
            loss = loss_l2(x_hat, x)
            grads, _ = clip_by_global_norm(backward(loss, trainable), cfg.clip_norm)
            adam_step(state, trainable, grads, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
            op.project()
            state.record(loss.item())
            losses.append(loss.item())
        if frozen is not None:
            check_frozen(model, frozen)
        log.info(tag, f"epoch {epoch + 1}/{cfg.epochs} loss={np.mean(losses):.6g} t={time.time() - t0:.1f}s")
    return state


# ---------- checkpoints ----------

def structure_digest(algorithm: str, denoiser: DenoiserConfig) -> str:
    return digest({"algorithm": algorithm, "denoiser": denoiser.to_dict()})


def operator_digest(operator: DegradationModel) -> str:
    return digest(operator.describe())


def _header(cfg: TrainConfig, operator: DegradationModel, phase: str, strategy: str, K: int, **extra) -> dict:
    h = {
        "schema_version": SCHEMA_VERSION,
        "phase": phase,
        "strategy": strategy,
        "config_digest": structure_digest(cfg.algorithm, cfg.denoiser),
        "operator_digest": operator_digest(operator),
        "algorithm": cfg.algorithm,
        "denoiser": cfg.denoiser.to_dict(),
        "stages": K,
        "gamma": cfg.gamma,
        "gdm": cfg.gdm,
        "dtype": cfg.dtype,
        "operator": operator.describe(),
        "run_config": cfg.run_config,
    }
    h.update(extra)
    return h


def to_checkpoint(model: UnfoldingModel, header: dict, history=()) -> Checkpoint:
    return Checkpoint(header, {n: t.data.copy() for n, t in model.named_tensors().items()}, list(history))


def denoiser_from_header(header: Mapping) -> DenoiserConfig:
    try:
        return DenoiserConfig(**header["denoiser"]).validate()
    except (KeyError, TypeError) as e:
        raise CheckpointSchemaError(f"checkpoint header has no usable denoiser config ({e})") from None


def load_model(ckpt: Checkpoint, operator: Optional[DegradationModel] = None) -> UnfoldingModel:
    """Rebuild the model a checkpoint describes; all tensors come back frozen."""
    h = ckpt.header
    cfg = denoiser_from_header(h)
    if operator is None:
        operator = operator_from_state(h.get("operator", {}), ckpt.operator_state())
        for t in operator.state().values():
            t.requires_grad = False
    K = int(h.get("stages", 1))
    stages = [StageParams.from_arrays(k, ckpt.stage_scalars(k), trainable=False)
              for k in range(1, K + 1) if len(ckpt.stage_scalars(k)) == 3]
    if len(stages) != K:
        raise CheckpointSchemaError(f"checkpoint lacks stage scalars for some of its {K} stages")
    common = dict(algorithm=h.get("algorithm", "pgd"), operator=operator, denoiser=cfg, stage_params=stages,
                  gdm_enabled=bool(h.get("gdm", True)))
    if any(n.startswith("stage1.backbone.") for n in ckpt.tensors):
        blocks = [as_weights(ckpt.group(f"stage{k}.backbone."), False, prefix=f"stage{k}.backbone.")
                  for k in range(1, K + 1)]
        return UnfoldingModel(blocks=blocks, **common)
    backbone = ckpt.backbone()
    shapes = weight_shapes(cfg)
    weights = as_weights(backbone, False, prefix="backbone.")
    adapter_names = ckpt.adapter_names()
    if not adapter_names:
        return UnfoldingModel(backbone=weights, **common)
    adapters = []
    for k in range(1, K + 1):
        pre = f"stage{k}."
        targets = sorted({n[len(pre):-len(".lora_A")] for n in adapter_names
                          if n.startswith(pre) and n.endswith(".lora_A")})
        unknown = [t for t in targets if t not in shapes]
        if unknown:
            raise CheckpointSchemaError("adapters for unknown weights", names=[pre + t for t in unknown])
        adapters.append({t: adapter_from_arrays(t, ckpt.tensors[f"{pre}{t}.lora_A"], ckpt.tensors[f"{pre}{t}.lora_B"],
                                                shapes[t], prefix=pre, trainable=False) for t in targets})
    return UnfoldingModel(backbone=weights, adapters=adapters, **common)


# ---------- phases ----------

def pretrain_backbone(config: TrainConfig, dataset, operator: DegradationModel) -> Checkpoint:
    """Train Block-1 (or a K-stage Block-share with pretrain_shared_stages) end to end."""
    cfg = config.validate()
    if cfg.phase != "pretrain":
        raise ContractError(f"pretrain_backbone needs phase=pretrain, got {cfg.phase}")
    images = _images(dataset, cfg, operator)
    K = cfg.K if cfg.pretrain_shared_stages else 1
    init = init_weights(cfg.denoiser, cfg.seed, "backbone", cfg.np_dtype)
    model = build_block_share(cfg.algorithm, operator, cfg.denoiser, K, init, trainable=True,
                              gdm_enabled=cfg.gdm, dtype=cfg.np_dtype)
    log.info("pretrain", f"{cfg.algorithm} {cfg.denoiser.arch} K={K} on {len(images)} images, "
                         f"{sum(t.size for t in model.trainable().values())} trainable scalars")
    state = fit(model, images, cfg, "pretrain")
    return to_checkpoint(model, _header(cfg, operator, "pretrain", "block_share", K), state.history)


def _backbone_from(ckpt: Checkpoint, cfg: TrainConfig) -> Dict[str, np.ndarray]:
    backbone = ckpt.backbone()
    if not backbone:
        raise CheckpointSchemaError("checkpoint has no backbone.* tensors")
    expected = structure_digest(cfg.algorithm, cfg.denoiser)
    found = ckpt.header.get("config_digest")
    if found != expected:
        raise CheckpointSchemaError("backbone was trained for a different algorithm/denoiser", expected, found)
    shapes = weight_shapes(cfg.denoiser)
    bad = sorted(n for n in set(shapes) | set(backbone)
                 if n not in backbone or n not in shapes or tuple(backbone[n].shape) != shapes[n])
    if bad:
        raise CheckpointSchemaError("backbone tensors do not match the denoiser config",
                                    names=["backbone." + n for n in bad])
    return {n: a.astype(cfg.np_dtype) for n, a in backbone.items()}


def _reuse_operator(ckpt: Checkpoint, operator: DegradationModel, tag: str) -> None:
    if ckpt.header.get("operator_digest") == operator_digest(operator):
        operator.load_state(ckpt.operator_state())
        log.info(tag, "operator matches the pretrained one; reusing its tensors")
    else:
        log.info(tag, f"operator differs from the pretrained one ({ckpt.header.get('operator')}); "
                      "keeping the freshly built operator")


def _stage_arrays(ckpt: Checkpoint) -> List[Dict[str, np.ndarray]]:
    out = []
    k = 1
    while len(ckpt.stage_scalars(k)) == 3:
        out.append(ckpt.stage_scalars(k))
        k += 1
    return out


def finetune_lora(config: TrainConfig, backbone_ckpt: Checkpoint, dataset, operator: DegradationModel) -> Checkpoint:
    """Freeze the backbone, attach K adapter sets, train adapters + stage scalars (+ Phi if learnable)."""
    cfg = config.validate()
    if cfg.phase != "finetune":
        raise ContractError(f"finetune_lora needs phase=finetune, got {cfg.phase}")
    backbone = _backbone_from(backbone_ckpt, cfg)
    images = _images(dataset, cfg, operator)
    _reuse_operator(backbone_ckpt, operator, "finetune")
    model = build_lorun(cfg.algorithm, operator, cfg.denoiser, cfg.K, backbone, cfg.gamma, cfg.seed,
                        stage_arrays=_stage_arrays(backbone_ckpt), gdm_enabled=cfg.gdm, dtype=cfg.np_dtype)

    ranks = {t: a.rank for t, a in model.adapters[0].items()}
    log.info("finetune", f"gamma={cfg.gamma} ranks: " + ", ".join(f"{t}={r}" for t, r in ranks.items()))
    adapter_total = sum(a.num_params for stage in model.adapters for a in stage.values())
    expected = (adapter_total + cfg.K * len(STAGE_SCALARS[cfg.algorithm])
                + sum(t.size for t in operator.parameters().values()))
    actual = sum(t.size for t in model.trainable().values())
    if actual != expected:
        raise ContractError(f"trainable count {actual} != adapters + stage scalars + operator ({expected})")
    log.info("finetune", f"K={cfg.K} trainable={actual} frozen backbone={sum(a.size for a in backbone.values())}")

    frozen = snapshot({n: t for n, t in model.frozen().items() if n.startswith("backbone.")})
    state = fit(model, images, cfg, "finetune", frozen)
    check_frozen(model, frozen)
    header = _header(cfg, operator, "finetune", "lorun", cfg.K, ranks=ranks)
    return to_checkpoint(model, header, state.history)


def train_baseline(config: TrainConfig, dataset, operator: DegradationModel,
                   backbone_ckpt: Optional[Checkpoint] = None) -> Checkpoint:
    """Full-parameter Block-K or Block-share training, optionally starting from a pretrained backbone."""
    cfg = config.validate()
    if cfg.strategy not in ("block_k", "block_share"):
        raise ConfigError(f"baseline strategy must be block_k or block_share, got {cfg.strategy}")
    images = _images(dataset, cfg, operator)
    stage_arrays = None
    if backbone_ckpt is not None:
        start = _backbone_from(backbone_ckpt, cfg)
        _reuse_operator(backbone_ckpt, operator, "baseline")
        stage_arrays = _stage_arrays(backbone_ckpt)
        blocks = [dict(start) for _ in range(cfg.K)]
    else:
        start = init_weights(cfg.denoiser, cfg.seed, "backbone", cfg.np_dtype)
        blocks = [init_weights(cfg.denoiser, cfg.seed, f"stage{k}.backbone", cfg.np_dtype)
                  for k in range(1, cfg.K + 1)]
    if cfg.strategy == "block_share":
        model = build_block_share(cfg.algorithm, operator, cfg.denoiser, cfg.K, start, trainable=True,
                                  stage_arrays=stage_arrays, gdm_enabled=cfg.gdm, dtype=cfg.np_dtype)
    else:
        model = build_block_k(cfg.algorithm, operator, cfg.denoiser, blocks, trainable=True,
                              stage_arrays=stage_arrays, gdm_enabled=cfg.gdm, dtype=cfg.np_dtype)
    log.info("baseline", f"{cfg.strategy} K={cfg.K} trainable={sum(t.size for t in model.trainable().values())}")
    state = fit(model, images, cfg, "baseline")
    return to_checkpoint(model, _header(cfg, operator, "baseline", cfg.strategy, cfg.K), state.history)
