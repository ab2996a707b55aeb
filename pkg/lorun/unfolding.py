"""K-stage unfolded PGD / HQS models.

PGD stage k:  z = x - rho_k Phi^T (Phi x - y);  x = D_k(z, sqrt(rho_k lambda_k))
HQS stage k:  x = (Phi^T Phi + mu_k I)^-1 (Phi^T y + mu_k w);  w = D_k(x, sqrt(lambda_k / mu_k))

D_k is the shared denoiser in one of three forms:
  lorun        one frozen backbone + per-stage LoRA adapters
  block_k      K independent backbones
  block_share  one backbone reused by every stage
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .denoisers import DenoiserConfig, as_weights, check_weights, denoise
from .errors import ContractError
from .lora import LoraAdapter, init_adapters
from .operators import DegradationModel, solve_gram
from .rng import make_rng
from .tensor import Tensor, as_tensor, div, mul, softplus, sqrt, sub

ALGORITHMS = ("pgd", "hqs")
MODES = ("lorun", "block_k", "block_share")
INIT_VALUE = 0.5

# which step scalars each algorithm actually uses
STAGE_SCALARS = {"pgd": ("rho", "lambda"), "hqs": ("lambda", "mu")}


def inverse_softplus(v: float) -> float:
    """raw with softplus(raw) == v; v == 0 maps to -inf."""
    if v < 0:
        raise ContractError(f"softplus cannot reach {v}")
    if v == 0:
        return -math.inf
    return v + math.log(-math.expm1(-v))


@dataclass
class StageParams:
    index: int
    raw: Dict[str, Tensor]

    @classmethod
    def init(cls, index: int, rho: float = INIT_VALUE, lam: float = INIT_VALUE, mu: float = INIT_VALUE,
             trainable: bool = True, dtype=np.float32) -> "StageParams":
        vals = {"rho": rho, "lambda": lam, "mu": mu}
        raw = {k: Tensor(np.array(inverse_softplus(v), dtype=dtype), requires_grad=trainable,
                         name=f"stage{index}.{k}_raw") for k, v in vals.items()}
        return cls(index, raw)

    @classmethod
    def from_arrays(cls, index: int, arrays: Mapping[str, np.ndarray], trainable: bool = True) -> "StageParams":
        raw = {k: Tensor(np.array(arrays[k]), requires_grad=trainable, name=f"stage{index}.{k}_raw")
               for k in ("rho", "lambda", "mu")}
        return cls(index, raw)

    @property
    def rho(self) -> Tensor:
        return softplus(self.raw["rho"])

    @property
    def lam(self) -> Tensor:
        return softplus(self.raw["lambda"])

    @property
    def mu(self) -> Tensor:
        return softplus(self.raw["mu"])

    def values(self) -> Dict[str, float]:
        return {"rho": self.rho.item(), "lambda": self.lam.item(), "mu": self.mu.item()}

    def tensors(self, algorithm: Optional[str] = None) -> Dict[str, Tensor]:
        keys = ("rho", "lambda", "mu") if algorithm is None else STAGE_SCALARS[algorithm]
        return {self.raw[k].name: self.raw[k] for k in keys}


@dataclass
class UnfoldingModel:
    algorithm: str
    operator: DegradationModel
    denoiser: DenoiserConfig
    stage_params: List[StageParams]
    backbone: Optional[Dict[str, Tensor]] = None
    blocks: Optional[List[Dict[str, Tensor]]] = None
    adapters: Optional[List[Dict[str, LoraAdapter]]] = None
    gdm_enabled: bool = True
    extra: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ContractError(f"unknown algorithm {self.algorithm!r}")
        if self.K < 1:
            raise ContractError("stage count must be >= 1")
        lorun = self.backbone is not None and self.adapters is not None and self.blocks is None
        block_k = self.blocks is not None and self.backbone is None and self.adapters is None
        share = self.backbone is not None and self.adapters is None and self.blocks is None
        if sum((lorun, block_k, share)) != 1:
            raise ContractError("model must be exactly one of lorun, block_k, block_share")
        if lorun and len(self.adapters) != self.K:
            raise ContractError(f"{len(self.adapters)} adapter sets for {self.K} stages")
        if block_k and len(self.blocks) != self.K:
            raise ContractError(f"{len(self.blocks)} blocks for {self.K} stages")
        for w in ([self.backbone] if self.backbone is not None else self.blocks):
            check_weights(self.denoiser, w)

    @property
    def K(self) -> int:
        return len(self.stage_params)

    @property
    def dtype(self):
        return self.stage_params[0].raw["rho"].dtype

    @property
    def mode(self) -> str:
        if self.blocks is not None:
            return "block_k"
        return "lorun" if self.adapters is not None else "block_share"

    def stage_denoiser(self, k: int) -> Tuple[Mapping[str, Tensor], Optional[Mapping[str, LoraAdapter]]]:
        self._check_stage(k)
        if self.blocks is not None:
            return self.blocks[k - 1], None
        return self.backbone, (self.adapters[k - 1] if self.adapters is not None else None)

    def _check_stage(self, k: int) -> None:
        if not 1 <= k <= self.K:
            raise ContractError(f"stage index {k} outside 1..{self.K}")

    def named_tensors(self) -> Dict[str, Tensor]:
        """Every tensor of the model under its checkpoint name."""
        out: Dict[str, Tensor] = dict(self.operator.state())
        if self.backbone is not None:
            out.update({f"backbone.{n}": t for n, t in self.backbone.items()})
        for k in range(1, self.K + 1):
            if self.blocks is not None:
                out.update({f"stage{k}.backbone.{n}": t for n, t in self.blocks[k - 1].items()})
            if self.adapters is not None:
                for a in self.adapters[k - 1].values():
                    out.update(a.tensors(f"stage{k}."))
            out.update(self.stage_params[k - 1].tensors())
        return out

    def trainable(self) -> Dict[str, Tensor]:
        """Trainable tensors the forward pass can reach (unused stage scalars excluded)."""
        used = set()
        for sp in self.stage_params:
            used.update(sp.tensors(self.algorithm))
        return {n: t for n, t in self.named_tensors().items()
                if t.requires_grad and (not n.endswith("_raw") or n in used)}

    def frozen(self) -> Dict[str, Tensor]:
        return {n: t for n, t in self.named_tensors().items() if not t.requires_grad}


# ---------- stage updates ----------

def pgd_gradient_step(x_prev, y, op: DegradationModel, rho) -> Tensor:
    """z = x - rho Phi^T (Phi x - y)."""
    x_prev = as_tensor(x_prev)
    return sub(x_prev, mul(op.adjoint(sub(op.forward(x_prev), y)), rho))


def hqs_data_step(w_prev, y, op: DegradationModel, mu) -> Tensor:
    """x = (Phi^T Phi + mu I)^-1 (Phi^T y + mu w)."""
    w_prev = as_tensor(w_prev)
    rhs = op.adjoint(y) + mul(w_prev, mu)
    return solve_gram(op, rhs, mu)


def run_stage(model: UnfoldingModel, k: int, state, y, trace: Optional[dict] = None) -> Tensor:
    model._check_stage(k)
    sp = model.stage_params[k - 1]
    weights, adapters = model.stage_denoiser(k)
    if model.algorithm == "pgd":
        rho, lam = sp.rho, sp.lam
        z = pgd_gradient_step(state, y, model.operator, rho) if model.gdm_enabled else as_tensor(state)
        return denoise(model.denoiser, weights, adapters, z, sqrt(mul(rho, lam)), trace)
    lam, mu = sp.lam, sp.mu
    x = hqs_data_step(state, y, model.operator, mu) if model.gdm_enabled else as_tensor(state)
    return denoise(model.denoiser, weights, adapters, x, sqrt(div(lam, mu)), trace)


def run_model(model: UnfoldingModel, y, x0=None, trace: Optional[dict] = None) -> Tuple[Tensor, List[Tensor]]:
    """Apply stages 1..K from x0 (default Phi^T y); returns (x_K, per-stage outputs)."""
    y = as_tensor(y)
    state = model.operator.adjoint(y) if x0 is None else as_tensor(x0)
    trajectory = []
    for k in range(1, model.K + 1):
        state = run_stage(model, k, state, y, trace)
        trajectory.append(state)
    return state, trajectory


# ---------- builders ----------

StageArrays = Optional[Sequence[Mapping[str, np.ndarray]]]


def _stages(K: int, stage_arrays: StageArrays, trainable: bool, dtype) -> List[StageParams]:
    """Fresh 0.5 init, or per-stage raws; stages past the given ones reuse the last set."""
    if not stage_arrays:
        return [StageParams.init(k, trainable=trainable, dtype=dtype) for k in range(1, K + 1)]
    return [StageParams.from_arrays(k, stage_arrays[min(k, len(stage_arrays)) - 1], trainable)
            for k in range(1, K + 1)]


def build_lorun(algorithm: str, operator: DegradationModel, cfg: DenoiserConfig, K: int,
                backbone: Mapping[str, np.ndarray], gamma: float, seed: int,
                stage_arrays: StageArrays = None,
                gdm_enabled: bool = True, dtype=np.float32) -> UnfoldingModel:
    """Frozen backbone plus fresh zero-delta adapters for each of K stages."""
    frozen = as_weights(backbone, trainable=False, prefix="backbone.")
    shapes = {n: t.shape for n, t in frozen.items()}
    adapters = [init_adapters(shapes, gamma, make_rng(seed, f"stage{k}.lora"), prefix=f"stage{k}.", dtype=dtype)
                for k in range(1, K + 1)]
    return UnfoldingModel(algorithm, operator, cfg, _stages(K, stage_arrays, True, dtype),
                          backbone=frozen, adapters=adapters, gdm_enabled=gdm_enabled)


def build_block_share(algorithm: str, operator: DegradationModel, cfg: DenoiserConfig, K: int,
                      backbone: Mapping[str, np.ndarray], trainable: bool = True,
                      stage_arrays: StageArrays = None,
                      gdm_enabled: bool = True, dtype=np.float32) -> UnfoldingModel:
    return UnfoldingModel(algorithm, operator, cfg, _stages(K, stage_arrays, True, dtype),
                          backbone=as_weights(backbone, trainable, prefix="backbone."), gdm_enabled=gdm_enabled)


def build_block_k(algorithm: str, operator: DegradationModel, cfg: DenoiserConfig,
                  blocks: List[Mapping[str, np.ndarray]], trainable: bool = True,
                  stage_arrays: StageArrays = None,
                  gdm_enabled: bool = True, dtype=np.float32) -> UnfoldingModel:
    K = len(blocks)
    weights = [as_weights(b, trainable, prefix=f"stage{k}.backbone.") for k, b in enumerate(blocks, start=1)]
    return UnfoldingModel(algorithm, operator, cfg, _stages(K, stage_arrays, True, dtype),
                          blocks=weights, gdm_enabled=gdm_enabled)
