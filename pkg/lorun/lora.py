"""Low-rank adapters: W = W0 + A B.

Linear weights are (out, in) = (n1, n2) with A: n1 x r, B: r x n2. A conv weight
(C_out, C_in, k, k) gets A_c: C_out*k x r*k and B_c: r*k x C_in*k, and its
update is reshape(A_c B_c) to the kernel shape. A starts at zero and B at
N(0, 0.02^2), so a fresh adapter leaves W0 untouched. There is no alpha/r scale.
"""
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, add, as_tensor, matmul, reshape

INIT_STD = 0.02


def rank_for(in_dim: int, out_dim: int, gamma: float) -> int:
    """r = ceil(min(in, out) * gamma / 100), at least 1 and at most min(in, out)."""
    if in_dim < 1 or out_dim < 1 or gamma <= 0:
        raise ContractError(f"rank_for needs positive dims and gamma, got ({in_dim}, {out_dim}, {gamma})")
    lo = min(int(in_dim), int(out_dim))
    r = math.ceil(Fraction(lo) * Fraction(str(gamma)) / 100)
    return max(1, min(lo, r))


def is_adaptable(shape: Tuple[int, ...]) -> bool:
    return len(shape) == 2 or (len(shape) == 4 and shape[2] == shape[3])


def weight_dims(shape: Tuple[int, ...]) -> Tuple[int, int]:
    """(in_dim, out_dim) as the rank rule sees them."""
    if len(shape) == 2:
        return shape[1], shape[0]
    if len(shape) == 4:
        return shape[1], shape[0]
    raise ShapeError(f"no adapter for a weight of shape {shape}")


def adapter_size(shape: Tuple[int, ...], r: int) -> int:
    if len(shape) == 2:
        return r * (shape[0] + shape[1])
    k = shape[2]
    return r * k * k * (shape[0] + shape[1])


@dataclass
class LoraAdapter:
    target: str
    A: Tensor
    B: Tensor
    rank: int

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        return (self.A.shape[0], self.B.shape[1])

    @property
    def num_params(self) -> int:
        return self.A.size + self.B.size

    def delta(self) -> Tensor:
        return matmul(self.A, self.B)

    def tensors(self, prefix: str = "") -> Dict[str, Tensor]:
        return {f"{prefix}{self.target}.lora_A": self.A, f"{prefix}{self.target}.lora_B": self.B}


@dataclass
class ConvLoraAdapter(LoraAdapter):
    kernel_size: int = field(default=1)

    @property
    def weight_shape(self):
        k = self.kernel_size
        return (self.A.shape[0] // k, self.B.shape[1] // k, k, k)

    def delta(self) -> Tensor:
        return reshape(matmul(self.A, self.B), self.weight_shape)


def init_adapter(target: str, weight_shape: Tuple[int, ...], r: int, rng: np.random.Generator,
                 prefix: str = "", dtype=np.float32, std: float = INIT_STD) -> LoraAdapter:
    """A = 0, B ~ N(0, std^2); tensors named "{prefix}{target}.lora_A|B"."""
    shape = tuple(int(s) for s in weight_shape)
    if not is_adaptable(shape):
        raise ShapeError(f"{target}: no adapter for a weight of shape {shape}")
    in_dim, out_dim = weight_dims(shape)
    if not 1 <= r <= min(in_dim, out_dim):
        raise ContractError(f"{target}: rank {r} outside [1, {min(in_dim, out_dim)}]")
    if len(shape) == 2:
        a_shape, b_shape, k = (shape[0], r), (r, shape[1]), None
    else:
        k = shape[2]
        a_shape, b_shape = (shape[0] * k, r * k), (r * k, shape[1] * k)
    A = Tensor(np.zeros(a_shape, dtype=dtype), requires_grad=True, name=f"{prefix}{target}.lora_A")
    B = Tensor(rng.normal(0.0, std, size=b_shape).astype(dtype), requires_grad=True, name=f"{prefix}{target}.lora_B")
    if k is None:
        return LoraAdapter(target, A, B, r)
    return ConvLoraAdapter(target, A, B, r, kernel_size=k)


def init_adapters(weight_shapes: Mapping[str, Tuple[int, ...]], gamma: float, rng: np.random.Generator,
                  prefix: str = "", dtype=np.float32) -> Dict[str, LoraAdapter]:
    """One adapter per linear/conv weight (biases are left alone)."""
    out = {}
    for name, shape in weight_shapes.items():
        if is_adaptable(shape):
            out[name] = init_adapter(name, shape, rank_for(*weight_dims(shape), gamma), rng, prefix, dtype)
    return out


def adapter_from_arrays(target: str, A: np.ndarray, B: np.ndarray, weight_shape: Tuple[int, ...],
                        prefix: str = "", trainable: bool = True) -> LoraAdapter:
    At = Tensor(np.array(A), requires_grad=trainable, name=f"{prefix}{target}.lora_A")
    Bt = Tensor(np.array(B), requires_grad=trainable, name=f"{prefix}{target}.lora_B")
    if len(weight_shape) == 2:
        adapter = LoraAdapter(target, At, Bt, At.shape[1])
    else:
        k = weight_shape[2]
        adapter = ConvLoraAdapter(target, At, Bt, At.shape[1] // k, kernel_size=k)
    if tuple(adapter.weight_shape) != tuple(weight_shape):
        raise ShapeError(f"{target}: adapter factors {At.shape} x {Bt.shape} do not match weight {weight_shape}")
    return adapter


def effective_weight(W0, adapter: LoraAdapter) -> Tensor:
    W0 = as_tensor(W0)
    if W0.shape != tuple(adapter.weight_shape):
        raise ShapeError(f"{adapter.target}: weight {W0.shape} vs adapter {adapter.weight_shape}")
    return add(W0, adapter.delta())


def merge(W0: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    W0 = np.asarray(W0)
    if W0.shape != tuple(adapter.weight_shape):
        raise ShapeError(f"{adapter.target}: weight {W0.shape} vs adapter {adapter.weight_shape}")
    return W0 + adapter.delta().data.astype(W0.dtype)


def unmerge(W_merged: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    W_merged = np.asarray(W_merged)
    if W_merged.shape != tuple(adapter.weight_shape):
        raise ShapeError(f"{adapter.target}: weight {W_merged.shape} vs adapter {adapter.weight_shape}")
    return W_merged - adapter.delta().data.astype(W_merged.dtype)


@dataclass
class ParamReport:
    backbone: int
    per_stage_lora: int
    block_k_equivalent: int
    ratio: float
    stages: int
    gamma: float
    ranks: Dict[str, int] = field(default_factory=dict)

    @property
    def lorun_total(self) -> int:
        return self.backbone + self.stages * self.per_stage_lora


def param_count(shapes: Mapping[str, Tuple[int, ...]], K: int, gamma: float) -> ParamReport:
    """Backbone vs LoRun-K vs Block-K sizes for a denoiser given by its weight shapes."""
    if K < 1:
        raise ContractError("stage count must be >= 1")
    backbone = int(sum(int(np.prod(s)) for s in shapes.values()))
    ranks = {n: rank_for(*weight_dims(s), gamma) for n, s in shapes.items() if is_adaptable(s)}
    lora = int(sum(adapter_size(tuple(shapes[n]), r) for n, r in ranks.items()))
    block_k = K * backbone
    ratio = (backbone + K * lora) / block_k if block_k else float("nan")
    return ParamReport(backbone, lora, block_k, ratio, K, gamma, ranks)
