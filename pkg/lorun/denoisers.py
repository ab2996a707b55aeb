"""Proximal-mapping denoisers.

Every architecture takes z (B, C, H, W) and a noise level sigma, appends sigma
as a constant input channel and predicts a residual, so x = z + f(z, sigma).

  unet            double-conv encoder/decoder, stride-2 down, nearest up + conv
  transformer     conv embed, per-pixel tokens at half resolution, attention + FFN blocks
  soft_threshold  sign(z) max(0, |z| - sigma^2); no weights

Weights are a flat name -> Tensor map ("enc0.conv1.weight", "blk0.attn.q.weight",
...). When adapters are given, each adapted weight is used in its W0 + AB form.
"""
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .lora import LoraAdapter, effective_weight
from .rng import make_rng
from .tensor import (Tensor, add, as_tensor, concat, conv2d, downsample_stride, gelu, layer_norm,
                     matmul, mul, power, relu, reshape, scale, soft_threshold, softmax, transpose,
                     upsample_nearest)

ARCHS = ("unet", "transformer", "soft_threshold")

Shapes = Dict[str, Tuple[int, ...]]


@dataclass(frozen=True)
class DenoiserConfig:
    arch: str = "unet"
    image_channels: int = 1
    base_channels: int = 8
    depth: int = 2
    heads: int = 2

    def validate(self) -> "DenoiserConfig":
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown denoiser arch {self.arch!r} (expected one of {ARCHS})")
        if self.image_channels < 1:
            raise ConfigError("image_channels must be >= 1")
        if self.arch == "soft_threshold":
            return self
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels < 4:
            raise ConfigError("base_channels must be >= 4")
        if self.arch == "transformer" and (self.heads < 1 or self.base_channels % self.heads):
            raise ConfigError(f"base_channels {self.base_channels} not divisible by heads {self.heads}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def multiple(self) -> int:
        """H and W must be divisible by this."""
        if self.arch == "unet":
            return 2 ** self.depth
        if self.arch == "transformer":
            return 2
        return 1


def _conv(shapes: Shapes, name: str, c_out: int, c_in: int, k: int = 3) -> None:
    shapes[f"{name}.weight"] = (c_out, c_in, k, k)
    shapes[f"{name}.bias"] = (c_out,)


def _linear(shapes: Shapes, name: str, d_out: int, d_in: int) -> None:
    shapes[f"{name}.weight"] = (d_out, d_in)
    shapes[f"{name}.bias"] = (d_out,)


def weight_shapes(cfg: DenoiserConfig) -> Shapes:
    """Every weight name and shape the configuration implies, in a fixed order."""
    cfg.validate()
    shapes: Shapes = {}
    c_in = cfg.image_channels + 1
    if cfg.arch == "unet":
        ch = [cfg.base_channels * 2 ** level for level in range(cfg.depth + 1)]
        prev = c_in
        for level in range(cfg.depth):
            _conv(shapes, f"enc{level}.conv1", ch[level], prev)
            _conv(shapes, f"enc{level}.conv2", ch[level], ch[level])
            prev = ch[level]
        _conv(shapes, "mid.conv1", ch[-1], prev)
        _conv(shapes, "mid.conv2", ch[-1], ch[-1])
        for level in reversed(range(cfg.depth)):
            _conv(shapes, f"up{level}.conv", ch[level], ch[level + 1])
            _conv(shapes, f"dec{level}.conv1", ch[level], 2 * ch[level])
            _conv(shapes, f"dec{level}.conv2", ch[level], ch[level])
        _conv(shapes, "head", cfg.image_channels, ch[0], k=1)
    elif cfg.arch == "transformer":
        dim = cfg.base_channels
        _conv(shapes, "embed", dim, c_in)
        for b in range(cfg.depth):
            for part in ("q", "k", "v", "proj"):
                _linear(shapes, f"blk{b}.attn.{part}", dim, dim)
            _linear(shapes, f"blk{b}.ffn.fc1", 2 * dim, dim)
            _linear(shapes, f"blk{b}.ffn.fc2", dim, 2 * dim)
        _conv(shapes, "fuse", dim, 2 * dim)
        _conv(shapes, "head", cfg.image_channels, dim)
    return shapes


def init_weights(cfg: DenoiserConfig, seed: int, purpose: str = "denoiser", dtype=np.float32) -> Dict[str, np.ndarray]:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = make_rng(seed, purpose)
    shapes = weight_shapes(cfg)
    out = {}
    for name, shape in shapes.items():
        wshape = shapes[name.rsplit(".", 1)[0] + ".weight"]
        fan_in = int(np.prod(wshape[1:]))
        bound = 1.0 / math.sqrt(fan_in)
        out[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return out


def as_weights(arrays: Mapping[str, np.ndarray], trainable: bool, prefix: str = "") -> Dict[str, Tensor]:
    """Wrap arrays as leaves named "{prefix}{name}", all trainable or all frozen."""
    return {name: Tensor(np.array(a), requires_grad=trainable, name=f"{prefix}{name}")
            for name, a in arrays.items()}


def check_weights(cfg: DenoiserConfig, weights: Mapping[str, Tensor]) -> None:
    expected = weight_shapes(cfg)
    if set(expected) != set(weights):
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        raise ShapeError(f"denoiser weights do not match config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tuple(weights[name].shape) != shape:
            raise ShapeError(f"{name}: shape {weights[name].shape} != {shape}")


class _Resolver:
    def __init__(self, weights: Mapping[str, Tensor], adapters: Optional[Mapping[str, LoraAdapter]]):
        self.weights = weights
        self.adapters = adapters or {}

    def __call__(self, name: str) -> Tensor:
        w = self.weights[name]
        a = self.adapters.get(name)
        return w if a is None else effective_weight(w, a)

    def conv(self, x: Tensor, layer: str) -> Tensor:
        return conv2d(x, self(f"{layer}.weight"), self(f"{layer}.bias"))

    def linear(self, x: Tensor, layer: str) -> Tensor:
        return add(matmul(x, transpose(self(f"{layer}.weight"))), self(f"{layer}.bias"))


def _dconv(r: _Resolver, x: Tensor, block: str) -> Tensor:
    return relu(r.conv(relu(r.conv(x, f"{block}.conv1")), f"{block}.conv2"))


def _unet(cfg: DenoiserConfig, r: _Resolver, x: Tensor, trace) -> Tensor:
    skips: List[Tensor] = []
    for level in range(cfg.depth):
        x = _dconv(r, x, f"enc{level}")
        skips.append(x)
        x = downsample_stride(x, 2)
    x = _dconv(r, x, "mid")
    for level in reversed(range(cfg.depth)):
        x = relu(r.conv(upsample_nearest(x, 2), f"up{level}.conv"))
        x = _dconv(r, concat([x, skips[level]], axis=1), f"dec{level}")
    return r.conv(x, "head")


def _attention(cfg: DenoiserConfig, r: _Resolver, u: Tensor, block: str, trace) -> Tensor:
    B, N, dim = u.shape
    h = cfg.heads
    dh = dim // h

    def heads(t):
        return transpose(reshape(t, (B, N, h, dh)), (0, 2, 1, 3))

    q = heads(r.linear(u, f"{block}.attn.q"))
    k = heads(r.linear(u, f"{block}.attn.k"))
    v = heads(r.linear(u, f"{block}.attn.v"))
    att = softmax(scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)), axis=-1)
    if trace is not None:
        trace.setdefault("attention", []).append(att.data)
    o = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (B, N, dim))
    return r.linear(o, f"{block}.attn.proj")


def _transformer(cfg: DenoiserConfig, r: _Resolver, x: Tensor, trace) -> Tensor:
    f = gelu(r.conv(x, "embed"))
    B, dim, H, W = f.shape
    t = downsample_stride(f, 2)
    h, w = t.shape[-2:]
    tokens = transpose(reshape(t, (B, dim, h * w)), (0, 2, 1))
    for b in range(cfg.depth):
        blk = f"blk{b}"
        tokens = add(tokens, _attention(cfg, r, layer_norm(tokens, -1), blk, trace))
        hidden = gelu(r.linear(layer_norm(tokens, -1), f"{blk}.ffn.fc1"))
        tokens = add(tokens, r.linear(hidden, f"{blk}.ffn.fc2"))
    t = reshape(transpose(tokens, (0, 2, 1)), (B, dim, h, w))
    g = gelu(r.conv(concat([upsample_nearest(t, 2), f], axis=1), "fuse"))
    return r.conv(g, "head")


_BODIES = {"unet": _unet, "transformer": _transformer}


def denoise(cfg: DenoiserConfig, weights: Mapping[str, Tensor], adapters: Optional[Mapping[str, LoraAdapter]],
            z, noise_level, trace: Optional[dict] = None) -> Tensor:
    """x_hat = z + f(z, sigma) with every adapted weight in its effective form.

    ``noise_level`` is a float or a scalar Tensor (kept in the graph).
    ``trace``, when a dict, collects attention maps for inspection.
    """
    z = as_tensor(z)
    sigma = as_tensor(noise_level, like=z)
    if sigma.size != 1:
        raise ShapeError(f"noise level must be a scalar, got shape {sigma.shape}")
    if sigma.data.reshape(-1)[0] < 0:
        raise ContractError(f"noise level must be >= 0, got {sigma.item()}")
    if cfg.arch == "soft_threshold":
        return soft_threshold(z, power(reshape(sigma, ()), 2.0))

    single = z.ndim == 3
    if single:
        z = reshape(z, (1,) + z.shape)
    if z.ndim != 4 or z.shape[1] != cfg.image_channels:
        raise ShapeError(f"denoiser expects {cfg.image_channels} channels, got input {z.shape}")
    B, _, H, W = z.shape
    m = cfg.multiple
    if H % m or W % m:
        raise ShapeError(f"{cfg.arch} denoiser needs H, W divisible by {m}, got {H}x{W}")

    level_map = mul(Tensor(np.ones((B, 1, H, W), dtype=z.dtype)), reshape(sigma, (1, 1, 1, 1)))
    body = _BODIES[cfg.arch](cfg, _Resolver(weights, adapters), concat([z, level_map], axis=1), trace)
    out = add(z, body)
    return reshape(out, out.shape[1:]) if single else out
