"""Run configuration: flat TOML keys, optional ``include`` (string or list), unknown keys rejected.

    include = "base.toml"        # relative to this file, merged first
    task = "cs"
    cs_ratio = 0.25
    stages = 3
"""
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional

import tomlkit

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import log
from .denoisers import DenoiserConfig
from .errors import ConfigError, ContractError
from .fileio import atomic_write
from .operators import KERNEL_BANK, KINDS, CassiOperator, CsOperator, DegradationModel, SrOperator, dirac_kernel, kernel_bank
from .training import DTYPES, TrainConfig

RESOLVED_NAME = "resolved_config.toml"


@dataclass
class RunConfig:
    task: str = "cs"
    cs_ratio: float = 0.25
    cs_block: int = 32
    cs_learnable: bool = True
    cassi_bands: int = 28
    cassi_shift: int = 2
    cassi_learnable: bool = False
    sr_kernel: str = "K1"
    sr_scale: int = 2
    sr_kernel_size: int = 15
    channels: int = 1
    noise_sigma: float = 0.0
    algorithm: str = "pgd"
    arch: str = "unet"
    base_channels: int = 8
    depth: int = 2
    heads: int = 2
    stages: int = 3
    gamma: float = 10.0
    strategy: str = "lorun"
    gdm: bool = True
    pretrain_shared_stages: bool = False
    seed: int = 0
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    patch_size: int = 32
    train_data: str = "synthetic:count=64,size=32,seed=1"
    test_data: str = "synthetic:count=16,size=32,seed=2"
    out_dir: str = "runs/toy"
    dtype: str = "float32"

    @property
    def image_channels(self) -> int:
        return self.cassi_bands if self.task == "cassi" else self.channels

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(self.arch, self.image_channels, self.base_channels, self.depth, self.heads)

    def validate(self) -> "RunConfig":
        if self.task not in KINDS:
            raise ConfigError(f"task must be one of {KINDS}, got {self.task!r}")
        if not 0 < self.cs_ratio <= 1:
            raise ConfigError(f"cs_ratio must lie in (0, 1], got {self.cs_ratio}")
        if min(self.cs_block, self.cassi_bands, self.cassi_shift, self.sr_scale, self.channels) < 1:
            raise ConfigError("cs_block, cassi_bands, cassi_shift, sr_scale and channels must be >= 1")
        if self.sr_kernel not in KERNEL_BANK and self.sr_kernel != "dirac":
            raise ConfigError(f"sr_kernel must be one of K1..K12 or 'dirac', got {self.sr_kernel!r}")
        if self.sr_kernel_size < 1 or self.sr_kernel_size % 2 == 0:
            raise ConfigError("sr_kernel_size must be odd")
        if self.task == "cs" and self.patch_size % self.cs_block:
            raise ConfigError(f"patch_size {self.patch_size} is not a multiple of cs_block {self.cs_block}")
        if self.task == "sr" and self.patch_size % self.sr_scale:
            raise ConfigError(f"patch_size {self.patch_size} is not a multiple of sr_scale {self.sr_scale}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        den = self.denoiser_config().validate()
        if self.patch_size % den.multiple:
            raise ConfigError(f"patch_size {self.patch_size} must be divisible by {den.multiple} for {self.arch}")
        self.train_config("pretrain").validate()
        return self

    def train_config(self, phase: str) -> TrainConfig:
        return TrainConfig(
            phase=phase, algorithm=self.algorithm, denoiser=self.denoiser_config(), epochs=self.epochs,
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            adam_betas=(self.adam_beta1, self.adam_beta2), adam_eps=self.adam_eps, seed=self.seed,
            K=self.stages, gamma=self.gamma, strategy=self.strategy, gdm=self.gdm, clip_norm=self.clip_norm,
            patch_size=self.patch_size, noise_sigma=self.noise_sigma,
            pretrain_shared_stages=self.pretrain_shared_stages, dtype=self.dtype,
            run_config={k: v for k, v in self.to_dict().items() if k != "out_dir"})

    def build_operator(self) -> DegradationModel:
        dt = DTYPES[self.dtype]
        if self.task == "cs":
            return CsOperator.random(self.cs_ratio, self.cs_block, self.seed, self.cs_learnable, dt)
        if self.task == "cassi":
            return CassiOperator.random(self.patch_size, self.patch_size, self.cassi_bands, self.cassi_shift,
                                        self.seed, self.cassi_learnable, dt)
        k = dirac_kernel(1) if self.sr_kernel == "dirac" else kernel_bank(self.sr_kernel, self.sr_kernel_size)
        return SrOperator(k, self.sr_scale, self.sr_kernel, dt)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value, origin: str):
    want = _TYPES[key]
    if want in (bool, "bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{origin}: {key} must be true/false, got {value!r}")
        return value
    if want in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{origin}: {key} must be an integer, got {value!r}")
        return value
    if want in (float, "float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{origin}: {key} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{origin}: {key} must be a string, got {value!r}")
    return value


def _read_raw(path: Path, seen: List[Path]) -> Dict[str, object]:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    includes = raw.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    if not isinstance(includes, list) or not all(isinstance(i, str) for i in includes):
        raise ConfigError(f"{path}: include must be a path or a list of paths")
    merged: Dict[str, object] = {}
    for inc in includes:
        merged.update(_read_raw(path.parent / inc, seen + [path]))
    for key, value in raw.items():
        if key not in _TYPES:
            raise ConfigError(f"{path}: unknown key {key!r}")
        merged[key] = _coerce(key, value, str(path))
    return merged


def load_config(path, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    raw = _read_raw(Path(path), [])
    for key, value in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown override {key!r}")
        raw[key] = _coerce(key, value, "override")
    try:
        cfg = RunConfig(**raw)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    try:
        return cfg.validate()
    except ContractError as e:
        raise ConfigError(str(e)) from None


def write_resolved(cfg: RunConfig, out_dir=None) -> Path:
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = tomlkit.document()
    doc.add(tomlkit.comment("resolved run configuration"))
    for key, value in cfg.to_dict().items():
        doc[key] = value
    path = out / RESOLVED_NAME
    atomic_write(path, tomlkit.dumps(doc).encode("utf-8"))
    log.info("config", f"resolved config -> {path}")
    return path
