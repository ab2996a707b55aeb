"""Image samples: ingest from PGM / TensorFile paths or a synthetic spec.

A synthetic spec is a string such as
    synthetic:count=64,size=32,channels=1,seed=1
    synthetic:count=8,size=32,bands=28,seed=3
Images are piecewise-smooth (random rectangles plus Gaussian blobs); with
bands > 0 each sample is a C-band stack whose spectra vary smoothly.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import log
from .errors import ConfigError, ContractError, FormatError
from .fileio import read_pgm, read_tensor
from .rng import make_rng

LAYOUTS = ("pgm", "tensorfile", "synthetic")
SUFFIXES = {".pgm": "pgm", ".lrtn": "tensorfile", ".tensor": "tensorfile"}


@dataclass
class ImageSample:
    clean: np.ndarray  # (C, H, W) float64 in [0, 1]
    id: str

    def __post_init__(self):
        c = np.asarray(self.clean, dtype=np.float64)
        if c.ndim == 2:
            c = c[None]
        if c.ndim != 3:
            raise ContractError(f"sample {self.id}: expected C x H x W, got {c.shape}")
        self.clean = np.clip(c, 0.0, 1.0)

    @property
    def shape(self):
        return self.clean.shape


# ---------- synthetic ----------

_SPEC_KEYS = {"count": 16, "size": 32, "channels": 1, "bands": 0, "seed": 0}


def parse_synthetic(spec: str) -> Dict[str, int]:
    body = spec.split(":", 1)[1] if spec.startswith("synthetic:") else spec
    out = dict(_SPEC_KEYS)
    for part in filter(None, (p.strip() for p in body.split(","))):
        if "=" not in part:
            raise ConfigError(f"synthetic spec entry {part!r} is not key=value")
        k, v = (s.strip() for s in part.split("=", 1))
        if k not in out:
            raise ConfigError(f"unknown synthetic spec key {k!r} (known: {sorted(out)})")
        try:
            out[k] = int(v)
        except ValueError:
            raise ConfigError(f"synthetic spec {k}={v!r} is not an integer") from None
    if out["count"] < 1 or out["size"] < 1 or out["channels"] < 1 or out["bands"] < 0:
        raise ConfigError(f"synthetic spec out of range: {out}")
    return out


def _plane(rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.full((size, size), rng.uniform(0.1, 0.4))
    for _ in range(int(rng.integers(2, 5))):
        r0, c0 = rng.integers(0, size, 2)
        h, w = rng.integers(max(1, size // 8), max(2, size // 2), 2)
        img[r0:r0 + h, c0:c0 + w] = rng.uniform(0.0, 1.0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, size, 2)
        width = rng.uniform(size / 16.0, size / 4.0)
        img += rng.uniform(-0.4, 0.6) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width ** 2))
    return np.clip(img, 0.0, 1.0)


def _spectral_stack(rng: np.random.Generator, size: int, bands: int) -> np.ndarray:
    lam = np.arange(bands, dtype=np.float64)
    stack = np.zeros((bands, size, size))
    for _ in range(3):
        centre = rng.uniform(0, bands)
        width = rng.uniform(bands / 8.0, bands / 2.0)
        curve = 0.2 + 0.8 * np.exp(-(lam - centre) ** 2 / (2.0 * width ** 2))
        stack += curve[:, None, None] * _plane(rng, size)[None]
    return np.clip(stack / 3.0, 0.0, 1.0)


def synthesize(spec: str) -> List[ImageSample]:
    p = parse_synthetic(spec)
    out = []
    for i in range(p["count"]):
        rng = make_rng(p["seed"], f"synthetic.{i}")
        if p["bands"] > 0:
            img = _spectral_stack(rng, p["size"], p["bands"])
        else:
            base = _plane(rng, p["size"])
            tint = rng.uniform(0.6, 1.0, size=p["channels"]) if p["channels"] > 1 else np.ones(1)
            img = np.clip(base[None] * tint[:, None, None], 0.0, 1.0)
        out.append(ImageSample(img, f"syn{i:04d}"))
    return out


# ---------- files ----------

def _from_pgm(path: Path) -> List[ImageSample]:
    pixels, maxval = read_pgm(path)
    return [ImageSample(pixels.astype(np.float64) / maxval, path.stem)]


def _from_tensorfile(path: Path) -> List[ImageSample]:
    arr = read_tensor(path)
    if arr.ndim in (2, 3):
        return [ImageSample(arr, path.stem)]
    if arr.ndim == 4:
        return [ImageSample(a, f"{path.stem}_{i:04d}") for i, a in enumerate(arr)]
    raise FormatError(f"{path}: tensor of rank {arr.ndim} is not an image", 0)


_READERS = {"pgm": _from_pgm, "tensorfile": _from_tensorfile}


def ingest(source: str, layout: Optional[str] = None) -> List[ImageSample]:
    """Samples from a synthetic spec, a file or a directory of files.

    In a directory, unreadable files are skipped with a warning.
    """
    source = str(source)
    if layout == "synthetic" or source.startswith("synthetic:"):
        return synthesize(source)
    if layout is not None and layout not in LAYOUTS:
        raise ConfigError(f"unknown layout {layout!r} (expected one of {LAYOUTS})")
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"data path {path} does not exist")
    if path.is_file():
        kind = layout or SUFFIXES.get(path.suffix.lower())
        if kind is None:
            raise ConfigError(f"cannot infer layout of {path}")
        return _READERS[kind](path)
    out: List[ImageSample] = []
    for f in sorted(path.iterdir()):
        kind = layout or SUFFIXES.get(f.suffix.lower())
        if kind is None or not f.is_file():
            continue
        try:
            out.extend(_READERS[kind](f))
        except FormatError as e:
            log.warn("io", f"skip {f}: {e}")
    if not out:
        raise ConfigError(f"no readable images under {path}")
    return out


def stack(samples: List[ImageSample], dtype=np.float32) -> np.ndarray:
    """(N, C, H, W) array; all samples must share a shape."""
    shapes = {s.shape for s in samples}
    if len(shapes) != 1:
        raise ContractError(f"samples differ in shape: {sorted(shapes)}")
    return np.stack([s.clean for s in samples]).astype(dtype)
