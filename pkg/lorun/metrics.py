"""PSNR / SSIM and the evaluation table."""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from skimage.metrics import structural_similarity

from .errors import ContractError, ShapeError
from .operators import add_noise
from .tensor import Tensor, no_grad
from .unfolding import run_model

SSIM_WINDOW = 11


def _arrays(x, ref):
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    ref = np.asarray(ref.data if isinstance(ref, Tensor) else ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in float64; identical inputs give +inf."""
    if peak <= 0:
        raise ContractError("peak must be > 0")
    x, ref = _arrays(x, ref)
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(x, ref, peak: float = 1.0) -> float:
    """Gaussian-window (11x11, sigma 1.5) SSIM of 2-d images, averaged over leading channels."""
    x, ref = _arrays(x, ref)
    if x.ndim == 2:
        x, ref = x[None], ref[None]
    if x.ndim != 3:
        raise ShapeError(f"ssim expects H x W or C x H x W, got {x.shape}")
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"image {x.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(structural_similarity(x, ref, data_range=peak, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False, channel_axis=0))


# ---------- evaluation table ----------

@dataclass
class EvalRow:
    id: str
    psnr: float
    ssim: float
    baseline_psnr: float
    baseline_ssim: float
    trajectory: List[float] = field(default_factory=list)


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LORUN_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(model, samples: Sequence, noise_sigma: float = 0.0, seed: int = 0,
             trajectory: bool = False, threads: Optional[int] = None) -> List[EvalRow]:
    """Per-sample PSNR/SSIM of the model output and of the adjoint baseline Phi^T y.

    Both metrics score the raw reconstructions; nothing is clipped to [0, 1].
    Samples are independent, so they fan out over LORUN_THREADS workers;
    rows come back in input order.
    """
    op = model.operator

    def one(i_sample):
        i, s = i_sample
        x = Tensor(s.clean[None].astype(model.dtype))
        with no_grad():
            y = add_noise(op.forward(x), noise_sigma, seed, purpose=f"eval.noise.{i}")
            out, traj = run_model(model, y)
            base = op.adjoint(y)
        ref = s.clean
        return EvalRow(
            id=s.id,
            psnr=psnr(out.data[0], ref),
            ssim=ssim(out.data[0], ref),
            baseline_psnr=psnr(base.data[0], ref),
            baseline_ssim=ssim(base.data[0], ref),
            trajectory=[psnr(t.data[0], ref) for t in traj] if trajectory else [],
        )

    n = threads if threads is not None else _worker_count()
    items = list(enumerate(samples))
    if n <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(one, items))


def mean_row(rows: Sequence[EvalRow]) -> Dict[str, float]:
    """Arithmetic means; an infinite PSNR makes the mean infinite."""
    if not rows:
        raise ContractError("no rows to average")
    keys = ("psnr", "ssim", "baseline_psnr", "baseline_ssim")
    return {k: float(np.mean([getattr(r, k) for r in rows])) for k in keys}
