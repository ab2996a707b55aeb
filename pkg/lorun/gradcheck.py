"""Central finite-difference oracles for reverse-mode gradients (use float64)."""
from typing import Callable, Dict, Mapping

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    return 0.0 if denom == 0.0 else float(np.linalg.norm(a - b)) / denom


def numeric_gradient(f: Callable[[], Tensor], t: Tensor, h: float = 1e-6) -> np.ndarray:
    """d f() / d t by central differences, perturbing ``t.data`` in place."""
    flat = t.data.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(t.shape)


def gradient_errors(f: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-6) -> Dict[str, float]:
    """Norm-relative error between backward() and finite differences per trainable param, over every entry."""
    analytic = backward(f(), params)
    return {name: relative_error(g, numeric_gradient(f, params[name], h)) for name, g in analytic.items()}
