"""Degradation models Phi with matched forward/adjoint pairs.

  cs     blockwise random projection y = Phi x (Phi n x m, ratio n/m)
  cassi  band-wise coded mask, shift by d columns per band, sum to one 2-D frame
  sr     circular blur with kernel k, then s-fold decimation anchored top-left

All three act on batched images (B, C, H, W) and are built from tensor
primitives, so gradients reach both the image and any learnable operator
tensor (CS sampling matrix, CASSI mask).
"""
import math
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from . import log
from .errors import ContractError, GramSolveError, ShapeError
from .rng import make_rng
from .tensor import (Tensor, add, as_tensor, conv2d, div, downsample_stride, make_node, matmul,
                     mul, no_grad, reshape, scale, sub, sum as tsum, transpose, upsample_zero)

KINDS = ("cs", "cassi", "sr")

# relative residual targets for conjugate gradient
CG_TOL = {np.dtype(np.float64): 1e-10, np.dtype(np.float32): 1e-5}
CG_MAX_ITER = 200


def _batched(x: Tensor, ndim: int) -> Tuple[Tensor, bool]:
    if x.ndim == ndim - 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-d batch (or {ndim - 1}-d sample), got shape {x.shape}")
    return x, False


def _unbatched(x: Tensor, single: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if single else x


class DegradationModel:
    kind = ""

    def __init__(self, learnable: bool = False):
        self.learnable = bool(learnable)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def adjoint(self, y: Tensor) -> Tensor:
        raise NotImplementedError

    def measurement_shape(self, image_shape) -> Tuple[int, ...]:
        raise NotImplementedError

    def gram_diagonal(self) -> Optional[Tensor]:
        """Diagonal of Phi Phi^T (broadcastable to a measurement) when Phi Phi^T is diagonal."""
        return None

    def state(self) -> Dict[str, Tensor]:
        """Every tensor that defines the operator, keyed by checkpoint name."""
        return {}

    def parameters(self) -> Dict[str, Tensor]:
        return {k: t for k, t in self.state().items() if t.requires_grad}

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, t in self.state().items():
            if name not in arrays:
                raise ShapeError(f"operator tensor {name} missing")
            a = np.asarray(arrays[name])
            if a.shape != t.shape:
                raise ShapeError(f"operator tensor {name}: shape {a.shape} != {t.shape}")
            t.data = np.ascontiguousarray(a.astype(t.dtype))

    def project(self) -> None:
        """Pull learnable tensors back into their valid set after an optimizer step."""

    def describe(self) -> Dict[str, object]:
        return {"kind": self.kind, "learnable": self.learnable}


# ---------- compressive sensing ----------

class CsOperator(DegradationModel):
    kind = "cs"

    def __init__(self, phi, block: Tuple[int, int], learnable: bool = True, dtype=np.float32):
        super().__init__(learnable)
        phi = np.asarray(phi, dtype=dtype)
        if phi.ndim != 2:
            raise ShapeError(f"sampling matrix must be 2-d, got {phi.shape}")
        self.block = (int(block[0]), int(block[1]))
        if phi.shape[1] != self.block[0] * self.block[1]:
            raise ShapeError(f"sampling matrix has {phi.shape[1]} columns for a {self.block} block")
        if not 0 < phi.shape[0] <= phi.shape[1]:
            raise ContractError(f"CS ratio must lie in (0, 1], got {phi.shape[0]}/{phi.shape[1]}")
        self.phi = Tensor(phi.copy(), requires_grad=self.learnable, name="op.phi")

    @classmethod
    def random(cls, ratio: float, block_size: int = 32, seed: int = 0,
               learnable: bool = True, dtype=np.float32) -> "CsOperator":
        if not 0 < ratio <= 1:
            raise ContractError(f"CS ratio must lie in (0, 1], got {ratio}")
        m = block_size * block_size
        n = math.ceil(round(ratio * m, 9))
        phi = make_rng(seed, "cs.phi").normal(0.0, math.sqrt(1.0 / n), size=(n, m))
        return cls(phi, (block_size, block_size), learnable, dtype)

    @property
    def ratio(self) -> float:
        n, m = self.phi.shape
        return n / m

    def _grid(self, H: int, W: int) -> Tuple[int, int]:
        bh, bw = self.block
        if H % bh or W % bw:
            raise ShapeError(f"image {H}x{W} is not tiled by {bh}x{bw} blocks")
        return H // bh, W // bw

    def measurement_shape(self, image_shape):
        *lead, C, H, W = image_shape
        nh, nw = self._grid(H, W)
        return (*lead, C, nh, nw, self.phi.shape[0])

    def forward(self, x):
        x, single = _batched(as_tensor(x), 4)
        B, C, H, W = x.shape
        (nh, nw), (bh, bw) = self._grid(H, W), self.block
        blocks = reshape(transpose(reshape(x, (B, C, nh, bh, nw, bw)), (0, 1, 2, 4, 3, 5)),
                         (B, C, nh, nw, bh * bw))
        return _unbatched(matmul(blocks, transpose(self.phi)), single)

    def adjoint(self, y):
        y, single = _batched(as_tensor(y), 5)
        B, C, nh, nw, n = y.shape
        if n != self.phi.shape[0]:
            raise ShapeError(f"measurement length {n} != {self.phi.shape[0]} rows of Phi")
        bh, bw = self.block
        z = reshape(matmul(y, self.phi), (B, C, nh, nw, bh, bw))
        return _unbatched(reshape(transpose(z, (0, 1, 2, 4, 3, 5)), (B, C, nh * bh, nw * bw)), single)

    def gram_diagonal(self):
        G = self.phi.data @ self.phi.data.T
        if np.count_nonzero(G - np.diag(np.diag(G))):
            return None
        return tsum(mul(self.phi, self.phi), axis=1)

    def state(self):
        return {"op.phi": self.phi}

    def describe(self):
        return {**super().describe(), "rows": self.phi.shape[0], "block": list(self.block)}


# ---------- coded aperture snapshot spectral imaging ----------

def shift_sum(x: Tensor, d: int) -> Tensor:
    """(B, C, H, W) -> (B, 1, H, W + d(C-1)): band k moved right by d*k and summed."""
    B, C, H, W = x.shape
    out = np.zeros((B, 1, H, W + d * (C - 1)), dtype=x.dtype)
    for k in range(C):
        out[:, 0, :, d * k:d * k + W] += x.data[:, k]

    def vjp(g):
        return (np.stack([g[:, 0, :, d * k:d * k + W] for k in range(C)], axis=1),)
    return make_node(out, (x,), vjp)


def shift_back(y: Tensor, d: int, bands: int) -> Tensor:
    """Transpose of shift_sum: (B, 1, H, Wm) -> (B, C, H, Wm - d(C-1))."""
    B, _, H, Wm = y.shape
    W = Wm - d * (bands - 1)
    out = np.stack([y.data[:, 0, :, d * k:d * k + W] for k in range(bands)], axis=1)

    def vjp(g):
        gy = np.zeros_like(y.data)
        for k in range(bands):
            gy[:, 0, :, d * k:d * k + W] += g[:, k]
        return (gy,)
    return make_node(out, (y,), vjp)


class CassiOperator(DegradationModel):
    kind = "cassi"

    def __init__(self, mask, shift: int = 2, bands: int = 28, learnable: bool = False, dtype=np.float32):
        super().__init__(learnable)
        mask = np.asarray(mask, dtype=dtype)
        if mask.ndim != 2:
            raise ShapeError(f"mask must be H x W, got {mask.shape}")
        if np.any(mask < 0) or np.any(mask > 1):
            raise ContractError("mask entries must lie in [0, 1]")
        if int(shift) < 1 or int(bands) < 1:
            raise ContractError("shift step and band count must be >= 1")
        self.shift = int(shift)
        self.bands = int(bands)
        self.mask = Tensor(mask.copy(), requires_grad=self.learnable, name="op.mask")

    @classmethod
    def random(cls, height: int, width: int, bands: int = 28, shift: int = 2, seed: int = 0,
               learnable: bool = False, dtype=np.float32) -> "CassiOperator":
        mask = (make_rng(seed, "cassi.mask").random((height, width)) < 0.5).astype(dtype)
        return cls(mask, shift, bands, learnable, dtype)

    def measurement_width(self, width: int) -> int:
        return width + self.shift * (self.bands - 1)

    def measurement_shape(self, image_shape):
        *lead, C, H, W = image_shape
        self._check(C, H, W)
        return (*lead, 1, H, self.measurement_width(W))

    def _check(self, C, H, W):
        if C != self.bands or (H, W) != self.mask.shape:
            raise ShapeError(f"CASSI expects {self.bands} bands of {self.mask.shape}, got {C} of {(H, W)}")

    def forward(self, x):
        x, single = _batched(as_tensor(x), 4)
        self._check(*x.shape[1:])
        return _unbatched(shift_sum(mul(x, self.mask), self.shift), single)

    def adjoint(self, y):
        y, single = _batched(as_tensor(y), 4)
        H, W = self.mask.shape
        if y.shape[1:] != (1, H, self.measurement_width(W)):
            raise ShapeError(f"CASSI measurement must be 1 x {H} x {self.measurement_width(W)}, got {y.shape[1:]}")
        return _unbatched(mul(shift_back(y, self.shift, self.bands), self.mask), single)

    def gram_diagonal(self):
        # each measurement pixel collects disjoint image pixels, so Phi Phi^T is diagonal
        sq = reshape(mul(self.mask, self.mask), (1, 1) + self.mask.shape)
        stack = mul(sq, Tensor(np.ones((1, self.bands, 1, 1), dtype=self.mask.dtype)))
        return shift_sum(stack, self.shift)

    def project(self):
        if self.learnable:
            np.clip(self.mask.data, 0.0, 1.0, out=self.mask.data)

    def state(self):
        return {"op.mask": self.mask}

    def describe(self):
        return {**super().describe(), "size": list(self.mask.shape), "shift": self.shift, "bands": self.bands}


# ---------- super-resolution ----------

class SrOperator(DegradationModel):
    kind = "sr"

    def __init__(self, kernel, scale_factor: int = 2, kernel_id: str = "", dtype=np.float32):
        super().__init__(False)
        k = np.asarray(kernel, dtype=np.float64)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise ShapeError(f"blur kernel must be square with odd size, got {k.shape}")
        if np.any(k < 0) or abs(k.sum() - 1.0) > 1e-6:
            raise ContractError("blur kernel must be nonnegative with unit sum")
        if int(scale_factor) < 1:
            raise ContractError("scale factor must be >= 1")
        self.scale_factor = int(scale_factor)
        self.kernel_id = kernel_id
        self.kernel = Tensor((k / k.sum()).astype(dtype), name="op.kernel")

    def _weights(self):
        k = self.kernel.data
        # convolution = correlation with the flipped kernel; the adjoint correlates with k itself
        return Tensor(k[::-1, ::-1].copy()[None, None]), Tensor(k[None, None])

    def measurement_shape(self, image_shape):
        *lead, C, H, W = image_shape
        s = self.scale_factor
        if H % s or W % s:
            raise ShapeError(f"image {H}x{W} not divisible by scale factor {s}")
        return (*lead, C, H // s, W // s)

    def forward(self, x):
        x, single = _batched(as_tensor(x), 4)
        B, C, H, W = x.shape
        self.measurement_shape(x.shape)
        fwd, _ = self._weights()
        blurred = conv2d(reshape(x, (B * C, 1, H, W)), fwd, padding="circular")
        y = downsample_stride(reshape(blurred, (B, C, H, W)), self.scale_factor)
        return _unbatched(y, single)

    def adjoint(self, y):
        y, single = _batched(as_tensor(y), 4)
        B, C, h, w = y.shape
        s = self.scale_factor
        _, adj = self._weights()
        up = upsample_zero(y, s, (h * s, w * s))
        out = conv2d(reshape(up, (B * C, 1, h * s, w * s)), adj, padding="circular")
        return _unbatched(reshape(out, (B, C, h * s, w * s)), single)

    def gram_diagonal(self):
        k = self.kernel.data
        if np.count_nonzero(k) != 1:
            return None
        # a single-tap kernel is a circular shift, so D H H^T D^T = k_max^2 I
        return Tensor(np.full((1, 1, 1, 1), float(k.max()) ** 2, dtype=k.dtype))

    def state(self):
        return {"op.kernel": self.kernel}

    def describe(self):
        return {**super().describe(), "scale": self.scale_factor, "kernel_id": self.kernel_id,
                "kernel_size": self.kernel.shape[0]}


def operator_from_state(desc: Dict[str, object], arrays: Dict[str, np.ndarray]) -> DegradationModel:
    """Rebuild an operator from describe() output and its op.* tensors."""
    kind = desc.get("kind")
    try:
        if kind == "cs":
            phi = arrays["op.phi"]
            return CsOperator(phi, tuple(desc["block"]), bool(desc["learnable"]), dtype=phi.dtype)
        if kind == "cassi":
            mask = arrays["op.mask"]
            return CassiOperator(mask, int(desc["shift"]), int(desc["bands"]), bool(desc["learnable"]), dtype=mask.dtype)
        if kind == "sr":
            k = arrays["op.kernel"]
            return SrOperator(k, int(desc["scale"]), str(desc.get("kernel_id", "")), dtype=k.dtype)
    except KeyError as e:
        raise ShapeError(f"operator state incomplete: missing {e}") from None
    raise ContractError(f"unknown operator kind {kind!r}")


# ---------- module-level operations ----------

def forward(model: DegradationModel, x) -> Tensor:
    return model.forward(as_tensor(x))


def adjoint(model: DegradationModel, y) -> Tensor:
    return model.adjoint(as_tensor(y))


def add_noise(y: Tensor, sigma: float, seed: int, purpose: str = "noise") -> Tensor:
    """y + n, n ~ N(0, sigma^2), drawn from the seeded stream."""
    if sigma < 0:
        raise ContractError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return y
    n = make_rng(seed, purpose).normal(0.0, float(sigma), size=y.shape).astype(y.dtype)
    return add(y, Tensor(n))


def gram_apply(model: DegradationModel, v: Tensor, mu) -> Tensor:
    """(Phi^T Phi + mu I) v."""
    return add(model.adjoint(model.forward(v)), mul(v, mu))


def conjugate_gradient(apply, b: np.ndarray, tol: float, max_iter: int = CG_MAX_ITER,
                       strict: bool = True) -> Tuple[np.ndarray, float, int]:
    """Solve A x = b for symmetric positive definite A given as a callable.

    Iterates in float64 whatever the dtype of b; x comes back in b's dtype.
    Restarts from the current iterate whenever the recursive residual claims
    convergence but the true residual does not. Returns (x, relative residual, iterations).
    """
    out_dtype = b.dtype
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)

    def A(v):
        return np.asarray(apply(v), dtype=np.float64)

    bn = float(np.linalg.norm(b))
    if bn == 0.0:
        return x.astype(out_dtype), 0.0, 0
    it = 0
    rel = 1.0
    while it < max_iter:
        r = b - A(x)
        rel = float(np.linalg.norm(r)) / bn
        if rel <= tol:
            return x.astype(out_dtype), rel, it
        p = r.copy()
        rs = float(np.vdot(r, r))
        while it < max_iter:
            Ap = A(p)
            alpha = rs / float(np.vdot(p, Ap))
            x += alpha * p
            r -= alpha * Ap
            it += 1
            rs_new = float(np.vdot(r, r))
            if math.sqrt(rs_new) <= tol * bn:
                break
            p = r + (rs_new / rs) * p
            rs = rs_new
    rel = float(np.linalg.norm(b - A(x))) / bn
    if rel > tol:
        if strict:
            raise GramSolveError("conjugate gradient did not converge", rel, it)
        log.warn("operators", f"conjugate gradient stopped at relative residual {rel:.2e}")
    return x.astype(out_dtype), rel, it


def _gram_inverse(model: DegradationModel, r: Tensor, mu_val: float, tol: float) -> Tensor:
    """(Phi^T Phi + mu I)^-1 r with Phi and mu held constant; its transpose is itself."""
    def apply(v):
        with no_grad():
            return gram_apply(model, Tensor(v), mu_val).data

    x, _, _ = conjugate_gradient(apply, r.data, tol, strict=False)
    return make_node(x, (r,), lambda g: (conjugate_gradient(apply, g, tol, strict=False)[0],))


def solve_gram(model: DegradationModel, rhs: Tensor, mu, tol: Optional[float] = None,
               max_iter: int = CG_MAX_ITER) -> Tensor:
    """x with (Phi^T Phi + mu I) x = rhs.

    Closed form through the push-through identity when Phi Phi^T is diagonal,
    otherwise conjugate gradient. The CG result is differentiated implicitly:
    x = x* - S(A x* - rhs) with S the constant inverse, which has value x* and
    the exact gradient with respect to rhs, mu and learnable operator tensors.
    """
    rhs = as_tensor(rhs)
    mu = as_tensor(mu, like=rhs)
    if np.any(mu.data <= 0):
        raise ContractError(f"mu must be > 0, got {mu.data}")
    diag = model.gram_diagonal()
    if diag is not None:
        inner = div(model.forward(rhs), add(diag, mu))
        return div(sub(rhs, model.adjoint(inner)), mu)

    tol = CG_TOL.get(rhs.dtype, 1e-10) if tol is None else tol
    mu_val = float(mu.data.reshape(-1)[0])

    def apply(v):
        with no_grad():
            return gram_apply(model, Tensor(v), mu_val).data

    x_star, _, _ = conjugate_gradient(apply, rhs.data, tol, max_iter)
    x_const = Tensor(x_star)
    if not (rhs.requires_grad or mu.requires_grad or model.parameters()):
        return x_const
    residual = sub(gram_apply(model, x_const, mu), rhs)
    return sub(x_const, _gram_inverse(model, residual, mu_val, tol))


# ---------- blur kernels ----------

def _grid(size: int):
    c = (size - 1) / 2.0
    ax = np.arange(size, dtype=np.float64) - c
    return np.meshgrid(ax, ax, indexing="xy")


def make_kernel(kind: str, size: int = 15, width: float = 1.0, width_y: Optional[float] = None,
                angle: float = 0.0, length: float = 5.0) -> np.ndarray:
    """Normalized blur kernel: iso_gauss(width), aniso_gauss(width, width_y, angle), motion(length, angle)."""
    if size < 1 or size % 2 == 0:
        raise ContractError(f"kernel size must be odd and positive, got {size}")
    if kind == "iso_gauss":
        return make_kernel("aniso_gauss", size, width, width, 0.0)
    if kind == "aniso_gauss":
        wy = width if width_y is None else width_y
        if width <= 0 or wy <= 0:
            raise ContractError("Gaussian widths must be > 0")
        c, s = math.cos(angle), math.sin(angle)
        R = np.array([[c, -s], [s, c]])
        Q = R @ np.diag([1.0 / width ** 2, 1.0 / wy ** 2]) @ R.T
        X, Y = _grid(size)
        k = np.exp(-0.5 * (Q[0, 0] * X * X + 2.0 * Q[0, 1] * X * Y + Q[1, 1] * Y * Y))
        return k / k.sum()
    if kind == "motion":
        if length <= 0 or length > size:
            raise ContractError(f"motion length must lie in (0, {size}], got {length}")
        c = (size - 1) / 2.0
        t = np.linspace(-length / 2.0, length / 2.0, int(4 * length) + 1)
        cols = np.clip(np.rint(c + t * math.cos(angle)).astype(int), 0, size - 1)
        rows = np.clip(np.rint(c - t * math.sin(angle)).astype(int), 0, size - 1)
        k = np.zeros((size, size))
        k[rows, cols] = 1.0
        k = ndimage.uniform_filter(k, size=3, mode="constant")
        return k / k.sum()
    raise ContractError(f"unknown kernel kind {kind!r}")


# K1-K4 isotropic, K5-K8 anisotropic (width, width_y, angle), K9-K12 motion (length, angle)
KERNEL_BANK = {
    "K1": ("iso_gauss", {"width": 0.7}),
    "K2": ("iso_gauss", {"width": 1.2}),
    "K3": ("iso_gauss", {"width": 1.6}),
    "K4": ("iso_gauss", {"width": 2.0}),
    "K5": ("aniso_gauss", {"width": 2.0, "width_y": 0.8, "angle": 0.0}),
    "K6": ("aniso_gauss", {"width": 2.0, "width_y": 0.8, "angle": math.pi / 4}),
    "K7": ("aniso_gauss", {"width": 2.8, "width_y": 1.2, "angle": math.pi / 3}),
    "K8": ("aniso_gauss", {"width": 3.2, "width_y": 1.6, "angle": 3 * math.pi / 4}),
    "K9": ("motion", {"length": 5.0, "angle": 0.0}),
    "K10": ("motion", {"length": 7.0, "angle": math.pi / 4}),
    "K11": ("motion", {"length": 9.0, "angle": math.pi / 2}),
    "K12": ("motion", {"length": 11.0, "angle": 3 * math.pi / 4}),
}


def kernel_bank(kernel_id: str, size: int = 15) -> np.ndarray:
    if kernel_id not in KERNEL_BANK:
        raise ContractError(f"unknown kernel id {kernel_id!r} (K1..K12)")
    kind, params = KERNEL_BANK[kernel_id]
    return make_kernel(kind, size, **params)


def dirac_kernel(size: int = 1) -> np.ndarray:
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k
