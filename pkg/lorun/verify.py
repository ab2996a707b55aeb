"""Invariant suite: adjoint identities, gradient checks, prox oracle, LoRA identities, solver oracles.

Every registered check returns (metric, threshold, passed); `run_checks` turns
them into one report row each. Oracles run in float64 unless noted.
"""
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from . import log
from .data import synthesize
from .denoisers import DenoiserConfig, init_weights, weight_shapes
from .errors import ConfigError
from .gradcheck import gradient_errors
from .lora import param_count
from .manage import merge_adapters
from .metrics import evaluate
from .operators import (KERNEL_BANK, CassiOperator, CsOperator, DegradationModel, SrOperator, gram_apply,
                        kernel_bank, solve_gram)
from .rng import make_rng
from .tensor import (Tensor, concat, conv2d, div, downsample_stride, exp, gelu, layer_norm, log as tlog,
                     matmul, mean, mul, no_grad, relu, scale, sigmoid, soft_threshold, softmax, softplus,
                     sqrt, sum as tsum, tanh, transpose, upsample_nearest)
from .training import load_model, loss_l2, to_checkpoint
from .unfolding import StageParams, UnfoldingModel, build_block_share, build_lorun, run_model

FAULTS = ("adjoint",)
ADJOINT_TOL = 1e-5
GRAD_TOL = 1e-4
F64 = np.float64

Result = Tuple[float, float, bool]
CHECKS: Dict[str, Callable[[Optional[str]], Result]] = {}


def check(name: str):
    def register(fn):
        CHECKS[name] = fn
        return fn
    return register


class _ScaledAdjoint(DegradationModel):
    """Test hook: an operator whose adjoint is off by a constant factor."""

    def __init__(self, inner: DegradationModel, factor: float):
        super().__init__(False)
        self.inner = inner
        self.factor = factor

    def forward(self, x):
        return self.inner.forward(x)

    def adjoint(self, y):
        return scale(self.inner.adjoint(y), self.factor)


def _maybe_faulty(op: DegradationModel, fault: Optional[str]) -> DegradationModel:
    return _ScaledAdjoint(op, 1.01) if fault == "adjoint" else op


# ---------- operators ----------

def _adjoint_residual(make_op: Callable[[int], Tuple[DegradationModel, Tuple[int, ...]]], fault, n: int = 100) -> float:
    worst = 0.0
    for i in range(n):
        op, xshape = make_op(i)
        op = _maybe_faulty(op, fault)
        rng = make_rng(i, "verify.adjoint")
        x = rng.standard_normal(xshape)
        with no_grad():
            y = rng.standard_normal(op.forward(Tensor(x)).shape)
            lhs = float(np.vdot(op.forward(Tensor(x)).data, y))
            rhs = float(np.vdot(x, op.adjoint(Tensor(y)).data))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y)))
    return worst


@check("adjoint.cs")
def _adjoint_cs(fault):
    r = _adjoint_residual(lambda i: (CsOperator.random(0.25, 8, seed=i, dtype=F64), (1, 1, 16, 16)), fault)
    return r, ADJOINT_TOL, r <= ADJOINT_TOL


@check("adjoint.cassi")
def _adjoint_cassi(fault):
    r = _adjoint_residual(lambda i: (CassiOperator.random(8, 8, bands=4, shift=2, seed=i, dtype=F64),
                                     (1, 4, 8, 8)), fault)
    return r, ADJOINT_TOL, r <= ADJOINT_TOL


@check("adjoint.sr")
def _adjoint_sr(fault):
    ids = sorted(KERNEL_BANK, key=lambda s: int(s[1:]))

    def make(i):
        kid = ids[i % len(ids)]
        return SrOperator(kernel_bank(kid, 15), scale_factor=2 + i % 3, kernel_id=kid, dtype=F64), (1, 1, 24, 24)
    r = _adjoint_residual(make, fault)
    return r, ADJOINT_TOL, r <= ADJOINT_TOL


@check("cassi.width")
def _cassi_width(fault):
    op = CassiOperator.random(256, 256, bands=28, shift=2)
    with no_grad():
        y = op.forward(Tensor(np.zeros((1, 28, 256, 256), dtype=np.float32)))
    w = y.shape[-1]
    return float(w), 310.0, w == 310


def _gram_oracle(op: DegradationModel, shape: Tuple[int, ...], mu: float = 0.3) -> Result:
    m = int(np.prod(shape))
    with no_grad():
        basis = Tensor(np.eye(m).reshape((m,) + shape[1:]))
        A = gram_apply(op, basis, mu).data.reshape(m, m).T
        rhs = make_rng(0, "verify.gram").standard_normal(shape)
        x = solve_gram(op, Tensor(rhs), mu).data
        res = np.linalg.norm(gram_apply(op, Tensor(x), mu).data - rhs) / np.linalg.norm(rhs)
    dense = linalg.solve(A, rhs.reshape(-1), assume_a="pos").reshape(shape)
    err = float(np.abs(x - dense).max())
    return err, 1e-6, err <= 1e-6 and res <= 1e-8


@check("gram.cs")
def _gram_cs(fault):
    return _gram_oracle(CsOperator.random(0.25, 8, seed=1, learnable=False, dtype=F64), (1, 1, 16, 16))


@check("gram.cassi")
def _gram_cassi(fault):
    return _gram_oracle(CassiOperator.random(8, 8, bands=4, shift=2, seed=1, dtype=F64), (1, 4, 8, 8))


@check("gram.sr")
def _gram_sr(fault):
    return _gram_oracle(SrOperator(kernel_bank("K2", 7), 2, "K2", dtype=F64), (1, 1, 16, 16))


# ---------- gradients ----------

def _weighted(fn: Callable[[Tensor], Tensor], shape: Sequence[int], positive: bool = False) -> Result:
    rng = make_rng(0, "verify.grad")
    raw = rng.uniform(0.5, 2.0, size=shape) if positive else rng.standard_normal(shape)
    x = Tensor(raw, requires_grad=True, name="x")
    with no_grad():
        out_shape = fn(x).shape
    r = Tensor(rng.standard_normal(out_shape))
    errs = gradient_errors(lambda: tsum(mul(fn(x), r)), {"x": x})
    e = max(errs.values())
    return e, GRAD_TOL, e < GRAD_TOL


_W = make_rng(1, "verify.grad.w")
_W_MAT, _W_CONV, _W_CIRC, _W_NUM = (_W.standard_normal(s) for s in ((4, 3), (3, 2, 3, 3), (2, 2, 3, 3), (3, 4)))
_PRIMITIVES = {
    "matmul": (lambda x: matmul(x, Tensor(_W_MAT)), (5, 4), False),
    "conv2d.zero": (lambda x: conv2d(x, Tensor(_W_CONV)), (2, 2, 6, 6), False),
    "conv2d.circular": (lambda x: conv2d(x, Tensor(_W_CIRC), padding="circular"),
                        (1, 2, 5, 5), False),
    "gelu": (gelu, (3, 7), False),
    "sigmoid": (sigmoid, (3, 7), False),
    "tanh": (tanh, (3, 7), False),
    "softplus": (softplus, (3, 7), False),
    "relu": (relu, (3, 7), False),
    "softmax": (lambda x: softmax(x, axis=-1), (3, 5), False),
    "layer_norm": (lambda x: layer_norm(x, axis=-1), (3, 6), False),
    "soft_threshold": (lambda x: soft_threshold(x, 0.3), (4, 6), False),
    "exp.log.sqrt": (lambda x: sqrt(tlog(exp(x))), (3, 4), True),
    "div": (lambda x: div(Tensor(_W_NUM), x), (3, 4), True),
    "mean": (lambda x: mean(x, axis=1, keepdims=True), (3, 4), False),
    "transpose": (lambda x: transpose(x, (1, 0, 2)), (2, 3, 4), False),
    "concat": (lambda x: concat([x, scale(x, 2.0)], axis=1), (2, 3, 4), False),
    "upsample_nearest": (lambda x: upsample_nearest(x, 2), (1, 2, 3, 3), False),
    "downsample_stride": (lambda x: downsample_stride(x, 2), (1, 2, 6, 6), False),
}


def _register_primitive(name, fn, shape, positive):
    check(f"grad.{name}")(lambda fault: _weighted(fn, shape, positive))


for _name, (_fn, _shape, _pos) in _PRIMITIVES.items():
    _register_primitive(_name, _fn, _shape, _pos)


def _toy_unet(channels: int = 1) -> DenoiserConfig:
    return DenoiserConfig("unet", image_channels=channels, base_channels=4, depth=1)


@check("grad.lorun2")
def _grad_lorun(fault):
    """Full LoRun-2 loss (learnable Phi, random A so every factor carries gradient)."""
    cfg = _toy_unet()
    op = CsOperator.random(0.5, 8, seed=2, learnable=True, dtype=F64)
    model = build_lorun("pgd", op, cfg, 2, init_weights(cfg, 2, dtype=F64), gamma=50.0, seed=2, dtype=F64)
    rng = make_rng(2, "verify.lorun2")
    for stage in model.adapters:
        for a in stage.values():
            a.A.data = rng.normal(0.0, 0.1, size=a.A.shape)
    x = Tensor(rng.uniform(0.0, 1.0, size=(2, 1, 8, 8)))

    def f():
        x_hat, _ = run_model(model, op.forward(x))
        return loss_l2(x_hat, x)

    errs = gradient_errors(f, model.trainable(), h=1e-6)
    e = max(errs.values())
    return e, GRAD_TOL, e < GRAD_TOL


# ---------- prox / ISTA ----------

@check("prox.soft_threshold")
def _prox_oracle(fault):
    rng = make_rng(0, "verify.prox")
    z = rng.uniform(-3.0, 3.0, size=1000)
    tau = rng.uniform(0.0, 2.0, size=1000)
    step = 1e-3
    grid = np.arange(-5.0, 5.0 + step / 2, step)
    worst = 0.0
    for lo in range(0, 1000, 100):
        zc, tc = z[lo:lo + 100, None], tau[lo:lo + 100, None]
        argmin = grid[np.argmin(0.5 * (grid[None] - zc) ** 2 + tc * np.abs(grid[None]), axis=1)]
        got = soft_threshold(Tensor(z[lo:lo + 100]), Tensor(tau[lo:lo + 100])).data
        worst = max(worst, float(np.abs(got - argmin).max()))
    return worst, step, worst <= step


@check("ista.sparse_recovery")
def _ista(fault):
    """50 soft-threshold PGD stages on an 8x8, beta=0.5, 5-sparse CS problem."""
    op = CsOperator.random(0.5, 8, seed=7, learnable=False, dtype=F64)
    rng = make_rng(7, "verify.ista")
    support = np.sort(rng.choice(64, size=5, replace=False))
    x_true = np.zeros(64)
    x_true[support] = rng.choice([-1.0, 1.0], size=5)
    x_true = x_true.reshape(1, 1, 8, 8)
    lam = 0.02
    L = float(linalg.svdvals(op.phi.data)[0]) ** 2
    stages = [StageParams.init(k, rho=0.9 / L, lam=lam, dtype=F64) for k in range(1, 51)]
    model = UnfoldingModel("pgd", op, DenoiserConfig("soft_threshold"), stages, backbone={})
    with no_grad():
        y = op.forward(Tensor(x_true))
        x_hat, traj = run_model(model, y)
        states = [op.adjoint(y)] + traj
        obj = [0.5 * float(np.sum((op.forward(s).data - y.data) ** 2)) + lam * float(np.abs(s.data).sum())
               for s in states]
    rise = max(0.0, max(b - a for a, b in zip(obj, obj[1:])))
    top5 = np.sort(np.argsort(np.abs(x_hat.data.reshape(-1)))[-5:])
    ok = rise <= 1e-12 * max(1.0, obj[0]) and np.array_equal(top5, support)
    return rise, 0.0, bool(ok)


# ---------- LoRA ----------

def _zero_init(K: int) -> Result:
    cfg = _toy_unet()
    op = CsOperator.random(0.25, 8, seed=3, learnable=False)
    w = init_weights(cfg, 3)
    lorun = build_lorun("pgd", op, cfg, K, w, gamma=10.0, seed=3)
    share = build_block_share("pgd", op, cfg, K, w, trainable=False)
    x = Tensor(make_rng(3, "verify.zero_init").uniform(0.0, 1.0, size=(2, 1, 16, 16)).astype(np.float32))
    with no_grad():
        y = op.forward(x)
        a, _ = run_model(lorun, y)
        b, _ = run_model(share, y)
    d = float(np.abs(a.data - b.data).max())
    return d, 1e-6, d < 1e-6


for _K in (1, 3, 9):
    check(f"lora.zero_init.K{_K}")(lambda fault, K=_K: _zero_init(K))


@check("lora.merge_equivalence")
def _merge(fault):
    cfg = DenoiserConfig("unet", base_channels=4, depth=2)
    op = CsOperator.random(0.25, 8, seed=4, learnable=False, dtype=F64)
    model = build_lorun("pgd", op, cfg, 2, init_weights(cfg, 4, dtype=F64), gamma=10.0, seed=4, dtype=F64)
    rng = make_rng(4, "verify.merge")
    for stage in model.adapters:
        for a in stage.values():
            a.A.data = rng.normal(0.0, 0.05, size=a.A.shape)
    header = {"phase": "finetune", "strategy": "lorun", "algorithm": "pgd", "stages": 2, "gdm": True,
              "denoiser": cfg.to_dict(), "operator": op.describe()}
    merged = load_model(merge_adapters(to_checkpoint(model, header)), operator=op)
    samples = synthesize("synthetic:count=16,size=16,seed=4")
    a = evaluate(model, samples, threads=1)
    b = evaluate(merged, samples, threads=1)
    d = max(abs(ra.psnr - rb.psnr) for ra, rb in zip(a, b))
    return d, 1e-4, d < 1e-4


@check("lora.param_count")
def _params(fault):
    """Structural formula vs enumerating a built LoRun-9; toy U-Net, gamma=10."""
    cfg = DenoiserConfig("unet", base_channels=8, depth=2)
    report = param_count(weight_shapes(cfg), 9, 10.0)
    op = CsOperator.random(0.25, 8, learnable=False)
    model = build_lorun("pgd", op, cfg, 9, init_weights(cfg, 0), gamma=10.0, seed=0)
    enumerated = sum(t.size for n, t in model.named_tensors().items()
                     if n.startswith("backbone.") or n.endswith((".lora_A", ".lora_B")))
    ratio = enumerated / (9 * report.backbone)
    return ratio, 0.5, enumerated == report.lorun_total and ratio < 0.5


@check("lora.delta_rank")
def _delta_rank(fault):
    """Singular values of A B past its inner dimension (r, or r*k for conv) relative to the largest."""
    cfg = _toy_unet()
    model = build_lorun("pgd", CsOperator.random(0.25, 8, learnable=False), cfg, 1, init_weights(cfg, 5, dtype=F64),
                        gamma=25.0, seed=5, dtype=F64)
    rng = make_rng(5, "verify.rank")
    worst = 0.0
    for t, a in model.adapters[0].items():
        a.A.data = rng.standard_normal(a.A.shape)
        s = linalg.svdvals(matmul(a.A, a.B).data)
        inner = a.A.shape[1]
        if inner < len(s):
            worst = max(worst, float(s[inner] / s[0]))
    return worst, 1e-6, worst < 1e-6


# ---------- runner ----------

def run_checks(names: Optional[Sequence[str]] = None, inject_fault: Optional[str] = None) -> List[Dict[str, object]]:
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ConfigError(f"unknown fault {inject_fault!r} (known: {FAULTS})")
    selected = list(CHECKS) if not names else [n for n in CHECKS if any(n.startswith(p) for p in names)]
    rows = []
    for name in selected:
        t0 = time.time()
        try:
            metric, threshold, passed = CHECKS[name](inject_fault)
            row = {"check": name, "metric": float(metric), "threshold": float(threshold), "passed": bool(passed)}
        except Exception as e:  # a crashing check is a failing check
            row = {"check": name, "metric": None, "threshold": None, "passed": False, "error": str(e)}
        row["seconds"] = round(time.time() - t0, 3)
        if not row["passed"]:
            log.warn("verify", f"{name} failed: {row.get('error') or row['metric']}")
        rows.append(row)
    log.info("verify", f"{sum(r['passed'] for r in rows)}/{len(rows)} checks passed")
    return rows
