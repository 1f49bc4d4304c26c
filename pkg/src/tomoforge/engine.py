"""Differentiable operator set used by the networks.

Reverse-mode differentiation is delegated to ``torch.autograd``; this module
pins down the exact operator semantics the models rely on, bridges the
Radon projectors into the graph with exact adjoint backward passes, and
provides spectral normalization, Adam, the learning-rate schedule and a
finite-difference gradient checker.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import radon
from .radon import ScanGeometry


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an op produces NaN or Inf."""


_CHECKED = False


def set_checked(flag: bool) -> None:
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


@contextlib.contextmanager
def checked(flag: bool = True):
    prev = _CHECKED
    set_checked(flag)
    try:
        yield
    finally:
        set_checked(prev)


def _trap(t: torch.Tensor, op: str) -> torch.Tensor:
    if _CHECKED and not torch.isfinite(t).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return t


# --- elementwise and structural ops -----------------------------------------------


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0):
    return _trap(F.conv2d(x, w, bias, stride=stride, padding=padding), "conv2d")


def bilinear_upsample(x, factor: int = 2, size=None):
    """Bilinear resize with half-pixel centres (``align_corners=False``)."""
    if size is None:
        size = (x.shape[-2] * factor, x.shape[-1] * factor)
    return _trap(F.interpolate(x, size=size, mode="bilinear", align_corners=False), "bilinear_upsample")


def prelu(x, slope):
    return _trap(F.prelu(x, slope), "prelu")


def exp_activation(x):
    return _trap(torch.exp(x), "exp")


def sigmoid(x):
    return _trap(torch.sigmoid(x), "sigmoid")


def concat(tensors, axis: int = 1):
    return torch.cat(list(tensors), dim=axis)


def split(x, sizes, axis: int = 1):
    return torch.split(x, list(sizes), dim=axis)


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C)."""
    return x.mean(dim=(-2, -1))


def linear(x, w, b=None):
    return _trap(F.linear(x, w, b), "linear")


# --- Radon bridge ---------------------------------------------------------------------


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


class _BackProject(torch.autograd.Function):
    @staticmethod
    def forward(ctx, s, geometry):
        ctx.geometry = geometry
        return torch.from_numpy(radon.back_project(_np(s), geometry)).to(s.dtype)

    @staticmethod
    def backward(ctx, grad):
        return torch.from_numpy(radon.forward_project(_np(grad), ctx.geometry)).to(grad.dtype), None


class _ForwardProject(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, geometry):
        ctx.geometry = geometry
        return torch.from_numpy(radon.forward_project(_np(x), geometry)).to(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        return torch.from_numpy(radon.back_project(_np(grad), ctx.geometry)).to(grad.dtype), None


def radon_backproject_node(s: torch.Tensor, geometry: ScanGeometry) -> torch.Tensor:
    """(B, C, n_angles, n_detectors) -> (B, C, N, N); the backward pass applies A."""
    if tuple(s.shape[-2:]) != geometry.sinogram_shape:
        raise ValueError(f"sinogram shape {tuple(s.shape)} does not match geometry {geometry.sinogram_shape}")
    return _trap(_BackProject.apply(s, geometry), "radon_backproject")


def radon_forward_node(x: torch.Tensor, geometry: ScanGeometry) -> torch.Tensor:
    """(B, C, N, N) -> (B, C, n_angles, n_detectors); the backward pass applies A^T."""
    if tuple(x.shape[-2:]) != geometry.image_shape:
        raise ValueError(f"image shape {tuple(x.shape)} does not match geometry {geometry.image_shape}")
    return _trap(_ForwardProject.apply(x, geometry), "radon_forward")


# --- spectral normalization -----------------------------------------------------------


def _l2n(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm().clamp_min(1e-30)


def spectral_normalize(w: torch.Tensor, u: torch.Tensor, n_power_iters: int = 5):
    """Divide ``w`` by a power-iteration estimate of its largest singular value.

    ``w`` is viewed as ``(out, rest)``.  ``u`` (length ``out``) is the
    persistent left-vector estimate; it is updated in place.  Returns
    ``(w / sigma, sigma)`` with gradients flowing through ``sigma`` but not
    through the power iteration.
    """
    mat = w.reshape(w.shape[0], -1)
    with torch.no_grad():
        uu = u
        v = _l2n(mat.t() @ uu)
        for _ in range(n_power_iters):
            v = _l2n(mat.t() @ uu)
            uu = _l2n(mat @ v)
        u.copy_(uu)
        uu = uu.clone()
    sigma = torch.dot(uu, mat @ v)
    return w / sigma, sigma


def warm_start_u(w: torch.Tensor, iters: int = 200, seed: int = 0) -> torch.Tensor:
    """Initial left singular vector estimate, iterated close to convergence."""
    mat = w.detach().reshape(w.shape[0], -1)
    gen = torch.Generator().manual_seed(seed)
    u = _l2n(torch.randn(mat.shape[0], generator=gen, dtype=mat.dtype))
    for _ in range(iters):
        u = _l2n(mat @ _l2n(mat.t() @ u))
    return u


# --- optimizer and schedule -----------------------------------------------------------


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: OptimizerState, lr: float) -> None:
    """One in-place Adam update. ``grads`` entries may be ``None`` (skipped)."""
    params = list(params)
    grads = list(grads)
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                continue
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, params, **hyper):
        self.params = [p for p in params if p.requires_grad]
        self.state = OptimizerState(**hyper)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        adam_step(self.params, [p.grad for p in self.params], self.state, lr)

    def state_tensors(self) -> dict:
        out = {"step": torch.tensor([float(self.state.step)], dtype=torch.float64)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_tensors(self, tensors: dict):
        self.state.step = int(tensors["step"][0])
        n = len(self.params)
        if self.state.step:
            self.state.m = [torch.as_tensor(tensors[f"m.{i}"]).clone() for i in range(n)]
            self.state.v = [torch.as_tensor(tensors[f"v.{i}"]).clone() for i in range(n)]


@dataclass(frozen=True)
class LrSchedule:
    peak: float = 3e-4
    warmup_batches: int = 5000
    halve_every: int = 80000
    gamma: float = 5.0


def lr_at(batch: int, s: LrSchedule = LrSchedule()) -> float:
    """Shifted-exponential warmup from 0 to ``peak``, then halving every ``halve_every`` batches."""
    if batch < 0:
        raise ValueError("batch index must be non-negative")
    if batch < s.warmup_batches:
        return s.peak * math.expm1(batch / s.warmup_batches * s.gamma) / math.expm1(s.gamma)
    return s.peak * 0.5 ** ((batch - s.warmup_batches) // s.halve_every)


# --- finite-difference gradient checking ----------------------------------------------


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn, inputs, eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between autograd and central differences of a random projection.

    ``fn`` maps double tensors to a tensor; the scalarization
    ``<fn(inputs), c>`` with fixed random ``c`` is differentiated with respect
    to every element of every input that requires grad.
    """
    inputs = [t.detach().clone().double().requires_grad_(t.requires_grad) for t in inputs]
    out = fn(*inputs)
    gen = torch.Generator().manual_seed(seed)
    c = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    loss = (out * c).sum()
    targets = [t for t in inputs if t.requires_grad]
    grads = torch.autograd.grad(loss, targets, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(targets, grads):
            g = np.zeros(t.shape) if g is None else g.numpy()
            fd = np.zeros(t.numel())
            flat = t.view(-1)
            for i in range(t.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = (fn(*inputs) * c).sum().item()
                flat[i] = orig - eps
                fm = (fn(*inputs) * c).sum().item()
                flat[i] = orig
                fd[i] = (fp - fm) / (2 * eps)
            worst = max(worst, _rel_err(g.ravel(), fd))
    return worst


def directional_gradcheck(loss_fn, params, n_dirs: int = 3, eps: float = 1e-5, seed: int = 0) -> float:
    """Compare <grad, d> with a central difference along random directions ``d``.

    Meant for models too large for elementwise checks.  ``loss_fn()`` must
    return a scalar computed from ``params`` (double precision).
    """
    params = [p for p in params if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    gen = torch.Generator().manual_seed(seed)
    ad, fd = [], []
    with torch.no_grad():
        for _ in range(n_dirs):
            dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
            norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
            dirs = [d / norm for d in dirs]
            ad.append(sum(float((g * d).sum()) for g, d in zip(grads, dirs)))
            for p, d in zip(params, dirs):
                p.add_(d, alpha=eps)
            fp = float(loss_fn())
            for p, d in zip(params, dirs):
                p.add_(d, alpha=-2 * eps)
            fm = float(loss_fn())
            for p, d in zip(params, dirs):
                p.add_(d, alpha=eps)
            fd.append((fp - fm) / (2 * eps))
    return _rel_err(np.array(ad), np.array(fd))
