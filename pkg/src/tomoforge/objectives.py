"""Losses for the posterior, generator and critic; latent sampling; SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from . import engine as E
from .radon import ScanGeometry, circle_mask
from .sensor import SIGMA_FLOOR


@dataclass(frozen=True)
class GanConfig:
    lam: float = 0.05
    critic_lip: float = 1.0
    n_critic: int = 5

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.n_critic < 1:
            raise ValueError(f"n_critic must be >= 1, got {self.n_critic}")


def _log(x):
    return torch.log(x) if isinstance(x, torch.Tensor) else np.log(x)


def _maximum(x, floor):
    return torch.clamp(x, min=floor) if isinstance(x, torch.Tensor) else np.maximum(x, floor)


def weighted_sino_norm(v, sigma):
    """sum_i (v_i / sigma_i)^2 over every entry."""
    return ((v / sigma) ** 2).sum()


def posterior_nll(y, mu, sigma):
    """Mean over entries of (y - mu)^2 / sigma^2 + 2 log sigma."""
    return ((y - mu) ** 2 / sigma**2 + 2.0 * _log(sigma)).mean()


def spread_term(sigma, sigma_p):
    """Per-entry 2 log(sigma / sigma_p) + (sigma_p / sigma)^2; minimum 1 at sigma_p = sigma."""
    return 2.0 * _log(sigma / sigma_p) + (sigma_p / sigma) ** 2


def sample_spread(y1, y2, floor: float = SIGMA_FLOOR):
    """Two-sample standard deviation sqrt((y1 - y2)^2 / 2), floored."""
    d = (y1 - y2) ** 2 / 2.0
    return _maximum(d, floor**2) ** 0.5


def kl_diversity_loss(y1, y2, mu, sigma, floor: float = SIGMA_FLOOR):
    """||(y1 + y2)/2 - mu||^2_sigma + sum_i spread_term(sigma_i, sigma_p_i), summed over all entries."""
    mean_term = weighted_sino_norm((y1 + y2) / 2.0 - mu, sigma)
    return mean_term + spread_term(sigma, sample_spread(y1, y2, floor)).sum()


def generator_loss(g_out1, g_out2, posterior, critic, geometry: ScanGeometry, cfg: GanConfig = GanConfig()):
    """KL-diversity fidelity of the two projected samples plus lam times the mean critic score.

    Image batches are ``(B, 1, N, N)``; ``posterior`` is ``(mu, sigma)`` of
    shape ``(B, 1, n_angles, n_detectors)``.  The fidelity term is averaged
    over the batch.
    """
    mu, sigma = posterior
    y1 = E.radon_forward_node(g_out1, geometry)
    y2 = E.radon_forward_node(g_out2, geometry)
    fidelity = kl_diversity_loss(y1, y2, mu, sigma) / g_out1.shape[0]
    if cfg.lam == 0:
        return fidelity
    critic_term = (critic(g_out1).mean() + critic(g_out2).mean()) / 2.0
    return fidelity + cfg.lam * critic_term


def critic_loss(critic, real, fake):
    """mean D(real) - mean D(fake); the critic descends this value."""
    return critic(real).mean() - critic(fake).mean()


def refinement_objective(generator, critic, r, s, posterior, z, geometry: ScanGeometry, lam: float):
    """||A G(r, z) - mu||^2_sigma + lam D(G(r, z)), summed over the batch."""
    mu, sigma = posterior
    x = generator(r, s, z)
    fid = weighted_sino_norm(E.radon_forward_node(x, geometry) - mu, sigma)
    if lam == 0:
        return fid
    return fid + lam * critic(x).sum()


def sample_latent_sphere(shape, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform draw(s) on the unit sphere over all elements of ``shape``."""
    shape = tuple(shape)
    lead = () if n is None else (n,)
    z = rng.standard_normal(lead + shape)
    axes = tuple(range(len(lead), z.ndim))
    return z / np.sqrt((z**2).sum(axis=axes, keepdims=True))


def project_to_sphere(z: torch.Tensor) -> torch.Tensor:
    """Renormalize each batch item of ``z`` to unit l2 norm."""
    norms = z.reshape(z.shape[0], -1).norm(dim=1).clamp_min(1e-30)
    return z / norms.reshape(-1, *([1] * (z.ndim - 1)))


# --- image quality --------------------------------------------------------------------


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float, k1=0.01, k2=0.03) -> np.ndarray:
    win = gaussian_window()

    def filt(img):
        return ndimage.correlate(img, win, mode="reflect")

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(reference: np.ndarray, image: np.ndarray, data_range: float | None = None) -> float:
    """SSIM averaged over the inscribed circle.

    11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, reflective
    borders.  ``data_range`` defaults to the reference's max - min.
    """
    reference = np.asarray(reference, dtype=np.float64)
    if data_range is None:
        data_range = float(reference.max() - reference.min())
    if data_range <= 0:
        data_range = 1.0
    m = ssim_map(reference, image, data_range)
    return float(m[circle_mask(reference.shape[-1])].mean())


def psnr(reference: np.ndarray, image: np.ndarray, data_range: float = 1.0) -> float:
    mask = circle_mask(reference.shape[-1])
    mse = float(np.mean((np.asarray(reference) - np.asarray(image))[mask] ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(data_range**2 / mse)
