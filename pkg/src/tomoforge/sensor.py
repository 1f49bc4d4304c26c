"""Sensor physics: shot noise, electronic noise and b-bit quantization.

Readings are simulated as::

    z ~ Poisson(exp(s - y)) + Normal(0, epsilon)
    r = clamp(round(z / k), 0, 2**b - 1)

and :func:`posterior_oracle_pixel` integrates the exact likelihood of a
reading over a grid of sinogram values to obtain the posterior mean and
standard deviation under a uniform prior on that grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special, stats

SIGMA_FLOOR = 1e-4

# numpy's Poisson sampler rejects means above ~1e19; such pixels saturate anyway
_MAX_POISSON_MEAN = 1e18
_LIKELIHOOD_TAIL = 1e-10


class GridTooNarrowWarning(UserWarning):
    pass


@dataclass(frozen=True)
class NoiseParams:
    """``s``: log X-ray intensity, ``epsilon``: electronic-noise variance,
    ``k``: quantization scale, ``b``: detector bit depth."""

    s: float
    epsilon: float = 0.0
    k: float = 1.0
    b: int = 16

    def __post_init__(self):
        if not math.isfinite(self.s):
            raise ValueError(f"s must be finite, got {self.s}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.k > 0:
            raise ValueError(f"k must be > 0, got {self.k}")
        if int(self.b) != self.b or not 1 <= self.b <= 16:
            raise ValueError(f"b must be an integer in [1, 16], got {self.b}")

    @property
    def r_max(self) -> int:
        return 2 ** int(self.b) - 1

    def with_signal(self, s: float) -> "NoiseParams":
        return NoiseParams(s, self.epsilon, self.k, self.b)


class PosteriorGrid(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) stream; ``seed`` may be an int or a tuple of ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def substreams(seed, n: int) -> list[np.random.Generator]:
    """Independent streams for concurrent simulation, one per chunk index."""
    return [np.random.Generator(np.random.Philox(ss)) for ss in np.random.SeedSequence(seed).spawn(n)]


def photon_mean(y: np.ndarray, p: NoiseParams) -> np.ndarray:
    return np.minimum(np.exp(np.clip(p.s - np.asarray(y, dtype=np.float64), -700.0, 700.0)),
                      _MAX_POISSON_MEAN)


def simulate_analog(y: np.ndarray, p: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """Pre-quantization sensor value ``z``."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("sinogram contains non-finite values")
    z = rng.poisson(photon_mean(y, p)).astype(np.float64)
    if p.epsilon > 0:
        z += rng.normal(0.0, math.sqrt(p.epsilon), size=z.shape)
    return z


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(z: np.ndarray, p: NoiseParams) -> np.ndarray:
    r = np.clip(round_half_away(np.asarray(z, dtype=np.float64) / p.k), 0, p.r_max)
    return r.astype(np.int64)


def simulate_readings(y: np.ndarray, p: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """Integer sensor readings in ``[0, 2**b - 1]`` for a noiseless sinogram ``y``."""
    return quantize(simulate_analog(y, p, rng), p)


# --- exact posterior ------------------------------------------------------------


def _cell(r: int, p: NoiseParams) -> tuple[float, float]:
    """Interval of z that quantizes to r (half-open ``[lo, hi)``)."""
    lo = -math.inf if r == 0 else p.k * (r - 0.5)
    hi = math.inf if r == p.r_max else p.k * (r + 0.5)
    return lo, hi


def _cell_probability(n: np.ndarray, lo: float, hi: float, epsilon: float) -> np.ndarray:
    """P(lo <= n + e < hi) for e ~ N(0, epsilon)."""
    if epsilon == 0:
        return ((n >= lo) & (n < hi)).astype(np.float64)
    sd = math.sqrt(epsilon)
    # difference of survival functions keeps precision in the upper tail
    return np.clip(stats.norm.sf((lo - n) / sd) - stats.norm.sf((hi - n) / sd), 0.0, 1.0)


def likelihood(r_value: int, p: NoiseParams, ys: np.ndarray) -> np.ndarray:
    """P(r = r_value | y) for every y in ``ys``.

    Sums Poisson terms over the central range holding ``1 - 1e-10`` of the
    mass (restricted to counts whose quantization cell is reachable), each
    weighted by the Gaussian probability of landing in the reading's cell.
    The clamp bins absorb the tails through their infinite cell bounds.
    """
    r_value = int(r_value)
    if not 0 <= r_value <= p.r_max:
        raise ValueError(f"reading {r_value} outside [0, {p.r_max}]")
    ys = np.asarray(ys, dtype=np.float64)
    lam = photon_mean(ys, p)
    lo, hi = _cell(r_value, p)
    reach = 12.0 * math.sqrt(p.epsilon) + 1.0
    n_lo = int(stats.poisson.ppf(_LIKELIHOOD_TAIL / 2, lam.min()))
    n_hi = int(stats.poisson.isf(_LIKELIHOOD_TAIL / 2, lam.max()))
    if math.isfinite(lo):
        n_lo = max(n_lo, math.floor(lo - reach))
    out = np.zeros_like(lam)
    if math.isfinite(hi):
        n_hi = min(n_hi, math.ceil(hi + reach))
    else:
        # saturated bin: counts far above the cell edge land in it with certainty
        edge = math.ceil(lo + reach)
        if n_hi > edge:
            n_hi = edge
            out += stats.poisson.sf(edge, lam)
    n_lo = max(n_lo, 0)
    if n_hi < n_lo:
        return out
    chunk = max(1, 4_000_000 // max(len(lam), 1))
    log_lam = np.log(np.maximum(lam, 1e-300))
    for start in range(n_lo, n_hi + 1, chunk):
        n = np.arange(start, min(n_hi + 1, start + chunk), dtype=np.float64)
        w = _cell_probability(n, lo, hi, p.epsilon)
        keep = w > 0
        if not keep.any():
            continue
        n, w = n[keep], w[keep]
        logpmf = n[None, :] * log_lam[:, None] - lam[:, None] - special.gammaln(n + 1)[None, :]
        out += np.exp(logpmf) @ w
    return out


def y_grid_values(y_grid) -> np.ndarray:
    lo, hi, step = y_grid
    if not (hi > lo and step > 0):
        raise ValueError(f"bad y grid {y_grid}")
    return lo + step * np.arange(int(round((hi - lo) / step)) + 1)


def posterior_oracle_pixel(r_value: int, p: NoiseParams, y_grid=(0.0, 6.0, 1e-3)) -> tuple[float, float]:
    """Posterior mean and standard deviation of y given one reading.

    ``y_grid`` is ``(lo, hi, step)``; the prior is uniform on it.
    """
    ys = y_grid_values(y_grid)
    like = likelihood(r_value, p, ys)
    total = like.sum()
    if not total > 0:
        raise ValueError(f"reading {r_value} has zero likelihood on grid {y_grid}")
    w = like / total
    if w[0] > 1e-6 or w[-1] > 1e-6:
        warnings.warn(
            f"posterior of r={r_value} has mass {max(w[0], w[-1]):.2e} at the y-grid boundary",
            GridTooNarrowWarning,
            stacklevel=2,
        )
    mu = float(w @ ys)
    sigma = float(math.sqrt(max(w @ (ys - mu) ** 2, 0.0)))
    return mu, max(sigma, SIGMA_FLOOR)


def posterior_oracle_grid(r: np.ndarray, p: NoiseParams, y_grid=(0.0, 6.0, 1e-3)) -> PosteriorGrid:
    """Apply :func:`posterior_oracle_pixel` per entry, computing each distinct reading once."""
    r = np.asarray(r)
    values, inverse = np.unique(r, return_inverse=True)
    mus = np.empty(len(values))
    sigmas = np.empty(len(values))
    for i, v in enumerate(values):
        mus[i], sigmas[i] = posterior_oracle_pixel(int(v), p, y_grid)
    inverse = inverse.reshape(r.shape)
    return PosteriorGrid(mus[inverse], sigmas[inverse])
