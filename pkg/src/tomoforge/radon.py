"""Parallel-beam discrete Radon transform, its exact adjoint, and FBP.

Both projectors are built from a single sparse weight matrix ``W``.  Its
entries are Joseph's interpolation weights: a ray crossing a row (or
column, whichever is closer to perpendicular) picks up the two nearest
pixels with linear weights, scaled by the step length.  Written per pixel
this is a tent of half-width ``c = max(|cos|, |sin|)`` and height ``1/c``
around the pixel's detector position.  ``forward_project`` applies ``W``
and ``back_project`` applies ``W.T``, so the two are transposes of each
other by construction rather than by approximation.

Images are ``(..., N, N)`` arrays, sinograms ``(..., n_angles, n_detectors)``.
Row 0 of an image is the top (largest y); column 0 is the left (smallest x).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ScanGeometry",
    "circle_mask",
    "apply_circle_mask",
    "assemble_system_matrix",
    "forward_project",
    "back_project",
    "ramp_filter",
    "fbp_reconstruct",
    "MAX_DENSE_SIZE",
]

MAX_DENSE_SIZE = 64


@dataclass(frozen=True)
class ScanGeometry:
    """Discretization of the parallel-beam scan.

    ``n_angles`` and ``n_detectors`` default to ``image_size``.  Detector
    bins have the same width as pixels.
    """

    image_size: int
    n_angles: int | None = None
    n_detectors: int | None = None
    pixel_spacing: float = 1.0

    def __post_init__(self):
        if self.n_angles is None:
            object.__setattr__(self, "n_angles", self.image_size)
        if self.n_detectors is None:
            object.__setattr__(self, "n_detectors", self.image_size)
        if self.image_size < 2:
            raise ValueError(f"image_size must be >= 2, got {self.image_size}")
        if self.n_angles < 1:
            raise ValueError(f"n_angles must be >= 1, got {self.n_angles}")
        if self.n_detectors < 1:
            raise ValueError(f"n_detectors must be >= 1, got {self.n_detectors}")
        if not self.pixel_spacing > 0:
            raise ValueError(f"pixel_spacing must be positive, got {self.pixel_spacing}")

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.n_angles, self.n_detectors)


def _pixel_coords(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates in pixel units, origin at the image centre."""
    c = (n - 1) / 2.0
    idx = np.arange(n) - c
    x = np.broadcast_to(idx[None, :], (n, n))
    y = np.broadcast_to(-idx[:, None], (n, n))
    return x, y


@functools.lru_cache(maxsize=32)
def circle_mask(n: int) -> np.ndarray:
    """Boolean mask of pixels whose centres lie within radius (n-1)/2."""
    x, y = _pixel_coords(n)
    r = (n - 1) / 2.0
    mask = x**2 + y**2 <= r * r + 1e-9
    mask.setflags(write=False)
    return mask


def apply_circle_mask(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    return np.where(circle_mask(n), x, 0).astype(x.dtype, copy=False)


@functools.lru_cache(maxsize=16)
def _weights(g: ScanGeometry, dtype: str):
    """Sparse forward matrix (rows: rays, cols: in-circle pixels) and its transpose."""
    n = g.image_size
    mask = circle_mask(n)
    x, y = _pixel_coords(n)
    px, py = x[mask], y[mask]
    n_pix = px.size
    cos, sin = np.cos(g.angles), np.sin(g.angles)
    c = np.maximum(np.abs(cos), np.abs(sin))[:, None]
    # detector coordinate of every (angle, pixel), in bin units
    u = cos[:, None] * px[None, :] + sin[:, None] * py[None, :] + (g.n_detectors - 1) / 2.0
    lo = np.floor(u)
    frac = u - lo
    lo = lo.astype(np.int64)
    # half-width c <= 1, so only the two bracketing bins can be reached
    w_lo = np.maximum(0.0, 1.0 - frac / c) / c
    w_hi = np.maximum(0.0, 1.0 - (1.0 - frac) / c) / c

    rows, cols, vals = [], [], []
    ang = np.repeat(np.arange(g.n_angles), n_pix).reshape(g.n_angles, n_pix)
    pix = np.broadcast_to(np.arange(n_pix), (g.n_angles, n_pix))
    for det, w in ((lo, w_lo), (lo + 1, w_hi)):
        ok = (det >= 0) & (det < g.n_detectors) & (w > 0)
        rows.append((ang * g.n_detectors + det)[ok])
        cols.append(pix[ok])
        vals.append(w[ok])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals) * g.pixel_spacing

    shape = (g.n_angles * g.n_detectors, n_pix)
    fwd = sp.csr_matrix((vals.astype(dtype), (rows, cols)), shape=shape)
    fwd.sum_duplicates()
    fwd.sort_indices()
    adj = fwd.T.tocsr()
    adj.sort_indices()
    return fwd, adj, np.flatnonzero(mask.ravel())


def _float_dtype(a: np.ndarray) -> np.dtype:
    return a.dtype if a.dtype in (np.float32, np.float64) else np.dtype(np.float64)


def _check_trailing(a: np.ndarray, shape: tuple[int, int], what: str):
    if a.ndim < 2 or tuple(a.shape[-2:]) != tuple(shape):
        raise ValueError(f"{what} must have trailing shape {shape}, got {a.shape}")


def assemble_system_matrix(g: ScanGeometry) -> np.ndarray:
    """Dense matrix of A built by literally stepping each ray through the grid.

    Row ``a * n_detectors + d`` holds the weights of ray (a, d) against every
    pixel in row-major order.  Only meant as a test oracle.
    """
    if g.image_size > MAX_DENSE_SIZE:
        raise ValueError(
            f"dense system matrix limited to image_size <= {MAX_DENSE_SIZE}, got {g.image_size}"
        )
    n = g.image_size
    mid = (n - 1) / 2.0
    inside = circle_mask(n)
    mat = np.zeros((g.n_angles * g.n_detectors, n, n))
    for a, theta in enumerate(g.angles):
        cos, sin = math.cos(theta), math.sin(theta)
        for d in range(g.n_detectors):
            t = d - (g.n_detectors - 1) / 2.0
            row = mat[a * g.n_detectors + d]
            if abs(cos) >= abs(sin):
                # steep ray: visit every image row, interpolate along x
                for i in range(n):
                    x_hit = (t - (mid - i) * sin) / cos
                    jf = x_hit + mid
                    j0 = math.floor(jf)
                    f = jf - j0
                    for j, w in ((j0, 1.0 - f), (j0 + 1, f)):
                        if 0 <= j < n and inside[i, j]:
                            row[i, j] += w / abs(cos)
            else:
                # shallow ray: visit every column, interpolate along y
                for j in range(n):
                    y_hit = (t - (j - mid) * cos) / sin
                    i_f = mid - y_hit
                    i0 = math.floor(i_f)
                    f = i_f - i0
                    for i, w in ((i0, 1.0 - f), (i0 + 1, f)):
                        if 0 <= i < n and inside[i, j]:
                            row[i, j] += w / abs(sin)
    return mat.reshape(len(mat), n * n) * g.pixel_spacing


def forward_project(x: np.ndarray, g: ScanGeometry) -> np.ndarray:
    """Apply A to an image (or a stack of images)."""
    x = np.asarray(x)
    _check_trailing(x, g.image_shape, "image")
    dtype = _float_dtype(x)
    fwd, _, idx = _weights(g, dtype.str)
    lead = x.shape[:-2]
    flat = x.reshape(-1, g.image_size**2).astype(dtype, copy=False)[:, idx]
    out = fwd @ np.ascontiguousarray(flat.T)
    return np.ascontiguousarray(out.T).reshape(*lead, *g.sinogram_shape)


def back_project(s: np.ndarray, g: ScanGeometry) -> np.ndarray:
    """Apply the exact transpose of :func:`forward_project`."""
    s = np.asarray(s)
    _check_trailing(s, g.sinogram_shape, "sinogram")
    dtype = _float_dtype(s)
    _, adj, idx = _weights(g, dtype.str)
    lead = s.shape[:-2]
    flat = s.reshape(-1, g.n_angles * g.n_detectors).astype(dtype, copy=False)
    vals = adj @ np.ascontiguousarray(flat.T)
    out = np.zeros((flat.shape[0], g.image_size**2), dtype=dtype)
    out[:, idx] = vals.T
    return out.reshape(*lead, *g.image_shape)


def _padded_length(n_detectors: int) -> int:
    return 1 << max(1, math.ceil(math.log2(2 * n_detectors)))


def ramlak_kernel(n_padded: int) -> np.ndarray:
    """Discrete Ram-Lak kernel in circular (wrap-around) order, times two.

    ``h[0] = 1/2``, ``h[n] = -2 / (pi n)^2`` for odd ``n``, zero for even ``n``.
    The factor two pairs with the ``pi / (2 n_angles)`` FBP scale.
    """
    h = np.zeros(n_padded)
    h[0] = 0.5
    n = np.arange(1, n_padded)
    lag = np.minimum(n, n_padded - n)
    odd = lag % 2 == 1
    h[1:][odd] = -2.0 / (np.pi * lag[odd]) ** 2
    return h


def ramp_response(n_padded: int, window: str = "ramlak") -> np.ndarray:
    """Real-FFT response of :func:`ramlak_kernel`, optionally Hann-apodized.

    Taking the DFT of the spatial kernel, rather than sampling ``|f|``, keeps
    the small DC term that compensates for the finite padded support; the
    sampled ramp leaves a visible negative offset in reconstructions.
    """
    h = np.fft.rfft(ramlak_kernel(n_padded)).real
    if window == "hann":
        f = np.fft.rfftfreq(n_padded)
        h = h * 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    elif window != "ramlak":
        raise ValueError(f"unknown window {window!r}; expected 'ramlak' or 'hann'")
    return h


def _filter_padded(s: np.ndarray, window: str) -> np.ndarray:
    n_det = s.shape[-1]
    p = _padded_length(n_det)
    spec = np.fft.rfft(s, n=p, axis=-1) * ramp_response(p, window)
    return np.fft.irfft(spec, n=p, axis=-1)


def ramp_filter(s: np.ndarray, window: str = "ramlak") -> np.ndarray:
    """Filter every detector row with the ramp, zero-padding to a power of two >= 2·n_det."""
    s = np.asarray(s)
    dtype = _float_dtype(s)
    out = _filter_padded(s.astype(np.float64, copy=False), window)[..., : s.shape[-1]]
    return out.astype(dtype, copy=False)


def fbp_reconstruct(s: np.ndarray, g: ScanGeometry, window: str = "ramlak") -> np.ndarray:
    """Filtered back-projection, circle-masked.

    The scale ``pi / (2 n_angles)`` is divided by ``pixel_spacing**2``: one
    factor cancels the spacing carried by the back-projector and one converts
    the ramp from per-sample to per-length units.
    """
    s = np.asarray(s)
    _check_trailing(s, g.sinogram_shape, "sinogram")
    scale = np.pi / (2.0 * g.n_angles * g.pixel_spacing**2)
    out = back_project(ramp_filter(s, window), g)
    return out * out.dtype.type(scale)
