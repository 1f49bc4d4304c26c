"""Phantoms, 16-bit CT-slice preprocessing and id-based dataset splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .radon import circle_mask

# (value, semi-axis a, semi-axis b, x0, y0, rotation in degrees); Toft's modified contrast
SHEPP_LOGAN_ELLIPSES = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)

HU_OFFSET = 32768
DEFAULT_HU_THRESHOLD = -9050.0
DEFAULT_HU_WINDOW = (-1000.0, 2000.0)


def _unit_coords(n: int) -> tuple[np.ndarray, np.ndarray]:
    c = (n - 1) / 2.0
    idx = (np.arange(n) - c) / (n / 2.0)
    return np.meshgrid(idx, -idx)


def _ellipse(x, y, a, b, x0, y0, phi_deg):
    phi = math.radians(phi_deg)
    dx, dy = x - x0, y - y0
    u = dx * math.cos(phi) + dy * math.sin(phi)
    v = -dx * math.sin(phi) + dy * math.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def shepp_logan(n: int) -> np.ndarray:
    """Modified Shepp-Logan phantom on an ``n x n`` grid, values in [0, 1]."""
    x, y = _unit_coords(n)
    img = np.zeros((n, n))
    for value, a, b, x0, y0, phi in SHEPP_LOGAN_ELLIPSES:
        img[_ellipse(x, y, a, b, x0, y0, phi)] += value
    img = np.clip(img, 0.0, 1.0)
    img[~circle_mask(n)] = 0.0
    return img


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "random_ellipses"
    n_ellipses: tuple[int, int] = (3, 8)
    intensity: tuple[float, float] = (0.1, 0.9)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("shepp_logan", "random_ellipses"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        lo, hi = self.intensity
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"intensity range must lie in [0, 1], got {self.intensity}")
        if not 0 <= self.n_ellipses[0] <= self.n_ellipses[1]:
            raise ValueError(f"bad n_ellipses range {self.n_ellipses}")


def random_ellipse_phantom(spec: PhantomSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """A body ellipse with painted inner ellipses; every nonzero pixel lies in ``spec.intensity``.

    Later ellipses overwrite earlier ones, so the image is piecewise constant.
    """
    lo, hi = spec.intensity
    x, y = _unit_coords(n)
    img = np.zeros((n, n))
    a, b = rng.uniform(0.55, 0.9, size=2)
    body = _ellipse(x, y, a, b, *rng.uniform(-0.05, 0.05, size=2), rng.uniform(0, 180))
    img[body] = rng.uniform(lo, hi)
    for _ in range(rng.integers(spec.n_ellipses[0], spec.n_ellipses[1] + 1)):
        ea, eb = rng.uniform(0.05, 0.35, size=2)
        r, t = 0.6 * math.sqrt(rng.uniform()), rng.uniform(0, 2 * math.pi)
        inner = _ellipse(x, y, ea * a, eb * b, r * a * math.cos(t), r * b * math.sin(t),
                         rng.uniform(0, 180))
        img[inner & body] = rng.uniform(lo, hi)
    img[~circle_mask(n)] = 0.0
    return img


def make_phantom(spec: PhantomSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    if spec.kind == "shepp_logan":
        return shepp_logan(n)
    return random_ellipse_phantom(spec, rng, n)


# --- minimal enclosing circle -------------------------------------------------


def _circle_two(p, q):
    c = (p + q) / 2.0
    return c, float(np.hypot(*(p - c)))


def _circle_three(p, q, r):
    ax, ay = p
    bx, by = q
    cx, cy = r
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-12:
        # collinear: the widest pair spans the circle
        pairs = [_circle_two(p, q), _circle_two(p, r), _circle_two(q, r)]
        return max(pairs, key=lambda c: c[1])
    ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay) + (cx**2 + cy**2) * (ay - by)) / d
    uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx) + (cx**2 + cy**2) * (bx - ax)) / d
    c = np.array([ux, uy])
    return c, float(np.hypot(*(p - c)))


def _inside(circle, p, tol=1e-7):
    c, r = circle
    return np.hypot(*(p - c)) <= r + tol


def minimal_enclosing_circle(points: np.ndarray, seed: int = 0) -> tuple[np.ndarray, float]:
    """Welzl's algorithm (iterative, randomized order). Returns (center, radius)."""
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        raise ValueError("no points")
    pts = pts[np.random.default_rng(seed).permutation(len(pts))]
    circle = (pts[0].copy(), 0.0)
    for i in range(1, len(pts)):
        if _inside(circle, pts[i]):
            continue
        circle = (pts[i].copy(), 0.0)
        for j in range(i):
            if _inside(circle, pts[j]):
                continue
            circle = _circle_two(pts[i], pts[j])
            for k in range(j):
                if not _inside(circle, pts[k]):
                    circle = _circle_three(pts[i], pts[j], pts[k])
    return circle


def _boundary_points(mask: np.ndarray) -> np.ndarray:
    """Pixel corners of the mask's edge pixels, as (row, col) coordinates."""
    edge = mask & ~ndimage.binary_erosion(mask, border_value=0)
    rows, cols = np.nonzero(edge)
    corners = [(rows + dr, cols + dc) for dr in (-0.5, 0.5) for dc in (-0.5, 0.5)]
    pts = np.stack([np.concatenate([c[0] for c in corners]), np.concatenate([c[1] for c in corners])], 1)
    if len(pts) > 8:
        from scipy.spatial import ConvexHull

        try:
            pts = pts[ConvexHull(pts).vertices]
        except Exception:  # degenerate hull (e.g. a single row of pixels)
            pts = np.unique(pts, axis=0)
    return pts


def hu_to_unit(hu: np.ndarray, window: tuple[float, float] = DEFAULT_HU_WINDOW) -> np.ndarray:
    lo, hi = window
    return np.clip((hu - lo) / (hi - lo), 0.0, 1.0)


def unit_to_raw(img: np.ndarray, window: tuple[float, float] = DEFAULT_HU_WINDOW) -> np.ndarray:
    """Inverse of the display window, back to offset 16-bit storage (float, not rounded)."""
    lo, hi = window
    return img * (hi - lo) + lo + HU_OFFSET


def preprocess_ct_slice(
    raw: np.ndarray,
    n: int = 256,
    threshold_hu: float = DEFAULT_HU_THRESHOLD,
    window: tuple[float, float] = DEFAULT_HU_WINDOW,
) -> np.ndarray | None:
    """Crop a raw slice to the smallest circle containing its body pixels.

    Returns an ``n x n`` image in [0, 1] that is zero outside the inscribed
    circle, or ``None`` when the slice is rejected (no body pixels, or a crop
    smaller than ``n``).
    """
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ValueError(f"expected a single-channel slice, got shape {raw.shape}")
    hu = raw.astype(np.float64) - HU_OFFSET
    mask = hu > threshold_hu
    if not mask.any():
        return None
    (cy, cx), radius = minimal_enclosing_circle(_boundary_points(mask))
    side = 2.0 * radius
    if side < n - 1e-9:
        return None
    h, w = hu.shape
    r0, r1 = max(0, math.floor(cy - radius + 0.5)), min(h, math.ceil(cy + radius + 0.5))
    c0, c1 = max(0, math.floor(cx - radius + 0.5)), min(w, math.ceil(cx + radius + 0.5))
    crop = hu[r0:r1, c0:c1]
    if crop.shape != (n, n):
        # sample the crop's pixel grid at n evenly spread centres (bilinear)
        rr = (np.arange(n) + 0.5) * crop.shape[0] / n - 0.5
        cc = (np.arange(n) + 0.5) * crop.shape[1] / n - 0.5
        grid = np.meshgrid(rr, cc, indexing="ij")
        crop = ndimage.map_coordinates(crop, grid, order=1, mode="nearest")
    img = hu_to_unit(crop, window)
    img[~circle_mask(n)] = 0.0
    return img


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)


def split_by_id(ids, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Split unique source ids (e.g. patient ids) into disjoint train/validation/test lists."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    unique = sorted(set(ids), key=str)
    order = np.random.default_rng(seed).permutation(len(unique))
    shuffled = [unique[i] for i in order]
    n = len(shuffled)
    a = round(fractions[0] * n)
    b = round((fractions[0] + fractions[1]) * n)
    return DatasetSplit(shuffled[:a], shuffled[a:b], shuffled[b:])
