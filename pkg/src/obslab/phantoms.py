"""Stochastic object models and closed-form noiseless rendering.

Images are ``(height, width)`` float64 arrays; flattening them row-major
gives the M-element measurement vector. Pixel ``(x, y)`` has its centre at
integer coordinates, so pixel index ``m`` sits at ``(m % width, m // width)``.
Random locations are drawn over the continuous field of view
``[0, width) x [0, height)``.
"""
from dataclasses import dataclass, field

import numba
import numpy as np


@dataclass(frozen=True)
class PixelGrid:
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"grid must be non-empty, got {self.width}x{self.height}")

    @property
    def size(self):
        return self.width * self.height

    @property
    def shape(self):
        return (self.height, self.width)

    def coords(self):
        """Pixel-centre coordinate vectors ``(x, y)``."""
        return np.arange(self.width, dtype=float), np.arange(self.height, dtype=float)

    def uniform_points(self, rng, n):
        """``n`` points uniform over the field of view, shape ``(n, 2)`` as (x, y)."""
        pts = rng.random((n, 2))
        return pts * np.array([self.width, self.height], dtype=float)


@dataclass(frozen=True)
class GaussianKernelSpec:
    """Gaussian point response of the idealised collimator: height h, width w."""
    height: float = 40.0
    width: float = 0.5

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("kernel height and width must be positive")


@dataclass(frozen=True)
class SkeSignalSpec:
    amplitude: float = 0.2
    center: tuple = (32.0, 32.0)
    width: float = 3.0

    def __post_init__(self):
        if self.amplitude < 0 or self.width <= 0:
            raise ValueError("signal amplitude must be >= 0 and width > 0")


@dataclass(frozen=True)
class SksSignalParams:
    amplitude: float
    center: tuple
    angle: float
    width1: float
    width2: float


@dataclass(frozen=True)
class SksSignalPrior:
    """Random-shape, random-location signal: theta ~ U(0, 2pi), widths ~ U(lo, hi)."""
    amplitude: float = 0.2
    width_low: float = 2.0
    width_high: float = 4.0


@dataclass(frozen=True)
class LumpyModel:
    """Lumpy background prior.

    ``fixed_count`` pins the lump count instead of drawing it from a Poisson
    law, and ``positions`` restricts lump centres to a finite candidate set
    (uniformly weighted). Both exist for the small enumerable validation task.
    """
    mean_count: float = 5.0
    amplitude: float = 1.0
    lump_width: float = 7.0
    fixed_count: int | None = None
    positions: tuple | None = None

    def __post_init__(self):
        if self.mean_count < 0:
            raise ValueError("mean lump count must be non-negative")
        if self.lump_width <= 0:
            raise ValueError("lump width must be positive")

    def candidate_positions(self):
        if self.positions is None:
            return None
        return np.asarray(self.positions, dtype=float).reshape(-1, 2)


@dataclass
class LumpyParams:
    centers: np.ndarray
    amplitude: float = 1.0
    lump_width: float = 7.0

    @property
    def lump_count(self):
        return len(self.centers)

    def __eq__(self, other):
        return (isinstance(other, LumpyParams)
                and np.array_equal(self.centers, other.centers)
                and self.amplitude == other.amplitude
                and self.lump_width == other.lump_width)


@dataclass(frozen=True)
class ClbConstants:
    """Clustered lumpy background constants (mammographic texture defaults)."""
    mean_clusters: float = 150.0
    mean_blobs: float = 20.0
    lx: float = 5.0
    ly: float = 2.0
    alpha: float = 2.1
    beta: float = 0.5
    sigma: float = 12.0
    amplitude: float = 100.0

    def __post_init__(self):
        for name in ("mean_blobs", "lx", "ly", "alpha", "beta", "sigma", "amplitude"):
            if getattr(self, name) <= 0:
                raise ValueError(f"CLB constant {name} must be positive")
        if self.mean_clusters < 0:
            raise ValueError("mean cluster count must be non-negative")


@dataclass
class ClbParams:
    """One CLB realisation: cluster centres plus per-blob offsets and angles.

    ``blob_counts[k]`` blobs belong to cluster ``k``; ``offsets`` and
    ``angles`` are stored cluster by cluster.
    """
    cluster_centers: np.ndarray
    blob_counts: np.ndarray
    offsets: np.ndarray
    angles: np.ndarray
    consts: ClbConstants = field(default_factory=ClbConstants)

    @property
    def cluster_count(self):
        return len(self.cluster_centers)

    @property
    def blob_positions(self):
        owner = np.repeat(np.arange(self.cluster_count), self.blob_counts)
        if len(owner) == 0:
            return np.zeros((0, 2))
        return self.cluster_centers[owner] + self.offsets

    def __eq__(self, other):
        return (isinstance(other, ClbParams)
                and np.array_equal(self.cluster_centers, other.cluster_centers)
                and np.array_equal(self.blob_counts, other.blob_counts)
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.angles, other.angles)
                and self.consts == other.consts)


# ---------------------------------------------------------------------------
# lumpy backgrounds

def sample_lumpy(rng, model=LumpyModel(), grid=PixelGrid()):
    """Draw lump count and centres for one lumpy background."""
    if model.fixed_count is not None:
        n = int(model.fixed_count)
    else:
        n = int(rng.poisson(model.mean_count))
    cand = model.candidate_positions()
    if cand is None:
        centers = grid.uniform_points(rng, n)
    else:
        centers = cand[rng.integers(0, len(cand), size=n)]
    return LumpyParams(centers=centers, amplitude=model.amplitude, lump_width=model.lump_width)


def lump_profile_1d(coord, centers, var):
    return np.exp(-(coord[None, :] - centers[:, None]) ** 2 / (2.0 * var))


def render_lumpy(params, kernel=GaussianKernelSpec(), grid=PixelGrid()):
    """Background image after the Gaussian imaging kernel (closed form)."""
    s2 = params.lump_width ** 2
    var = kernel.width ** 2 + s2
    gain = params.amplitude * kernel.height * s2 / var
    if params.lump_count == 0:
        return np.zeros(grid.shape)
    x, y = grid.coords()
    gx = lump_profile_1d(x, params.centers[:, 0], var)
    gy = lump_profile_1d(y, params.centers[:, 1], var)
    # isotropic Gaussians factor into row and column profiles
    return gain * (gy.T @ gx)


# ---------------------------------------------------------------------------
# signals

def render_ske_signal(spec=SkeSignalSpec(), kernel=GaussianKernelSpec(), grid=PixelGrid()):
    var = kernel.width ** 2 + spec.width ** 2
    peak = spec.amplitude * kernel.height * spec.width ** 2 / var
    x, y = grid.coords()
    cx, cy = spec.center
    gx = np.exp(-(x - cx) ** 2 / (2 * var))
    gy = np.exp(-(y - cy) ** 2 / (2 * var))
    return peak * np.outer(gy, gx)


def sample_sks_signal(rng, prior=SksSignalPrior(), grid=PixelGrid()):
    center = grid.uniform_points(rng, 1)[0]
    angle = rng.uniform(0.0, 2 * np.pi)
    w1, w2 = rng.uniform(prior.width_low, prior.width_high, size=2)
    return SksSignalParams(prior.amplitude, (float(center[0]), float(center[1])),
                           float(angle), float(w1), float(w2))


def sks_peak(params, kernel=GaussianKernelSpec()):
    w2 = kernel.width ** 2
    return (params.amplitude * kernel.height * params.width1 * params.width2
            * np.sqrt(1.0 / ((w2 + params.width1 ** 2) * (w2 + params.width2 ** 2))))


def render_sks_signal(params, kernel=GaussianKernelSpec(), grid=PixelGrid()):
    """Rotated anisotropic Gaussian signal after the imaging kernel."""
    w2 = kernel.width ** 2
    x, y = grid.coords()
    dx = x[None, :] - params.center[0]
    dy = y[:, None] - params.center[1]
    c, s = np.cos(params.angle), np.sin(params.angle)
    u = c * dx - s * dy
    v = s * dx + c * dy
    q = u ** 2 / (2 * (w2 + params.width1 ** 2)) + v ** 2 / (2 * (w2 + params.width2 ** 2))
    return sks_peak(params, kernel) * np.exp(-q)


def render_pixel_gaussian(amplitude, width, center, grid=PixelGrid()):
    """Symmetric Gaussian drawn directly in pixel space (no imaging kernel)."""
    x, y = grid.coords()
    gx = np.exp(-(x - center[0]) ** 2 / (2 * width ** 2))
    gy = np.exp(-(y - center[1]) ** 2 / (2 * width ** 2))
    return amplitude * np.outer(gy, gx)


# ---------------------------------------------------------------------------
# clustered lumpy backgrounds

def sample_clb(rng, consts=ClbConstants(), grid=PixelGrid(128, 128)):
    k = int(rng.poisson(consts.mean_clusters))
    centers = grid.uniform_points(rng, k)
    counts = rng.poisson(consts.mean_blobs, size=k).astype(np.int64)
    total = int(counts.sum())
    offsets = rng.normal(0.0, consts.sigma, size=(total, 2))
    angles = rng.uniform(0.0, 2 * np.pi, size=total)
    return ClbParams(centers, counts, offsets, angles, consts)


def clb_exponent(r, angle, consts=ClbConstants()):
    """Blob exponent ``alpha * |R r|^beta / L(R r)`` for offsets ``r`` (..., 2)."""
    r = np.asarray(r, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    ux = c * r[..., 0] - s * r[..., 1]
    uy = s * r[..., 0] + c * r[..., 1]
    norm = np.hypot(ux, uy)
    # L(u) * |u| = Lx Ly |u|^2 / sqrt(Lx^2 uy^2 + Ly^2 ux^2); the origin maps to 0
    quad = np.sqrt(consts.lx ** 2 * uy ** 2 + consts.ly ** 2 * ux ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        e = consts.alpha * norm ** (consts.beta - 1.0) * quad / (consts.lx * consts.ly)
    return np.where(norm > 0, e, 0.0)


def clb_blob(r, angle, consts=ClbConstants()):
    return consts.amplitude * np.exp(-clb_exponent(r, angle, consts))


def ellipse_radius(r, lx=5.0, ly=2.0):
    """Polar radius of the ellipse with half-axes ``lx``, ``ly`` in the direction of ``r``."""
    r = np.asarray(r, dtype=float)
    theta = np.arctan2(r[..., 1], r[..., 0])
    return lx * ly / np.sqrt(lx ** 2 * np.sin(theta) ** 2 + ly ** 2 * np.cos(theta) ** 2)


def clb_cutoff_radius(consts):
    """Radius beyond which every blob is below ``1e-6 * a`` in all directions."""
    # the exponent is smallest along the long axis: alpha r^beta / lx
    return (np.log(1e6) * consts.lx / consts.alpha) ** (1.0 / consts.beta)


@numba.njit(cache=True, fastmath=True)
def _render_blobs(out, px, py, angles, lx, ly, alpha, beta, amplitude, cutoff):
    height, width = out.shape
    inv = alpha / (lx * ly)
    half = 0.5 * (beta - 1.0)
    sqrt_case = beta == 0.5
    for i in range(px.shape[0]):
        c = np.cos(angles[i])
        s = np.sin(angles[i])
        # |R r|^2 is rotation invariant; Lx^2 uy^2 + Ly^2 ux^2 is a quadratic form in r
        qa = lx * lx * s * s + ly * ly * c * c
        qb = 2.0 * c * s * (lx * lx - ly * ly)
        qc = lx * lx * c * c + ly * ly * s * s
        x0 = max(0, int(np.floor(px[i] - cutoff)))
        x1 = min(width - 1, int(np.ceil(px[i] + cutoff)))
        y0 = max(0, int(np.floor(py[i] - cutoff)))
        y1 = min(height - 1, int(np.ceil(py[i] + cutoff)))
        for yy in range(y0, y1 + 1):
            dy = yy - py[i]
            for xx in range(x0, x1 + 1):
                dx = xx - px[i]
                n2 = dx * dx + dy * dy
                if n2 == 0.0:
                    out[yy, xx] += amplitude
                    continue
                q = qa * dx * dx + qb * dx * dy + qc * dy * dy
                if sqrt_case:
                    e = inv * np.sqrt(q / np.sqrt(n2))
                else:
                    e = inv * n2 ** half * np.sqrt(q)
                out[yy, xx] += amplitude * np.exp(-e)


def render_clb(params, grid=PixelGrid(128, 128)):
    """CLB background rendered directly in pixel space."""
    out = np.zeros(grid.shape)
    pos = params.blob_positions
    if len(pos) == 0:
        return out
    c = params.consts
    _render_blobs(out, np.ascontiguousarray(pos[:, 0]), np.ascontiguousarray(pos[:, 1]),
                  np.ascontiguousarray(params.angles, dtype=float),
                  c.lx, c.ly, c.alpha, c.beta, c.amplitude, clb_cutoff_radius(c))
    return out
