"""Detection-task definitions and seeded data generation.

A :class:`TaskSpec` bundles grid, imaging kernel, object model, signal model
and noise channel. The four stock tasks are available as constructors.
Generation is per image: image ``i`` of purpose ``tag`` draws its object,
signal and noise from streams derived from ``(seed, tag, i)``, so any subset
of a dataset can be regenerated independently.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import phantoms as ph
from .imaging import NoiseModel, apply_noise, mean_noise_covariance
from .rng import stream

TASK_TYPES = ("ske_bke", "ske_bks_lumpy", "sks_bks_lumpy", "ske_bks_clb")


@dataclass(frozen=True)
class PixelGaussianSignal:
    """Symmetric Gaussian signal drawn directly in pixel space."""
    amplitude: float = 500.0
    width: float = 12.0
    center: tuple | None = None


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    grid: ph.PixelGrid = field(default_factory=ph.PixelGrid)
    kernel: ph.GaussianKernelSpec = field(default_factory=ph.GaussianKernelSpec)
    signal: object = field(default_factory=ph.SkeSignalSpec)
    noise: NoiseModel = field(default_factory=lambda: NoiseModel.laplacian(30 / np.sqrt(2)))
    lumpy: ph.LumpyModel | None = None
    clb: ph.ClbConstants | None = None
    prior_h1: float = 0.5

    def __post_init__(self):
        if self.kind not in TASK_TYPES:
            raise ValueError(f"unknown task type {self.kind!r}")
        if not 0 < self.prior_h1 < 1:
            raise ValueError("class priors must lie strictly between 0 and 1")

    # -- stock tasks -------------------------------------------------------
    @classmethod
    def ske_bke(cls, grid=ph.PixelGrid(64, 64), **kw):
        center = (grid.width / 2, grid.height / 2)
        return cls("ske_bke", grid, signal=ph.SkeSignalSpec(0.2, center, 3.0),
                   noise=NoiseModel.laplacian(30 / np.sqrt(2)), **kw)

    @classmethod
    def ske_bks_lumpy(cls, grid=ph.PixelGrid(64, 64), lumpy=ph.LumpyModel(), **kw):
        center = (grid.width / 2, grid.height / 2)
        return cls("ske_bks_lumpy", grid, signal=ph.SkeSignalSpec(0.2, center, 3.0),
                   noise=NoiseModel.gaussian(20.0), lumpy=lumpy, **kw)

    @classmethod
    def sks_bks_lumpy(cls, grid=ph.PixelGrid(64, 64), lumpy=ph.LumpyModel(), **kw):
        return cls("sks_bks_lumpy", grid, signal=ph.SksSignalPrior(0.2, 2.0, 4.0),
                   noise=NoiseModel.gaussian(10.0), lumpy=lumpy, **kw)

    @classmethod
    def ske_bks_clb(cls, grid=ph.PixelGrid(128, 128), clb=None, **kw):
        """CLB task. Off the native 128x128 grid the mean cluster count is
        scaled with the image area so the local texture statistics are kept."""
        if clb is None:
            scale = grid.size / (128 * 128)
            clb = ph.ClbConstants(mean_clusters=150.0 * scale)
        return cls("ske_bks_clb", grid, signal=PixelGaussianSignal(500.0, 12.0),
                   noise=NoiseModel.poisson_gaussian(10.0), clb=clb, **kw)

    @classmethod
    def stock(cls, kind, grid=None):
        grid = grid or (ph.PixelGrid(128, 128) if kind == "ske_bks_clb" else ph.PixelGrid(64, 64))
        return {"ske_bke": cls.ske_bke, "ske_bks_lumpy": cls.ske_bks_lumpy,
                "sks_bks_lumpy": cls.sks_bks_lumpy, "ske_bks_clb": cls.ske_bks_clb}[kind](grid)

    def with_noise(self, noise):
        return replace(self, noise=noise)

    # -- properties --------------------------------------------------------
    @property
    def signal_known(self):
        return self.kind != "sks_bks_lumpy"

    @property
    def background_known(self):
        return self.kind == "ske_bke"

    def digest(self):
        def enc(o):
            if isinstance(o, np.ndarray):
                return o.tolist()
            return repr(o)
        blob = json.dumps({"type": type(self.signal).__name__, **asdict(self)},
                          sort_keys=True, default=enc)
        return hashlib.blake2b(blob.encode(), digest_size=8).hexdigest()

    # -- sampling ----------------------------------------------------------
    def fixed_signal(self):
        """Signal image of a signal-known-exactly task."""
        if isinstance(self.signal, ph.SkeSignalSpec):
            return ph.render_ske_signal(self.signal, self.kernel, self.grid)
        if isinstance(self.signal, PixelGaussianSignal):
            center = self.signal.center or (self.grid.width / 2, self.grid.height / 2)
            return ph.render_pixel_gaussian(self.signal.amplitude, self.signal.width, center, self.grid)
        raise ValueError(f"task {self.kind} has a random signal")

    def sample_signal_params(self, rng):
        return ph.sample_sks_signal(rng, self.signal, self.grid)

    def sample_signal(self, rng):
        if self.signal_known:
            return self.fixed_signal()
        return ph.render_sks_signal(self.sample_signal_params(rng), self.kernel, self.grid)

    def sample_background(self, rng):
        if self.kind == "ske_bke":
            return np.zeros(self.grid.shape)
        if self.lumpy is not None:
            return ph.render_lumpy(ph.sample_lumpy(rng, self.lumpy, self.grid), self.kernel, self.grid)
        return ph.render_clb(ph.sample_clb(rng, self.clb, self.grid), self.grid)

    def noise_variance(self, mean_background=None, mean_signal=None):
        if mean_background is None:
            mean_background = np.zeros(self.grid.shape)
        return mean_noise_covariance(self.noise, mean_background, mean_signal)


# ---------------------------------------------------------------------------
# generation

def generate_backgrounds(task, n, seed, tag="train"):
    out = np.empty((n, *task.grid.shape))
    for i in range(n):
        out[i] = task.sample_background(stream(seed, f"{tag}/object", i))
    return out


def generate_signals(task, n, seed, tag="train"):
    out = np.empty((n, *task.grid.shape))
    for i in range(n):
        out[i] = task.sample_signal(stream(seed, f"{tag}/signal", i))
    return out


@dataclass
class ObjectPool:
    """Finite set of noiseless backgrounds (and signals for random-signal tasks)."""
    task: TaskSpec
    backgrounds: np.ndarray
    signals: np.ndarray | None = None

    @classmethod
    def generate(cls, task, n, seed, tag="train"):
        bg = generate_backgrounds(task, n, seed, tag)
        sig = None if task.signal_known else generate_signals(task, n, seed, tag)
        return cls(task, bg, sig)

    def __len__(self):
        return len(self.backgrounds)

    def mean_background(self):
        return self.backgrounds.mean(axis=0)

    def mean_signal(self):
        if self.signals is None:
            return self.task.fixed_signal()
        return self.signals.mean(axis=0)

    def noise_variance(self):
        return self.task.noise_variance(self.mean_background(), self.mean_signal())


@dataclass
class LabeledSet:
    """Noisy measurements with 0/1 labels (0 = signal absent)."""
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def split(self):
        return self.images[self.labels == 0], self.images[self.labels == 1]


def generate_measurements(task, n_per_class, seed, tag="test", noiseless=False):
    """Balanced labelled set: ``n_per_class`` signal-absent images then as many signal-present.

    With ``noiseless`` the clean images are returned alongside as a second
    :class:`LabeledSet`; reference observers that condition on the object use them.
    """
    n = 2 * n_per_class
    shape = task.grid.shape
    images = np.empty((n, *shape))
    clean = np.empty((n, *shape)) if noiseless else None
    labels = np.repeat(np.array([0, 1], dtype=np.uint8), n_per_class)
    for i in range(n):
        x = task.sample_background(stream(seed, f"{tag}/object", i))
        if labels[i]:
            x = x + task.sample_signal(stream(seed, f"{tag}/signal", i))
        if noiseless:
            clean[i] = x
        images[i] = apply_noise(x, task.noise, stream(seed, f"{tag}/noise", i))
    data = LabeledSet(images, labels)
    if noiseless:
        return data, LabeledSet(clean, labels.copy())
    return data


class SemiOnlineSource:
    """Mini-batches of fresh noisy measurements built on a finite object pool.

    Each draw picks noiseless backgrounds (and random signals) from the pool
    with replacement and adds newly generated noise, so the network never
    sees the same measurement twice while the object pool stays finite.
    A background-known task needs no pool.
    """

    def __init__(self, task, pool=None, rng=None):
        if pool is None and not task.background_known:
            raise ValueError("a background-random task needs an object pool")
        self.task = task
        self.pool = pool
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.signal = task.fixed_signal() if task.signal_known else None

    def _objects(self, n):
        if self.pool is None:
            return np.zeros((n, *self.task.grid.shape))
        return self.pool.backgrounds[self.rng.integers(0, len(self.pool), size=n)]

    def batch(self, n_per_class):
        h0 = self._objects(n_per_class)
        h1 = self._objects(n_per_class)
        if self.signal is not None:
            h1 = h1 + self.signal
        else:
            h1 = h1 + self.pool.signals[self.rng.integers(0, len(self.pool.signals), size=n_per_class)]
        clean = np.concatenate([h0, h1])
        images = apply_noise(clean, self.task.noise, self.rng)
        labels = np.repeat(np.array([0, 1], dtype=np.uint8), n_per_class)
        return images, labels


class FiniteBatches:
    """Epoch-wise balanced mini-batches from a fixed labelled set.

    Each epoch shuffles both classes independently and pairs them off into
    batches of ``n_per_class`` + ``n_per_class``; a ragged tail is dropped.
    """

    def __init__(self, data, rng=None):
        self.data = data
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.idx0 = np.flatnonzero(data.labels == 0)
        self.idx1 = np.flatnonzero(data.labels == 1)
        if len(self.idx0) == 0 or len(self.idx1) == 0:
            raise ValueError("both classes must be present")

    def batches_per_epoch(self, n_per_class):
        return min(len(self.idx0), len(self.idx1)) // n_per_class

    def epoch(self, n_per_class):
        nb = self.batches_per_epoch(n_per_class)
        if nb == 0:
            raise ValueError("batch larger than the smallest class")
        p0 = self.rng.permutation(self.idx0)
        p1 = self.rng.permutation(self.idx1)
        for b in range(nb):
            sl = slice(b * n_per_class, (b + 1) * n_per_class)
            idx = np.concatenate([p0[sl], p1[sl]])
            yield self.data.images[idx], self.data.labels[idx]
