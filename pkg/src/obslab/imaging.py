"""Measurement-noise channels and their hypothesis-averaged covariances."""
from dataclasses import dataclass

import numpy as np

KINDS = ("laplacian", "gaussian", "poisson_gaussian")


@dataclass(frozen=True)
class NoiseModel:
    """Additive noise channel.

    ``param`` is the Laplace decay ``c`` for ``laplacian`` and the Gaussian
    standard deviation for ``gaussian`` and ``poisson_gaussian``.
    """
    kind: str
    param: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise model {self.kind!r}; expected one of {KINDS}")
        if self.kind == "laplacian" and not self.param > 0:
            raise ValueError("Laplacian decay must be positive")
        if self.param < 0:
            raise ValueError("noise standard deviation must be non-negative")

    @classmethod
    def laplacian(cls, decay):
        return cls("laplacian", float(decay))

    @classmethod
    def gaussian(cls, std):
        return cls("gaussian", float(std))

    @classmethod
    def poisson_gaussian(cls, std):
        return cls("poisson_gaussian", float(std))


def laplace_noise(rng, decay, shape):
    """i.i.d. Laplace(0, decay) samples by inverting the CDF."""
    u = rng.random(shape) - 0.5
    return -decay * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def apply_noise(clean, model, rng):
    """Return a noisy measurement of the noiseless image ``clean``."""
    clean = np.asarray(clean, dtype=float)
    if model.kind == "laplacian":
        return clean + laplace_noise(rng, model.param, clean.shape)
    if model.kind == "gaussian":
        if model.param == 0:
            return clean.copy()
        return clean + rng.normal(0.0, model.param, clean.shape)
    if np.any(clean < 0):
        raise ValueError("Poisson-Gaussian noise needs a non-negative noiseless image")
    counts = rng.poisson(clean).astype(float)
    if model.param == 0:
        return counts
    return counts + rng.normal(0.0, model.param, clean.shape)


def mean_noise_covariance(model, mean_background, mean_signal=None):
    """Per-pixel noise variance averaged over both hypotheses.

    For Poisson-Gaussian noise the photon variance equals the mean count, so
    averaging the two hypotheses gives ``b_bar + s_bar / 2`` plus the
    electronic variance. The result has the shape of ``mean_background``.
    """
    mean_background = np.asarray(mean_background, dtype=float)
    if model.kind == "laplacian":
        return np.full(mean_background.shape, 2.0 * model.param ** 2)
    if model.kind == "gaussian":
        return np.full(mean_background.shape, model.param ** 2)
    s_bar = 0.0 if mean_signal is None else np.asarray(mean_signal, dtype=float)
    return mean_background + 0.5 * s_bar + model.param ** 2
