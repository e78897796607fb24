"""Reference observers: analytic ideal observers, linear test statistics, and
Hotelling templates computed without forming the M x M covariance.

Templates are plain arrays with the image shape. Likelihood ratios are
always returned as logarithms.
"""
import numpy as np
import scipy.linalg


class ConvergenceError(RuntimeError):
    """Iterative solve stopped before reaching the requested residual."""

    def __init__(self, message, residual, iterate):
        super().__init__(message)
        self.residual = residual
        self.iterate = iterate


def _image_axes(g, ref):
    g = np.asarray(g, dtype=float)
    ref = np.asarray(ref)
    if g.shape[g.ndim - ref.ndim:] != ref.shape:
        raise ValueError(f"shape mismatch: measurement {g.shape} vs reference {ref.shape}")
    return g, tuple(range(g.ndim - ref.ndim, g.ndim))


def laplacian_io_log_lr(g, b, s, decay):
    """Log likelihood ratio for a known signal and background in i.i.d. Laplace noise.

    ``g`` may carry leading batch axes; one value is returned per image.
    """
    if decay <= 0:
        raise ValueError("Laplacian decay must be positive")
    g, axes = _image_axes(g, b)
    if np.shape(s) != np.shape(b):
        raise ValueError("signal and background shapes differ")
    d = g - b
    return np.sum(np.abs(d) - np.abs(d - s), axis=axes) / decay


def gaussian_bke_log_lr(g, b, s, std):
    """Log likelihood ratio for known background and signal in white Gaussian noise."""
    if std <= 0:
        raise ValueError("noise standard deviation must be positive")
    g, axes = _image_axes(g, b)
    if np.shape(s) != np.shape(b):
        raise ValueError("signal and background shapes differ")
    s = np.asarray(s, dtype=float)
    return (np.sum(s * (g - b), axis=axes) - 0.5 * np.sum(s * s)) / std ** 2


def analytic_laplacian_ho_template(s, decay):
    """Hotelling template when the only randomness is i.i.d. Laplace noise."""
    if decay <= 0:
        raise ValueError("Laplacian decay must be positive")
    return np.asarray(s, dtype=float) / (2.0 * decay ** 2)


def linear_test_statistic(w, g):
    """Inner product of the template with each image in ``g``."""
    g, axes = _image_axes(g, w)
    return np.tensordot(g, np.asarray(w, dtype=float), axes=(axes, tuple(range(np.ndim(w)))))


def snr_ho_squared(w, mean_diff):
    if np.shape(w) != np.shape(mean_diff):
        raise ValueError("template and mean difference shapes differ")
    return float(np.vdot(np.asarray(mean_diff, dtype=float), np.asarray(w, dtype=float)))


def centered(samples):
    """Flattened deviations of ``samples`` (N, ...) from their sample mean."""
    x = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    return x - x.mean(axis=0)


class CovarianceOracle:
    """Matrix-free action of the hypothesis-averaged data covariance.

    Applies ``K_n + (1/N) Db^T Db + (1/2)(1/Ns) Ds^T Ds`` where ``Db`` holds
    centred background samples and ``Ds`` optional centred signal samples
    (random-signal tasks only). ``noise_var`` is the known diagonal noise
    covariance. Sample covariances use the 1/N convention.
    """

    def __init__(self, background_dev, noise_var, signal_dev=None):
        self.noise_var = np.asarray(noise_var, dtype=float)
        self.shape = self.noise_var.shape
        m = self.noise_var.size
        self.bdev = np.asarray(background_dev, dtype=float).reshape(-1, m)
        self.sdev = None if signal_dev is None else np.asarray(signal_dev, dtype=float).reshape(-1, m)
        if np.any(self.noise_var.ravel() <= 0):
            raise ValueError("noise variance must be strictly positive")

    @classmethod
    def from_samples(cls, backgrounds, noise_var, signals=None):
        return cls(centered(backgrounds), noise_var, None if signals is None else centered(signals))

    @property
    def size(self):
        return self.noise_var.size

    def apply(self, v):
        v = np.asarray(v, dtype=float).ravel()
        out = self.noise_var.ravel() * v
        if len(self.bdev):
            out += self.bdev.T @ (self.bdev @ v) / len(self.bdev)
        if self.sdev is not None and len(self.sdev):
            out += 0.5 * (self.sdev.T @ (self.sdev @ v)) / len(self.sdev)
        return out

    def quadratic(self, w):
        """``w^T K w`` without forming K."""
        w = np.asarray(w, dtype=float).ravel()
        return float(w @ self.apply(w))

    def low_rank_factor(self):
        """``U`` with ``K = diag(noise_var) + U U^T``, shape (M, rank)."""
        parts = []
        if len(self.bdev):
            parts.append(self.bdev.T / np.sqrt(len(self.bdev)))
        if self.sdev is not None and len(self.sdev):
            parts.append(self.sdev.T / np.sqrt(2.0 * len(self.sdev)))
        if not parts:
            return np.zeros((self.size, 0))
        return np.hstack(parts)

    def matrix(self):
        """Dense covariance; only sensible for tiny images."""
        u = self.low_rank_factor()
        return np.diag(self.noise_var.ravel()) + u @ u.T


def conjugate_gradient(apply, b, tol=1e-8, max_iters=None, x0=None):
    """Solve ``A x = b`` for SPD ``A`` given only its action.

    Stops once ``||b - A x|| <= tol * ||b||``. Returns ``(x, relative
    residual, iterations)``; raises ConvergenceError if ``max_iters`` runs out.
    """
    b = np.asarray(b, dtype=float).ravel()
    n = b.size
    if max_iters is None:
        max_iters = 10 * n
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).ravel().copy()
    if bnorm == 0:
        return np.zeros(n), 0.0, 0
    r = b - apply(x)
    p = r.copy()
    rr = r @ r
    it = 0
    while np.sqrt(rr) > tol * bnorm:
        if it >= max_iters:
            res = np.linalg.norm(b - apply(x)) / bnorm
            raise ConvergenceError(
                f"CG did not converge in {max_iters} iterations (relative residual {res:.3e})", res, x)
        ap = apply(p)
        alpha = rr / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        it += 1
        # periodic true-residual refresh keeps the recursion honest
        if it % 50 == 0:
            r = b - apply(x)
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    res = np.linalg.norm(b - apply(x)) / bnorm
    return x, res, it


def solve_ho_template_cg(oracle, mean_diff, tol=1e-8, max_iters=None):
    """Hotelling template ``K^-1 mean_diff`` by conjugate gradient."""
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    d = np.asarray(mean_diff, dtype=float)
    x, res, _ = conjugate_gradient(oracle.apply, d, tol=tol, max_iters=max_iters)
    if res > tol:
        # recursion residual met the target but the true one drifted; polish
        x, res, _ = conjugate_gradient(oracle.apply, d, tol=tol, max_iters=max_iters, x0=x)
    return x.reshape(d.shape)


def woodbury_ho_template(centered_samples, noise_var, mean_diff, signal_samples=None):
    """Hotelling template via the matrix-inversion lemma.

    The covariance ``diag(noise_var) + U U^T`` is inverted through a single
    rank x rank dense solve, where ``U`` stacks the scaled sample deviations.
    """
    noise = np.asarray(noise_var, dtype=float).ravel()
    if np.any(noise <= 0):
        raise ValueError("noise variance must be strictly positive")
    d = np.asarray(mean_diff, dtype=float)
    oracle = CovarianceOracle(centered_samples, noise_var, signal_samples)
    if len(oracle.bdev) == 0:
        raise ValueError("need at least one sample")
    u = oracle.low_rank_factor()
    dinv_d = d.ravel() / noise
    dinv_u = u / noise[:, None]
    inner = np.eye(u.shape[1]) + u.T @ dinv_u
    try:
        z = scipy.linalg.solve(inner, u.T @ dinv_d, assume_a="pos")
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"Woodbury inner system is singular: {exc}") from exc
    return (dinv_d - dinv_u @ z).reshape(d.shape)
