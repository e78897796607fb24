"""Observer figures of merit: empirical ROC, AUC, SNR_t, efficiency, posterior MSE."""
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    """The requested figure of merit does not exist for these inputs."""


@dataclass
class ScoreSet:
    """Test-statistic values for signal-absent (h0) and signal-present (h1) images."""
    h0: np.ndarray
    h1: np.ndarray

    def __post_init__(self):
        self.h0 = np.asarray(self.h0, dtype=float).ravel()
        self.h1 = np.asarray(self.h1, dtype=float).ravel()

    @classmethod
    def from_labels(cls, scores, labels):
        scores = np.asarray(scores, dtype=float).ravel()
        labels = np.asarray(labels).ravel()
        return cls(scores[labels == 0], scores[labels == 1])

    def _require_nonempty(self):
        if len(self.h0) == 0 or len(self.h1) == 0:
            raise ValueError("both classes need at least one score")


def empirical_roc(s):
    """Empirical ROC as an array of ``(fpf, tpf, threshold)`` rows.

    A row's fractions count scores ``>= threshold``. Rows run from threshold
    ``-inf`` (1, 1) through every distinct pooled score to ``+inf`` (0, 0).
    """
    s._require_nonempty()
    thr = np.unique(np.concatenate([s.h0, s.h1]))
    h0 = np.sort(s.h0)
    h1 = np.sort(s.h1)
    fpf = 1.0 - np.searchsorted(h0, thr, side="left") / len(h0)
    tpf = 1.0 - np.searchsorted(h1, thr, side="left") / len(h1)
    rows = np.column_stack([fpf, tpf, thr])
    return np.vstack([[1.0, 1.0, -np.inf], rows, [0.0, 0.0, np.inf]])


def roc_area(roc):
    """Trapezoidal area under an ROC array from :func:`empirical_roc`."""
    fpf, tpf = roc[::-1, 0], roc[::-1, 1]
    return float(np.sum(np.diff(fpf) * (tpf[1:] + tpf[:-1]) / 2.0))


def auc(s):
    """Mann-Whitney AUC; ties between classes count one half."""
    s._require_nonempty()
    n0, n1 = len(s.h0), len(s.h1)
    ranks = rankdata(np.concatenate([s.h0, s.h1]))
    u = ranks[n0:].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n0 * n1))


def auc_standard_error(a, n0, n1):
    """Hanley-McNeil standard error of an empirical AUC."""
    q1 = a / (2 - a)
    q2 = 2 * a * a / (1 + a)
    var = (a * (1 - a) + (n1 - 1) * (q1 - a * a) + (n0 - 1) * (q2 - a * a)) / (n0 * n1)
    return float(np.sqrt(max(var, 0.0)))


def snr_t(s):
    """Mean separation over the root of the average (unbiased) class variance."""
    if len(s.h0) < 2 or len(s.h1) < 2:
        raise ValueError("SNR_t needs at least two scores per class")
    pooled = 0.5 * np.var(s.h0, ddof=1) + 0.5 * np.var(s.h1, ddof=1)
    if pooled <= 0:
        raise UndefinedMetric("SNR_t undefined: zero pooled variance")
    return float((s.h1.mean() - s.h0.mean()) / np.sqrt(pooled))


def detectability(a):
    """AUC-derived detectability index ``sqrt(2) * Phi^-1(AUC)``."""
    if not 0.5 < a < 1.0:
        raise UndefinedMetric(f"detectability undefined for AUC {a}")
    return float(np.sqrt(2.0) * ndtri(a))


def efficiency(auc_observer, auc_reference):
    """Squared ratio of detectability indices, observer over reference."""
    return (detectability(auc_observer) / detectability(auc_reference)) ** 2


def posterior_mse(p_a, p_b):
    p_a = np.asarray(p_a, dtype=float).ravel()
    p_b = np.asarray(p_b, dtype=float).ravel()
    if p_a.shape != p_b.shape:
        raise ValueError(f"length mismatch: {p_a.size} vs {p_b.size}")
    return float(np.mean((p_a - p_b) ** 2))


def posterior_from_log_lr(log_lr, prior_h1=0.5):
    """Posterior Pr(H1|g) from a log likelihood ratio and the class prior."""
    logit = np.asarray(log_lr, dtype=float) + np.log(prior_h1 / (1.0 - prior_h1))
    return 0.5 * (1.0 + np.tanh(0.5 * logit))


def write_roc_csv(path, roc):
    with open(path, "w") as fh:
        fh.write("fpf,tpf,threshold\n")
        for fpf, tpf, thr in roc:
            fh.write(f"{fpf:.9g},{tpf:.9g},{thr:.9g}\n")


def read_roc_csv(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
