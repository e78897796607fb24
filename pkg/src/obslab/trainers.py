"""Training procedures for the learned observers.

* :func:`train_slnn_labeled` learns a Hotelling template from labelled noisy
  measurements.
* :func:`train_slnn_covdecomp` learns it from noiseless backgrounds (and
  signals) plus a known noise covariance.
* :func:`train_cnn_io` fits the convolutional posterior-probability network.
* :func:`architecture_ladder` grows the network depth until validation
  cross-entropy stops improving by at least 1 %.

All procedures are deterministic given their inputs and ``TrainConfig.seed``.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .evalkit import ScoreSet, UndefinedMetric, auc, snr_t
from .neural import Adam, CnnModel
from .tasks import FiniteBatches, LabeledSet

log = logging.getLogger(__name__)

# Lagrange multiplier that makes the constrained-SNR minimiser equal the Hotelling template
LAGRANGE = 2.0
LADDER_MIN_GAIN = 0.01


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Mini-batch training settings.

    ``epochs`` switches finite datasets to epoch-wise training with one
    validation per epoch; otherwise ``max_batches`` and ``val_every`` apply.
    Full-scale runs used 200 + 200 images per batch and up to 3e5 batches.
    """
    batch_per_class: int = 200
    max_batches: int = 1000
    val_every: int = 50
    epochs: int | None = None
    lr: float = 1e-3
    lr_final: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lagrange: float = LAGRANGE
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.batch_per_class < 1:
            raise ValueError("batch_per_class must be >= 1")
        if self.lagrange != LAGRANGE:
            raise ValueError("the Lagrange multiplier is fixed at 2")

    def optimizer(self):
        return Adam(self.lr, self.beta1, self.beta2, self.eps)

    def lr_at(self, step, total):
        """Learning rate for 1-based ``step`` of ``total``: constant, or geometric
        decay from ``lr`` to ``lr_final``."""
        if self.lr_final is None or total <= 1:
            return self.lr
        frac = min(step - 1, total - 1) / (total - 1)
        return self.lr * (self.lr_final / self.lr) ** frac


@dataclass
class EarlyStopRecord:
    """Validation SNR_t history of an SLNN run and the best snapshot."""
    steps: list = field(default_factory=list)
    snr: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_auc: list = field(default_factory=list)
    best_index: int = -1
    best_template: np.ndarray | None = None
    final_template: np.ndarray | None = None

    @property
    def best_step(self):
        return self.steps[self.best_index]

    def rows(self):
        return list(zip(self.steps, self.train_loss, self.val_loss, self.snr, self.val_auc))


def select_best(record):
    """Index of the maximal validation SNR_t (first one on ties)."""
    if not record.snr:
        raise ValueError("empty validation record")
    return int(np.nanargmax(np.asarray(record.snr, dtype=float)))


# ---------------------------------------------------------------------------
# SLNN losses

def slnn_labeled_loss(w, images, labels, lagrange=LAGRANGE):
    """Empirical constrained-SNR loss on labelled measurements, with gradient.

    Class means are estimated from the batch itself. Both classes must be
    equally represented.
    """
    x = np.asarray(images).reshape(len(images), -1)
    labels = np.asarray(labels).ravel()
    x0, x1 = x[labels == 0], x[labels == 1]
    if len(x0) != len(x1) or len(x0) == 0:
        raise ValueError(f"unbalanced batch: {len(x0)} signal-absent vs {len(x1)} signal-present")
    w = np.asarray(w).ravel()
    n = len(x)
    d0 = x0 - x0.mean(axis=0)
    d1 = x1 - x1.mean(axis=0)
    delta = x1.mean(axis=0) - x0.mean(axis=0)
    t0 = d0 @ w
    t1 = d1 @ w
    loss = (t0 @ t0 + t1 @ t1) / n - lagrange * (w @ delta)
    grad = 2.0 * (d0.T @ t0 + d1.T @ t1) / n - lagrange * delta
    return float(loss), grad


def slnn_covdecomp_loss(w, backgrounds, signals, noise_var, lagrange=LAGRANGE):
    """Empirical loss with the noise covariance known and the object term sampled.

    ``backgrounds`` is a batch (may be empty for a known background). A
    2-D ``signals`` array of the image shape is a fixed signal, which drops
    the signal-variance term.
    """
    w = np.asarray(w).ravel()
    k = np.asarray(noise_var).ravel()
    loss = w @ (k * w)
    grad = 2.0 * k * w
    if backgrounds is not None and len(backgrounds) > 0:
        b = np.asarray(backgrounds).reshape(len(backgrounds), -1)
        db = b - b.mean(axis=0)
        tb = db @ w
        loss += tb @ tb / len(b)
        grad += 2.0 * db.T @ tb / len(b)
    s = np.asarray(signals)
    if s.ndim == 2 or s.size == k.size:
        s_hat = s.ravel()
    else:
        s = s.reshape(len(s), -1)
        s_hat = s.mean(axis=0)
        ds = s - s_hat
        ts = ds @ w
        loss += 0.5 * ts @ ts / len(s)
        grad += ds.T @ ts / len(s)
    loss -= lagrange * (w @ s_hat)
    grad -= lagrange * s_hat
    return float(loss), grad


# ---------------------------------------------------------------------------
# SLNN training

def _validate_template(w, validation):
    scores = np.asarray(validation.images).reshape(len(validation), -1) @ w.ravel()
    ss = ScoreSet.from_labels(scores, validation.labels)
    try:
        snr = snr_t(ss)
    except UndefinedMetric:
        snr = float("nan")
    val_loss, _ = slnn_labeled_loss(w, validation.images, validation.labels)
    return snr, val_loss, auc(ss)


def _run_slnn(shape, batches, grad_fn, cfg, validation, cadence, total):
    w = np.zeros(int(np.prod(shape)))
    opt = cfg.optimizer()
    params = {"w": w}
    rec = EarlyStopRecord()
    best = -np.inf
    step = 0
    for step, batch in enumerate(batches, start=1):
        loss, grad = grad_fn(params["w"], batch)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite SLNN loss at batch {step}")
        opt.lr = cfg.lr_at(step, total)
        opt.step(params, {"w": grad})
        if step % cadence == 0:
            snr, vloss, vauc = _validate_template(params["w"], validation)
            rec.steps.append(step)
            rec.snr.append(snr)
            rec.train_loss.append(loss)
            rec.val_loss.append(vloss)
            rec.val_auc.append(vauc)
            if snr > best:
                best = snr
                rec.best_template = params["w"].reshape(shape).copy()
    if not rec.steps:
        raise ValueError(f"no validation point in {step} batches (cadence {cadence})")
    rec.best_index = select_best(rec)
    rec.final_template = params["w"].reshape(shape).copy()
    return rec


def _finite_or_stream(data, cfg, rng):
    """Batch iterator and validation cadence for a labelled set or a stream source."""
    if isinstance(data, LabeledSet):
        fb = FiniteBatches(data, rng)
        if cfg.epochs is not None:
            def gen():
                for _ in range(cfg.epochs):
                    yield from fb.epoch(cfg.batch_per_class)
            nb = fb.batches_per_epoch(cfg.batch_per_class)
            return gen(), nb, nb * cfg.epochs

        def cycle():
            n = 0
            while True:
                for batch in fb.epoch(cfg.batch_per_class):
                    yield batch
                    n += 1
                    if n == cfg.max_batches:
                        return
        return cycle(), cfg.val_every, cfg.max_batches

    def stream_gen():
        for _ in range(cfg.max_batches):
            yield data.batch(cfg.batch_per_class)
    return stream_gen(), cfg.val_every, cfg.max_batches


def train_slnn_labeled(data, cfg, validation):
    """Learn the Hotelling template from labelled measurements.

    ``data`` is a :class:`LabeledSet` (sampled epoch-wise) or any source with
    a ``batch(n_per_class)`` method. Returns ``(best template, record)``
    where the template maximises validation SNR_t.
    """
    rng = np.random.default_rng(cfg.seed)
    if hasattr(data, "rng") and not isinstance(data, LabeledSet):
        data.rng = rng
    batches, cadence, total = _finite_or_stream(data, cfg, rng)
    shape = validation.images.shape[1:]
    rec = _run_slnn(shape, batches,
                    lambda w, b: slnn_labeled_loss(w, b[0], b[1], cfg.lagrange),
                    cfg, validation, cadence, total)
    return rec.best_template, rec


def train_slnn_covdecomp(backgrounds, signals, noise_var, cfg, validation):
    """Learn the Hotelling template from object samples and a known noise covariance.

    ``backgrounds`` is an ``(N, H, W)`` pool or ``None`` when the background is
    known exactly. ``signals`` is either the fixed signal image or an
    ``(Ns, H, W)`` pool. Mini-batches draw ``batch_per_class`` items from each
    pool, epoch-wise without replacement.
    """
    noise_var = np.asarray(noise_var, dtype=float)
    if np.any(noise_var <= 0):
        raise ValueError("noise covariance must be positive")
    shape = noise_var.shape
    rng = np.random.default_rng(cfg.seed)
    fixed_signal = np.ndim(signals) == len(shape)
    n_bg = 0 if backgrounds is None else len(backgrounds)
    bs = cfg.batch_per_class

    def epoch():
        perm_b = rng.permutation(n_bg) if n_bg else None
        perm_s = None if fixed_signal else rng.permutation(len(signals))
        sizes = [n // bs for n in ([n_bg] if n_bg else []) + ([] if fixed_signal else [len(signals)])]
        nb = min(sizes) if sizes else 1
        if sizes and nb == 0:
            raise ValueError("batch larger than the object pool")
        for i in range(nb):
            sl = slice(i * bs, (i + 1) * bs)
            b = backgrounds[perm_b[sl]] if n_bg else None
            s = signals if fixed_signal else signals[perm_s[sl]]
            yield b, s

    def batches():
        n = 0
        n_ep = cfg.epochs if cfg.epochs is not None else None
        ep = 0
        while True:
            for batch in epoch():
                yield batch
                n += 1
                if n_ep is None and n == cfg.max_batches:
                    return
            ep += 1
            if n_ep is not None and ep == n_ep:
                return

    if cfg.epochs is not None:
        sizes = [n // bs for n in ([n_bg] if n_bg else []) + ([] if fixed_signal else [len(signals)])]
        cadence = min(sizes) if sizes else 1
        total = cadence * cfg.epochs
    else:
        cadence = cfg.val_every
        total = cfg.max_batches
    rec = _run_slnn(shape, batches(),
                    lambda w, b: slnn_covdecomp_loss(w, b[0], b[1], noise_var, cfg.lagrange),
                    cfg, validation, cadence, total)
    return rec.best_template, rec


# ---------------------------------------------------------------------------
# CNN training

@dataclass
class CnnTrainResult:
    model: CnnModel
    best_val_loss: float
    best_step: int
    steps: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_auc: list = field(default_factory=list)

    def rows(self):
        nan = float("nan")
        return [(s, t, v, nan, a) for s, t, v, a in
                zip(self.steps, self.train_loss, self.val_loss, self.val_auc)]


def evaluate_cnn(model, data, chunk=100):
    """Mean cross-entropy and AUC (on logits) over a labelled set."""
    z = cnn_logits(model, data.images, chunk)
    y = np.asarray(data.labels, dtype=float)
    # cross-entropy from logits, stable for large |z|
    ce = np.mean(np.logaddexp(0.0, z) - y * z)
    return float(ce), auc(ScoreSet.from_labels(z, data.labels))


def cnn_logits(model, images, chunk=100):
    return np.concatenate([model.logits(images[i:i + chunk]) for i in range(0, len(images), chunk)])


def train_cnn_io(source, arch, cfg, validation, init_rng=None):
    """Fit the posterior network by Adam on mini-batch cross-entropy.

    ``source.batch(n)`` must return ``n`` signal-absent and ``n``
    signal-present measurements. The checkpoint with the lowest validation
    cross-entropy (checked every ``val_every`` batches) is returned.
    """
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    model = CnnModel.init(arch, init_rng if init_rng is not None else rng, dtype)
    if hasattr(source, "rng"):
        source.rng = np.random.default_rng([cfg.seed, 1])
    opt = cfg.optimizer()
    res = CnnTrainResult(model.copy(), np.inf, 0)
    for step in range(1, cfg.max_batches + 1):
        images, labels = source.batch(cfg.batch_per_class)
        loss, grads = model.backward(images.astype(dtype), labels)
        opt.lr = cfg.lr_at(step, cfg.max_batches)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(
                f"non-finite CNN loss/gradient at batch {step} (loss={loss}, depth={arch.n_conv}, lr={cfg.lr})")
        opt.step(model.params, grads)
        if step % cfg.val_every == 0 or step == cfg.max_batches:
            vloss, vauc = evaluate_cnn(model, validation)
            res.steps.append(step)
            res.train_loss.append(loss)
            res.val_loss.append(vloss)
            res.val_auc.append(vauc)
            log.debug("depth %d step %d train %.4f val %.4f auc %.3f",
                      arch.n_conv, step, loss, vloss, vauc)
            if vloss < res.best_val_loss:
                res.best_val_loss = vloss
                res.best_step = step
                res.model = model.copy()
    return res


@dataclass
class LadderResult:
    depths: list
    val_loss: list
    selected_depth: int
    selected: object
    stop_reason: str
    runs: list = field(default_factory=list)
    selected_auc: float | None = None
    reference_auc: float | None = None

    @property
    def needs_respecification(self):
        """True when the selected network is beaten by the linear reference observer."""
        if self.selected_auc is None or self.reference_auc is None:
            return False
        return self.selected_auc < self.reference_auc


def architecture_ladder(depths, train_depth, reference_auc=None, auc_of=None):
    """Train increasing depths until validation cross-entropy gains fall below 1 %.

    ``train_depth(depth)`` returns ``(model, validation cross-entropy)``. The
    model with the lowest validation cross-entropy among those trained is
    selected. If ``reference_auc`` (the learned Hotelling observer's AUC) and
    ``auc_of(model)`` are given, the result records whether the selection
    underperforms it.
    """
    depths = list(depths)
    if not depths or any(b <= a for a, b in zip(depths, depths[1:])):
        raise ValueError("depths must be a non-empty, strictly increasing list")
    trained, losses, runs = [], [], []
    reason = "exhausted depth list"
    for d in depths:
        model, vloss = train_depth(d)
        trained.append(d)
        losses.append(float(vloss))
        runs.append(model)
        if len(losses) > 1:
            prev = losses[-2]
            if prev - losses[-1] < LADDER_MIN_GAIN * prev:
                reason = f"gain below 1% after depth {d}"
                break
    best = int(np.argmin(losses))
    res = LadderResult(trained, losses, trained[best], runs[best], reason, runs)
    if reference_auc is not None and auc_of is not None:
        res.selected_auc = float(auc_of(runs[best]))
        res.reference_auc = float(reference_auc)
        if res.needs_respecification:
            log.warning("selected depth %d (AUC %.3f) underperforms the linear observer (AUC %.3f)",
                        trained[best], res.selected_auc, reference_auc)
    return res


def write_training_log(path, rows):
    with open(path, "w") as fh:
        fh.write("iteration,train_loss,val_loss,val_snr,val_auc\n")
        for it, tl, vl, vs, va in rows:
            fh.write(f"{it},{tl:.9g},{vl:.9g},{vs:.9g},{va:.9g}\n")
