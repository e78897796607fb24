"""Flat ``section.key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Every key must appear in
:data:`SCHEMA`; values are parsed to the declared type. Defaults that depend
on the task (noise model and level) are left as ``None`` and filled in by
:func:`build_task`.
"""
import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import phantoms as ph
from .imaging import NoiseModel
from .tasks import TASK_TYPES, TaskSpec


class ConfigError(ValueError):
    pass


def _bool(v):
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v):
    return tuple(int(x) for x in v.replace(",", " ").split())


# key: (parser, default, description)
SCHEMA = {
    "task.type": (str, "ske_bke", "one of " + ", ".join(TASK_TYPES)),
    "task.preset": (str, "none", "'validation8' selects the 8x8 enumerable lumpy task"),
    "task.prior_h1": (float, 0.5, "Pr(H1); Pr(H0) = 1 - Pr(H1)"),
    "grid.width": (int, 64, "image width in pixels"),
    "grid.height": (int, None, "image height (default: width)"),
    "noise.model": (str, None, "laplacian | gaussian | poisson_gaussian (default: task's)"),
    "noise.param": (float, None, "Laplace decay c or Gaussian std (default: task's)"),
    "lumpy.mean_count": (float, None, "mean lump count"),
    "lumpy.amplitude": (float, None, "lump amplitude"),
    "lumpy.lump_width": (float, None, "lump width"),
    "clb.mean_clusters": (float, None, "CLB mean cluster count (default: area-scaled 150)"),
    "data.objects": (int, 2000, "noiseless training objects in the pool"),
    "data.train_per_class": (int, 1000, "labelled noisy training images per class"),
    "data.val_per_class": (int, 200, "validation images per class"),
    "data.test_per_class": (int, 200, "test images per class"),
    "ho.method": (str, "covdecomp", "covdecomp | labeled | cg | woodbury"),
    "ho.tol": (float, 1e-8, "CG relative residual tolerance"),
    "ho.lr": (float, None, "SLNN Adam step size (default: train.lr)"),
    "ho.lr_final": (float, None, "SLNN final step size (default: train.lr_final unless ho.lr is set)"),
    "train.batch_per_class": (int, 200, "mini-batch images per class"),
    "train.max_batches": (int, 1000, "mini-batch updates (stream training)"),
    "train.epochs": (int, None, "epochs over the finite set instead of max_batches"),
    "train.val_every": (int, 50, "validation cadence in batches"),
    "train.lr": (float, 1e-3, "Adam step size"),
    "train.lr_final": (float, None, "final step size of a geometric decay"),
    "train.dtype": (str, "float64", "float64 | float32 network arithmetic"),
    "ladder.depths": (_ints, (1, 2, 3), "convolutional depths to try, increasing"),
    "ladder.filters": (int, 32, "feature maps per convolutional layer"),
    "ladder.filter_size": (int, 5, "square filter size (odd)"),
    "mcmc.samples": (int, 20000, "chain length per image"),
    "mcmc.burn_in": (int, None, "discarded steps (default: 10 %)"),
    "mcmc.step_std": (float, 2.0, "lump perturbation std in pixels"),
    "mcmc.images": (int, None, "test images scored per class (default: all)"),
    "rng.seed": (int, 0, "master seed"),
    "report.assert_ordering": (_bool, False, "exit 4 unless IO AUC >= HO AUC - 0.01"),
}


@dataclass(frozen=True)
class Config:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def with_seed(self, seed):
        v = dict(self.values)
        v["rng.seed"] = int(seed)
        return Config(v)

    def canonical(self):
        lines = [f"{k} = {_fmt(self.values[k])}" for k in sorted(self.values)
                 if self.values[k] is not None]
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.blake2b(self.canonical().encode(), digest_size=6).hexdigest()


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_config(text):
    values = {k: d for k, (_, d, _) in SCHEMA.items()}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'section.key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        try:
            values[key] = SCHEMA[key][0](val)
        except ValueError as exc:
            raise ConfigError(f"line {n}: bad value for {key}: {exc}") from exc
    cfg = Config(values)
    build_task(cfg)
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def validation8_task(noise_std=10.0):
    """8x8 lumpy task with one lump on a 4x4 candidate grid: small enough to enumerate."""
    grid = ph.PixelGrid(8, 8)
    pos = tuple((1.0 + 2 * i, 1.0 + 2 * j) for j in range(4) for i in range(4))
    model = ph.LumpyModel(mean_count=1.0, amplitude=0.25, lump_width=2.0, fixed_count=1, positions=pos)
    return TaskSpec.ske_bks_lumpy(grid, model).with_noise(NoiseModel.gaussian(noise_std))


def build_task(cfg):
    """TaskSpec described by a config; raises ConfigError on inconsistent settings."""
    v = cfg.values
    try:
        if v["task.preset"] == "validation8":
            task = validation8_task()
        elif v["task.preset"] != "none":
            raise ConfigError(f"unknown preset {v['task.preset']!r}")
        else:
            kind = v["task.type"]
            if kind not in TASK_TYPES:
                raise ConfigError(f"unknown task.type {kind!r}")
            w = v["grid.width"]
            grid = ph.PixelGrid(w, v["grid.height"] or w)
            kw = {}
            if kind in ("ske_bks_lumpy", "sks_bks_lumpy"):
                base = ph.LumpyModel()
                kw["lumpy"] = ph.LumpyModel(
                    v["lumpy.mean_count"] if v["lumpy.mean_count"] is not None else base.mean_count,
                    v["lumpy.amplitude"] if v["lumpy.amplitude"] is not None else base.amplitude,
                    v["lumpy.lump_width"] if v["lumpy.lump_width"] is not None else base.lump_width)
            if kind == "ske_bks_clb" and v["clb.mean_clusters"] is not None:
                kw["clb"] = ph.ClbConstants(mean_clusters=v["clb.mean_clusters"])
            task = getattr(TaskSpec, kind)(grid, **kw)
        if v["noise.model"] is not None or v["noise.param"] is not None:
            model = v["noise.model"] or task.noise.kind
            param = v["noise.param"] if v["noise.param"] is not None else task.noise.param
            task = task.with_noise(NoiseModel(model, param))
        task = replace(task, prior_h1=v["task.prior_h1"])
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if v["ho.method"] not in ("covdecomp", "labeled", "cg", "woodbury"):
        raise ConfigError(f"unknown ho.method {v['ho.method']!r}")
    if v["train.dtype"] not in ("float64", "float32"):
        raise ConfigError("train.dtype must be float64 or float32")
    depths = v["ladder.depths"]
    if not depths or any(b <= a for a, b in zip(depths, depths[1:])):
        raise ConfigError("ladder.depths must be strictly increasing")
    if min(v[k] for k in ("data.val_per_class", "data.test_per_class")) < 0:
        raise ConfigError("counts must be non-negative")
    return task


def describe():
    """Documentation of every configuration key."""
    out = []
    for k, (_, d, doc) in SCHEMA.items():
        out.append(f"{k:24s} {doc} [default: {_fmt(d) if d is not None else 'task-dependent'}]")
    return "\n".join(out)


def noise_variance_of(task, objects=None):
    """Diagonal mean noise variance implied by a task and an optional object pool."""
    mb = np.zeros(task.grid.shape) if objects is None else objects.mean_background()
    ms = objects.mean_signal() if objects is not None else None
    return task.noise_variance(mb, ms)
