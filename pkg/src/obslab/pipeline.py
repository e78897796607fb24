"""Seeded end-to-end runs: generate, train, score, evaluate and report.

Every artifact of a configuration lives in ``<out>/run-<digest>/`` where the
digest covers the canonical configuration text (seed included), so the
subcommands of one config find each other's outputs. Wall-clock times go to
``timing.json`` only; every other byte is fixed by the config.
"""
import csv
import glob
import json
import os
import shutil
import time

import numpy as np

from . import dataset_io as dio
from .config import build_task, noise_variance_of
from .evalkit import (ScoreSet, UndefinedMetric, auc, auc_standard_error, efficiency,
                      empirical_roc, posterior_from_log_lr, posterior_mse, snr_t,
                      write_roc_csv)
from .mcmc import ChainConfig, run_chain
from .neural import ArchSpec, load_checkpoint, save_checkpoint
from .observers import (CovarianceOracle, analytic_laplacian_ho_template, centered,
                        laplacian_io_log_lr, linear_test_statistic, solve_ho_template_cg,
                        woodbury_ho_template)
from .rng import child_seed, stream
from .tasks import (LabeledSet, ObjectPool, SemiOnlineSource, generate_measurements)
from .trainers import (TrainConfig, architecture_ladder, cnn_logits, train_cnn_io,
                       train_slnn_covdecomp, train_slnn_labeled, write_training_log)

# purpose tags of the data streams; each is a separate family of child streams
TAGS = {"train": "train", "val": "val", "test": "test", "objects": "pool", "mcmc": "mcmc"}
ORDERING_MARGIN = 0.01


class PipelineError(RuntimeError):
    pass


class MissingInput(PipelineError):
    pass


class AcceptanceFailure(PipelineError):
    pass


def run_dir(cfg, out):
    path = os.path.join(out, f"run-{cfg.digest()}")
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.txt"), "w") as fh:
        fh.write(cfg.canonical())
    return path


def _need(path):
    if not os.path.exists(path):
        raise MissingInput(f"missing input artifact {path}; run the producing subcommand first")
    return path


def _record_time(rd, step, seconds):
    path = os.path.join(rd, "timing.json")
    data = {}
    if os.path.exists(path):
        with open(path) as fh:
            data = json.load(fh)
    data[step] = round(seconds, 3)
    with open(path, "w") as fh:
        json.dump(data, fh, sort_keys=True, indent=1)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _labeled(ds):
    return LabeledSet(ds.images.astype(float), ds.labels)


def _load_pool(task, rd):
    if task.background_known:
        return None
    bg = dio.read_dataset(_need(os.path.join(rd, "objects.obslab"))).images.astype(float)
    sig = None
    if not task.signal_known:
        sig = dio.read_dataset(_need(os.path.join(rd, "signals.obslab"))).images.astype(float)
    return ObjectPool(task, bg, sig)


def _train_config(cfg, seed_tag, slnn=False):
    v = cfg.values
    lr, lr_final = v["train.lr"], v["train.lr_final"]
    # SLNN templates live on a different scale from CNN weights
    if slnn and v["ho.lr"] is not None:
        lr, lr_final = v["ho.lr"], v["ho.lr_final"]
    elif slnn and v["ho.lr_final"] is not None:
        lr_final = v["ho.lr_final"]
    return TrainConfig(batch_per_class=v["train.batch_per_class"], max_batches=v["train.max_batches"],
                       val_every=v["train.val_every"], epochs=v["train.epochs"], lr=lr,
                       lr_final=lr_final, dtype=v["train.dtype"],
                       seed=child_seed(v["rng.seed"], seed_tag) & 0xFFFFFFFF)


# ---------------------------------------------------------------------------
# subcommands

def generate(cfg, out):
    """Write train / validation / test sets and the noiseless object pool."""
    t0 = time.perf_counter()
    task = build_task(cfg)
    seed = cfg["rng.seed"]
    rd = run_dir(cfg, out)
    meta = {"seed": seed, "task_digest": task.digest(), "task": task.kind}
    sizes = {"train": cfg["data.train_per_class"], "val": cfg["data.val_per_class"],
             "test": cfg["data.test_per_class"]}
    for name, n in sizes.items():
        data = generate_measurements(task, n, seed, TAGS[name])
        dio.write_dataset(os.path.join(rd, f"{name}.obslab"),
                          dio.Dataset.from_labeled(data, {**meta, "tag": TAGS[name]}))
    streams = {name: TAGS[name] for name in sizes}
    if not task.background_known:
        pool = ObjectPool.generate(task, cfg["data.objects"], seed, TAGS["objects"])
        n = len(pool)
        h, w = task.grid.shape
        dio.write_dataset(os.path.join(rd, "objects.obslab"),
                          dio.Dataset(w, h, np.zeros(n), pool.backgrounds, {**meta, "tag": "pool/object"}))
        if pool.signals is not None:
            dio.write_dataset(os.path.join(rd, "signals.obslab"),
                              dio.Dataset(w, h, np.ones(n), pool.signals, {**meta, "tag": "pool/signal"}))
        streams["objects"] = TAGS["objects"]
    _write_json(os.path.join(rd, "streams.json"), streams)
    _record_time(rd, "generate", time.perf_counter() - t0)
    return rd


def train_ho(cfg, out):
    """Learn (or solve for) the Hotelling template with the configured method."""
    t0 = time.perf_counter()
    task = build_task(cfg)
    rd = run_dir(cfg, out)
    val = _labeled(dio.read_dataset(_need(os.path.join(rd, "val.obslab"))))
    pool = _load_pool(task, rd)
    noise_var = noise_variance_of(task, pool)
    signal = task.fixed_signal() if task.signal_known else pool.signals
    mean_diff = task.fixed_signal() if task.signal_known else pool.mean_signal()
    bdev = np.zeros((0, *task.grid.shape)) if pool is None else centered(pool.backgrounds)
    sdev = None if task.signal_known else centered(pool.signals)
    method = cfg["ho.method"]
    tcfg = _train_config(cfg, "train-ho", slnn=True)
    rec = None
    if method == "covdecomp":
        w, rec = train_slnn_covdecomp(None if pool is None else pool.backgrounds, signal,
                                      noise_var, tcfg, val)
    elif method == "labeled":
        train = _labeled(dio.read_dataset(_need(os.path.join(rd, "train.obslab"))))
        w, rec = train_slnn_labeled(train, tcfg, val)
    elif method == "cg":
        w = solve_ho_template_cg(CovarianceOracle(bdev, noise_var, sdev), mean_diff, tol=cfg["ho.tol"])
    else:
        if pool is None:
            raise PipelineError("woodbury needs an object pool (background-random task)")
        w = woodbury_ho_template(bdev, noise_var, mean_diff, sdev)
    if rec is not None:
        write_training_log(os.path.join(rd, "ho_training_log.csv"), rec.rows())
    oracle = CovarianceOracle(bdev, noise_var, sdev)
    snr2 = float((w.ravel() @ mean_diff.ravel()) ** 2 / oracle.quadratic(w))
    dio.write_template(os.path.join(rd, "template.obslab"), w, {"method": method})
    summary = {"method": method, "snr2_ho": snr2}
    if rec is not None:
        summary["best_step"] = int(rec.best_step)
    _write_json(os.path.join(rd, "ho_summary.json"), summary)
    _record_time(rd, "train-ho", time.perf_counter() - t0)
    return summary


def train_io(cfg, out):
    """Architecture ladder of CNN posterior estimators; the selection is ``cnn.ckpt``."""
    t0 = time.perf_counter()
    task = build_task(cfg)
    rd = run_dir(cfg, out)
    val = _labeled(dio.read_dataset(_need(os.path.join(rd, "val.obslab"))))
    pool = _load_pool(task, rd)
    scale = float(f"{np.std(val.images):.6g}")
    base = ArchSpec(task.grid.shape, 1, cfg["ladder.filters"], cfg["ladder.filter_size"],
                    input_scale=scale)

    def train_depth(d):
        tcfg = _train_config(cfg, f"train-io/{d}")
        source = SemiOnlineSource(task, pool)
        res = train_cnn_io(source, base.with_depth(d), tcfg, val)
        save_checkpoint(os.path.join(rd, f"cnn_depth{d}.ckpt"), res.model)
        write_training_log(os.path.join(rd, f"cnn_depth{d}_log.csv"), res.rows())
        return res.model, res.best_val_loss

    reference = auc_of = None
    tpath = os.path.join(rd, "template.obslab")
    if os.path.exists(tpath):
        w = dio.read_template(tpath)
        reference = auc(ScoreSet.from_labels(linear_test_statistic(w, val.images), val.labels))
        auc_of = lambda m: auc(ScoreSet.from_labels(cnn_logits(m, val.images), val.labels))  # noqa: E731
    lad = architecture_ladder(cfg["ladder.depths"], train_depth, reference, auc_of)
    shutil.copyfile(os.path.join(rd, f"cnn_depth{lad.selected_depth}.ckpt"), os.path.join(rd, "cnn.ckpt"))
    with open(os.path.join(rd, "ladder.csv"), "w") as fh:
        fh.write("depth,val_loss\n")
        for d, v in zip(lad.depths, lad.val_loss):
            fh.write(f"{d},{v:.9g}\n")
    summary = {"depths": lad.depths, "val_loss": lad.val_loss, "selected_depth": lad.selected_depth,
               "stop_reason": lad.stop_reason, "input_scale": scale,
               "needs_respecification": lad.needs_respecification}
    _write_json(os.path.join(rd, "ladder.json"), summary)
    _record_time(rd, "train-io", time.perf_counter() - t0)
    return summary


def mcmc_subset(labels, per_class):
    idx0 = np.flatnonzero(labels == 0)
    idx1 = np.flatnonzero(labels == 1)
    if per_class is not None:
        idx0, idx1 = idx0[:per_class], idx1[:per_class]
    return np.concatenate([idx0, idx1])


def mcmc(cfg, out):
    """MCMC log-likelihood-ratio scores for the test images."""
    t0 = time.perf_counter()
    task = build_task(cfg)
    rd = run_dir(cfg, out)
    test = dio.read_dataset(_need(os.path.join(rd, "test.obslab")))
    seed = cfg["rng.seed"]
    ccfg = ChainConfig(n_samples=cfg["mcmc.samples"], burn_in=cfg["mcmc.burn_in"],
                       step_std=cfg["mcmc.step_std"], seed=seed)
    idx = mcmc_subset(test.labels, cfg["mcmc.images"])
    warnings = 0
    with open(os.path.join(rd, "mcmc_scores.csv"), "w") as fh:
        fh.write("index,label,log_lr,acceptance_rate\n")
        for k, i in enumerate(idx):
            res = run_chain(test.images[i].astype(float), task, ccfg, rng=stream(seed, TAGS["mcmc"], int(i)))
            warnings += res.warning is not None
            fh.write(f"{i},{test.labels[i]},{res.log_lr:.17g},{res.acceptance_rate:.9g}\n")
            if k == 0:
                res.write_diagnostics(os.path.join(rd, "mcmc_diagnostics.csv"))
    summary = {"images": len(idx), "samples": ccfg.n_samples, "burn_in": ccfg.burn,
               "acceptance_warnings": warnings}
    _write_json(os.path.join(rd, "mcmc_summary.json"), summary)
    _record_time(rd, "mcmc", time.perf_counter() - t0)
    return summary


def read_mcmc_scores(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([int(r["index"]) for r in rows], dtype=int),
            np.array([float(r["log_lr"]) for r in rows]))


def _metrics(scores, labels):
    ss = ScoreSet.from_labels(scores, labels)
    a = auc(ss)
    out = {"auc": a, "auc_se": auc_standard_error(a, len(ss.h0), len(ss.h1))}
    try:
        out["snr_t"] = snr_t(ss)
    except UndefinedMetric:
        out["snr_t"] = None
    return out


def evaluate(cfg, out):
    """Score every available observer on the test set; ROC CSVs and evaluation.json."""
    t0 = time.perf_counter()
    task = build_task(cfg)
    rd = run_dir(cfg, out)
    test = dio.read_dataset(_need(os.path.join(rd, "test.obslab")))
    g = test.images.astype(float)
    labels = test.labels
    idx = np.arange(len(labels))
    obs = {}   # name -> (indices, scores, log-LR or None)
    if task.kind == "ske_bke" and task.noise.kind == "laplacian":
        s = task.fixed_signal()
        c = task.noise.param
        obs["analytic_io"] = (idx, laplacian_io_log_lr(g, np.zeros_like(s), s, c), True)
        obs["analytic_ho"] = (idx, linear_test_statistic(analytic_laplacian_ho_template(s, c), g), False)
    if os.path.exists(os.path.join(rd, "template.obslab")):
        w = dio.read_template(os.path.join(rd, "template.obslab"))
        obs["slnn_ho"] = (idx, linear_test_statistic(w, g), False)
    if os.path.exists(os.path.join(rd, "cnn.ckpt")):
        model = load_checkpoint(os.path.join(rd, "cnn.ckpt"))
        logit = cnn_logits(model, g)
        prior_logit = np.log(task.prior_h1 / (1 - task.prior_h1))
        obs["cnn_io"] = (idx, logit - prior_logit, True)
    if os.path.exists(os.path.join(rd, "mcmc_scores.csv")):
        mi, ms = read_mcmc_scores(os.path.join(rd, "mcmc_scores.csv"))
        obs["mcmc_io"] = (mi, ms, True)
    if not obs:
        raise MissingInput("no observer artifacts to evaluate")
    ref = "analytic_io" if "analytic_io" in obs else ("mcmc_io" if "mcmc_io" in obs else None)
    result = {"task": task.kind, "config_digest": cfg.digest(), "reference": ref, "observers": {}}
    for name, (ii, sc, is_llr) in obs.items():
        m = _metrics(sc, labels[ii])
        roc = empirical_roc(ScoreSet.from_labels(sc, labels[ii]))
        write_roc_csv(os.path.join(rd, f"roc_{name}.csv"), roc)
        m["roc"] = f"roc_{name}.csv"
        m["images"] = int(len(ii))
        if ref is not None and name != ref:
            ri, rs, _ = obs[ref]
            common = np.intersect1d(ii, ri)
            pos_a = np.searchsorted(ii, common)
            pos_r = np.searchsorted(ri, common)
            a_obs = _metrics(sc[pos_a], labels[common])["auc"]
            a_ref = _metrics(rs[pos_r], labels[common])["auc"]
            try:
                m["efficiency"] = efficiency(a_obs, a_ref)
            except UndefinedMetric:
                m["efficiency"] = None
            if is_llr:
                m["posterior_mse"] = posterior_mse(posterior_from_log_lr(sc[pos_a], task.prior_h1),
                                                   posterior_from_log_lr(rs[pos_r], task.prior_h1))
        result["observers"][name] = m
    _write_json(os.path.join(rd, "evaluation.json"), result)
    _record_time(rd, "evaluate", time.perf_counter() - t0)
    return result


REPORT_COLUMNS = ("task", "config_digest", "observer", "images", "auc", "auc_se", "snr_t",
                  "efficiency", "posterior_mse")


def report(out, assert_ordering=False):
    """Collect every run's evaluation into report.csv and a Markdown AUC table."""
    rows, table = [], []
    for path in sorted(glob.glob(os.path.join(out, "run-*", "evaluation.json"))):
        with open(path) as fh:
            ev = json.load(fh)
        for name, m in sorted(ev["observers"].items()):
            rows.append([ev["task"], ev["config_digest"], name] + [m.get(k) for k in REPORT_COLUMNS[3:]])
        table.append(ev)
    if not rows:
        raise MissingInput(f"no evaluation.json under {out}")

    def f(v):
        return "" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v))
    with open(os.path.join(out, "report.csv"), "w") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(f(v) for v in r) + "\n")
    failures = []
    lines = ["| task | run | IO (CNN) AUC | HO (SLNN) AUC | reference IO AUC |",
             "|---|---|---|---|---|"]
    for ev in table:
        o = ev["observers"]
        io = o.get("cnn_io", {}).get("auc")
        ho = o.get("slnn_ho", {}).get("auc")
        ref = o.get(ev["reference"], {}).get("auc") if ev["reference"] else None
        lines.append(f"| {ev['task']} | {ev['config_digest']} | {f(io)} | {f(ho)} | {f(ref)} |")
        if io is not None and ho is not None and io < ho - ORDERING_MARGIN:
            failures.append(f"{ev['task']} ({ev['config_digest']}): IO AUC {io:.4f} < HO AUC {ho:.4f} - 0.01")
    with open(os.path.join(out, "report.md"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if assert_ordering and failures:
        raise AcceptanceFailure("; ".join(failures))
    return rows
