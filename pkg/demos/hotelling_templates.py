"""
Three ways to a Hotelling template
==================================

Known background first, where the answer is s / (2 c^2), then a lumpy
background where only samples of the object are available.
"""

import numpy as np

from obslab.observers import (CovarianceOracle, analytic_laplacian_ho_template, centered,
                              solve_ho_template_cg, woodbury_ho_template)
from obslab.tasks import ObjectPool, TaskSpec, generate_measurements
from obslab.trainers import TrainConfig, train_slnn_covdecomp

# SKE/BKE with Laplace noise: the noise covariance is 2 c^2 times the identity
task = TaskSpec.ske_bke()
s = task.fixed_signal()
target = analytic_laplacian_ho_template(s, task.noise.param)

val = generate_measurements(task, 2000, 0, "val")
w, rec = train_slnn_covdecomp(None, s, task.noise_variance(),
                              TrainConfig(max_batches=600, val_every=50, lr=1e-4), val)
cos = w.ravel() @ target.ravel() / np.linalg.norm(w) / np.linalg.norm(target)
print(f"SLNN vs analytic template: cosine {cos:.5f}, best step {rec.best_step}")

# lumpy background: the covariance is only known through samples
task = TaskSpec.ske_bks_lumpy()
s = task.fixed_signal()
pool = ObjectPool.generate(task, 3000, 0, "pool")
oracle = CovarianceOracle.from_samples(pool.backgrounds, pool.noise_variance())


def snr2(w):
    return (w.ravel() @ s.ravel()) ** 2 / oracle.quadratic(w)


w_cg = solve_ho_template_cg(oracle, s)
w_wb = woodbury_ho_template(centered(pool.backgrounds), pool.noise_variance(), s)
print(f"SNR^2  CG {snr2(w_cg):.4f}  Woodbury {snr2(w_wb):.4f}")

# a template that ignores the background correlations does worse
print(f"SNR^2  matched filter {snr2(s):.4f}")
