"""
Overfitting a Hotelling template on a clustered lumpy background
================================================================

With few training images the covariance estimate is rank deficient. The
exact solve on it (Woodbury) looks far better on the training objects than
on new ones. Gradient training drifts toward that solution only slowly, so
the early-stopped SLNN stays close to what generalises.
"""

import numpy as np

from obslab import phantoms as ph
from obslab.observers import CovarianceOracle, centered, woodbury_ho_template
from obslab.tasks import ObjectPool, TaskSpec, generate_measurements
from obslab.trainers import TrainConfig, train_slnn_covdecomp

task = TaskSpec.ske_bks_clb(ph.PixelGrid(32, 32))
s = task.fixed_signal()
train = ObjectPool.generate(task, 300, 0, "train")
held_out = ObjectPool.generate(task, 1500, 0, "pool")
val = generate_measurements(task, 300, 0, "val")
nv = train.noise_variance()
fit_oracle = CovarianceOracle.from_samples(train.backgrounds, nv)
new_oracle = CovarianceOracle.from_samples(held_out.backgrounds, held_out.noise_variance())


def snr2(w, oracle):
    return (w.ravel() @ s.ravel()) ** 2 / oracle.quadratic(w)


w_es, rec = train_slnn_covdecomp(train.backgrounds, s, nv,
                                 TrainConfig(batch_per_class=30, epochs=200, lr=3e-5, lr_final=1e-7), val)
w_wb = woodbury_ho_template(centered(train.backgrounds), nv, s)
print("                     training data   held-out objects")
for name, w in (("early stopped", w_es), ("200 epochs", rec.final_template), ("Woodbury", w_wb)):
    print(f"{name:>16}  {snr2(w, fit_oracle):14.3f}  {snr2(w, new_oracle):16.3f}")
