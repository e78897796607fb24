"""
Learning the ideal observer with a small CNN
============================================

On a 32x32 SKE/BKE task the likelihood ratio is known in closed form, so
the network's posterior can be compared pixel for pixel. The net here is
tiny and trained briefly; expect it to land between the Hotelling and the
ideal observer.
"""

import numpy as np

from obslab import phantoms as ph
from obslab.evalkit import ScoreSet, auc, efficiency, posterior_from_log_lr, posterior_mse
from obslab.neural import ArchSpec, sigmoid
from obslab.observers import laplacian_io_log_lr, linear_test_statistic
from obslab.tasks import SemiOnlineSource, TaskSpec, generate_measurements
from obslab.trainers import TrainConfig, cnn_logits, train_cnn_io

task = TaskSpec.ske_bke(ph.PixelGrid(32, 32))
s = task.fixed_signal()
val = generate_measurements(task, 200, 0, "val")
test = generate_measurements(task, 200, 1, "test")

llr = laplacian_io_log_lr(test.images, np.zeros_like(s), s, task.noise.param)
io_auc = auc(ScoreSet.from_labels(llr, test.labels))
ho_auc = auc(ScoreSet.from_labels(linear_test_statistic(s, test.images), test.labels))
print(f"analytic IO AUC {io_auc:.3f}   HO AUC {ho_auc:.3f}")

arch = ArchSpec((32, 32), 1, 4, 5, input_scale=float(np.std(val.images)))
res = train_cnn_io(SemiOnlineSource(task), arch,
                   TrainConfig(batch_per_class=50, max_batches=600, val_every=100,
                               lr=1e-3, lr_final=1e-4, dtype="float32"), val)
for step, loss in zip(res.steps, res.val_loss):
    print(f"  batch {step:4d}  validation cross-entropy {loss:.4f}")

z = cnn_logits(res.model.astype(np.float64), test.images)
cnn_auc = auc(ScoreSet.from_labels(z, test.labels))
print(f"CNN AUC {cnn_auc:.3f}  efficiency {efficiency(cnn_auc, io_auc):.3f}  "
      f"posterior MSE {posterior_mse(sigmoid(z), posterior_from_log_lr(llr)):.4f}")
