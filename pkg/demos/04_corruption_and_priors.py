"""
Dropping a sensor and reading the prior
=======================================

After training, one IMU per test window is zeroed to see how much the
fused prediction relies on any single sensor. The learned prior is then
summarised per IMU and class as a heatmap.
"""

import tempfile
from pathlib import Path

from arcnet import SyntheticSpec, TrainConfig, synth_generate, train
from arcnet.experiments import export_prior_heatmap, run_corruption_test

data = synth_generate(SyntheticSpec(n_imu=3, n_classes=3, windows_per_class=30, seed=2))
result = train(TrainConfig(dataset="synth", epochs=10, batch_size=32, seed=0), data)

res = run_corruption_test(result.params, data.test, seed=0, class_names=data.class_names)
print(f"clean accuracy {res.clean.accuracy:.3f}, corrupted {res.corrupted.accuracy:.3f}")
print(f"delta wF1 {res.delta_wf1:.2f} points, delta accuracy {res.delta_accuracy:.2f} points")

# p = 0 leaves every window untouched: the deltas are exactly zero.
print("p=0 deltas:", run_corruption_test(result.params, data.test, p=0.0).delta_wf1)

###############################################################################
# Per-class min-max scaling of the IMU-averaged prior.

heatmap = export_prior_heatmap(result.params, ("chest", "hand", "ankle"), data.class_names)
print(heatmap.to_csv())
stem = Path(tempfile.mkdtemp(prefix="arcnet_priors_")) / "priors"
print("written:", *heatmap.save(stem))
