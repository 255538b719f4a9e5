"""
Recording a tape and checking gradients
=======================================

Every op in ``arcnet.numerics`` records itself on the active tape, so a
reverse sweep gives gradients for anything built inside ``with Tape()``.
"""

import numpy as np

from arcnet import numerics as nx
from arcnet.checks import run_suite

rng = np.random.default_rng(0)

# A valid convolution followed by a ReLU and a scalar reduction.
x = nx.Tensor(rng.standard_normal((1, 2, 6, 20)))
k = nx.Tensor(rng.standard_normal((3, 2, 1, 5)))
bias = nx.Tensor(np.zeros(3))

with nx.Tape() as tape:
    y = nx.relu(nx.conv2d(x, k, bias, stride=(1, 1)))
    loss = nx.mean_all(y)
gx, gk = tape.gradient(loss, [x, k])
print("output", y.shape, "loss", float(loss.data))
print("grad shapes", gx.shape, gk.shape)

###############################################################################
# Finite differences agree with the tape. ``grad_check`` reruns the function
# in float64 and compares every sampled entry.

report = nx.grad_check(lambda a, w, c: nx.conv2d(a, w, c, stride=(1, 1)),
                       [x.data, k.data, rng.standard_normal(3)], tol=1e-4, names=["x", "k", "bias"])
print(report)

###############################################################################
# The full suite covers each op plus encoder, routing and the whole network
# on a two-IMU, four-class micro configuration.

for name, rep in run_suite(tol=1e-3):
    print(f"{name:18s} max rel err {rep.max_error:.2e}")
