"""
Routing with a learnable prior
==============================

Class capsules are built by iterated agreement. The prior ``b`` seeds the
coupling, and each iteration adds ``eta * softmax(b_work)`` on top, so the
coupling rows end up summing to ``1 + r * eta``.
"""

import numpy as np

from arcnet import CapsuleLayerParams, predict, route
from arcnet.numerics import Tensor, squash

rng = np.random.default_rng(1)
n_in, n_out, d_in, d_out = 24, 4, 8, 16

U = squash(Tensor(rng.standard_normal((n_in, d_in))))
W = Tensor(rng.standard_normal((n_in, n_out, d_in, d_out)) * 0.2)

for r, eta in [(3, 0.1), (7, 0.01)]:
    params = CapsuleLayerParams(W, Tensor(np.zeros((n_in, n_out))), r, eta)
    V, trace = route(U, params)
    print(f"r={r} eta={eta}: coupling row sum {trace.coupling.sum(axis=-1).mean():.4f}")

###############################################################################
# Squash keeps direction and maps norm n to n^2 / (1 + n^2).

for n in (0.0, 1.0, 3.0):
    v = squash(Tensor(np.array([n, 0.0, 0.0]), dtype=np.float64)).data
    print(f"|v| = {n}: squashed norm {np.linalg.norm(v):.3f}")

###############################################################################
# A large prior pins each input capsule to one output. Here every input is
# sent to class 2, which then wins the prediction.

b = np.zeros((n_in, n_out))
b[:, 2] = 50.0
V, _ = route(U, CapsuleLayerParams(W, Tensor(b), 3, 0.1))
cls, norms = predict(V.data)
print("predicted class", cls, "norms", np.round(norms, 3))
