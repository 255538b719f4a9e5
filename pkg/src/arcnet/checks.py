"""Finite-difference gradient suite: every op alone, then the whole network.

The network check uses a micro configuration (2 IMUs, 4 classes, 8-dim
class capsules, narrow encoder) so that probing parameters by central
differences stays cheap.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .capsules import CapsuleLayerParams, route
from .encoder import EncoderParams, encode_all
from .loss_metrics import MarginConfig, margin_loss
from .model import ModelParams, forward

MICRO = dict(n_imu=2, n_classes=4, d_out=8, channels=(4, 6, 5), batch=2)
# thousands of relu units sit behind every encoder weight; a 1e-3 probe
# pushes some across their kink, so whole-network checks use a finer step
NETWORK_STEP = 1e-5


def _rand(rng, *shape, scale=1.0):
    return rng.standard_normal(shape) * scale


def op_cases(rng: np.random.Generator):
    """(name, fn, inputs) triples covering each differentiable op."""
    away = lambda x: x + np.sign(x) * 0.05  # keep relu inputs off the kink
    return [
        ("conv2d", lambda x, k, b: nx.conv2d(x, k, b, (3, 4)),
         [_rand(rng, 2, 6, 7, 16), _rand(rng, 4, 6, 3, 5), _rand(rng, 4)]),
        ("conv2d_unbatched", lambda x, k, b: nx.conv2d(x, k, b, (1, 2)),
         [_rand(rng, 3, 4, 9), _rand(rng, 2, 3, 2, 3), _rand(rng, 2)]),
        ("matmul", nx.matmul, [_rand(rng, 5, 7), _rand(rng, 7, 3)]),
        ("matmul_batched", nx.matmul, [_rand(rng, 3, 4, 5), _rand(rng, 3, 5, 2)]),
        ("relu", nx.relu, [away(_rand(rng, 4, 6))]),
        ("softmax_rows", lambda b, w: nx.sum_all(nx.contract("ij,ij->ij", nx.softmax_rows(b), w)),
         [_rand(rng, 3, 5), _rand(rng, 3, 5)]),
        ("squash", lambda v, w: nx.contract("ij,ij->ij", nx.squash(v), w),
         [_rand(rng, 4, 6), _rand(rng, 4, 6)]),
        ("norm", nx.norm, [_rand(rng, 5, 3)]),
        ("contract", lambda a, b: nx.contract("bij,bijd->bjd", a, b),
         [_rand(rng, 2, 3, 4), _rand(rng, 2, 3, 4, 5)]),
        ("add_scale", lambda a, b: nx.add(nx.scale(a, 0.3), b), [_rand(rng, 3, 4), _rand(rng, 3, 4)]),
        ("reshape_transpose", lambda a, w: nx.contract(
            "ij,ij->ij", nx.reshape(nx.transpose(a, (1, 0, 2)), (3, 8)), w),
         [_rand(rng, 2, 3, 4), _rand(rng, 3, 8)]),
        ("expand", lambda a, w: nx.contract("bij,bij->bij", nx.expand(a, 3), w),
         [_rand(rng, 2, 4), _rand(rng, 3, 2, 4)]),
        ("mean", nx.mean_all, [_rand(rng, 3, 4)]),
        ("margin_loss", lambda n: margin_loss(n, [0, 2, 1], MarginConfig()),
         [rng.uniform(0.1, 0.9, (3, 4))]),
    ]


def micro_params(rng: np.random.Generator, r: int = 3, eta: float = 0.1) -> ModelParams:
    p = ModelParams.init(rng, MICRO["n_imu"], MICRO["n_classes"], channels=MICRO["channels"],
                         d_out=MICRO["d_out"], r=r, eta=eta, dtype=np.float64)
    # a non-zero prior exercises the softmax gradient paths
    p.capsules.b.data[:] = rng.standard_normal(p.capsules.b.shape) * 0.5
    return p


def model_check(r: int, tol: float = 1e-3, seed: int = 0, max_entries: int | None = 200):
    """Grad-check forward + margin loss of the micro network w.r.t. all parameters."""
    rng = np.random.default_rng(seed)
    params = micro_params(rng, r=r)
    x = rng.standard_normal((MICRO["batch"], MICRO["n_imu"], 6, 128))
    labels = rng.integers(0, MICRO["n_classes"], MICRO["batch"])
    named = params.tensors()
    names = list(named)

    def fn(*ts):
        p = _rebuild(params, dict(zip(names, ts)))
        norms = forward(p, nx.Tensor(x, dtype=ts[0].dtype))[0]
        return margin_loss(norms, labels)

    return nx.grad_check(fn, [t.data for t in named.values()], tol=tol, names=names,
                         max_entries=max_entries, seed=seed, step=NETWORK_STEP)


def encoder_check(tol: float = 1e-3, seed: int = 0, max_entries: int | None = 200):
    rng = np.random.default_rng(seed)
    params = micro_params(rng)
    x = rng.standard_normal((2, MICRO["n_imu"], 6, 128))
    enc = params.encoder.tensors()
    names = list(enc) + ["input"]
    w = rng.standard_normal((2, 12 * MICRO["n_imu"], MICRO["channels"][2]))

    def fn(*ts):
        p = EncoderParams(*ts[:-1])
        return nx.contract("bij,bij->bij", encode_all(ts[-1], p), nx.Tensor(w, dtype=ts[0].dtype))

    return nx.grad_check(fn, [t.data for t in enc.values()] + [x], tol=tol, names=names,
                         max_entries=max_entries, seed=seed, step=NETWORK_STEP)


def routing_check(r: int, tol: float = 1e-3, seed: int = 0):
    """Margin loss through ``route`` w.r.t. primary capsules, W and b."""
    rng = np.random.default_rng(seed)
    params = micro_params(rng, r=r)
    U = nx.squash(nx.Tensor(rng.standard_normal((2, 24, 5)), dtype=np.float64)).data
    labels = [1, 3]
    caps = params.capsules

    def fn(u, W, b):
        p = CapsuleLayerParams(W, b, caps.r, caps.eta)
        V, _ = route(u, p)
        return margin_loss(nx.norm(V), labels)

    return nx.grad_check(fn, [U, caps.W.data, caps.b.data], tol=tol, names=["U", "W", "b"],
                         max_entries=300, seed=seed)


def _rebuild(template: ModelParams, tensors: dict) -> ModelParams:
    enc = EncoderParams(*(tensors[f"encoder.{k}"] for k in ("w1", "b1", "w2", "b2", "w3", "b3")))
    caps = CapsuleLayerParams(tensors["capsule.W"], tensors["capsule.b"],
                              template.capsules.r, template.capsules.eta)
    return ModelParams(enc, caps)


def run_suite(tol: float = 1e-3, seed: int = 0, routing_iters=(1, 3)):
    """All checks as a list of (name, GradCheckReport)."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in op_cases(rng):
        results.append((name, nx.grad_check(fn, inputs, tol=tol)))
    results.append(("encoder", encoder_check(tol, seed)))
    for r in routing_iters:
        results.append((f"route_r{r}", routing_check(r, tol, seed)))
        results.append((f"arcnet_r{r}", model_check(r, tol, seed)))
    return results
