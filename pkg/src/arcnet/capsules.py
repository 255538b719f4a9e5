"""Capsule layer with soft-updated dynamic routing and a learnable prior.

Routing for one sample, with predictions u_hat[i, j] = U[i] @ W[i, j]:

    b_work = b                      (private copy of the learned prior)
    c = softmax_rows(b_work)
    repeat r times:
        c = eta * softmax_rows(b_work) + c
        s[j] = sum_i c[i, j] * u_hat[i, j]
        V[j] = squash(s[j])
        b_work[i, j] += V[j] . u_hat[i, j]

The persistent ``b`` only changes through gradient descent; gradients flow
through every routing iteration.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (DimensionError, Tensor, add, contract, expand, matmul, norm, reshape,
                       scale, softmax_rows, squash, transpose)

__all__ = ["CapsuleLayerParams", "RoutingTrace", "route", "predict", "squash"]


@dataclass
class CapsuleLayerParams:
    W: Tensor  # [N_in, N_out, D_in, D_out]
    b: Tensor  # [N_in, N_out]
    r: int = 3
    eta: float = 0.1

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"routing iterations must be >= 1, got {self.r}")
        if not self.eta > 0:
            raise ValueError(f"soft-update coefficient must be positive, got {self.eta}")
        n_in, n_out = self.W.shape[:2]
        if self.b.shape != (n_in, n_out):
            raise DimensionError(f"prior shape {self.b.shape} != {(n_in, n_out)}")

    @property
    def n_in(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.shape[1]

    def tensors(self) -> dict:
        return {"capsule.W": self.W, "capsule.b": self.b}

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, d_in: int = 96,
             d_out: int = 16, r: int = 3, eta: float = 0.1, dtype=np.float32) -> "CapsuleLayerParams":
        bound = np.sqrt(1.0 / d_in)
        W = Tensor(rng.uniform(-bound, bound, (n_in, n_out, d_in, d_out)), dtype=dtype)
        b = Tensor(np.zeros((n_in, n_out)), dtype=dtype)
        return cls(W, b, r, eta)


@dataclass
class RoutingTrace:
    coupling: np.ndarray                             # [B, N_in, N_out] accumulated c
    increments: list = field(default_factory=list)   # r arrays [B, N_in, N_out]
    outputs: np.ndarray | None = None                # [B, N_out, D_out]


def predictions(U: Tensor, W: Tensor) -> Tensor:
    """u_hat[b, i, j] = U[b, i] @ W[i, j]  ->  [B, N_in, N_out, D_out]."""
    B, n_in, d_in = U.shape
    n_in_w, n_out, d_in_w, d_out = W.shape
    if (n_in, d_in) != (n_in_w, d_in_w):
        raise DimensionError(f"capsules {U.shape} incompatible with transform {W.shape}")
    u = transpose(U, (1, 0, 2))                                         # [N_in, B, D_in]
    w = reshape(transpose(W, (0, 2, 1, 3)), (n_in, d_in, n_out * d_out))
    uh = matmul(u, w)                                                   # [N_in, B, N_out*D_out]
    return transpose(reshape(uh, (n_in, B, n_out, d_out)), (1, 0, 2, 3))


def route(U: Tensor, params: CapsuleLayerParams):
    """Route squashed primary capsules [B, N_in, D_in] (or unbatched [N_in, D_in]).

    Returns ``(V, trace)`` with V of shape [B, N_out, D_out].
    """
    if params.r < 1:
        raise ValueError("routing needs at least one iteration")
    single = U.data.ndim == 2
    if single:
        U = reshape(U, (1,) + U.shape)
    B = U.shape[0]
    u_hat = predictions(U, params.W)
    b_work = expand(params.b, B)
    c = softmax_rows(b_work)
    trace = RoutingTrace(coupling=None)
    V = None
    for _ in range(params.r):
        c = add(scale(softmax_rows(b_work), params.eta), c)
        s = contract("bij,bijd->bjd", c, u_hat)
        V = squash(s)
        delta = contract("bjd,bijd->bij", V, u_hat)
        trace.increments.append(delta.data.copy())
        b_work = add(b_work, delta)
    trace.coupling = c.data.copy()
    trace.outputs = V.data.copy()
    if single:
        V = reshape(V, V.shape[1:])
        trace.coupling = trace.coupling[0]
        trace.increments = [d[0] for d in trace.increments]
        trace.outputs = trace.outputs[0]
    return V, trace


def capsule_norms(V: Tensor) -> Tensor:
    return norm(V)


def predict(V):
    """Class index (lowest index on ties) and per-class norms.

    Accepts [N_out, D_out] or batched [B, N_out, D_out].
    """
    v = V.data if isinstance(V, Tensor) else np.asarray(V)
    scores = np.sqrt((v.astype(np.float64) ** 2).sum(axis=-1))
    return np.argmax(scores, axis=-1), scores
