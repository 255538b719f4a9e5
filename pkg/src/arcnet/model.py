"""Full model: shared encoder -> squash -> routed class capsules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capsules import CapsuleLayerParams, route
from .encoder import CAPSULES_PER_IMU, EncoderParams, encode_all
from .numerics import Tensor, norm, squash


@dataclass
class ModelParams:
    encoder: EncoderParams
    capsules: CapsuleLayerParams

    @property
    def n_imu(self) -> int:
        return self.capsules.n_in // CAPSULES_PER_IMU

    @property
    def n_classes(self) -> int:
        return self.capsules.n_out

    def tensors(self) -> dict:
        """Learnable tensors keyed by stable names, in serialization order."""
        return {**self.encoder.tensors(), **self.capsules.tensors()}

    def copy(self) -> "ModelParams":
        enc = EncoderParams(*(Tensor(t.data.copy(), dtype=t.dtype) for t in self.encoder.tensors().values()))
        caps = self.capsules
        W = Tensor(caps.W.data.copy(), dtype=caps.W.dtype)
        b = Tensor(caps.b.data.copy(), dtype=caps.b.dtype)
        return ModelParams(enc, CapsuleLayerParams(W, b, caps.r, caps.eta))

    @classmethod
    def init(cls, rng: np.random.Generator, n_imu: int, n_classes: int, *, channels=(64, 96, 96),
             d_out: int = 16, r: int = 3, eta: float = 0.1, dtype=np.float32) -> "ModelParams":
        enc = EncoderParams.init(rng, channels, dtype=dtype)
        caps = CapsuleLayerParams.init(rng, CAPSULES_PER_IMU * n_imu, n_classes, d_in=channels[2],
                                       d_out=d_out, r=r, eta=eta, dtype=dtype)
        return cls(enc, caps)


def forward(params: ModelParams, batch: Tensor):
    """[B, n_imu, 6, 128] -> (class-capsule norms [B, C], output capsules, routing trace)."""
    primary = squash(encode_all(batch, params.encoder))
    V, trace = route(primary, params.capsules)
    return norm(V), V, trace
