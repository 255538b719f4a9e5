"""Shared per-IMU convolutional encoder.

One IMU window is a 6x128 slab (rows: accel x/y/z, gyro x/y/z; columns:
time). Three valid convolutions turn it into 12 primary capsules:

    L1  (1x9)  stride (1,1)  -> C1 x 6 x 120   per-row filtering
    L2  (3x20) stride (3,4)  -> C2 x 2 x 26    accel rows and gyro rows kept apart
    L3  (2x15) stride (1,1)  -> C3 x 1 x 12    fuses the two sensor modules

Each of the 12 remaining time positions becomes one capsule whose vector is
the C3 channel values at that position.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, Tensor, conv2d, relu, reshape, transpose

WINDOW_ROWS = 6
WINDOW_LEN = 128
CAPSULES_PER_IMU = 12

L1_KERNEL, L1_STRIDE = (1, 9), (1, 1)
L2_KERNEL, L2_STRIDE = (3, 20), (3, 4)
L3_KERNEL, L3_STRIDE = (2, 15), (1, 1)


@dataclass
class EncoderParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    @property
    def capsule_dim(self) -> int:
        return self.w3.shape[0]

    def tensors(self) -> dict:
        return {f"encoder.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2", "w3", "b3")}

    @classmethod
    def init(cls, rng: np.random.Generator, channels=(64, 96, 96), dtype=np.float32) -> "EncoderParams":
        """Uniform init in +-sqrt(1/fan_in) for kernels and biases."""
        c1, c2, c3 = channels
        shapes = [(c1, 1) + L1_KERNEL, (c2, c1) + L2_KERNEL, (c3, c2) + L3_KERNEL]
        parts = []
        for shape in shapes:
            bound = np.sqrt(1.0 / np.prod(shape[1:]))
            parts.append(Tensor(rng.uniform(-bound, bound, shape), dtype=dtype))
            parts.append(Tensor(rng.uniform(-bound, bound, shape[0]), dtype=dtype))
        return cls(*parts)


def encode_layers(x: Tensor, params: EncoderParams):
    """Run the three conv layers on a [B, 1, 6, 128] batch; return all activations."""
    h1 = relu(conv2d(x, params.w1, params.b1, L1_STRIDE))
    h2 = relu(conv2d(h1, params.w2, params.b2, L2_STRIDE))
    h3 = conv2d(h2, params.w3, params.b3, L3_STRIDE)
    return h1, h2, h3


def encode_imu(window: Tensor, params: EncoderParams) -> Tensor:
    """Encode one 6x128 slab into a [12, C3] capsule matrix."""
    if window.shape != (WINDOW_ROWS, WINDOW_LEN):
        raise DimensionError(f"expected a {WINDOW_ROWS}x{WINDOW_LEN} IMU window, got {window.shape}")
    out = encode_all(reshape(window, (1, 1, WINDOW_ROWS, WINDOW_LEN)), params)
    return reshape(out, out.shape[1:])


def encode_all(batch: Tensor, params: EncoderParams) -> Tensor:
    """[B, n_imu, 6, 128] -> [B, 12*n_imu, C3], capsule blocks in IMU order."""
    if batch.data.ndim != 4 or batch.shape[2:] != (WINDOW_ROWS, WINDOW_LEN):
        raise DimensionError(f"expected [B, n_imu, {WINDOW_ROWS}, {WINDOW_LEN}], got {batch.shape}")
    B, n_imu = batch.shape[:2]
    x = reshape(batch, (B * n_imu, 1, WINDOW_ROWS, WINDOW_LEN))
    h3 = encode_layers(x, params)[2]  # [B*n, C3, 1, 12]
    c3 = h3.shape[1]
    caps = transpose(reshape(h3, (B, n_imu, c3, CAPSULES_PER_IMU)), (0, 1, 3, 2))
    return reshape(caps, (B, n_imu * CAPSULES_PER_IMU, c3))
