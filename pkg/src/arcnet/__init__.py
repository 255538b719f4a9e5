"""Capsule routing over a shared per-IMU CNN encoder for activity recognition."""
from .capsules import CapsuleLayerParams, RoutingTrace, predict, route
from .datasets import DatasetSplit, ImuWindow, SyntheticSpec, WindowSet, synth_generate
from .encoder import EncoderParams, encode_all, encode_imu
from .loss_metrics import EvalReport, MarginConfig, classification_report, margin_loss, weighted_f1
from .model import ModelParams, forward
from .numerics import Tape, Tensor, grad_check
from .training import Checkpoint, TrainConfig, ensemble_vote, train

__version__ = "0.1.0"
