"""Training loop, Adam updates, ARCC checkpoints and the horizontal voting ensemble.

Determinism: parameter init draws from ``PCG64(SeedSequence([seed]))`` and the
shuffle for epoch ``e`` from ``PCG64(SeedSequence([seed, e]))`` (numpy's
``Generator`` API, stable across numpy >= 1.17). With ``threads = 1`` two
runs with the same config write byte-identical checkpoints.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .capsules import CapsuleLayerParams
from .datasets import DatasetSplit, WindowSet
from .encoder import EncoderParams
from .loss_metrics import MarginConfig, margin_loss
from .model import ModelParams, forward
from .numerics import NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)

ROUTING_DEFAULTS = {"pamap2": (3, 0.1), "realworld": (7, 0.01), "synth": (3, 0.1)}


class TrainingError(FloatingPointError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    dataset: str = "synth"
    batch_size: int = 64
    epochs: int = 200
    initial_lr: float = 1e-3
    lr_decay: float = 0.98
    routing_iters: int | None = None   # per-dataset default when None
    eta: float | None = None
    seed: int = 0
    ensemble_k: int = 5
    d_out: int = 16
    channels: tuple = (64, 96, 96)
    m_plus: float = 0.95
    m_minus: float = 0.05
    lambda_down: float = 0.5
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        r, eta = ROUTING_DEFAULTS.get(self.dataset, (3, 0.1))
        if self.routing_iters is None:
            self.routing_iters = r
        if self.eta is None:
            self.eta = eta
        self.channels = tuple(self.channels)

    @property
    def margins(self) -> MarginConfig:
        return MarginConfig(self.m_plus, self.m_minus, self.lambda_down)

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * self.lr_decay ** epoch

    def hash(self) -> bytes:
        """SHA-256 over the settings that shape the trained weights."""
        d = dataclasses.asdict(self)
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, applied in place to ``params`` arrays."""
    if params.keys() != grads.keys():
        raise ValueError("parameter and gradient names differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# checkpoints

ARCC_MAGIC = b"ARCC"
ARCC_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict          # name -> float32 ndarray (rank 0 allowed)
    epoch: int = 0
    val_loss: float = float("nan")
    config_hash: bytes = bytes(32)

    def to_bytes(self) -> bytes:
        out = [ARCC_MAGIC, struct.pack("<II", ARCC_VERSION, len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            out.append(struct.pack("<H", len(raw)) + raw)
            out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(arr.tobytes())
        if len(self.config_hash) != 32:
            raise ValueError("config hash must be 32 bytes")
        out.append(struct.pack("<If", self.epoch, self.val_loss) + self.config_hash)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != ARCC_MAGIC:
            raise ValueError("not an ARCC checkpoint")
        version, count = struct.unpack_from("<II", buf, 4)
        if version != ARCC_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 12
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{rank}Q", buf, pos + 1)
            pos += 1 + 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
        epoch, val_loss = struct.unpack_from("<If", buf, pos)
        config_hash = buf[pos + 8:pos + 40]
        if len(config_hash) != 32 or pos + 40 != len(buf):
            raise ValueError("truncated or oversized checkpoint footer")
        return cls(tensors, epoch, float(val_loss), config_hash)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _f32_value(x) -> float:
    # shortest decimal that round-trips the stored float32, e.g. 0.1 not 0.100000001
    return float(str(np.float32(np.asarray(x).item())))


def params_to_checkpoint(params: ModelParams, epoch=0, val_loss=float("nan"), config_hash=bytes(32)):
    tensors = {k: t.data for k, t in params.tensors().items()}
    tensors["meta.routing_iters"] = np.float32(params.capsules.r)
    tensors["meta.eta"] = np.float32(params.capsules.eta)
    return Checkpoint(tensors, epoch, val_loss, config_hash)


def checkpoint_to_params(ckpt: Checkpoint) -> ModelParams:
    t = ckpt.tensors
    try:
        enc = EncoderParams(*(Tensor(t[f"encoder.{k}"]) for k in ("w1", "b1", "w2", "b2", "w3", "b3")))
        caps = CapsuleLayerParams(Tensor(t["capsule.W"]), Tensor(t["capsule.b"]),
                                  int(np.asarray(t["meta.routing_iters"]).item()), _f32_value(t["meta.eta"]))
    except KeyError as exc:
        raise ValueError(f"checkpoint lacks tensor {exc}") from None
    return ModelParams(enc, caps)


def as_params(model) -> ModelParams:
    if isinstance(model, ModelParams):
        return model
    if isinstance(model, Checkpoint):
        return checkpoint_to_params(model)
    return checkpoint_to_params(Checkpoint.load(model))


# ---------------------------------------------------------------------------
# inference


def predict_norms(params: ModelParams, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class-capsule norms [N, C] for windows [N, n_imu, 6, 128]."""
    if len(X) == 0:
        return np.zeros((0, params.n_classes), np.float32)
    if X.shape[1] != params.n_imu:
        raise ValueError(f"model expects {params.n_imu} IMUs, data has {X.shape[1]}")
    out = [forward(params, Tensor(X[i:i + batch_size]))[0].data for i in range(0, len(X), batch_size)]
    return np.concatenate(out)


def evaluate_loss(params: ModelParams, ws: WindowSet, margins: MarginConfig, batch_size=64):
    """(mean margin loss, accuracy, predictions) over a window set."""
    norms = predict_norms(params, ws.X, batch_size)
    if len(norms) == 0:
        return float("nan"), float("nan"), np.zeros(0, np.int64)
    loss = float(margin_loss(Tensor(norms), ws.y, margins).data)
    pred = np.argmax(norms, axis=1)
    return loss, float((pred == ws.y).mean()), pred


def sum_vote(scores) -> np.ndarray:
    """Argmax of per-class scores summed over models; ``scores`` is [K, N, C]."""
    total = np.sum(np.asarray(scores, dtype=np.float64), axis=0)
    return np.argmax(total, axis=1)


def ensemble_vote(checkpoints, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Sum class-capsule norms over checkpoints, then argmax (lowest index on ties)."""
    models = [as_params(c) for c in checkpoints]
    if not models:
        raise ValueError("ensemble needs at least one checkpoint")
    ref = {k: t.shape for k, t in models[0].tensors().items()}
    for m in models[1:]:
        shapes = {k: t.shape for k, t in m.tensors().items()}
        if shapes != ref:
            raise ValueError("ensemble checkpoints have incompatible tensor shapes")
    return sum_vote([predict_norms(m, X, batch_size) for m in models])


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    history: list                # dicts with the metrics-log columns
    checkpoints: list            # retained top-k paths, best first
    out_dir: Path | None = None


METRIC_COLUMNS = ("epoch", "train_loss", "val_loss", "val_acc", "lr")


def write_metrics(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_COLUMNS[1:]])


def read_metrics(path) -> list:
    with open(path) as f:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


def init_params(config: TrainConfig, n_imu: int, n_classes: int) -> ModelParams:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed])))
    return ModelParams.init(rng, n_imu, n_classes, channels=config.channels, d_out=config.d_out,
                            r=config.routing_iters, eta=config.eta)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch]))).permutation(n)


def train(config: TrainConfig, data: DatasetSplit, out_dir=None, params: ModelParams | None = None,
          callback=None) -> TrainResult:
    """Run the epoch loop; writes checkpoints and ``metrics.csv`` if ``out_dir`` is given.

    ``callback(epoch, row, params)`` is invoked after each epoch; returning
    True stops training early.
    """
    if len(data.train) == 0:
        raise ValueError("training split is empty")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    if params is None:
        params = init_params(config, data.n_imu, data.n_classes)
    named = params.tensors()
    state = AdamState()
    margins = config.margins
    chash = config.hash()
    history, kept = [], []  # kept: (val_loss, epoch, path)
    X, y = data.train.X, data.train.y

    with threadpool_limits(limits=config.threads):
        for epoch in range(config.epochs):
            lr = config.lr_at(epoch)
            order = epoch_order(config.seed, epoch, len(y))
            total = 0.0
            for batch_id, start in enumerate(range(0, len(y), config.batch_size)):
                idx = order[start:start + config.batch_size]
                try:
                    with Tape() as tape:
                        norms, _, _ = forward(params, Tensor(X[idx]))
                        loss = margin_loss(norms, y[idx], margins)
                    grads = tape.gradient(loss, list(named.values()))
                except NonFiniteError as exc:
                    _dump_bad_batch(out_dir, epoch, batch_id, idx)
                    raise TrainingError(f"epoch {epoch} batch {batch_id}: {exc}", epoch, batch_id) from exc
                if not all(np.all(np.isfinite(g)) for g in grads) or not np.isfinite(loss.data):
                    _dump_bad_batch(out_dir, epoch, batch_id, idx)
                    raise TrainingError(f"epoch {epoch} batch {batch_id}: non-finite loss or gradient",
                                        epoch, batch_id)
                total += float(loss.data) * len(idx)
                optimizer_step({k: t.data for k, t in named.items()},
                               dict(zip(named, grads)), state, lr)
            train_loss = total / len(y)
            if len(data.validation):
                val_loss, val_acc, _ = evaluate_loss(params, data.validation, margins, config.batch_size)
            else:
                val_loss, val_acc = train_loss, float("nan")
            row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                   "val_acc": val_acc, "lr": lr}
            history.append(row)
            log.info("epoch %d train_loss %.5f val_loss %.5f val_acc %.4f lr %.3g",
                     epoch, train_loss, val_loss, val_acc, lr)
            if out_dir is not None:
                ckpt = params_to_checkpoint(params, epoch, val_loss, chash)
                ckpt.save(out_dir / "last.arcc")
                kept = _retain(out_dir, kept, ckpt, config.ensemble_k)
                write_metrics(out_dir / "metrics.csv", history)
            if callback is not None and callback(epoch, row, params):
                break
    return TrainResult(params, history, [p for _, _, p in kept], out_dir)


def _retain(out_dir: Path, kept: list, ckpt: Checkpoint, k: int) -> list:
    """Keep the ``k`` lowest-validation-loss epoch checkpoints on disk."""
    if k <= 0:
        return kept
    key = ckpt.val_loss if np.isfinite(ckpt.val_loss) else np.inf
    cand = sorted(kept + [(key, ckpt.epoch, out_dir / f"epoch_{ckpt.epoch:04d}.arcc")],
                  key=lambda e: (e[0], e[1]))
    keep, drop = cand[:k], cand[k:]
    for _, epoch, path in keep:
        if epoch == ckpt.epoch:
            ckpt.save(path)
    for _, _, path in drop:
        if path.exists():
            path.unlink()
    return keep


def _dump_bad_batch(out_dir, epoch, batch_id, idx):
    if out_dir is None:
        return
    with open(Path(out_dir) / "nonfinite_batch.txt", "w") as f:
        f.write(f"epoch {epoch} batch {batch_id}\n")
        f.write(" ".join(str(int(i)) for i in idx) + "\n")
