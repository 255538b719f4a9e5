"""Evaluation reports, modality-corruption test and prior-matrix heatmaps."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import WindowSet
from .encoder import CAPSULES_PER_IMU
from .loss_metrics import EvalReport, classification_report
from .training import as_params, ensemble_vote, predict_norms


def evaluate(model, split: WindowSet, class_names=(), batch_size: int = 64) -> EvalReport:
    """Report for one model (params, checkpoint or path) or, for a list, the ensemble."""
    models = list(model) if isinstance(model, (list, tuple)) else [model]
    models = [as_params(m) for m in models]
    n_classes = models[0].n_classes
    if class_names and len(class_names) != n_classes:
        raise ValueError(f"checkpoint has {n_classes} classes, data has {len(class_names)}")
    if len(split) and split.y.max() >= n_classes:
        raise ValueError(f"labels exceed the checkpoint's {n_classes} classes")
    if len(models) == 1:
        pred = np.argmax(predict_norms(models[0], split.X, batch_size), axis=1)
    else:
        pred = ensemble_vote(models, split.X, batch_size)
    return classification_report(pred, split.y, n_classes, class_names)


# ---------------------------------------------------------------------------
# modality corruption


def corrupt_modality(batch: np.ndarray, rng: np.random.Generator, p: float = 1.0):
    """Zero one uniformly chosen IMU slab per sample.

    Returns ``(corrupted copy, chosen indices)``; the index is -1 for
    samples left intact, which only happens when ``p < 1``.
    """
    batch = np.asarray(batch)
    n_imu = batch.shape[1]
    if n_imu < 2:
        raise ValueError("modality corruption needs at least two IMUs")
    chosen = rng.integers(0, n_imu, size=len(batch))
    if p < 1:
        chosen = np.where(rng.random(len(batch)) < p, chosen, -1)
    out = batch.copy()
    hit = np.flatnonzero(chosen >= 0)
    out[hit, chosen[hit]] = 0
    return out, chosen


@dataclass
class CorruptionResult:
    clean: EvalReport
    corrupted: EvalReport
    chosen: np.ndarray

    @property
    def delta_wf1(self) -> float:
        return 100.0 * (self.clean.wf1 - self.corrupted.wf1)

    @property
    def delta_accuracy(self) -> float:
        return 100.0 * (self.clean.accuracy - self.corrupted.accuracy)

    def to_csv(self) -> str:
        return ("# clean\n" + self.clean.to_csv() + "# corrupted\n" + self.corrupted.to_csv()
                + "# deltas (percentage points)\n"
                + f"delta_wf1,{self.delta_wf1!r}\ndelta_accuracy,{self.delta_accuracy!r}\n")


def run_corruption_test(model, test: WindowSet, seed: int = 0, class_names=(), p: float = 1.0,
                        batch_size: int = 64) -> CorruptionResult:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    X, chosen = corrupt_modality(test.X, rng, p)
    clean = evaluate(model, test, class_names, batch_size)
    corrupted = evaluate(model, WindowSet(X, test.y, test.subjects), class_names, batch_size)
    return CorruptionResult(clean, corrupted, chosen)


# ---------------------------------------------------------------------------
# prior heatmap


@dataclass
class PriorHeatmap:
    matrix: np.ndarray  # [n_imu, C], each column min-max scaled to [0, 1]
    imu_names: tuple
    class_names: tuple

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["imu"] + list(self.class_names))
        for name, row in zip(self.imu_names, self.matrix):
            w.writerow([name] + [repr(float(v)) for v in row])
        return buf.getvalue()

    def to_pgm(self, cell: int = 16) -> bytes:
        """Binary 8-bit graymap, one ``cell`` x ``cell`` block per entry (white = 1)."""
        img = np.round(self.matrix * 255).astype(np.uint8)
        img = np.kron(img, np.ones((cell, cell), dtype=np.uint8))
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()

    def save(self, stem) -> tuple:
        stem = Path(stem)
        csv_path, pgm_path = stem.with_suffix(".csv"), stem.with_suffix(".pgm")
        csv_path.write_text(self.to_csv())
        pgm_path.write_bytes(self.to_pgm())
        return csv_path, pgm_path


def prior_heatmap(b: np.ndarray, n_imu: int, reduce: str = "mean") -> np.ndarray:
    """Aggregate [12*n_imu, C] prior logits per IMU, then min-max each column.

    Constant columns map to zero.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != CAPSULES_PER_IMU * n_imu:
        raise ValueError(f"prior has {b.shape[0]} rows, expected {CAPSULES_PER_IMU * n_imu}")
    blocks = b.reshape(n_imu, CAPSULES_PER_IMU, -1)
    if reduce == "mean":
        agg = blocks.mean(axis=1)
    elif reduce == "max":
        agg = blocks.max(axis=1)
    else:
        raise ValueError(f"unknown reduction {reduce!r}")
    lo, hi = agg.min(axis=0), agg.max(axis=0)
    span = hi - lo
    return np.divide(agg - lo, span, out=np.zeros_like(agg), where=span > 0)


def export_prior_heatmap(model, imu_names, class_names=(), reduce: str = "mean") -> PriorHeatmap:
    params = as_params(model)
    b = params.capsules.b.data
    n_imu = len(imu_names)
    if b.shape[0] != CAPSULES_PER_IMU * n_imu:
        raise ValueError(f"{len(imu_names)} IMU names for a prior with {b.shape[0]} capsule rows")
    if class_names and len(class_names) != b.shape[1]:
        raise ValueError(f"{len(class_names)} class names for {b.shape[1]} classes")
    names = tuple(class_names) or tuple(str(j) for j in range(b.shape[1]))
    return PriorHeatmap(prior_heatmap(b, n_imu, reduce), tuple(imu_names), names)
