"""``arcnet`` command line: prepare, synth, train, evaluate, corrupt, priors, gradcheck.

Settings come from ``--config FILE`` (``key = value`` lines, ``#`` comments)
and are overridden by flags. Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.
Every failure prints one line ``error kind=<usage|data|numeric> msg="..."``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datasets as ds
from .checks import run_suite
from .experiments import evaluate, export_prior_heatmap, run_corruption_test
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("prepare", "synth", "train", "evaluate", "corrupt", "priors", "gradcheck")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: str = "synth"            # pamap2 | realworld | synth
    raw_dir: str = ""                 # raw dataset directory (prepare)
    data: str = ""                    # ARCD container path
    out: str = ""                     # output file (prepare, synth) or directory
    checkpoint: str = ""              # comma-separated checkpoint files or directories
    split: str = "test"               # train | validation | test
    seed: int = 0
    threads: int = 1
    deterministic: bool = True        # forces threads = 1
    epochs: int = 200
    batch_size: int = 64
    initial_lr: float = 1e-3
    lr_decay: float = 0.98
    routing_iters: int = 0            # 0: dataset default (pamap2 3, realworld 7)
    eta: float = 0.0                  # 0: dataset default (pamap2 0.1, realworld 0.01)
    ensemble_k: int = 5
    d_out: int = 16
    m_plus: float = 0.95
    m_minus: float = 0.05
    tol: float = 1e-3
    corrupt_prob: float = 1.0         # diagnostic: 0 leaves every sample intact
    reduce: str = "mean"              # prior heatmap aggregation: mean | max
    imu_names: str = ""               # comma-separated; dataset default when empty
    n_imu: int = 2                    # synth
    n_classes: int = 4                # synth
    windows_per_class: int = 50       # synth
    n_subjects: int = 5               # synth
    noise: float = 0.3                # synth

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            dataset=self.dataset, batch_size=self.batch_size, epochs=self.epochs,
            initial_lr=self.initial_lr, lr_decay=self.lr_decay,
            routing_iters=self.routing_iters or None, eta=self.eta or None, seed=self.seed,
            ensemble_k=self.ensemble_k, d_out=self.d_out, m_plus=self.m_plus, m_minus=self.m_minus,
            threads=1 if self.deterministic else self.threads)

    def synthetic_spec(self) -> ds.SyntheticSpec:
        return ds.SyntheticSpec(self.n_imu, self.n_classes, self.windows_per_class, self.seed,
                                self.n_subjects, self.noise)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value: str):
    kind = type(getattr(RunConfig, key))
    if kind is bool:
        low = value.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise UsageError(f"{key}: expected a boolean, got {value!r}")
        return low in ("1", "true", "yes")
    try:
        return kind(value)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def parse_config_file(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="arcnet", description="capsule fusion of IMU windows for activity recognition")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--dataset", choices=sorted(ds.SPLITS))
    p.add_argument("--raw-dir")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "validation", "test"))
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--routing-iters", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--ensemble-k", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--corrupt-prob", type=float)
    p.add_argument("--reduce", choices=("mean", "max"))
    p.add_argument("--imu-names")
    return p


def load_run_config(argv) -> tuple:
    args = build_parser().parse_args(argv)
    settings = {}
    if args.config:
        try:
            settings.update(parse_config_file(Path(args.config).read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    for key in _FIELDS:
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = val
    return args.command, RunConfig(**settings)


def _require(cfg: RunConfig, *keys):
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load_split(cfg: RunConfig) -> ds.DatasetSplit:
    windows, names = ds.read_arcd(cfg.data)
    return ds.split_subjects(windows, cfg.dataset, names)


def _checkpoints(cfg: RunConfig) -> list:
    paths = []
    for item in filter(None, (s.strip() for s in cfg.checkpoint.split(","))):
        p = Path(item)
        if p.is_dir():
            found = sorted(p.glob("epoch_*.arcc")) or sorted(p.glob("last.arcc"))
            if not found:
                raise FileNotFoundError(f"no checkpoints in {p}")
            paths.extend(found)
        elif p.exists():
            paths.append(p)
        else:
            raise FileNotFoundError(f"checkpoint not found: {p}")
    return paths


def _imu_names(cfg: RunConfig, n_imu: int) -> tuple:
    if cfg.imu_names:
        return tuple(s.strip() for s in cfg.imu_names.split(","))
    defaults = {"pamap2": ds.PAMAP2_IMUS, "realworld": ds.REALWORLD_POSITIONS}
    names = defaults.get(cfg.dataset)
    if names and len(names) == n_imu:
        return names
    return tuple(f"imu{m}" for m in range(n_imu))


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run(command: str, cfg: RunConfig) -> int:
    if command == "prepare":
        _require(cfg, "raw_dir", "out")
        if cfg.dataset == "synth":
            raise UsageError("prepare reads raw pamap2 or realworld data; use 'synth' for synthetic data")
        windows, names, _, warnings = ds.prepare(cfg.dataset, cfg.raw_dir)
        ds.write_arcd(cfg.out, windows, names)
        print(json.dumps({"windows": len(windows), "skipped_segments": windows.skipped,
                          "warnings": len(warnings), "out": cfg.out}))
    elif command == "synth":
        _require(cfg, "out")
        windows, names, _ = ds.synth_windows(cfg.synthetic_spec())
        ds.write_arcd(cfg.out, windows, names)
        print(json.dumps({"windows": len(windows), "out": cfg.out}))
    elif command == "train":
        _require(cfg, "data", "out")
        split = _load_split(cfg)
        result = train(cfg.train_config(), split, _out_dir(cfg))
        last = result.history[-1]
        print(json.dumps({"epochs": len(result.history), "val_loss": last["val_loss"],
                          "val_acc": last["val_acc"], "checkpoints": [str(p) for p in result.checkpoints]}))
    elif command == "evaluate":
        _require(cfg, "data", "checkpoint", "out")
        split = _load_split(cfg)
        report = evaluate(_checkpoints(cfg), getattr(split, cfg.split), split.class_names, cfg.batch_size)
        path = _out_dir(cfg) / f"report_{cfg.split}.csv"
        path.write_text(report.to_csv())
        print(json.dumps({**report.metrics(), "out": str(path)}))
    elif command == "corrupt":
        _require(cfg, "data", "checkpoint", "out")
        split = _load_split(cfg)
        res = run_corruption_test(_checkpoints(cfg), getattr(split, cfg.split), cfg.seed,
                                  split.class_names, cfg.corrupt_prob, cfg.batch_size)
        path = _out_dir(cfg) / "corruption.csv"
        path.write_text(res.to_csv())
        print(json.dumps({"delta_wf1": res.delta_wf1, "delta_accuracy": res.delta_accuracy, "out": str(path)}))
    elif command == "priors":
        _require(cfg, "checkpoint", "out")
        ckpts = _checkpoints(cfg)
        from .training import as_params
        params = as_params(ckpts[-1])
        class_names = ()
        if cfg.data:
            class_names = ds.read_arcd(cfg.data)[1]
        hm = export_prior_heatmap(params, _imu_names(cfg, params.n_imu), class_names, cfg.reduce)
        csv_path, pgm_path = hm.save(_out_dir(cfg) / "priors")
        print(json.dumps({"csv": str(csv_path), "pgm": str(pgm_path)}))
    elif command == "gradcheck":
        results = run_suite(cfg.tol, cfg.seed)
        for name, report in results:
            print(f"{name}: {report}")
        if not all(r.passed for _, r in results):
            failed = [n for n, r in results if not r.passed]
            raise FloatingPointError(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


def _fail(kind: str, msg: str, code: int) -> int:
    print(f"error kind={kind} msg={json.dumps(str(msg))}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, cfg = load_run_config(argv)
        return run(command, cfg)
    except UsageError as exc:
        print(build_parser().format_usage().rstrip(), file=sys.stderr)
        return _fail("usage", exc, EXIT_USAGE)
    except FloatingPointError as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except (OSError, ValueError, IndexError) as exc:
        return _fail("data", exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
