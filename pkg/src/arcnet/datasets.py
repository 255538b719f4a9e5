"""Raw IMU recordings -> windowed, subject-split sample sets.

Streams are kept as lists of contiguous, single-label :class:`Segment`
objects so that windowing can never straddle an activity change or a
dropped stretch of samples. Channels are ordered per IMU as accel x/y/z
followed by gyro x/y/z.
"""
from __future__ import annotations

import io
import logging
import re
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

WINDOW_LEN = 128
OVERLAP = 0.6
TARGET_RATE = 50

# activity id -> name; the 12 protocol activities, in class-index order
PAMAP2_ACTIVITIES = {
    1: "lying", 2: "sitting", 3: "standing", 4: "walking", 5: "running", 6: "cycling",
    7: "nordic_walking", 12: "ascending_stairs", 13: "descending_stairs",
    16: "vacuum_cleaning", 17: "ironing", 24: "rope_jumping",
}
PAMAP2_IMUS = ("chest", "hand", "ankle")
# first column of each 17-column IMU block in the 54-column .dat rows
_PAMAP2_BLOCK = {"hand": 3, "chest": 20, "ankle": 37}
_PAMAP2_ACC16 = (1, 2, 3)
_PAMAP2_GYRO = (7, 8, 9)
PAMAP2_COLUMNS = 54
PAMAP2_RATE = 100

REALWORLD_POSITIONS = ("chest", "forearm", "head", "shin", "thigh", "upperarm", "waist")
REALWORLD_ACTIVITIES = ("climbingdown", "climbingup", "jumping", "lying",
                        "running", "sitting", "standing", "walking")
REALWORLD_RATE = 50

SPLITS = {
    # dataset: (validation subject, test subject)
    "pamap2": (5, 1),
    "realworld": (10, 11),
    "synth": (2, 1),
}


class ParseError(ValueError):
    pass


class UnsupportedRateError(ValueError):
    pass


@dataclass
class Segment:
    """Contiguous single-activity recording: data is [T, n_channels]."""
    subject: int
    label: int
    data: np.ndarray
    rate: int

    def __len__(self):
        return len(self.data)


@dataclass
class Streams:
    segments: list
    class_names: tuple
    imu_names: tuple
    rate: int
    warnings: list = field(default_factory=list)


@dataclass
class ImuWindow:
    data: np.ndarray  # [n_imu, 6, 128]
    label: int
    subject: int


@dataclass
class WindowSet:
    """Column-wise window storage; indexing yields :class:`ImuWindow`."""
    X: np.ndarray          # [N, n_imu, 6, 128] float32
    y: np.ndarray          # [N] int64
    subjects: np.ndarray   # [N] int64
    skipped: int = 0

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> ImuWindow:
        return ImuWindow(self.X[i], int(self.y[i]), int(self.subjects[i]))

    @property
    def n_imu(self) -> int:
        return self.X.shape[1]

    def select(self, mask) -> "WindowSet":
        return WindowSet(self.X[mask], self.y[mask], self.subjects[mask])

    @classmethod
    def empty(cls, n_imu: int) -> "WindowSet":
        return cls(np.zeros((0, n_imu, 6, WINDOW_LEN), np.float32), np.zeros(0, np.int64),
                   np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts, n_imu: int) -> "WindowSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty(n_imu)
        return cls(np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                   np.concatenate([p.subjects for p in parts]), sum(p.skipped for p in parts))


@dataclass
class DatasetSplit:
    train: WindowSet
    validation: WindowSet
    test: WindowSet
    class_names: tuple
    channel_stats: tuple  # (mean, std), each [n_imu, 6], from train only

    @property
    def n_imu(self) -> int:
        return self.train.n_imu

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


# ---------------------------------------------------------------------------
# PAMAP2


def _find_pamap2_file(raw_dir: Path, subject: int) -> Path | None:
    name = f"subject{100 + subject}.dat"
    for cand in (raw_dir / name, raw_dir / "Protocol" / name):
        if cand.exists():
            return cand
    return None


def _load_dat(path: Path) -> np.ndarray:
    try:
        arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError:
        arr = None
    if arr is not None and arr.shape[1] == PAMAP2_COLUMNS:
        return arr
    # slow path, only to pinpoint the offending line
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != PAMAP2_COLUMNS:
                raise ParseError(f"{path}:{lineno}: expected {PAMAP2_COLUMNS} columns, got {len(fields)}")
            try:
                [float(v) for v in fields]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if arr is None:
        raise ParseError(f"{path}: unreadable")
    raise ParseError(f"{path}: expected {PAMAP2_COLUMNS} columns, got {arr.shape[1]}")


def _nan_runs(mask: np.ndarray):
    """(start, stop) index pairs of True runs."""
    d = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def repair_nans(data: np.ndarray, max_gap: int):
    """Linearly fill interior NaN runs of length <= ``max_gap`` per channel.

    Returns the repaired copy and a boolean mask of rows that still hold
    NaN (long or edge runs), which callers drop.
    """
    data = np.array(data, dtype=np.float64)
    bad = np.zeros(len(data), dtype=bool)
    idx = np.arange(len(data))
    for ch in range(data.shape[1]):
        col = data[:, ch]
        nan = np.isnan(col)
        if not nan.any():
            continue
        for a, b in _nan_runs(nan):
            if a == 0 or b == len(col) or b - a > max_gap:
                bad[a:b] = True
                continue
            col[a:b] = np.interp(idx[a:b], [a - 1, b], [col[a - 1], col[b]])
    return data, bad


def _split_rows(subject, labels, data, keep, rate, out):
    """Append maximal runs of kept rows sharing one label to ``out``."""
    breaks = np.flatnonzero((np.diff(labels) != 0) | ~keep[1:] | ~keep[:-1]) + 1
    start = 0
    for stop in list(breaks) + [len(labels)]:
        if stop > start and keep[start]:
            out.append(Segment(subject, int(labels[start]), data[start:stop], rate))
        start = stop


def parse_pamap2(raw_dir, subjects=range(1, 10), max_gap_s: float = 0.5) -> Streams:
    """Read PAMAP2 protocol files into per-subject 100 Hz segments.

    Keeps the +-16 g accelerometer and gyroscope of each IMU, drops
    transient (id 0) and non-protocol activities, and repairs NaN runs up
    to ``max_gap_s`` by linear interpolation.
    """
    raw_dir = Path(raw_dir)
    paths = {s: _find_pamap2_file(raw_dir, s) for s in subjects}
    missing = [f"subject{100 + s}.dat" for s, p in paths.items() if p is None]
    if missing:
        raise FileNotFoundError(f"missing PAMAP2 subject files in {raw_dir}: {', '.join(missing)}")
    class_ids = list(PAMAP2_ACTIVITIES)
    cols = [_PAMAP2_BLOCK[imu] + off for imu in PAMAP2_IMUS for off in _PAMAP2_ACC16 + _PAMAP2_GYRO]
    max_gap = int(round(max_gap_s * PAMAP2_RATE))
    segments = []
    for subject, path in paths.items():
        raw = _load_dat(path)
        act = raw[:, 1].astype(np.int64)
        known = np.isin(act, class_ids)
        labels = np.array([class_ids.index(a) if k else -1 for a, k in zip(act, known)])
        data = raw[:, cols]
        # repair within each activity run so interpolation never bridges labels
        edges = np.flatnonzero(np.diff(labels) != 0) + 1
        for a, b in zip(np.r_[0, edges], np.r_[edges, len(labels)]):
            if labels[a] < 0:
                continue
            fixed, bad = repair_nans(data[a:b], max_gap)
            _split_rows(subject, labels[a:b], fixed, ~bad, PAMAP2_RATE, segments)
    return Streams(segments, tuple(PAMAP2_ACTIVITIES.values()), PAMAP2_IMUS, PAMAP2_RATE)


# ---------------------------------------------------------------------------
# RealWorld

_RW_FILE = re.compile(r"^(acc|gyr|Gyroscope)_([a-z]+)_(?:(\d+)_)?([a-z]+)\.csv$", re.IGNORECASE)


def _read_rw_csv(text: str) -> tuple:
    """(timestamps ms, [T, 3] xyz) from an ``id,attr_time,attr_x,attr_y,attr_z`` CSV."""
    arr = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
    if arr.size == 0:
        return np.zeros(0), np.zeros((0, 3))
    order = np.argsort(arr[:, 1], kind="stable")
    return arr[order, 1], arr[order, 2:5]


def _scan_realworld_subject(subject_dir: Path) -> dict:
    """{(activity, part): {(position, 'acc'|'gyr'): (ts, xyz)}}."""
    found = {}

    def add(name, read):
        m = _RW_FILE.match(Path(name).name)
        if not m:
            return
        kind = "acc" if m.group(1).lower() == "acc" else "gyr"
        key = (m.group(2).lower(), int(m.group(3) or 1))
        found.setdefault(key, {})[(m.group(4).lower(), kind)] = _read_rw_csv(read())

    for path in sorted(subject_dir.rglob("*")):
        if path.suffix.lower() == ".csv":
            add(path.name, path.read_text)
        elif path.suffix.lower() == ".zip":
            with zipfile.ZipFile(path) as zf:
                for info in sorted(zf.infolist(), key=lambda i: i.filename):
                    if info.filename.lower().endswith(".csv"):
                        add(info.filename, lambda i=info: zf.read(i).decode())
    return found


def synchronize(streams, rate: int = REALWORLD_RATE):
    """Align (timestamps_ms, values) streams onto one clock by nearest sample.

    The common clock starts at the latest stream start and runs in
    1000/rate ms steps up to the earliest stream end. Returns the stacked
    [T, sum of channels] array (T may be 0).
    """
    period = 1000.0 / rate
    start = max(ts[0] if len(ts) else np.inf for ts, _ in streams)
    end = min(ts[-1] if len(ts) else -np.inf for ts, _ in streams)
    if not np.isfinite(start) or not np.isfinite(end) or end < start:
        width = sum(v.shape[1] for _, v in streams)
        return np.zeros((0, width))
    n = int(np.floor((end - start) / period + 1e-9)) + 1
    grid = start + period * np.arange(n)
    out = []
    for ts, vals in streams:
        j = np.clip(np.searchsorted(ts, grid), 1, len(ts) - 1) if len(ts) > 1 else np.zeros(n, int)
        if len(ts) > 1:
            left_closer = (grid - ts[j - 1]) <= (ts[j] - grid)
            j = np.where(left_closer, j - 1, j)
        out.append(vals[j])
    return np.concatenate(out, axis=1)


def parse_realworld(raw_dir, subjects=None, positions=REALWORLD_POSITIONS,
                    activities=REALWORLD_ACTIVITIES) -> Streams:
    """Read RealWorld ``proband<N>`` directories into synchronized 50 Hz segments.

    Per subject and activity, the accelerometer and gyroscope of every
    position are aligned to a shared clock. Activities missing any stream
    are skipped and noted in ``Streams.warnings``.
    """
    raw_dir = Path(raw_dir)
    dirs = {}
    for d in sorted(raw_dir.iterdir()):
        m = re.fullmatch(r"proband(\d+)", d.name)
        if d.is_dir() and m:
            dirs[int(m.group(1))] = d
    if subjects is not None:
        absent = [s for s in subjects if s not in dirs]
        if absent:
            raise FileNotFoundError(f"missing RealWorld subject directories: {absent}")
        dirs = {s: dirs[s] for s in subjects}
    segments, warnings = [], []
    for subject, d in dirs.items():
        found = _scan_realworld_subject(d)
        for (activity, part), files in sorted(found.items()):
            if activity not in activities:
                continue
            needed = [(p, k) for p in positions for k in ("acc", "gyr")]
            missing = [f"{p}/{k}" for p, k in needed if (p, k) not in files]
            if missing:
                msg = f"subject {subject} {activity} part {part}: missing {', '.join(missing)}; skipped"
                log.warning(msg)
                warnings.append(msg)
                continue
            data = synchronize([files[key] for key in needed])
            if len(data) == 0:
                msg = f"subject {subject} {activity} part {part}: streams do not overlap; skipped"
                log.warning(msg)
                warnings.append(msg)
                continue
            segments.append(Segment(subject, activities.index(activity), data, REALWORLD_RATE))
    return Streams(segments, tuple(activities), tuple(positions), REALWORLD_RATE, warnings)


# ---------------------------------------------------------------------------
# resampling, windowing, splitting


def resample_decimate(data: np.ndarray, in_rate: int = PAMAP2_RATE, out_rate: int = TARGET_RATE):
    """Keep every second sample; only a 2:1 rate ratio is supported."""
    if in_rate != 2 * out_rate:
        raise UnsupportedRateError(f"cannot decimate {in_rate} Hz to {out_rate} Hz")
    return np.asarray(data)[::2]


def decimate_streams(streams: Streams, out_rate: int = TARGET_RATE) -> Streams:
    if streams.rate == out_rate:
        return streams
    segs = [Segment(s.subject, s.label, resample_decimate(s.data, s.rate, out_rate), out_rate)
            for s in streams.segments]
    return Streams(segs, streams.class_names, streams.imu_names, out_rate, list(streams.warnings))


def window_stride(length: int = WINDOW_LEN, overlap: float = OVERLAP) -> int:
    return int(round(length * (1 - overlap)))


def window_starts(T: int, length: int = WINDOW_LEN, overlap: float = OVERLAP) -> np.ndarray:
    if T < length:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, T - length + 1, window_stride(length, overlap))


def make_windows(segments, length: int = WINDOW_LEN, overlap: float = OVERLAP) -> WindowSet:
    """Slice each segment into overlapping windows; short segments are skipped.

    ``WindowSet.skipped`` counts segments shorter than ``length``.
    """
    if isinstance(segments, Segment):
        segments = [segments]
    X, y, subj, skipped, n_imu = [], [], [], 0, None
    for seg in segments:
        n_ch = seg.data.shape[1]
        if n_ch % 6:
            raise ValueError(f"segment has {n_ch} channels, not a multiple of 6")
        n_imu = n_ch // 6
        starts = window_starts(len(seg), length, overlap)
        if len(starts) == 0:
            skipped += 1
            continue
        idx = starts[:, None] + np.arange(length)
        w = seg.data[idx]                                  # [n, length, n_ch]
        X.append(w.transpose(0, 2, 1).reshape(len(starts), n_imu, 6, length).astype(np.float32))
        y.append(np.full(len(starts), seg.label))
        subj.append(np.full(len(starts), seg.subject))
    if not X:
        ws = WindowSet(np.zeros((0, n_imu or 0, 6, length), np.float32), np.zeros(0, np.int64),
                       np.zeros(0, np.int64))
    else:
        ws = WindowSet(np.concatenate(X), np.concatenate(y).astype(np.int64),
                       np.concatenate(subj).astype(np.int64))
    ws.skipped = skipped
    return ws


def channel_stats(X: np.ndarray):
    """Per (IMU, row) mean and population std over windows and time."""
    x = X.astype(np.float64)
    mean = x.mean(axis=(0, 3))
    std = x.std(axis=(0, 3))
    return mean, np.where(std > 0, std, 1.0)


def normalize(ws: WindowSet, stats) -> WindowSet:
    mean, std = stats
    X = ((ws.X.astype(np.float64) - mean[None, :, :, None]) / std[None, :, :, None]).astype(np.float32)
    return WindowSet(X, ws.y, ws.subjects, ws.skipped)


def split_subjects(windows: WindowSet, dataset: str, class_names=(), normalize_data: bool = True,
                   holdout=None) -> DatasetSplit:
    """Leave-subjects-out split plus train-only z-score normalization.

    ``holdout`` overrides the dataset's (validation, test) subject pair.
    """
    if holdout is None:
        if dataset not in SPLITS:
            raise ValueError(f"unknown dataset {dataset!r}; expected one of {sorted(SPLITS)}")
        holdout = SPLITS[dataset]
    val_s, test_s = holdout
    present = set(np.unique(windows.subjects).tolist())
    for s in (val_s, test_s):
        if s not in present:
            raise ValueError(f"designated held-out subject {s} absent from {dataset} windows")
    val = windows.select(windows.subjects == val_s)
    test = windows.select(windows.subjects == test_s)
    train = windows.select((windows.subjects != val_s) & (windows.subjects != test_s))
    stats = channel_stats(train.X) if len(train) else (
        np.zeros((windows.n_imu, 6)), np.ones((windows.n_imu, 6)))
    if normalize_data:
        train, val, test = (normalize(w, stats) for w in (train, val, test))
    return DatasetSplit(train, val, test, tuple(class_names), stats)


def prepare(dataset: str, raw_dir) -> tuple:
    """Raw directory -> (windows at 50 Hz, class names, IMU names, warnings)."""
    if dataset == "pamap2":
        streams = decimate_streams(parse_pamap2(raw_dir))
    elif dataset == "realworld":
        streams = parse_realworld(raw_dir)
    else:
        raise ValueError(f"cannot prepare dataset {dataset!r} from raw files")
    ws = make_windows(streams.segments)
    if len(ws) == 0:
        ws = WindowSet.empty(len(streams.imu_names))
    return ws, streams.class_names, streams.imu_names, streams.warnings


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_imu: int = 2
    n_classes: int = 4
    windows_per_class: int = 50
    seed: int = 0
    n_subjects: int = 5
    noise: float = 0.3
    rate: int = TARGET_RATE
    # optional [n_classes, n_imu, 6, 2] (frequency Hz, amplitude); derived when None
    signature: tuple | None = None

    def signature_array(self) -> np.ndarray:
        if self.signature is not None:
            sig = np.asarray(self.signature, dtype=np.float64)
            if sig.shape != (self.n_classes, self.n_imu, 6, 2):
                raise ValueError(f"signature shape {sig.shape} != {(self.n_classes, self.n_imu, 6, 2)}")
            return sig
        k = np.arange(self.n_classes)[:, None, None]
        m = np.arange(self.n_imu)[None, :, None]
        c = np.arange(6)[None, None, :]
        # class bands [1.5(k+1), 1.5(k+1) + 0.75] Hz never overlap
        freq = 1.5 * (k + 1) + 0.15 * ((c + m) % 6)
        amp = 1.0 + 0.5 * ((k + m + c) % 3)
        return np.stack(np.broadcast_arrays(freq, amp), axis=-1)


def synth_segments(spec: SyntheticSpec) -> Streams:
    """Sinusoid-plus-noise segments, one per (subject, class)."""
    sig = spec.signature_array()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    stride = window_stride()
    base, extra = divmod(spec.windows_per_class, spec.n_subjects)
    segments = []
    for subject in range(1, spec.n_subjects + 1):
        n_win = base + (1 if subject <= extra else 0)
        for label in range(spec.n_classes):
            phase = rng.uniform(0, 2 * np.pi, (spec.n_imu, 6))
            if n_win == 0:
                continue
            T = WINDOW_LEN + stride * (n_win - 1)
            t = np.arange(T)[:, None, None] / spec.rate
            freq, amp = sig[label, ..., 0], sig[label, ..., 1]
            x = amp * np.sin(2 * np.pi * freq * t + phase)
            x = x + spec.noise * rng.standard_normal(x.shape)
            segments.append(Segment(subject, label, x.reshape(T, spec.n_imu * 6), spec.rate))
    names = tuple(f"class{k}" for k in range(spec.n_classes))
    imus = tuple(f"imu{m}" for m in range(spec.n_imu))
    return Streams(segments, names, imus, spec.rate)


def synth_windows(spec: SyntheticSpec) -> tuple:
    streams = synth_segments(spec)
    return make_windows(streams.segments), streams.class_names, streams.imu_names


def synth_generate(spec: SyntheticSpec, holdout=None) -> DatasetSplit:
    ws, names, _ = synth_windows(spec)
    if holdout is None:
        holdout = SPLITS["synth"] if spec.n_subjects >= 3 else None
    if holdout is None:
        raise ValueError("synthetic split needs at least 3 subjects")
    return split_subjects(ws, "synth", names, holdout=holdout)


# ---------------------------------------------------------------------------
# ARCD container

ARCD_MAGIC = b"ARCD"
ARCD_VERSION = 1


def _write_str(f, s: str):
    raw = s.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _read_str(f) -> str:
    (n,) = struct.unpack("<H", f.read(2))
    return f.read(n).decode("utf-8")


def _record_dtype(n_imu: int):
    return np.dtype([("subject", "<u2"), ("label", "<u2"), ("data", "<f4", (n_imu * 6 * WINDOW_LEN,))])


def write_arcd(path, windows: WindowSet, class_names) -> None:
    """Serialize raw (unnormalized) windows to the ARCD container."""
    n_imu = windows.n_imu
    rec = np.zeros(len(windows), dtype=_record_dtype(n_imu))
    rec["subject"] = windows.subjects
    rec["label"] = windows.y
    rec["data"] = windows.X.reshape(len(windows), -1)
    with open(path, "wb") as f:
        f.write(ARCD_MAGIC)
        f.write(struct.pack("<III", ARCD_VERSION, n_imu, len(class_names)))
        for name in class_names:
            _write_str(f, name)
        f.write(struct.pack("<Q", len(windows)))
        f.write(rec.tobytes())


def read_arcd(path) -> tuple:
    """-> (WindowSet, class names)."""
    with open(path, "rb") as f:
        if f.read(4) != ARCD_MAGIC:
            raise ParseError(f"{path}: not an ARCD container")
        version, n_imu, n_classes = struct.unpack("<III", f.read(12))
        if version != ARCD_VERSION:
            raise ParseError(f"{path}: unsupported ARCD version {version}")
        names = tuple(_read_str(f) for _ in range(n_classes))
        (count,) = struct.unpack("<Q", f.read(8))
        dt = _record_dtype(n_imu)
        payload = f.read()
    if len(payload) != count * dt.itemsize:
        raise ParseError(f"{path}: expected {count} windows, payload has {len(payload)} bytes")
    rec = np.frombuffer(payload, dtype=dt)
    X = rec["data"].reshape(count, n_imu, 6, WINDOW_LEN).copy()
    return WindowSet(X, rec["label"].astype(np.int64), rec["subject"].astype(np.int64)), names
