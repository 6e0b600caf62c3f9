"""Datasets: canonical CSV layout, synthetic multi-user generator, windowing.

On disk a dataset is a JSON manifest next to one recording CSV per (user,
sensor) and one label CSV per user::

    recording:  timestamp_s,<dim0>,<dim1>,...     strictly increasing time
    labels:     start_s,end_s,class_index         non-overlapping intervals
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .preprocess import (
    SENSOR_KINDS,
    PreprocessConfig,
    PreprocessedSample,
    SensorRecording,
    build_sample,
)

DATA_DIR_ENV = "TRASEND_DATA_DIR"


class DataError(ValueError):
    """Input files or specs are malformed."""


@dataclass(frozen=True)
class SensorSpec:
    sensor_id: str
    kind: str
    d: int
    rate_hz: float = 50.0


@dataclass
class DatasetManifest:
    name: str
    sensors: list[SensorSpec]
    users: list[str]
    activities: list[tuple[int, str]]
    files: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.sensor_id for s in self.sensors]
        if len(set(ids)) != len(ids):
            raise DataError(f"sensor ids must be unique: {ids}")
        for s in self.sensors:
            if s.kind not in SENSOR_KINDS:
                raise DataError(f"sensor {s.sensor_id}: unknown kind {s.kind!r}")
        idx = sorted(i for i, _ in self.activities)
        if idx != list(range(len(idx))):
            raise DataError(f"activity indices must be contiguous from 0, got {idx}")

    @property
    def num_classes(self) -> int:
        return len(self.activities)

    def sensor(self, sensor_id: str) -> SensorSpec:
        for s in self.sensors:
            if s.sensor_id == sensor_id:
                return s
        raise DataError(f"unknown sensor id {sensor_id!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "sensors": [dataclasses.asdict(s) for s in self.sensors],
            "users": list(self.users),
            "activities": [[i, n] for i, n in self.activities],
            "files": self.files,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetManifest":
        allowed = {"name", "sensors", "users", "activities", "files"}
        if set(d) - allowed:
            raise DataError(f"unknown manifest keys: {sorted(set(d) - allowed)}")
        try:
            return cls(
                name=d["name"],
                sensors=[SensorSpec(**s) for s in d["sensors"]],
                users=[str(u) for u in d["users"]],
                activities=[(int(i), str(n)) for i, n in d["activities"]],
                files=dict(d.get("files", {})),
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed manifest: {e}") from e


@dataclass
class UserData:
    recordings: dict[str, SensorRecording]
    labels: list[tuple[float, float, int]]


@dataclass
class Dataset:
    manifest: DatasetManifest
    users: dict[str, UserData]


# --------------------------------------------------------------------------
# CSV


def _read_recording(path: Path, spec: SensorSpec) -> SensorRecording:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0].strip() != "timestamp_s":
            raise DataError(f"{path}:1: header must start with timestamp_s")
        if len(header) - 1 != spec.d:
            raise DataError(f"{path}:1: {len(header) - 1} value columns, sensor {spec.sensor_id} has d={spec.d}")
        rows = []
        prev = -math.inf
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != spec.d + 1:
                raise DataError(f"{path}:{lineno}: expected {spec.d + 1} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}:{lineno}: non-finite value")
            if vals[0] <= prev:
                raise DataError(f"{path}:{lineno}: timestamp {vals[0]!r} not after previous {prev!r}")
            prev = vals[0]
            rows.append(vals)
    arr = np.array(rows, dtype=np.float64).reshape(-1, spec.d + 1)
    return SensorRecording(spec.sensor_id, spec.kind, arr[:, 1:].T, arr[:, 0])


def _read_labels(path: Path, num_classes: int) -> list[tuple[float, float, int]]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["start_s", "end_s", "class_index"]:
            raise DataError(f"{path}:1: header must be start_s,end_s,class_index")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                s, e, c = float(row[0]), float(row[1]), int(row[2])
            except (ValueError, IndexError) as err:
                raise DataError(f"{path}:{lineno}: {err}") from None
            if not e > s:
                raise DataError(f"{path}:{lineno}: empty interval [{s}, {e})")
            if not 0 <= c < num_classes:
                raise DataError(f"{path}:{lineno}: class {c} outside [0, {num_classes})")
            if out and s < out[-1][1]:
                raise DataError(f"{path}:{lineno}: interval overlaps or precedes the previous one")
            out.append((s, e, c))
    return out


def load_dataset_csv(manifest_path: str | os.PathLike) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = DatasetManifest.from_dict(json.loads(manifest_path.read_text()))
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: {e}") from e
    root = manifest_path.parent
    users = {}
    for user in manifest.users:
        entry = manifest.files.get(user)
        if entry is None:
            raise DataError(f"manifest lists user {user!r} without files")
        recs = {}
        for sid, rel in entry.get("recordings", {}).items():
            try:
                spec = manifest.sensor(sid)
            except DataError as e:
                raise DataError(f"user {user}: {e}") from None
            recs[sid] = _read_recording(root / rel, spec)
        missing = {s.sensor_id for s in manifest.sensors} - set(recs)
        if missing:
            raise DataError(f"user {user}: no recording for sensors {sorted(missing)}")
        users[user] = UserData(recs, _read_labels(root / entry["labels"], manifest.num_classes))
    return Dataset(manifest, users)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_dataset_csv(dataset: Dataset, directory: str | os.PathLike) -> Path:
    """Write ``dataset`` in the canonical layout; returns the manifest path."""
    root = Path(directory)
    files = {}
    for user, data in dataset.users.items():
        entry = {"recordings": {}, "labels": f"{user}/labels.csv"}
        for sid, rec in data.recordings.items():
            rel = f"{user}/{sid}.csv"
            header = ["timestamp_s"] + [f"dim{j}" for j in range(rec.d)]
            lines = [",".join(header)]
            for t, col in zip(rec.u, rec.V.T):
                lines.append(",".join(repr(float(v)) for v in (t, *col)))
            _atomic_write(root / rel, "\n".join(lines) + "\n")
            entry["recordings"][sid] = rel
        lines = ["start_s,end_s,class_index"] + [f"{s!r},{e!r},{c}" for s, e, c in data.labels]
        _atomic_write(root / entry["labels"], "\n".join(lines) + "\n")
        files[user] = entry
    manifest = dataclasses.replace(dataset.manifest, files=files)
    path = root / "manifest.json"
    _atomic_write(path, json.dumps(manifest.to_dict(), indent=2))
    return path


def default_data_dir() -> Path | None:
    v = os.environ.get(DATA_DIR_ENV)
    return Path(v) if v else None


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Multi-user sinusoid-mixture HAR stand-in.

    Channel ``j`` of sensor ``s`` while user ``u`` performs class ``c`` is
    ``A_c sin(2 pi (F_c + delta_u) t + phi) + offset_u + noise`` where
    ``delta_u`` is drawn from ``+-user_freq_shift`` and the per-channel
    ``offset_u`` from ``N(0, user_offset^2)``. Each class is one contiguous
    bout of ``samples_per_class`` windows; bout order is shuffled per user.
    """

    users: int = 4
    classes: int = 4
    sensors: tuple[tuple[str, str, int], ...] = (("acc", "accelerometer", 3), ("gyro", "gyroscope", 3))
    rate_hz: float = 50.0
    class_freqs: tuple[float, ...] | None = None
    class_amps: tuple[float, ...] | None = None
    user_offset: float = 0.0
    user_freq_shift: float = 0.0
    user_gain: float = 0.0
    noise: float = 0.1
    samples_per_class: int = 40
    sample_len: float = 5.0
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sensors", tuple((str(a), str(b), int(c)) for a, b, c in self.sensors))
        for name in ("class_freqs", "class_amps"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(float(x) for x in v))
        if min(self.users, self.classes, self.samples_per_class, len(self.sensors)) < 1:
            raise DataError("users, classes, samples_per_class and sensors must all be >= 1")
        if self.rate_hz <= 0 or self.sample_len <= 0:
            raise DataError("rate_hz and sample_len must be positive")
        if min(self.noise, self.user_offset, self.user_freq_shift, self.user_gain) < 0:
            raise DataError("noise and user effect magnitudes must be >= 0")
        if not 0 <= self.jitter < 1:
            raise DataError("jitter must be in [0, 1)")
        if len(self.freqs) != self.classes or len(self.amps) != self.classes:
            raise DataError("class_freqs/class_amps need one entry per class")
        nyquist = self.rate_hz / 2
        top = max(self.freqs) + self.user_freq_shift
        if top >= nyquist:
            raise DataError(f"class frequency up to {top} Hz is not below Nyquist {nyquist} Hz")
        for _, kind, d in self.sensors:
            if kind not in SENSOR_KINDS or d < 1:
                raise DataError(f"bad sensor spec ({kind}, {d})")

    @property
    def freqs(self) -> tuple[float, ...]:
        return self.class_freqs or tuple(1.0 + 3.0 * c for c in range(self.classes))

    @property
    def amps(self) -> tuple[float, ...]:
        return self.class_amps or tuple(1.0 + 0.25 * c for c in range(self.classes))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sensors"] = [list(s) for s in self.sensors]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise DataError(f"unknown synthetic spec keys: {sorted(set(d) - known)}")
        return cls(**d)


def generate_synthetic_dataset(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    user_ids = [f"u{i:02d}" for i in range(spec.users)]
    manifest = DatasetManifest(
        name=f"synthetic-{spec.seed}",
        sensors=[SensorSpec(s, k, d, spec.rate_hz) for s, k, d in spec.sensors],
        users=user_ids,
        activities=[(c, f"activity{c}") for c in range(spec.classes)],
    )
    n_per_bout = int(round(spec.samples_per_class * spec.sample_len * spec.rate_hz))
    users = {}
    for user in user_ids:
        shift = spec.user_freq_shift * rng.uniform(-1, 1)
        offsets = {s: spec.user_offset * rng.standard_normal(d) for s, _, d in spec.sensors}
        gains = {s: np.exp(spec.user_gain * rng.standard_normal(d)) for s, _, d in spec.sensors}
        order = rng.permutation(spec.classes)
        n_total = n_per_bout * spec.classes
        u = np.arange(n_total) / spec.rate_hz
        if spec.jitter:
            u = u + spec.jitter * rng.uniform(-0.5, 0.5, n_total) / spec.rate_hz
        values = {s: np.empty((d, n_total)) for s, _, d in spec.sensors}
        labels = []
        for b, c in enumerate(order):
            sl = slice(b * n_per_bout, (b + 1) * n_per_bout)
            t = u[sl]
            for s, _, d in spec.sensors:
                phase = rng.uniform(0, 2 * np.pi, size=(d, 1))
                wave = spec.amps[c] * np.sin(2 * np.pi * (spec.freqs[c] + shift) * t[None, :] + phase)
                values[s][:, sl] = gains[s][:, None] * wave + offsets[s][:, None]
            start = b * n_per_bout / spec.rate_hz
            labels.append((start, start + spec.samples_per_class * spec.sample_len, int(c)))
        recs = {}
        for s, kind, d in spec.sensors:
            v = values[s] + spec.noise * rng.standard_normal((d, n_total))
            recs[s] = SensorRecording(s, kind, v, u)
        users[user] = UserData(recs, labels)
    return Dataset(manifest, users)


# --------------------------------------------------------------------------
# windows


def extract_samples(
    dataset: Dataset,
    cfg: PreprocessConfig = PreprocessConfig(),
    users: Iterable[str] | None = None,
    keep_raw: bool = True,
) -> list[PreprocessedSample]:
    """Non-overlapping windows lying fully inside one label interval, in time order."""
    out = []
    for user in users if users is not None else dataset.manifest.users:
        data = dataset.users[user]
        for start, end, c in data.labels:
            n = int(math.floor((end - start) / cfg.sample_len + 1e-9))
            for k in range(n):
                ws = start + k * cfg.sample_len
                recs = [r.between(ws, ws + cfg.sample_len) for r in data.recordings.values()]
                out.append(build_sample(recs, c, user, ws, cfg, keep_raw))
    return out


def stack_inputs(samples: Sequence[PreprocessedSample], sensor_ids: Sequence[str]) -> dict[str, np.ndarray]:
    """Per-sensor ``N x T x 2fd`` arrays in the network's row layout."""
    from .preprocess import timestep_rows

    return {sid: np.stack([timestep_rows(s.tensors[sid]) for s in samples]) for sid in sensor_ids}


def save_samples(samples: Sequence[PreprocessedSample], path: str | os.PathLike) -> None:
    """Sample archive (``.npz``): per-sensor tensors plus labels, users, origins, start times.

    Raw windows, when every sample carries them, are stored too (concatenated
    per sensor with offsets) so that archives can still be augmented.
    """
    if not samples:
        raise DataError("no samples to save")
    sensor_ids = list(samples[0].tensors)
    arrays = {f"tensor/{sid}": np.stack([s.tensors[sid] for s in samples]) for sid in sensor_ids}
    arrays["label"] = np.array([s.label for s in samples])
    arrays["user_id"] = np.array([s.user_id for s in samples])
    arrays["origin"] = np.array([s.origin for s in samples])
    arrays["start"] = np.array([s.start for s in samples])
    if all(s.raw is not None for s in samples):
        for sid in sensor_ids:
            recs = [s.raw[sid] for s in samples]
            arrays[f"raw/{sid}/V"] = np.concatenate([r.V for r in recs], axis=1)
            arrays[f"raw/{sid}/u"] = np.concatenate([r.u for r in recs])
            arrays[f"raw/{sid}/offsets"] = np.cumsum([0] + [r.u.size for r in recs])
            arrays[f"raw/{sid}/kind"] = np.array(recs[0].kind)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def load_samples(path: str | os.PathLike) -> list[PreprocessedSample]:
    with np.load(path) as z:
        sids = [k.split("/", 1)[1] for k in z.files if k.startswith("tensor/")]
        tensors = {sid: z[f"tensor/{sid}"] for sid in sids}
        labels, users, origins, starts = z["label"], z["user_id"], z["origin"], z["start"]
        raw = None
        if all(f"raw/{sid}/V" in z.files for sid in sids):
            raw = {sid: (z[f"raw/{sid}/V"], z[f"raw/{sid}/u"], z[f"raw/{sid}/offsets"], str(z[f"raw/{sid}/kind"]))
                   for sid in sids}

    def raw_of(i):
        if raw is None:
            return None
        out = {}
        for sid, (V, u, off, kind) in raw.items():
            a, b = off[i], off[i + 1]
            out[sid] = SensorRecording(sid, kind, V[:, a:b], u[a:b])
        return out

    return [
        PreprocessedSample(
            {sid: tensors[sid][i] for sid in sids}, int(labels[i]), str(users[i]), str(origins[i]),
            float(starts[i]), raw_of(i),
        )
        for i in range(labels.size)
    ]
