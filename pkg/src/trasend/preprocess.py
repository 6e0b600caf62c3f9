"""Raw sensor streams to per-sample frequency-domain tensors.

Each sensor recording is cut into non-overlapping windows of ``sample_len``
seconds, each window into ``T`` intervals of ``tau`` seconds. Every interval
is linearly resampled to ``f`` evenly spaced points and transformed with a
DFT, keeping ``f`` (magnitude, phase) pairs per measurement dimension.

A sensor tensor has shape ``d x 2f x T``: entry ``[j, 2k + m, t]`` is the
magnitude (``m = 0``) or phase (``m = 1``) of frequency bin ``k`` for
dimension ``j`` at timestep ``t``. :func:`timestep_rows` flattens it to the
``T x 2fd`` matrix the network consumes, where bin ``k`` occupies the
contiguous slice ``[2dk, 2d(k+1))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

SENSOR_KINDS = ("accelerometer", "gyroscope", "magnetometer", "other")
PHASE_FLOOR = 1e-12


class GapError(ValueError):
    """An interval that must hold measurements is empty."""


class AlignmentError(ValueError):
    """Sensor recordings do not cover the same window."""


@dataclass
class SensorRecording:
    """Measurements ``V`` (``d x n``) of one sensor at times ``u`` (seconds)."""

    sensor_id: str
    kind: str
    V: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.V = np.atleast_2d(np.asarray(self.V, dtype=np.float64))
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.kind not in SENSOR_KINDS:
            raise ValueError(f"{self.sensor_id}: unknown sensor kind {self.kind!r}")
        if self.u.ndim != 1 or self.V.shape[1] != self.u.size:
            raise ValueError(
                f"{self.sensor_id}: {self.V.shape[1]} measurement columns but {self.u.size} timestamps"
            )
        if self.u.size > 1 and np.any(np.diff(self.u) <= 0):
            raise ValueError(f"{self.sensor_id}: timestamps must be strictly increasing")

    @property
    def d(self) -> int:
        return self.V.shape[0]

    def between(self, start: float, end: float) -> "SensorRecording":
        """Measurements with ``start <= u < end``."""
        lo, hi = np.searchsorted(self.u, [start, end], side="left")
        return SensorRecording(self.sensor_id, self.kind, self.V[:, lo:hi], self.u[lo:hi])


@dataclass(frozen=True)
class PreprocessConfig:
    sample_len: float = 5.0
    tau: float = 0.25
    f: int = 10

    @property
    def T(self) -> int:
        return int(round(self.sample_len / self.tau))

    def __post_init__(self):
        ratio = self.sample_len / self.tau
        if self.tau <= 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(f"sample_len {self.sample_len} is not a positive multiple of tau {self.tau}")
        if self.f < 1:
            raise ValueError("f must be >= 1")


@dataclass
class Interval:
    V: np.ndarray  # d x m
    u: np.ndarray  # m
    start: float
    end: float


@dataclass
class PreprocessedSample:
    tensors: dict[str, np.ndarray]
    label: int
    user_id: str
    origin: str = "real"
    start: float = 0.0
    raw: dict[str, SensorRecording] | None = field(default=None, repr=False)


@dataclass(frozen=True)
class AugmentationSpec:
    copies: int = 9
    variance: Mapping[str, float] = field(
        default_factory=lambda: {"accelerometer": 0.5, "gyroscope": 0.2}
    )
    default_variance: float = 0.2

    def __post_init__(self):
        if self.copies < 0:
            raise ValueError("copies must be >= 0")
        if self.default_variance < 0 or any(v < 0 for v in self.variance.values()):
            raise ValueError("noise variances must be >= 0")

    def variance_for(self, kind: str) -> float:
        return float(self.variance.get(kind, self.default_variance))


def _period(u: np.ndarray) -> float:
    return float(np.median(np.diff(u))) if u.size > 1 else 0.0


def segment(rec: SensorRecording, sample_len: float = 5.0, tau: float = 0.25) -> list[list[Interval]]:
    """Split a recording into consecutive samples of ``sample_len / tau`` intervals.

    A recording's extent runs from its first timestamp to one sampling period
    past its last, so 250 points at 50 Hz make exactly one 5 s sample. A
    trailing partial sample is dropped.
    """
    cfg = PreprocessConfig(sample_len, tau, 1)
    if rec.u.size == 0:
        return []
    t0 = rec.u[0]
    extent = rec.u[-1] + _period(rec.u) - t0
    n_samples = int(np.floor(extent / sample_len + 1e-9))
    out = []
    for s in range(n_samples):
        start = t0 + s * sample_len
        out.append(_intervals(rec, start, cfg.T, tau))
    return out


def _intervals(rec: SensorRecording, start: float, T: int, tau: float) -> list[Interval]:
    edges = start + tau * np.arange(T + 1)
    idx = np.searchsorted(rec.u, edges, side="left")
    return [
        Interval(rec.V[:, idx[t] : idx[t + 1]], rec.u[idx[t] : idx[t + 1]], edges[t], edges[t + 1])
        for t in range(T)
    ]


def resample_interval(interval: Interval, f: int, sensor_id: str = "?") -> np.ndarray:
    """Linear interpolation onto ``f`` targets ``start + j*(end-start)/f``.

    Targets outside the interval's measured span take the nearest
    measurement; a single measurement is extended as a constant.
    """
    m = interval.u.size
    if m == 0:
        raise GapError(f"sensor {sensor_id}: no measurements in [{interval.start:.6g}, {interval.end:.6g})")
    targets = interval.start + (interval.end - interval.start) * np.arange(f) / f
    if m == 1:
        return np.repeat(interval.V[:, :1], f, axis=1)
    return np.stack([np.interp(targets, interval.u, row) for row in interval.V])


def dft_features(points: np.ndarray) -> np.ndarray:
    """Per-row unnormalised DFT as interleaved (magnitude, phase) pairs.

    ``points`` is ``d x f``; the result is ``d x 2f`` with column ``2k`` the
    magnitude and ``2k + 1`` the phase of bin ``k``. Phase lies in
    ``(-pi, pi]`` and is 0 where the magnitude is below ``1e-12``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    spec = np.fft.fft(points, axis=-1)
    mag = np.abs(spec)
    phase = np.where(mag < PHASE_FLOOR, 0.0, np.angle(spec))
    phase = np.where(phase <= -np.pi, np.pi, phase)
    out = np.empty((points.shape[0], 2 * points.shape[1]))
    out[:, 0::2] = mag
    out[:, 1::2] = phase
    return out


def sensor_tensor(rec: SensorRecording, start: float, cfg: PreprocessConfig) -> np.ndarray:
    """The ``d x 2f x T`` tensor of one sensor for the window at ``start``."""
    T, f = cfg.T, cfg.f
    edges = start + cfg.tau * np.arange(T + 1)
    idx = np.searchsorted(rec.u, edges, side="left")
    counts = np.diff(idx)
    if np.any(counts == 0):
        t = int(np.argmax(counts == 0))
        raise GapError(f"sensor {rec.sensor_id}: no measurements in [{edges[t]:.6g}, {edges[t + 1]:.6g})")
    # fast path: every interval has >= 2 points, interpolate all at once
    if np.all(counts >= 2):
        targets = edges[:-1, None] + cfg.tau * np.arange(f)[None, :] / f  # T x f
        first = rec.u[idx[:-1]]
        last = rec.u[idx[1:] - 1]
        clamped = np.clip(targets, first[:, None], last[:, None])
        # locate each target within its own interval's points
        pos = np.searchsorted(rec.u, clamped, side="right") - 1
        pos = np.clip(pos, idx[:-1, None], idx[1:, None] - 2)
        u0, u1 = rec.u[pos], rec.u[pos + 1]
        w = (clamped - u0) / (u1 - u0)
        pts = rec.V[:, pos] * (1 - w) + rec.V[:, pos + 1] * w  # d x T x f
    else:
        ivs = _intervals(rec, start, T, cfg.tau)
        pts = np.stack([resample_interval(iv, f, rec.sensor_id) for iv in ivs], axis=1)
    spec = np.fft.fft(pts, axis=-1)  # d x T x f
    mag = np.abs(spec)
    phase = np.where(mag < PHASE_FLOOR, 0.0, np.angle(spec))
    phase = np.where(phase <= -np.pi, np.pi, phase)
    out = np.empty((rec.d, 2 * f, T))
    out[:, 0::2, :] = mag.transpose(0, 2, 1)
    out[:, 1::2, :] = phase.transpose(0, 2, 1)
    return out


def timestep_rows(tensor: np.ndarray) -> np.ndarray:
    """``d x 2f x T`` tensor to the ``T x 2fd`` per-timestep feature matrix."""
    d, two_f, T = tensor.shape
    f = two_f // 2
    return tensor.reshape(d, f, 2, T).transpose(3, 1, 0, 2).reshape(T, two_f * d)


def build_sample(
    recs: Sequence[SensorRecording],
    label: int,
    user_id: str,
    start: float | None = None,
    cfg: PreprocessConfig = PreprocessConfig(),
    keep_raw: bool = True,
) -> PreprocessedSample:
    """Preprocess one window of multi-sensor data.

    ``start`` defaults to the recordings' common first timestamp; recordings
    whose first timestamps differ by a full interval or more raise
    :class:`AlignmentError`.
    """
    if not recs:
        raise AlignmentError("no recordings given")
    ids = [r.sensor_id for r in recs]
    if len(set(ids)) != len(ids):
        raise AlignmentError(f"duplicate sensor ids {ids}")
    if any(r.u.size == 0 for r in recs):
        empty = [r.sensor_id for r in recs if r.u.size == 0]
        raise AlignmentError(f"recordings without measurements: {empty}")
    if start is None:
        firsts = np.array([r.u[0] for r in recs])
        if firsts.max() - firsts.min() >= cfg.tau:
            raise AlignmentError(f"sensor start times disagree: {dict(zip(ids, firsts.tolist()))}")
        start = float(firsts.min())
    end = start + cfg.sample_len
    for r in recs:
        if r.u[0] >= start + cfg.tau or r.u[-1] < end - cfg.tau:
            raise AlignmentError(
                f"sensor {r.sensor_id} covers [{r.u[0]:.6g}, {r.u[-1]:.6g}], window is [{start:.6g}, {end:.6g})"
            )
    tensors = {r.sensor_id: sensor_tensor(r, start, cfg) for r in recs}
    raw = {r.sensor_id: r.between(start, end) for r in recs} if keep_raw else None
    return PreprocessedSample(tensors, int(label), str(user_id), "real", float(start), raw)


def augment(
    sample: PreprocessedSample,
    spec: AugmentationSpec,
    rng: np.random.Generator,
    cfg: PreprocessConfig = PreprocessConfig(),
) -> list[PreprocessedSample]:
    """Noisy copies of a real sample.

    Zero-mean Gaussian noise with the sensor kind's variance is added to the
    raw measurements, then the window is preprocessed again.
    """
    if sample.origin != "real":
        raise ValueError("only real samples can be augmented")
    if sample.raw is None:
        raise ValueError("sample was built without raw measurements")
    out = []
    for _ in range(spec.copies):
        tensors = {}
        for sid, rec in sample.raw.items():
            sd = np.sqrt(spec.variance_for(rec.kind))
            noisy = replace(rec, V=rec.V + sd * rng.standard_normal(rec.V.shape)) if sd > 0 else rec
            tensors[sid] = sensor_tensor(noisy, sample.start, cfg)
        out.append(
            PreprocessedSample(tensors, sample.label, sample.user_id, "augmented", sample.start, None)
        )
    return out


def add_noise(
    sample: PreprocessedSample,
    spec: AugmentationSpec,
    rng: np.random.Generator,
    cfg: PreprocessConfig = PreprocessConfig(),
) -> PreprocessedSample:
    """The same window re-preprocessed with raw-domain noise, origin kept ``real``.

    Used to build noisy test sets; unlike :func:`augment` the result stands in
    for the original measurement rather than adding a training example.
    """
    one = augment(sample, replace(spec, copies=1), rng, cfg)[0]
    return replace(one, origin=sample.origin, raw=None)
