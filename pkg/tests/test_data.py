import json

import numpy as np
import pytest

from trasend.data import (
    DataError,
    DatasetManifest,
    SensorSpec,
    SyntheticSpec,
    extract_samples,
    generate_synthetic_dataset,
    load_dataset_csv,
    load_samples,
    save_samples,
    write_dataset_csv,
)
from trasend.preprocess import PreprocessConfig, augment
from trasend.train import TrainConfig


def write_minimal(root, rows=None, labels="start_s,end_s,class_index\n0.0,5.0,0\n", d=2, sensors=None):
    """One user, one sensor; ``rows`` replaces the recording body."""
    root.mkdir(parents=True, exist_ok=True)
    if rows is None:
        t = np.arange(250) / 50.0
        rows = "".join(f"{a},{np.sin(a)},{np.cos(a)}\n" for a in t.tolist())
    (root / "acc.csv").write_text("timestamp_s,x,y\n" + rows)
    (root / "labels.csv").write_text(labels)
    manifest = {
        "name": "mini",
        "sensors": sensors or [{"sensor_id": "acc", "kind": "accelerometer", "d": d, "rate_hz": 50.0}],
        "users": ["alice"],
        "activities": [[0, "walk"]],
        "files": {"alice": {"recordings": {"acc": "acc.csv"}, "labels": "labels.csv"}},
    }
    (root / "manifest.json").write_text(json.dumps(manifest))
    return root / "manifest.json"


# ---------------------------------------------------------------- CSV


def test_minimal_fixture_loads(tmp_path):
    ds = load_dataset_csv(write_minimal(tmp_path))
    rec = ds.users["alice"].recordings["acc"]
    assert rec.V.shape == (2, 250) and rec.u.shape == (250,)
    assert ds.users["alice"].labels == [(0.0, 5.0, 0)]
    assert len(extract_samples(ds)) == 1


MALFORMED = {
    "decreasing timestamp": dict(rows="0.0,1,2\n0.5,1,2\n0.25,1,2\n"),
    "repeated timestamp": dict(rows="0.0,1,2\n0.0,1,2\n"),
    "missing column": dict(rows="0.0,1,2\n0.1,1\n"),
    "not a number": dict(rows="0.0,1,2\n0.1,x,2\n"),
    "non-finite": dict(rows="0.0,1,2\n0.1,nan,2\n"),
    "dimension mismatch": dict(d=3),
    "bad label header": dict(labels="start,end,class\n0,5,0\n"),
    "class out of range": dict(labels="start_s,end_s,class_index\n0.0,5.0,1\n"),
    "overlapping labels": dict(labels="start_s,end_s,class_index\n0.0,5.0,0\n4.0,6.0,0\n"),
    "empty interval": dict(labels="start_s,end_s,class_index\n2.0,2.0,0\n"),
    "unknown kind": dict(sensors=[{"sensor_id": "acc", "kind": "barometer", "d": 2}]),
}


@pytest.mark.parametrize("name", sorted(MALFORMED))
def test_malformed_fixtures_rejected(tmp_path, name):
    with pytest.raises(DataError):
        load_dataset_csv(write_minimal(tmp_path, **MALFORMED[name]))


def test_decreasing_timestamp_names_the_line(tmp_path):
    with pytest.raises(DataError, match=r"acc\.csv:4"):
        load_dataset_csv(write_minimal(tmp_path, **MALFORMED["decreasing timestamp"]))


def test_unknown_sensor_rejected(tmp_path):
    path = write_minimal(tmp_path)
    m = json.loads(path.read_text())
    m["files"]["alice"]["recordings"]["mag"] = "acc.csv"
    path.write_text(json.dumps(m))
    with pytest.raises(DataError, match="mag"):
        load_dataset_csv(path)


def test_round_trip_reproduces_values(tmp_path):
    ds = generate_synthetic_dataset(SyntheticSpec(users=2, classes=2, samples_per_class=1, jitter=0.3, seed=1))
    back = load_dataset_csv(write_dataset_csv(ds, tmp_path / "a"))
    again = load_dataset_csv(write_dataset_csv(back, tmp_path / "b"))
    for ref in (back, again):
        assert ref.manifest.users == ds.manifest.users
        for user, data in ds.users.items():
            assert ref.users[user].labels == data.labels
            for sid, rec in data.recordings.items():
                np.testing.assert_allclose(ref.users[user].recordings[sid].V, rec.V, rtol=0, atol=1e-9)
                np.testing.assert_allclose(ref.users[user].recordings[sid].u, rec.u, rtol=0, atol=1e-9)


def test_manifest_validation():
    with pytest.raises(DataError):
        DatasetManifest("x", [SensorSpec("a", "accelerometer", 3)] * 2, ["u"], [(0, "w")])
    with pytest.raises(DataError):
        DatasetManifest("x", [SensorSpec("a", "accelerometer", 3)], ["u"], [(0, "w"), (2, "r")])
    with pytest.raises(DataError):
        DatasetManifest.from_dict({"name": "x", "sensors": [], "users": [], "activities": [], "extra": 1})
    m = DatasetManifest("x", [SensorSpec("a", "gyroscope", 3)], ["u"], [(1, "r"), (0, "w")])
    assert DatasetManifest.from_dict(json.loads(json.dumps(m.to_dict()))) == m


# ---------------------------------------------------------------- synthetic data


def test_no_user_effect_means_identical_up_to_phase():
    spec = SyntheticSpec(users=2, classes=2, samples_per_class=1, noise=0.0, seed=4)
    samples = extract_samples(generate_synthetic_dataset(spec))
    for c in range(2):
        a, b = [s for s in samples if s.label == c]
        assert a.user_id != b.user_id
        amps = []
        for s in (a, b):
            rec = s.raw["acc"]
            w = 2 * np.pi * spec.freqs[c] * rec.u
            basis = np.stack([np.sin(w), np.cos(w)], axis=1)
            coef, *_ = np.linalg.lstsq(basis, rec.V.T, rcond=None)
            np.testing.assert_allclose(basis @ coef, rec.V.T, atol=1e-9)  # a pure phase-shifted sinusoid
            amps.append(np.hypot(*coef))
        np.testing.assert_allclose(amps[0], amps[1], rtol=1e-9)
        np.testing.assert_allclose(amps[0], spec.amps[c], rtol=1e-9)


def test_spectral_peak_at_nearest_bin():
    cfg = PreprocessConfig()
    freqs = (4.0, 8.5, 12.0, 15.5)
    spacing = 1.0 / cfg.tau  # bin width in Hz: f points spanning tau seconds
    spec = SyntheticSpec(users=1, classes=4, samples_per_class=1, noise=0.0, class_freqs=freqs, seed=2)
    for s in extract_samples(generate_synthetic_dataset(spec)):
        mag = s.tensors["gyro"][:, 0::2, :]  # d x f x T
        peak = int(np.argmax(mag[:, : cfg.f // 2 + 1].mean(axis=(0, 2))))
        assert peak == round(freqs[s.label] / spacing)


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(users=2, classes=3, samples_per_class=2, user_offset=1.0, jitter=0.2, seed=9)
    a, b = generate_synthetic_dataset(spec), generate_synthetic_dataset(spec)
    for user in a.users:
        for sid in a.users[user].recordings:
            assert a.users[user].recordings[sid].V.tobytes() == b.users[user].recordings[sid].V.tobytes()
            assert a.users[user].recordings[sid].u.tobytes() == b.users[user].recordings[sid].u.tobytes()
    c = generate_synthetic_dataset(SyntheticSpec(**{**spec.to_dict(), "seed": 10}))
    assert a.users["u00"].recordings["acc"].V.tobytes() != c.users["u00"].recordings["acc"].V.tobytes()


def test_synthetic_spec_validation():
    with pytest.raises(DataError, match="Nyquist"):
        SyntheticSpec(rate_hz=20.0)
    with pytest.raises(DataError):
        SyntheticSpec(users=0)
    with pytest.raises(DataError):
        SyntheticSpec.from_dict({"userz": 3})
    spec = SyntheticSpec(users=2, user_offset=2.0)
    assert SyntheticSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_sample_counts_and_labels(small_dataset, small_samples):
    assert len(small_samples) == 3 * 3 * 4
    for user in small_dataset.manifest.users:
        mine = [s for s in small_samples if s.user_id == user]
        assert sorted(s.label for s in mine) == sorted([0, 1, 2] * 4)
        assert [s.start for s in mine] == sorted(s.start for s in mine)
    assert small_samples[0].tensors["acc"].shape == (3, 20, 20)


# ---------------------------------------------------------------- sample archives


def test_sample_archive_round_trip(small_samples, tmp_path):
    path = tmp_path / "s.npz"
    save_samples(small_samples, path)
    back = load_samples(path)
    assert len(back) == len(small_samples)
    for a, b in zip(small_samples, back):
        assert (a.label, a.user_id, a.origin, a.start) == (b.label, b.user_id, b.origin, b.start)
        for sid in a.tensors:
            assert a.tensors[sid].tobytes() == b.tensors[sid].tobytes()
            assert a.raw[sid].V.tobytes() == b.raw[sid].V.tobytes()
            assert a.raw[sid].kind == b.raw[sid].kind
    # archives keep enough to be augmented
    spec = TrainConfig(augment_copies=1).augmentation
    x = augment(small_samples[3], spec, np.random.default_rng(0))[0]
    y = augment(back[3], spec, np.random.default_rng(0))[0]
    assert x.tensors["gyro"].tobytes() == y.tensors["gyro"].tobytes()


def test_empty_archive_rejected(tmp_path):
    with pytest.raises(DataError):
        save_samples([], tmp_path / "x.npz")
