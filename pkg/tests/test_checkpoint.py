import dataclasses
import json

import numpy as np
import pytest

from trasend.autodiff import FEATURE_EXTRACTOR, OUTPUT_LAYER
from trasend.checkpoint import (
    BUFFER,
    MANIFEST,
    CheckpointError,
    ShapeMismatchError,
    TruncatedBufferError,
    VersionMismatchError,
    load_checkpoint,
    save_checkpoint,
)
from trasend.data import stack_inputs
from trasend.model import Model
from trasend.personalize import PersonalizationSession, adapt_step
from trasend.train import TrainConfig, train

from conftest import tiny_config


@pytest.fixture(scope="module")
def trained(small_samples):
    m = Model.build(tiny_config("trasend", num_classes=3), 2)
    train(m, small_samples, TrainConfig(epochs=2, batch_size=16, augment_copies=0))
    return m


@pytest.mark.parametrize("variant", ["trasend", "deepsense", "trasend_bd", "trasend_ca"])
def test_forward_outputs_round_trip_bitwise(tmp_path, small_samples, variant, trained):
    m = trained if variant == "trasend" else Model.build(tiny_config(variant, num_classes=3), 4)
    save_checkpoint(m, tmp_path / "ck")
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.config == m.config and ck.seed == m.seed
    X = stack_inputs(small_samples, ["acc", "gyro"])
    assert ck.model().classify_forward(X).tobytes() == m.classify_forward(X).tobytes()
    for n, p in m.params.items():
        q = ck.params[n]
        assert q.data.tobytes() == p.data.tobytes()
        assert (q.group, q.trainable) == (p.group, p.trainable)


def test_float32_round_trip(tmp_path):
    m = Model.build(tiny_config(dtype="float32"), 0)
    save_checkpoint(m, tmp_path / "ck")
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.params["output.W"].dtype == np.float32
    assert ck.params["output.W"].data.tobytes() == m.params["output.W"].data.tobytes()


def test_group_tags_still_freeze_after_reload(tmp_path, trained, small_samples):
    save_checkpoint(trained, tmp_path / "ck")
    model = load_checkpoint(tmp_path / "ck").model()
    assert set(model.params.group(OUTPUT_LAYER)) == {"output.W", "output.b"}
    frozen = {n: p.data.tobytes() for n, p in model.params.group(FEATURE_EXTRACTOR).items()}
    session = PersonalizationSession.start(model)
    for s in small_samples[:6]:
        adapt_step(session, s, s.label)
    assert {n: p.data.tobytes() for n, p in model.params.group(FEATURE_EXTRACTOR).items()} == frozen


def test_overwrite_replaces_previous_checkpoint(tmp_path):
    a, b = Model.build(tiny_config(), 0), Model.build(tiny_config(), 1)
    save_checkpoint(a, tmp_path / "ck")
    save_checkpoint(b, tmp_path / "ck")
    assert load_checkpoint(tmp_path / "ck").params["output.W"].data.tobytes() == b.params["output.W"].data.tobytes()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ck"]


def _edit_manifest(path, fn):
    m = json.loads((path / MANIFEST).read_text())
    fn(m)
    (path / MANIFEST).write_text(json.dumps(m))


def test_version_mismatch(tmp_path):
    path = save_checkpoint(Model.build(tiny_config(), 0), tmp_path / "ck")
    _edit_manifest(path, lambda m: m.update(format_version=99))
    (path / BUFFER).write_bytes(b"")  # the version is checked before the buffer
    with pytest.raises(VersionMismatchError):
        load_checkpoint(path)


def test_truncated_buffer(tmp_path):
    path = save_checkpoint(Model.build(tiny_config(), 0), tmp_path / "ck")
    data = (path / BUFFER).read_bytes()
    (path / BUFFER).write_bytes(data[:-8])
    with pytest.raises(TruncatedBufferError):
        load_checkpoint(path)


def test_shape_mismatch(tmp_path):
    path = save_checkpoint(Model.build(tiny_config(), 0), tmp_path / "ck")
    bigger = dataclasses.replace(tiny_config(), num_classes=5).to_dict()
    _edit_manifest(path, lambda m: m.update(config=bigger))
    with pytest.raises(ShapeMismatchError, match="output"):
        load_checkpoint(path)


def test_error_types_are_distinct_and_missing_dir(tmp_path):
    kinds = {VersionMismatchError, TruncatedBufferError, ShapeMismatchError}
    assert len(kinds) == 3 and all(issubclass(k, CheckpointError) for k in kinds)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")
