"""Output-layer personalisation.

A trained model's feature extractor is frozen; only a private copy of the
dense output layer is updated, one Adam step per labelled sample as user
feedback arrives. Each sample is predicted before it is learned from
(prequential bookkeeping).
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import OUTPUT_LAYER, AdamHyper, AdamState, Parameter
from .data import stack_inputs
from .model import Model, one_hot
from .preprocess import PreprocessedSample
from .train import TrainConfig, augment_all, confusion_matrix, per_class_f1, train

log = logging.getLogger(__name__)

PERSONALIZATION_ADAM = AdamHyper(lr=1e-3, beta1=0.5, beta2=0.9, eps=1e-8)


@dataclass
class PersonalizationSession:
    model: Model
    output: dict[str, Parameter]
    state: AdamState = field(default_factory=AdamState)
    hyper: AdamHyper = PERSONALIZATION_ADAM
    events: int = 0
    rejected: int = 0
    predictions: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def start(cls, model: Model, hyper: AdamHyper = PERSONALIZATION_ADAM) -> "PersonalizationSession":
        """Fresh session with its own copy of the output layer and a fresh Adam state."""
        output = {
            n: Parameter(n, p.data.copy(), p.group, p.trainable)
            for n, p in model.params.group(OUTPUT_LAYER).items()
        }
        return cls(model, output, AdamState(), hyper)

    def features(self, samples: Sequence[PreprocessedSample]) -> np.ndarray:
        X = stack_inputs(samples, [s for s, _ in self.model.config.sensors])
        return self.model.features(X, "eval").data

    def logits_from_features(self, feats) -> ad.Tensor:
        return ad.dense(feats, self.output["output.W"], self.output["output.b"])

    def predict(self, samples: Sequence[PreprocessedSample]) -> np.ndarray:
        if not samples:
            return np.zeros(0, dtype=int)
        return self.logits_from_features(self.features(samples)).data.argmax(axis=-1)

    def loss(self, sample: PreprocessedSample, label: int) -> float:
        logits = self.logits_from_features(self.features([sample]))
        y = one_hot([label], self.model.config.num_classes)
        return float(ad.softmax_cross_entropy(logits, y).data)

    @property
    def prequential_accuracy(self) -> float:
        if not self.predictions:
            return math.nan
        return float(np.mean([p == t for p, t in self.predictions]))


def adapt_step(session: PersonalizationSession, sample: PreprocessedSample, label: int) -> PersonalizationSession:
    """Predict ``sample``, then take one Adam step on the output layer toward ``label``.

    Out-of-range labels are rejected and leave the session unchanged apart
    from the rejection counter.
    """
    C = session.model.config.num_classes
    if not 0 <= int(label) < C:
        session.rejected += 1
        log.warning("rejected feedback with label %r outside [0, %d)", label, C)
        return session
    feats = session.features([sample])
    y = one_hot([int(label)], C)
    with ad.GradTape() as tape:
        logits = session.logits_from_features(feats)
        loss = ad.softmax_cross_entropy(logits, y)
    session.predictions.append((int(logits.data.argmax()), int(label)))
    grads = ad.backward(tape, loss, session.output)
    ad.adam_step(session.output, grads, session.state, session.hyper)
    session.events += 1
    return session


def split_user_data(
    samples: Sequence[PreprocessedSample],
) -> tuple[list[PreprocessedSample], list[PreprocessedSample], list[str]]:
    """Per activity, the earlier half (rounded up) adapts and the later half tests.

    Returns ``(adaptation, test, warnings)``; each half is in time order.
    Activities with fewer than two samples are left out.
    """
    by_label: dict[int, list[PreprocessedSample]] = {}
    for s in samples:
        by_label.setdefault(s.label, []).append(s)
    adapt, test, warnings = [], [], []
    for label in sorted(by_label):
        group = sorted(by_label[label], key=lambda s: s.start)
        if len(group) < 2:
            warnings.append(f"activity {label}: {len(group)} sample(s), excluded from the split")
            continue
        k = (len(group) + 1) // 2
        adapt.extend(group[:k])
        test.extend(group[k:])
    adapt.sort(key=lambda s: s.start)
    test.sort(key=lambda s: s.start)
    return adapt, test, warnings


@dataclass
class PersonalizationResult:
    f1_before: float
    f1_after: float
    n_adapt: int
    n_test: int
    prequential_accuracy: float
    confusion_before: list
    confusion_after: list
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def personalize_run(
    model: Model,
    user_samples: Sequence[PreprocessedSample],
    hyper: AdamHyper = PERSONALIZATION_ADAM,
) -> tuple[PersonalizationResult, PersonalizationSession]:
    """Score the later half, replay the earlier half as feedback, score again.

    ``model`` is not modified; the adapted output layer lives in the returned
    session.
    """
    adapt, test, warnings = split_user_data([s for s in user_samples if s.origin == "real"])
    C = model.config.num_classes
    session = PersonalizationSession.start(model, hyper)
    true = np.array([s.label for s in test], dtype=int)
    test_feats = session.features(test) if test else None

    def score():
        if not test:
            return 0.0, np.zeros((C, C), dtype=int)
        pred = session.logits_from_features(test_feats).data.argmax(axis=-1)
        cm = confusion_matrix(pred, true, C)
        return float(per_class_f1(cm).mean()), cm

    f1_before, cm_before = score()
    if not adapt:
        warnings.append("empty adaptation half; output layer left unchanged")
    feats = session.features(adapt) if adapt else None
    for i, s in enumerate(adapt):
        # features of the frozen extractor do not change, so reuse them
        _adapt_on_features(session, feats[i : i + 1], s.label)
    f1_after, cm_after = score()
    result = PersonalizationResult(
        f1_before, f1_after, len(adapt), len(test), session.prequential_accuracy,
        cm_before.tolist(), cm_after.tolist(), warnings,
    )
    return result, session


def _adapt_on_features(session: PersonalizationSession, feats: np.ndarray, label: int) -> None:
    y = one_hot([label], session.model.config.num_classes)
    with ad.GradTape() as tape:
        logits = session.logits_from_features(feats)
        loss = ad.softmax_cross_entropy(logits, y)
    session.predictions.append((int(logits.data.argmax()), int(label)))
    grads = ad.backward(tape, loss, session.output)
    ad.adam_step(session.output, grads, session.state, session.hyper)
    session.events += 1


def permuted_label_validation(
    samples: Sequence[PreprocessedSample],
    model_factory: Callable[[], Model],
    config: TrainConfig,
    target_user: str | None = None,
    hyper: AdamHyper = PERSONALIZATION_ADAM,
) -> dict:
    """Train on uniformly permuted labels, then personalise on correct ones.

    The target user (lexicographically first by default) is held out of
    training; its data is split as in :func:`personalize_run`. Returns both
    test-half macro-F1 scores.
    """
    real = [s for s in samples if s.origin == "real"]
    users = sorted({s.user_id for s in real})
    target = target_user or users[0]
    train_real = [s for s in real if s.user_id != target]
    copies = augment_all(train_real, config.augmentation, config.seed)
    train_set = [x for s, cs in zip(train_real, copies) for x in (s, *cs)]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x9E7]))
    labels = rng.permutation(np.array([s.label for s in train_set]))
    model = model_factory()
    train(model, train_set, config, labels=labels)
    result, _ = personalize_run(model, [s for s in real if s.user_id == target], hyper)
    return {
        "target_user": target,
        "f1_random_train": result.f1_before,
        "f1_after_personalization": result.f1_after,
    }


# --------------------------------------------------------------------------
# feedback event stream (JSON lines)


def write_events(events: Iterable[dict], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps({"sample_ref": int(e["sample_ref"]), "label": int(e["label"]),
                                 "timestamp": float(e["timestamp"])}) + "\n")


def read_events(path: str | os.PathLike) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                e = json.loads(line)
                out.append({"sample_ref": int(e["sample_ref"]), "label": int(e["label"]),
                            "timestamp": float(e["timestamp"])})
            except (ValueError, KeyError, TypeError) as err:
                raise ValueError(f"{path}:{lineno}: bad event ({err})") from None
    return out


def events_for(samples: Sequence[PreprocessedSample]) -> list[dict]:
    """One feedback event per sample, in time order, referencing its index."""
    order = sorted(range(len(samples)), key=lambda i: samples[i].start)
    return [{"sample_ref": i, "label": samples[i].label, "timestamp": samples[i].start} for i in order]


def replay_events(
    session: PersonalizationSession, events: Sequence[dict], samples: Sequence[PreprocessedSample]
) -> PersonalizationSession:
    """Feed events to :func:`adapt_step` in arrival (file) order."""
    for e in events:
        ref = e["sample_ref"]
        if not 0 <= ref < len(samples):
            session.rejected += 1
            log.warning("event references missing sample %d", ref)
            continue
        adapt_step(session, samples[ref], e["label"])
    return session
