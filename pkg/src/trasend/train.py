"""Training loop, leave-one-user-out evaluation, learning-rate selection, metrics."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamHyper, AdamState, NumericError
from .data import stack_inputs
from .model import Model, one_hot
from .preprocess import AugmentationSpec, PreprocessConfig, PreprocessedSample, augment

log = logging.getLogger(__name__)

LR_CANDIDATES = (1e-2, 1e-3, 1e-4)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    augment_copies: int = 9
    aug_variance: tuple[tuple[str, float], ...] = (("accelerometer", 0.5), ("gyroscope", 0.2))
    aug_default_variance: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "aug_variance", tuple((str(k), float(v)) for k, v in dict(self.aug_variance).items()))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def adam(self) -> AdamHyper:
        return AdamHyper(self.learning_rate, self.beta1, self.beta2, self.eps)

    @property
    def augmentation(self) -> AugmentationSpec:
        return AugmentationSpec(self.augment_copies, dict(self.aug_variance), self.aug_default_variance)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["aug_variance"] = dict(self.aug_variance)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise ValueError(f"unknown train config keys: {sorted(set(d) - known)}")
        d = dict(d)
        if isinstance(d.get("aug_variance"), Mapping):
            d["aug_variance"] = tuple(d["aug_variance"].items())
        return cls(**d)


@dataclass
class EpochHistory:
    train_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    @property
    def best_epoch(self) -> int:
        """0-based index of the first epoch with the highest validation F1."""
        return int(np.argmax(self.val_f1))


@dataclass
class EvalReport:
    per_user: dict[str, dict]
    aggregate_f1: float
    config_hash: str
    seed: int
    averaging: str = "macro"
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


# --------------------------------------------------------------------------
# metrics


def confusion_matrix(pred: Sequence[int], true: Sequence[int], num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=int)
    true = np.asarray(true, dtype=int)
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions for {true.size} labels")
    for name, a in (("pred", pred), ("true", true)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    """F1 per class from a (true x pred) confusion matrix; empty ratios count as 0."""
    tp = np.diag(cm).astype(float)
    pred_pos = cm.sum(axis=0).astype(float)
    true_pos = cm.sum(axis=1).astype(float)
    precision = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros_like(tp), where=true_pos > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(pred: Sequence[int], true: Sequence[int], num_classes: int) -> float:
    """Unweighted mean of per-class F1 over all ``num_classes`` classes."""
    return float(per_class_f1(confusion_matrix(pred, true, num_classes)).mean())


# --------------------------------------------------------------------------
# training


def augment_all(
    samples: Sequence[PreprocessedSample],
    spec: AugmentationSpec,
    seed: int,
    cfg: PreprocessConfig = PreprocessConfig(),
) -> list[list[PreprocessedSample]]:
    """Augmented copies for each real sample, with one RNG stream per sample index."""
    streams = np.random.SeedSequence([seed, 0xA06]).spawn(len(samples))
    return [
        augment(s, spec, np.random.default_rng(ss), cfg) if s.origin == "real" and spec.copies else []
        for s, ss in zip(samples, streams)
    ]


def _labels(samples: Sequence[PreprocessedSample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=int)


def evaluate_f1(model: Model, samples: Sequence[PreprocessedSample]) -> tuple[float, np.ndarray]:
    """Macro-F1 and confusion matrix of ``model`` on ``samples`` (eval mode)."""
    c = model.config
    X = stack_inputs(samples, [s for s, _ in c.sensors])
    pred = model.predict(X)
    true = _labels(samples)
    cm = confusion_matrix(pred, true, c.num_classes)
    return float(per_class_f1(cm).mean()), cm


def train(
    model: Model,
    train_samples: Sequence[PreprocessedSample],
    config: TrainConfig,
    val_samples: Sequence[PreprocessedSample] | None = None,
    labels: Sequence[int] | None = None,
) -> tuple[dict[str, np.ndarray], EpochHistory]:
    """Mini-batch Adam on ``train_samples`` (already augmented as desired).

    After each epoch the model is scored on ``val_samples`` (the real
    training samples when omitted); the parameters of the first epoch with
    the highest macro-F1 are loaded back into ``model`` and returned.
    ``labels`` overrides the samples' own labels (permuted-label runs).
    """
    if not train_samples:
        raise ValueError("no training samples")
    c = model.config
    sids = [s for s, _ in c.sensors]
    X = stack_inputs(train_samples, sids)
    X = {k: v.astype(model.dtype) for k, v in X.items()}
    y = np.asarray(labels if labels is not None else _labels(train_samples), dtype=int)
    Y = one_hot(y, c.num_classes).astype(model.dtype)
    if val_samples is None:
        val = [s for s, lab in zip(train_samples, y) if s.origin == "real"]
        val_y = np.array([lab for s, lab in zip(train_samples, y) if s.origin == "real"])
    else:
        val, val_y = list(val_samples), _labels(val_samples)
    Xv = stack_inputs(val, sids)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A1]))
    trainable = model.params.trainable()
    state = AdamState()
    hyper = config.adam
    history = EpochHistory()
    best, best_f1 = None, -1.0
    n = y.size
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            batch = {k: v[idx] for k, v in X.items()}
            with ad.GradTape() as tape:
                logits = model.logits(batch, "train", rng)
                loss = ad.softmax_cross_entropy(logits, Y[idx], "sum")
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch + 1}, batch {b + 1}, lr {config.learning_rate}"
                )
            grads = ad.backward(tape, loss, trainable)
            try:
                ad.adam_step(trainable, grads, state, hyper)
            except NumericError as e:
                raise NumericError(f"{e} at epoch {epoch + 1}, batch {b + 1}, lr {config.learning_rate}") from e
            total += value
        pred = model.predict(Xv)
        f1 = macro_f1(pred, val_y, c.num_classes)
        history.train_loss.append(total / n)
        history.val_f1.append(f1)
        history.wall_time.append(time.perf_counter() - t0)
        log.debug("epoch %d loss %.4f val_f1 %.4f", epoch + 1, total / n, f1)
        if f1 > best_f1:
            best, best_f1 = model.params.snapshot(), f1
    model.params.load(best)
    return best, history


# fit_predict(train_samples, test_samples) -> predicted labels for test_samples
FitPredict = Callable[[Sequence[PreprocessedSample], Sequence[PreprocessedSample]], np.ndarray]


def default_fit_predict(model_factory: Callable[[], Model], config: TrainConfig) -> FitPredict:
    def fit_predict(train_samples, test_samples):
        model = model_factory()
        train(model, train_samples, config, val_samples=test_samples)
        X = stack_inputs(test_samples, [s for s, _ in model.config.sensors])
        return model.predict(X)

    return fit_predict


def leave_one_user_out(
    samples: Sequence[PreprocessedSample],
    model_factory: Callable[[], Model] | None,
    config: TrainConfig,
    num_classes: int | None = None,
    fit_predict: FitPredict | None = None,
    augmented: Sequence[Sequence[PreprocessedSample]] | None = None,
    test_transform: Callable[[PreprocessedSample, int], PreprocessedSample] | None = None,
    config_hash: str | None = None,
) -> EvalReport:
    """One fold per user: train on everyone else (plus augmented copies), test on that user.

    ``samples`` are the real samples of every user. ``augmented[i]`` holds the
    copies of ``samples[i]``; they are generated from ``config`` when not
    given. ``test_transform`` can perturb test samples (noisy test sets).
    """
    samples = [s for s in samples if s.origin == "real"]
    users = sorted({s.user_id for s in samples})
    if len(users) < 2:
        raise ValueError("leave-one-user-out needs at least two users")
    if num_classes is None:
        if model_factory is None:
            raise ValueError("num_classes is required without a model factory")
        num_classes = model_factory().config.num_classes
    if augmented is None:
        augmented = augment_all(samples, config.augmentation, config.seed)
    if fit_predict is None:
        fit_predict = default_fit_predict(model_factory, config)
    per_user, warnings, scores = {}, [], []
    for user in users:
        train_set = []
        for s, copies in zip(samples, augmented):
            if s.user_id != user:
                train_set.append(s)
                train_set.extend(copies)
        test_set = [s for s in samples if s.user_id == user]
        if test_transform is not None:
            test_set = [test_transform(s, i) for i, s in enumerate(test_set)]
        if not test_set:
            warnings.append(f"user {user}: no test samples, skipped")
            continue
        pred = np.asarray(fit_predict(train_set, test_set))
        true = _labels(test_set)
        cm = confusion_matrix(pred, true, num_classes)
        f1 = float(per_class_f1(cm).mean())
        per_user[user] = {"f1": f1, "confusion": cm.tolist()}
        scores.append(f1)
        log.info("fold %s: macro-F1 %.4f", user, f1)
    if config_hash is None:
        payload = json.dumps(config.to_dict(), sort_keys=True)
        if model_factory is not None:
            payload += model_factory().config.fingerprint()
        config_hash = hashlib.sha256(payload.encode()).hexdigest()[:16]
    return EvalReport(
        per_user=per_user,
        aggregate_f1=float(np.mean(scores)) if scores else 0.0,
        config_hash=config_hash,
        seed=config.seed,
        warnings=warnings,
    )


def select_learning_rate(
    samples: Sequence[PreprocessedSample],
    model_factory: Callable[[], Model] | None,
    config: TrainConfig,
    candidates: Sequence[float] = LR_CANDIDATES,
    evaluate: Callable[[float], float] | None = None,
) -> float:
    """Hold out the lexicographically first user and keep the best-scoring rate.

    Ties go to the smallest rate. ``evaluate(lr) -> F1`` replaces the
    default train-and-score procedure.
    """
    if not candidates:
        raise ValueError("no candidate learning rates")
    if evaluate is None:
        real = [s for s in samples if s.origin == "real"]
        users = sorted({s.user_id for s in real})
        if len(users) < 2:
            raise ValueError("learning-rate selection needs at least two users")
        held = users[0]
        train_real = [s for s in real if s.user_id != held]
        test = [s for s in real if s.user_id == held]
        copies = augment_all(train_real, config.augmentation, config.seed)
        train_set = [x for s, cs in zip(train_real, copies) for x in (s, *cs)]

        def evaluate(lr):
            model = model_factory()
            cfg = dataclasses.replace(config, learning_rate=lr)
            train(model, train_set, cfg, val_samples=test)
            return evaluate_f1(model, test)[0]

    best_lr, best_f1 = None, -np.inf
    for lr in sorted(candidates):
        f1 = float(evaluate(lr))
        log.info("lr %g: held-out macro-F1 %.4f", lr, f1)
        if f1 > best_f1:
            best_lr, best_f1 = lr, f1
    return best_lr
