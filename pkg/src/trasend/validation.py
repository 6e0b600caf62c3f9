"""Validation suites shared by the command line and the test-suite.

* :func:`gradcheck_suite` — finite-difference checks of every differentiable
  primitive and of a whole (tiny) model;
* :func:`augmentation_ablation` — leave-one-user-out with and without
  augmented copies, scored on noise-perturbed test sets.

The permuted-label experiment lives in :mod:`trasend.personalize`.
"""
from __future__ import annotations

import zlib
from dataclasses import replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GRUWeights, RunningStats, Tensor
from .model import Model, ModelConfig, multi_head_self_attention, one_hot
from .preprocess import PreprocessedSample, add_noise
from .train import TrainConfig, leave_one_user_out

GRADCHECK_TOLERANCE = 1e-4

#: Smallest model the conv template admits (valid kernels need f >= 7).
TINY_GRADCHECK_CONFIG = ModelConfig(
    sensors=(("a", 2), ("b", 2)), T=4, f=8, num_classes=3, variant="trasend",
    conv_filters=4, heads=2, d_k=8, dropout_conv=0.0, dropout_rnn=0.0,
)


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list]]:
    r = lambda *s: rng.standard_normal(s)
    cases: dict[str, tuple[Callable, list]] = {}

    def case(name, fn, *inputs):
        # a fixed random linear functional makes every output coordinate matter
        w_rng = np.random.default_rng(zlib.crc32(name.encode()))
        probe = fn(*[Tensor(np.asarray(x)) for x in inputs])
        w = w_rng.standard_normal(probe.shape)
        cases[name] = (lambda *t: ad.sum_(fn(*t) * w), list(inputs))

    case("add", ad.add, r(3, 4), r(4))
    case("sub", ad.sub, r(3, 4), r(3, 1))
    case("mul", ad.mul, r(2, 3, 4), r(3, 4))
    case("matmul", ad.matmul, r(2, 3, 4), r(4, 5))
    case("dense", ad.dense, r(5, 4), r(4, 3), r(3))
    case("sum", lambda x: ad.sum_(x, axis=1, keepdims=True), r(3, 4))
    case("mean", lambda x: ad.mean(x, axis=(0, 2)), r(2, 3, 4))
    case("reshape", lambda x: ad.reshape(x, (4, 3)), r(3, 4))
    case("transpose", lambda x: ad.transpose(x, (2, 0, 1)), r(2, 3, 4))
    case("getitem", lambda x: x[:, 1:3], r(3, 4))
    case("concat", lambda a, b: ad.concat([a, b], axis=-1), r(2, 3), r(2, 2))
    case("stack", lambda a, b: ad.stack([a, b], axis=1), r(2, 3), r(2, 3))
    case("relu", ad.relu, r(4, 5) + 0.05)
    case("tanh", ad.tanh, r(4, 5))
    case("sigmoid", ad.sigmoid, r(4, 5) * 3)
    case("softmax", ad.softmax, r(3, 5))
    case("log_softmax", ad.log_softmax, r(3, 5))
    y = one_hot([0, 2, 1], 4)
    cases["softmax_cross_entropy"] = (lambda z: ad.softmax_cross_entropy(z, y), [r(3, 4)])
    case("layer_norm", lambda x, g, b: ad.layer_norm(x, g, b), r(3, 6), 1 + 0.1 * r(6), r(6))
    case("batch_norm_train",
         lambda x, s, b: ad.batch_norm(x, s, b, RunningStats(), "train"), r(5, 3, 4), 1 + 0.1 * r(4), r(4))
    stats = RunningStats(np.abs(r(4)), 1 + np.abs(r(4)))
    case("batch_norm_eval", lambda x, s, b: ad.batch_norm(x, s, b, stats, "eval"), r(5, 4), r(4), r(4))
    drop_seed = int(rng.integers(2**31))
    case("dropout", lambda x: ad.dropout(x, 0.3, "train", np.random.default_rng(drop_seed)), r(4, 5))
    for stride, padding in [((1, 1), "valid"), ((1, 2), "valid"), ((2, 1), "same"), ((1, 3), "same")]:
        case(f"conv2d_s{stride[0]}{stride[1]}_{padding}",
             lambda x, k, s=stride, p=padding: ad.conv2d(x, k, s, p), r(2, 4, 9, 2), r(2, 3, 2, 3))
    case("gru_cell", lambda x, h, W, U, b: ad.gru_cell(x, h, GRUWeights(W, U, b)),
         r(3, 4), r(3, 5), 0.5 * r(4, 15), 0.5 * r(5, 15), 0.1 * r(15))
    n_heads, d_k, dm = 2, 3, 4
    mh = {"q": (dm, n_heads * d_k), "k": (dm, n_heads * d_k), "v": (dm, n_heads * d_k), "o": (n_heads * d_k, dm)}

    def mhsa(x, wq, wk, wv, wo):
        params = {"t.wq": wq, "t.bq": np.zeros(n_heads * d_k), "t.wk": wk, "t.bk": np.zeros(n_heads * d_k),
                  "t.wv": wv, "t.bv": np.zeros(n_heads * d_k), "t.wo": wo, "t.bo": np.zeros(dm)}
        return multi_head_self_attention(x, params, n_heads, d_k, prefix="t.")

    case("multi_head_self_attention", mhsa, r(2, 5, dm), *[0.5 * r(*s) for s in mh.values()])
    return cases


def gradcheck_model(config: ModelConfig = TINY_GRADCHECK_CONFIG, seed: int = 0, batch: int = 3) -> float:
    """Max relative error of the full forward pass (train-mode BN) w.r.t. every trainable parameter."""
    model = Model.build(config, seed)
    rng = np.random.default_rng(seed + 1)
    inputs = {sid: rng.standard_normal((batch, config.T, 2 * config.f * d)) for sid, d in config.sensors}
    labels = one_hot(rng.integers(0, config.num_classes, batch), config.num_classes)
    names = list(model.params.trainable())
    # perturb scales/biases away from their init so every path is exercised
    for n in names:
        p = model.params[n]
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)

    def loss(*_):
        return ad.softmax_cross_entropy(model.logits(inputs, "train", np.random.default_rng(0)), labels)

    return ad.gradcheck(loss, [model.params[n] for n in names])


def gradcheck_suite(seed: int = 0, include_model: bool = True) -> dict[str, float]:
    """Max relative gradient error per primitive (and ``model`` for the whole network)."""
    rng = np.random.default_rng(seed)
    out = {name: ad.gradcheck(fn, inputs) for name, (fn, inputs) in _primitive_cases(rng).items()}
    if include_model:
        out["model"] = gradcheck_model(seed=seed)
    return out


def noisy_test_transform(config: TrainConfig, seed: int) -> Callable[[PreprocessedSample, int], PreprocessedSample]:
    """Perturb a test sample with the augmentation noise model, seeded by (seed, user, index)."""
    spec = config.augmentation

    def transform(sample: PreprocessedSample, index: int) -> PreprocessedSample:
        user_key = zlib.crc32(sample.user_id.encode())
        return add_noise(sample, spec, np.random.default_rng([seed, user_key, index]))

    return transform


def augmentation_ablation(
    samples: Sequence[PreprocessedSample],
    model_factory: Callable[[int], Model],
    config: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    copies: tuple[int, int] = (0, 9),
) -> dict:
    """Aggregate LOUO macro-F1 on noisy test sets, without vs with augmentation, per seed."""
    result: dict = {"seeds": list(seeds), "copies": list(copies)}
    for c in copies:
        scores = []
        for s in seeds:
            cfg = replace(config, augment_copies=c, seed=s)
            report = leave_one_user_out(
                samples, lambda s=s: model_factory(s), cfg, test_transform=noisy_test_transform(cfg, s)
            )
            scores.append(report.aggregate_f1)
        result[f"f1_copies_{c}"] = scores
        result[f"mean_copies_{c}"] = float(np.mean(scores))
    result["improvement"] = result[f"mean_copies_{copies[1]}"] - result[f"mean_copies_{copies[0]}"]
    return result
