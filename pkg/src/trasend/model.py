"""DeepSense-style convolutional template with four temporal stages.

Every variant shares the same front end:

* an individual convolutional subnetwork per sensor, three valid
  convolutions along the feature axis whose first kernel spans three
  frequency bins and strides one bin;
* a merge convolutional subnetwork, three same-padded convolutions over the
  (sensor, feature) plane, flattened per timestep to ``d_model``;

followed by a temporal stage chosen by ``ModelConfig.variant``:

``deepsense``   two stacked GRU layers, mean over time
``trasend``     positional encoding, multi-head self-attention, residual +
                layer norm, position-wise feed-forward, residual + layer norm
``trasend_bd``  bidirectional GRU, concatenated and averaged over time
``trasend_ca``  GRU fed with a soft-attention context over merge-conv locations

and a dense output layer. The output layer is the only parameter group
touched by personalisation.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import (
    FEATURE_EXTRACTOR,
    OUTPUT_LAYER,
    DimensionError,
    GRUWeights,
    ModelParams,
    Parameter,
    RunningStats,
    Tensor,
)

VARIANTS = ("deepsense", "trasend", "trasend_bd", "trasend_ca")


class ConfigError(ValueError):
    """A model configuration cannot be built or does not match its parameters."""


@dataclass(frozen=True)
class ModelConfig:
    sensors: tuple[tuple[str, int], ...]
    T: int = 20
    f: int = 10
    num_classes: int = 6
    variant: str = "trasend"
    conv_filters: int = 64
    gru_units: int = 120
    heads: int = 8
    d_k: int = 64
    dropout_conv: float = 0.2
    dropout_rnn: float = 0.5
    ffn_hidden: int | None = None
    ca_score_width: int | None = None
    merge_kernels: tuple[int, ...] = (8, 6, 4)
    temporal_reduction: str = "mean"
    positional_encoding: bool = True
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    ln_eps: float = 1e-6
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "sensors", tuple((str(s), int(d)) for s, d in self.sensors))
        object.__setattr__(self, "merge_kernels", tuple(int(k) for k in self.merge_kernels))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.sensors:
            raise ConfigError("at least one sensor is required")
        if len({s for s, _ in self.sensors}) != len(self.sensors):
            raise ConfigError("sensor ids must be unique")
        if any(d < 1 for _, d in self.sensors):
            raise ConfigError("every sensor needs d >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.f < 7:
            raise ConfigError(
                f"f={self.f} leaves no room for the individual kernels (feature width after "
                f"three valid layers is f-6 bins)"
            )
        if self.temporal_reduction not in ("mean", "flatten"):
            raise ConfigError(f"unknown temporal_reduction {self.temporal_reduction!r}")
        if self.variant == "trasend" and self.positional_encoding and self.d_model % 2:
            raise ConfigError(f"positional encoding needs an even d_model, got {self.d_model}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def S(self) -> int:
        return len(self.sensors)

    def widths(self, d: int) -> tuple[int, int, int, int]:
        """Feature-axis width entering and leaving each individual conv layer."""
        return 2 * self.f * d, self.f - 2, self.f - 4, self.f - 6

    @property
    def W3(self) -> int:
        return self.f - 6

    @property
    def d_model(self) -> int:
        return self.S * self.W3 * self.conv_filters

    @property
    def ffn_width(self) -> int:
        return self.ffn_hidden or 2 * self.d_model

    @property
    def score_width(self) -> int:
        return self.ca_score_width or self.conv_filters

    @property
    def feature_dim(self) -> int:
        """Width of the representation fed to the output layer."""
        if self.variant == "trasend":
            return self.d_model * (self.T if self.temporal_reduction == "flatten" else 1)
        if self.variant == "trasend_bd":
            return 2 * self.gru_units
        return self.gru_units

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sensors"] = [list(s) for s in self.sensors]
        d["merge_kernels"] = list(self.merge_kernels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "sensors" in d:
            d["sensors"] = tuple(tuple(s) for s in d["sensors"])
        if "merge_kernels" in d:
            d["merge_kernels"] = tuple(d["merge_kernels"])
        return cls(**d)

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# stateless building blocks


def positional_encoding(T: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding: sin on even columns, cos on odd, base 10000."""
    if d_model % 2:
        raise ConfigError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(T)[:, None]
    i2 = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i2 / d_model)
    pe = np.empty((T, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def scaled_dot_attention(Q, K, V, return_weights: bool = False):
    """``softmax(Q K^T / sqrt(d_k)) V`` over the last two axes."""
    Q, K, V = ad.as_tensor(Q), ad.as_tensor(K), ad.as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape} do not line up")
    d_k = Q.shape[-1]
    scores = ad.matmul(Q, ad.transpose(K, _swap_last(K.ndim))) * (1.0 / math.sqrt(d_k))
    w = ad.softmax(scores, axis=-1)
    out = ad.matmul(w, V)
    return (out, w) if return_weights else out


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def multi_head_self_attention(
    x, params: Mapping[str, Tensor], heads: int, d_k: int, prefix: str = "", trace: dict | None = None
) -> Tensor:
    """Self-attention over the time axis of ``x`` (``batch x T x d_model``).

    Expects ``{prefix}wq, bq, wk, bk, wv, bv`` projecting ``d_model`` to
    ``heads*d_k`` and ``{prefix}wo, bo`` projecting back.
    """
    x = ad.as_tensor(x)
    B, T, _ = x.shape

    def split(t):
        return ad.transpose(ad.reshape(t, (B, T, heads, d_k)), (0, 2, 1, 3))

    q = split(ad.dense(x, params[prefix + "wq"], params[prefix + "bq"]))
    k = split(ad.dense(x, params[prefix + "wk"], params[prefix + "bk"]))
    v = split(ad.dense(x, params[prefix + "wv"], params[prefix + "bv"]))
    att, w = scaled_dot_attention(q, k, v, return_weights=True)
    if trace is not None:
        trace["attention"] = w.data
    merged = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, heads * d_k))
    return ad.dense(merged, params[prefix + "wo"], params[prefix + "bo"])


def gru_sequence(x, weights: GRUWeights, h0=None, reverse: bool = False) -> Tensor:
    """Run a GRU over axis 1 of ``x`` (``batch x T x dx``); returns ``batch x T x dh``.

    Same gate equations as :func:`autodiff.gru_cell`, with the input
    projection hoisted out of the loop. Outputs are returned in input time
    order even when ``reverse`` is set.
    """
    x = ad.as_tensor(x)
    B, T, _ = x.shape
    dh = weights.U.shape[0]
    xw = ad.dense(x, weights.W, weights.b)
    h = ad.Tensor(np.zeros((B, dh), dtype=x.dtype)) if h0 is None else ad.as_tensor(h0)
    Uzr = weights.U[:, : 2 * dh]
    Uh = weights.U[:, 2 * dh :]
    outs: list = [None] * T
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        xt = xw[:, t, :]
        gates = ad.sigmoid(xt[:, : 2 * dh] + ad.matmul(h, Uzr))
        z = gates[:, :dh]
        r = gates[:, dh:]
        cand = ad.tanh(xt[:, 2 * dh :] + ad.matmul(r * h, Uh))
        h = h + z * (cand - h)
        outs[t] = h
    return ad.stack(outs, axis=1)


def cross_entropy_loss(pred, truth) -> float:
    """Double sum of ``-truth * log(pred)`` over examples and classes.

    ``truth`` must be one-hot. Terms with a zero target are skipped, so a
    perfect prediction scores exactly 0. Training uses
    :func:`autodiff.softmax_cross_entropy` on logits instead.
    """
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"pred {pred.shape} and truth {truth.shape} differ")
    if not (np.all((truth == 0) | (truth == 1)) and np.all(truth.sum(axis=-1) == 1)):
        raise ValueError("truth rows must be one-hot")
    hit = truth == 1
    return float(-np.log(pred[hit]).sum())


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# --------------------------------------------------------------------------
# model


@dataclass
class Model:
    """One architecture instance: its config plus a named parameter collection."""

    config: ModelConfig
    params: ModelParams = field(default_factory=ModelParams)
    seed: int = 0

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "Model":
        m = cls(config, ModelParams(), seed)
        m._init_params(np.random.default_rng(seed))
        return m

    # ---------------------------------------------------------------- params

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def _add(self, name, shape, rng=None, fan=None, group=FEATURE_EXTRACTOR, fill=0.0, trainable=True):
        if rng is not None:
            data = ad.init_glorot(rng, shape, fan[0], fan[1], self.dtype)
        else:
            data = np.full(shape, fill, dtype=self.dtype)
        self.params.add(Parameter(name, data, group, trainable))

    def _add_bn(self, prefix, n):
        self._add(prefix + "bn.scale", (n,), fill=1.0)
        self._add(prefix + "bn.shift", (n,), fill=0.0)
        self._add(prefix + "bn.running_mean", (n,), fill=0.0, trainable=False)
        self._add(prefix + "bn.running_var", (n,), fill=1.0, trainable=False)

    def _add_gru(self, prefix, dx, dh, rng):
        self._add(prefix + "W", (dx, 3 * dh), rng, (dx, dh))
        self._add(prefix + "U", (dh, 3 * dh), rng, (dh, dh))
        self._add(prefix + "b", (3 * dh,))

    def _init_params(self, rng):
        c = self.config
        F = c.conv_filters
        for i, (_, d) in enumerate(c.sensors):
            p = f"indiv.{i}."
            kw = 6 * d
            self._add(p + "conv1.filters", (1, kw, 1, F), rng, (kw, kw * F // (2 * d)))
            self._add_bn(p + "conv1.", F)
            for layer in (2, 3):
                self._add(p + f"conv{layer}.filters", (1, 3, F, F), rng, (3 * F, 3 * F))
                self._add_bn(p + f"conv{layer}.", F)
        for j, k in enumerate(c.merge_kernels, start=1):
            fan = c.S * k * F
            self._add(f"merge.conv{j}.filters", (c.S, k, F, F), rng, (fan, fan))
            self._add_bn(f"merge.conv{j}.", F)

        D, H = c.d_model, c.gru_units
        if c.variant == "trasend":
            hk = c.heads * c.d_k
            for n in ("q", "k", "v"):
                self._add(f"temporal.mhsa.w{n}", (D, hk), rng, (D, hk))
                self._add(f"temporal.mhsa.b{n}", (hk,))
            self._add("temporal.mhsa.wo", (hk, D), rng, (hk, D))
            self._add("temporal.mhsa.bo", (D,))
            for ln in ("ln1", "ln2"):
                self._add(f"temporal.{ln}.gain", (D,), fill=1.0)
                self._add(f"temporal.{ln}.bias", (D,))
            self._add("temporal.ffn.w1", (D, c.ffn_width), rng, (D, c.ffn_width))
            self._add("temporal.ffn.b1", (c.ffn_width,))
            self._add("temporal.ffn.w2", (c.ffn_width, D), rng, (c.ffn_width, D))
            self._add("temporal.ffn.b2", (D,))
        elif c.variant == "deepsense":
            self._add_gru("temporal.gru1.", D, H, rng)
            self._add_bn("temporal.", H)
            self._add_gru("temporal.gru2.", H, H, rng)
        elif c.variant == "trasend_bd":
            self._add_gru("temporal.fwd.", D, H, rng)
            self._add_gru("temporal.bwd.", D, H, rng)
        else:
            A = c.score_width
            self._add("temporal.init.W", (F, H), rng, (F, H))
            self._add("temporal.init.b", (H,))
            self._add("temporal.att_feat.W", (F, A), rng, (F, A))
            self._add("temporal.att_feat.b", (A,))
            self._add("temporal.att_state.W", (H, A), rng, (H, A))
            self._add("temporal.att_v", (A, 1), rng, (A, 1))
            self._add_gru("temporal.gru.", D + F, H, rng)

        n_in = c.feature_dim
        self._add("output.W", (n_in, c.num_classes), rng, (n_in, c.num_classes), group=OUTPUT_LAYER)
        self._add("output.b", (c.num_classes,), group=OUTPUT_LAYER)

    # --------------------------------------------------------------- helpers

    def _bn(self, x, prefix, mode):
        p = self.params
        stats = RunningStats(p[prefix + "bn.running_mean"].data, p[prefix + "bn.running_var"].data)
        y = ad.batch_norm(
            x, p[prefix + "bn.scale"], p[prefix + "bn.shift"], stats, mode,
            self.config.bn_momentum, self.config.bn_eps,
        )
        if mode == "train":
            p[prefix + "bn.running_mean"].data = stats.mean.astype(self.dtype)
            p[prefix + "bn.running_var"].data = stats.var.astype(self.dtype)
        return y

    def _gru(self, prefix) -> GRUWeights:
        p = self.params
        return GRUWeights(p[prefix + "W"], p[prefix + "U"], p[prefix + "b"])

    def _check_inputs(self, inputs: Mapping[str, np.ndarray]) -> int:
        c = self.config
        batch = None
        for sid, d in c.sensors:
            if sid not in inputs:
                raise ConfigError(f"missing input for sensor {sid!r}")
            x = inputs[sid]
            want = (c.T, 2 * c.f * d)
            if x.ndim != 3 or x.shape[1:] != want:
                raise DimensionError(f"sensor {sid}: input shape {x.shape}, expected (batch, {want[0]}, {want[1]})")
            if batch is None:
                batch = x.shape[0]
            elif x.shape[0] != batch:
                raise DimensionError("all sensors need the same batch size")
        return batch

    # ----------------------------------------------------------- subnetworks

    def individual_conv_forward(self, x, sensor_index: int, mode="eval", rng=None) -> Tensor:
        """``batch x T x 2fd`` to ``batch x T x W3 x filters`` for one sensor."""
        c = self.config
        d = c.sensors[sensor_index][1]
        p = self.params
        pre = f"indiv.{sensor_index}."
        x = ad.as_tensor(x)
        B, T, W = x.shape
        h = ad.reshape(x, (B, T, W, 1))
        strides = ((1, 2 * d), (1, 1), (1, 1))
        for layer in range(3):
            if layer:
                h = ad.dropout(h, c.dropout_conv, mode, rng)
            name = f"{pre}conv{layer + 1}."
            h = ad.conv2d(h, p[name + "filters"], strides[layer], "valid")
            h = ad.relu(self._bn(h, name, mode))
        return h

    def merge_conv_forward(self, per_sensor: Sequence, mode="eval", rng=None, flatten=True) -> Tensor:
        """Stack per-sensor maps and convolve the (sensor, feature) plane.

        Returns ``batch x T x d_model`` or, with ``flatten=False``,
        ``batch x T x (S*W3) x filters``.
        """
        c = self.config
        shapes = {tuple(t.shape) for t in per_sensor}
        if len(shapes) != 1:
            raise ValueError(f"per-sensor feature maps disagree in shape: {sorted(shapes)}")
        B, T, W3, F = per_sensor[0].shape
        S = len(per_sensor)
        h = ad.reshape(ad.stack(per_sensor, axis=2), (B * T, S, W3, F))
        for j in range(len(c.merge_kernels)):
            if j:
                h = ad.dropout(h, c.dropout_conv, mode, rng)
            name = f"merge.conv{j + 1}."
            h = ad.conv2d(h, self.params[name + "filters"], (1, 1), "same")
            h = ad.relu(self._bn(h, name, mode))
        if flatten:
            return ad.reshape(h, (B, T, S * W3 * F))
        return ad.reshape(h, (B, T, S * W3, F))

    def trasend_temporal_block(self, x, mode="eval", rng=None, trace=None) -> Tensor:
        c = self.config
        p = self.params
        x = ad.as_tensor(x)
        if c.positional_encoding:
            x = ad.add(x, positional_encoding(x.shape[1], x.shape[2]).astype(x.dtype))
        att = multi_head_self_attention(x, p, c.heads, c.d_k, "temporal.mhsa.", trace)
        h = ad.layer_norm(ad.add(x, att), p["temporal.ln1.gain"], p["temporal.ln1.bias"], eps=c.ln_eps)
        ff = ad.relu(ad.dense(h, p["temporal.ffn.w1"], p["temporal.ffn.b1"]))
        ff = ad.dense(ff, p["temporal.ffn.w2"], p["temporal.ffn.b2"])
        if trace is not None:
            trace["ffn"] = ff.data
        return ad.layer_norm(ad.add(h, ff), p["temporal.ln2.gain"], p["temporal.ln2.bias"], eps=c.ln_eps)

    def deepsense_gru_stack(self, x, mode="eval", rng=None) -> Tensor:
        c = self.config
        h1 = gru_sequence(x, self._gru("temporal.gru1."))
        h1 = ad.dropout(h1, c.dropout_rnn, mode, rng)
        h1 = self._bn(h1, "temporal.", mode)
        h2 = gru_sequence(h1, self._gru("temporal.gru2."))
        return ad.mean(h2, axis=1)

    def bd_temporal(self, x, mode="eval", rng=None) -> Tensor:
        fwd = gru_sequence(x, self._gru("temporal.fwd."))
        bwd = gru_sequence(x, self._gru("temporal.bwd."), reverse=True)
        return ad.mean(ad.concat([fwd, bwd], axis=-1), axis=1)

    def ca_temporal(self, conv_maps, mode="eval", rng=None, trace=None) -> Tensor:
        """GRU whose input at each step is [flattened features, attention context].

        ``conv_maps`` is ``batch x T x L x filters``.
        """
        c = self.config
        p = self.params
        conv_maps = ad.as_tensor(conv_maps)
        B, T, L, F = conv_maps.shape
        H = c.gru_units
        weights = self._gru("temporal.gru.")
        h = ad.dense(ad.mean(conv_maps[:, 0], axis=1), p["temporal.init.W"], p["temporal.init.b"])
        feat_proj = ad.dense(conv_maps, p["temporal.att_feat.W"], p["temporal.att_feat.b"])  # B T L A
        flat = ad.reshape(conv_maps, (B, T, L * F))
        xw = ad.dense(flat, weights.W[: L * F], weights.b)  # B T 3H
        Wc = weights.W[L * F :]
        Uzr, Uh = weights.U[:, : 2 * H], weights.U[:, 2 * H :]
        outs, all_w = [], []
        for t in range(T):
            state_proj = ad.matmul(h, p["temporal.att_state.W"])  # B A
            e = ad.tanh(feat_proj[:, t] + ad.reshape(state_proj, (B, 1, -1)))
            scores = ad.reshape(ad.matmul(e, p["temporal.att_v"]), (B, L))
            w = ad.softmax(scores, axis=-1)
            all_w.append(w.data)
            ctx = ad.reshape(ad.matmul(ad.reshape(w, (B, 1, L)), conv_maps[:, t]), (B, F))
            xt = xw[:, t] + ad.matmul(ctx, Wc)
            gates = ad.sigmoid(xt[:, : 2 * H] + ad.matmul(h, Uzr))
            z, r = gates[:, :H], gates[:, H:]
            cand = ad.tanh(xt[:, 2 * H :] + ad.matmul(r * h, Uh))
            h = h + z * (cand - h)
            outs.append(h)
        if trace is not None:
            trace["ca_weights"] = np.stack(all_w, axis=1)
        return ad.mean(ad.stack(outs, axis=1), axis=1)

    # --------------------------------------------------------------- forward

    def features(self, inputs: Mapping[str, np.ndarray], mode="eval", rng=None, trace=None) -> Tensor:
        """Everything up to (not including) the output layer: ``batch x feature_dim``."""
        c = self.config
        self._check_inputs(inputs)
        per_sensor = [
            self.individual_conv_forward(np.asarray(inputs[sid], dtype=self.dtype), i, mode, rng)
            for i, (sid, _) in enumerate(c.sensors)
        ]
        if c.variant == "trasend_ca":
            maps = self.merge_conv_forward(per_sensor, mode, rng, flatten=False)
            return self.ca_temporal(maps, mode, rng, trace)
        merged = self.merge_conv_forward(per_sensor, mode, rng)
        if trace is not None:
            trace["merged"] = merged.data
        if c.variant == "deepsense":
            return self.deepsense_gru_stack(merged, mode, rng)
        if c.variant == "trasend_bd":
            return self.bd_temporal(merged, mode, rng)
        block = self.trasend_temporal_block(merged, mode, rng, trace)
        if trace is not None:
            trace["block"] = block.data
        if c.temporal_reduction == "mean":
            return ad.mean(block, axis=1)
        B = block.shape[0]
        return ad.reshape(block, (B, -1))

    def output_layer(self, feats) -> Tensor:
        return ad.dense(feats, self.params["output.W"], self.params["output.b"])

    def logits(self, inputs, mode="eval", rng=None, trace=None) -> Tensor:
        return self.output_layer(self.features(inputs, mode, rng, trace))

    def classify_forward(self, inputs, mode="eval", rng=None) -> np.ndarray:
        """Class probabilities, ``batch x num_classes``."""
        return ad.softmax(self.logits(inputs, mode, rng), axis=-1).data

    def predict(self, inputs, batch_size: int = 256) -> np.ndarray:
        n = next(iter(inputs.values())).shape[0]
        out = []
        for lo in range(0, n, batch_size):
            chunk = {k: v[lo : lo + batch_size] for k, v in inputs.items()}
            out.append(self.logits(chunk, "eval").data.argmax(axis=-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def clone(self) -> "Model":
        m = Model(self.config, ModelParams(), self.seed)
        for p in self.params.values():
            m.params.add(Parameter(p.name, p.data.copy(), p.group, p.trainable))
        return m
