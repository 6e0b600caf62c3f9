import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trasend import autodiff as ad
from trasend.autodiff import FEATURE_EXTRACTOR, OUTPUT_LAYER, DimensionError, Tensor
from trasend.model import (
    VARIANTS,
    ConfigError,
    Model,
    ModelConfig,
    cross_entropy_loss,
    gru_sequence,
    multi_head_self_attention,
    one_hot,
    positional_encoding,
    scaled_dot_attention,
)
from trasend.validation import TINY_GRADCHECK_CONFIG, gradcheck_model

from conftest import tiny_config


def inputs_for(config, batch, rng):
    return {sid: rng.standard_normal((batch, config.T, 2 * config.f * d)) for sid, d in config.sensors}


# ---------------------------------------------------------------- configuration


def test_paper_width_arithmetic():
    c = ModelConfig(sensors=(("acc", 3), ("gyro", 3)))
    assert c.widths(3) == (60, 8, 6, 4)
    assert c.d_model == 512
    assert c.ffn_width == 1024


def test_config_rejects_small_f_and_bad_variant():
    with pytest.raises(ConfigError):
        ModelConfig(sensors=(("a", 2),), f=6)
    with pytest.raises(ConfigError):
        ModelConfig(sensors=(("a", 2),), variant="lstm")
    with pytest.raises(ConfigError):
        ModelConfig(sensors=(("a", 2),), num_classes=1)


def test_config_round_trip_and_unknown_keys():
    c = tiny_config("trasend_ca", T=5)
    assert ModelConfig.from_dict(c.to_dict()) == c
    assert c.fingerprint() == ModelConfig.from_dict(c.to_dict()).fingerprint()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**c.to_dict(), "dropout": 0.1})


def test_model_rejects_wrong_input_shape(rng):
    m = Model.build(tiny_config(T=3), 0)
    bad = inputs_for(m.config, 2, rng)
    bad["acc"] = bad["acc"][:, :, :-1]
    with pytest.raises(DimensionError):
        m.logits(bad)
    good = inputs_for(m.config, 2, rng)
    with pytest.raises(ConfigError):
        m.logits({"acc": good["acc"]})


# ---------------------------------------------------------------- individual conv


def test_individual_conv_output_shape(rng):
    c = ModelConfig(sensors=(("acc", 3), ("gyro", 3)))
    m = Model.build(c, 0)
    out = m.individual_conv_forward(rng.standard_normal((2, 20, 60)), 0)
    assert out.shape == (2, 20, 4, 64)
    assert m.params["indiv.0.conv1.filters"].shape == (1, 18, 1, 64)


def test_first_kernel_receptive_field_is_three_bins():
    d = 3
    m = Model.build(tiny_config(), 0)
    kw = m.params["indiv.0.conv1.filters"].shape[1]
    assert kw == 6 * d == 3 * 2 * d
    # the stride moves exactly one frequency bin: perturbing bin 3 only touches outputs 1..3
    x = np.zeros((1, 1, 60))
    base = ad.conv2d(x.reshape(1, 1, 60, 1), m.params["indiv.0.conv1.filters"], (1, 2 * d), "valid").data
    x[0, 0, 2 * d * 3] = 1.0
    hit = ad.conv2d(x.reshape(1, 1, 60, 1), m.params["indiv.0.conv1.filters"], (1, 2 * d), "valid").data
    changed = np.flatnonzero(np.any(hit != base, axis=-1)[0, 0])
    assert changed.tolist() == [1, 2, 3]


def test_eval_mode_is_deterministic(rng):
    m = Model.build(tiny_config(T=4), 0)
    x = inputs_for(m.config, 3, rng)
    assert m.features(x).data.tobytes() == m.features(x).data.tobytes()
    zeros = {k: np.zeros_like(v) for k, v in x.items()}
    np.testing.assert_array_equal(m.individual_conv_forward(zeros["acc"], 0).data,
                                  m.individual_conv_forward(zeros["acc"], 0).data)


# ---------------------------------------------------------------- merge conv


def test_merge_output_width(rng):
    m = Model.build(ModelConfig(sensors=(("acc", 3), ("gyro", 3)), T=2), 0)
    per = [m.individual_conv_forward(rng.standard_normal((1, 2, 60)), i) for i in range(2)]
    assert m.merge_conv_forward(per).shape == (1, 2, 512)


def test_merge_single_sensor(rng):
    m = Model.build(tiny_config(sensors=(("acc", 3),), T=3), 0)
    per = [m.individual_conv_forward(rng.standard_normal((2, 3, 60)), 0)]
    assert m.params["merge.conv1.filters"].shape[0] == 1
    assert m.merge_conv_forward(per).shape == (2, 3, m.config.d_model)


def test_merge_same_padding_preserves_plane(rng):
    m = Model.build(tiny_config(T=2), 0)
    h = Tensor(rng.standard_normal((4, 2, 4, 8)))
    for j in range(1, 4):
        h = ad.conv2d(h, m.params[f"merge.conv{j}.filters"], (1, 1), "same")
        assert h.shape == (4, 2, 4, 8)


def test_merge_rejects_mismatched_sensors(rng):
    m = Model.build(tiny_config(T=2), 0)
    with pytest.raises(ValueError):
        m.merge_conv_forward([Tensor(np.zeros((1, 2, 4, 8))), Tensor(np.zeros((1, 2, 3, 8)))])


# ---------------------------------------------------------------- positional encoding


def test_positional_encoding_reference_values():
    pe = positional_encoding(20, 512)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    assert pe[1, 0] == pytest.approx(0.84147, abs=1e-5)
    assert pe[3, 5] == pytest.approx(math.cos(3 / 10000 ** (4 / 512)))
    assert np.all(np.abs(pe) <= 1.0)


def test_positional_encoding_odd_width():
    with pytest.raises(ConfigError):
        positional_encoding(4, 7)


# ---------------------------------------------------------------- attention


def test_attention_equal_scores_average():
    out = scaled_dot_attention(np.array([[0.0]]), np.array([[0.0], [0.0]]), np.array([[1.0], [3.0]]))
    np.testing.assert_allclose(out.data, [[2.0]])


def test_attention_saturation():
    out, w = scaled_dot_attention(np.array([[10.0]]), np.array([[10.0], [-10.0]]), np.array([[1.0], [5.0]]),
                                  return_weights=True)
    assert w.data[0, 0] > 1 - 1e-8
    assert out.data[0, 0] == pytest.approx(1.0, abs=1e-6)


def test_attention_matches_loops(rng):
    Q, K, V = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        s = [sum(Q[i, a] * K[j, a] for a in range(4)) / 2.0 for j in range(5)]
        m = max(s)
        e = [math.exp(v - m) for v in s]
        for j in range(5):
            expected[i] += e[j] / sum(e) * V[j]
    np.testing.assert_allclose(scaled_dot_attention(Q, K, V).data, expected, rtol=1e-12)


def test_attention_shape_mismatch():
    with pytest.raises(DimensionError):
        scaled_dot_attention(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros((4, 1)))


def _mhsa_params(rng, dm, heads, d_k, zero_bias=False):
    hk = heads * d_k
    p = {}
    for n in "qkv":
        p[f"w{n}"] = rng.standard_normal((dm, hk)) * 0.3
        p[f"b{n}"] = np.zeros(hk) if zero_bias else rng.standard_normal(hk) * 0.1
    p["wo"] = rng.standard_normal((hk, dm)) * 0.3
    p["bo"] = rng.standard_normal(dm)
    return {k: Tensor(v) for k, v in p.items()}


@given(T=st.integers(1, 6), dm=st.integers(1, 6), heads=st.integers(1, 3), d_k=st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_mhsa_shape_and_row_sums(T, dm, heads, d_k):
    rng = np.random.default_rng(T * 100 + dm)
    trace = {}
    out = multi_head_self_attention(rng.standard_normal((2, T, dm)), _mhsa_params(rng, dm, heads, d_k),
                                    heads, d_k, trace=trace)
    assert out.shape == (2, T, dm)
    assert trace["attention"].shape == (2, heads, T, T)
    np.testing.assert_allclose(trace["attention"].sum(axis=-1), 1.0, atol=1e-6)


def test_mhsa_is_permutation_equivariant(rng):
    params = _mhsa_params(rng, 6, 2, 3)
    x = rng.standard_normal((2, 7, 6))
    perm = rng.permutation(7)
    a = multi_head_self_attention(x, params, 2, 3).data[:, perm]
    b = multi_head_self_attention(x[:, perm], params, 2, 3).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


def test_mhsa_zero_input_gives_output_bias(rng):
    params = _mhsa_params(rng, 5, 2, 3, zero_bias=True)
    out = multi_head_self_attention(np.zeros((2, 4, 5)), params, 2, 3).data
    np.testing.assert_array_equal(out, np.broadcast_to(params["bo"].data, (2, 4, 5)))


# ---------------------------------------------------------------- TrASenD block


def test_block_shape_paper_size(rng):
    m = Model.build(ModelConfig(sensors=(("acc", 3), ("gyro", 3))), 0)
    assert m.trasend_temporal_block(rng.standard_normal((1, 20, 512))).shape == (1, 20, 512)


@pytest.mark.parametrize("T,filters,heads,d_k", [(1, 2, 1, 2), (3, 4, 2, 4), (6, 8, 4, 3)])
def test_block_residual_shape_law(rng, T, filters, heads, d_k):
    m = Model.build(tiny_config(T=T, conv_filters=filters, heads=heads, d_k=d_k), 0)
    x = rng.standard_normal((2, T, m.config.d_model))
    assert m.trasend_temporal_block(x).shape == x.shape


def test_block_ffn_is_position_wise(rng):
    m = Model.build(tiny_config(T=5), 0)
    x = rng.standard_normal((1, 5, m.config.d_model))
    t1 = {}
    m.trasend_temporal_block(x, trace=t1)
    # perturb the FFN input at one timestep: feed the FFN directly
    h = rng.standard_normal((1, 5, m.config.d_model))
    p = m.params
    ffn = lambda v: ad.dense(ad.relu(ad.dense(v, p["temporal.ffn.w1"], p["temporal.ffn.b1"])),
                             p["temporal.ffn.w2"], p["temporal.ffn.b2"]).data
    h2 = h.copy()
    h2[0, 2] += 1.0
    diff = np.any(ffn(h) != ffn(h2), axis=-1)[0]
    assert diff.tolist() == [False, False, True, False, False]
    assert t1["ffn"].shape == (1, 5, m.config.d_model)


def test_block_gradcheck(rng):
    m = Model.build(tiny_config(T=3, conv_filters=2, heads=2, d_k=3, sensors=(("a", 1),), f=7), 0)
    x = rng.standard_normal((2, 3, m.config.d_model))
    names = [n for n in m.params if n.startswith("temporal.")]
    w = rng.standard_normal(x.shape)
    assert ad.gradcheck(lambda *_: ad.sum_(m.trasend_temporal_block(x) * w), [m.params[n] for n in names]) < 1e-4


def test_mean_of_block_ignores_time_order_without_pe(rng):
    m = Model.build(tiny_config(T=6, positional_encoding=False), 0)
    x = rng.standard_normal((2, 6, m.config.d_model))
    a = m.trasend_temporal_block(x).data.mean(axis=1)
    b = m.trasend_temporal_block(x[:, ::-1]).data.mean(axis=1)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_reversing_time_changes_gru_output(rng):
    m = Model.build(tiny_config("deepsense", T=6), 0)
    x = rng.standard_normal((2, 6, m.config.d_model))
    assert not np.allclose(m.deepsense_gru_stack(x).data, m.deepsense_gru_stack(x[:, ::-1]).data)


# ---------------------------------------------------------------- recurrent variants


def test_deepsense_output_width(rng):
    m = Model.build(ModelConfig(sensors=(("acc", 3),), variant="deepsense", conv_filters=4, T=3), 0)
    assert m.deepsense_gru_stack(rng.standard_normal((2, 3, m.config.d_model))).shape == (2, 120)


def test_deepsense_single_step_mean(rng):
    m = Model.build(tiny_config("deepsense", T=1), 0)
    x = rng.standard_normal((3, 1, m.config.d_model))
    h1 = gru_sequence(x, m._gru("temporal.gru1."))
    h1 = m._bn(h1, "temporal.", "eval")
    h2 = gru_sequence(h1, m._gru("temporal.gru2."))
    np.testing.assert_allclose(m.deepsense_gru_stack(x).data, h2.data[:, 0], atol=1e-14)


def test_deepsense_hand_unrolled(rng):
    m = Model.build(tiny_config("deepsense", T=2, gru_units=2), 0)
    x = rng.standard_normal((1, 2, m.config.d_model))
    g1, g2 = m._gru("temporal.gru1."), m._gru("temporal.gru2.")
    eps = m.config.bn_eps
    h = np.zeros((1, 2))
    first = []
    for t in range(2):
        h = ad.gru_cell(x[:, t], h, g1).data
        first.append(h)
    scale, shift = m.params["temporal.bn.scale"].data, m.params["temporal.bn.shift"].data
    mu, var = m.params["temporal.bn.running_mean"].data, m.params["temporal.bn.running_var"].data
    h, top = np.zeros((1, 2)), []
    for t in range(2):
        inp = (first[t] - mu) / np.sqrt(var + eps) * scale + shift
        h = ad.gru_cell(inp, h, g2).data
        top.append(h)
    np.testing.assert_allclose(m.deepsense_gru_stack(x).data, (top[0] + top[1]) / 2, atol=1e-14)


def test_bd_width_and_palindrome_symmetry(rng):
    m = Model.build(tiny_config("trasend_bd", T=5), 0)
    H = m.config.gru_units
    for n in "WUb":
        m.params[f"temporal.bwd.{n}"].data = m.params[f"temporal.fwd.{n}"].data.copy()
    half = rng.standard_normal((2, 3, m.config.d_model))
    x = np.concatenate([half, half[:, 1::-1]], axis=1)  # t0 t1 t2 t1 t0
    out = m.bd_temporal(x).data
    assert out.shape == (2, 2 * H)
    np.testing.assert_allclose(out[:, :H], out[:, H:], atol=1e-14)


def test_bd_paper_width(rng):
    m = Model.build(ModelConfig(sensors=(("acc", 3),), variant="trasend_bd", conv_filters=4, T=2), 0)
    assert m.bd_temporal(rng.standard_normal((1, 2, m.config.d_model))).shape == (1, 240)


def test_bd_single_step(rng):
    m = Model.build(tiny_config("trasend_bd", T=1), 0)
    x = rng.standard_normal((2, 1, m.config.d_model))
    fwd = gru_sequence(x, m._gru("temporal.fwd.")).data[:, 0]
    bwd = gru_sequence(x, m._gru("temporal.bwd.")).data[:, 0]
    np.testing.assert_allclose(m.bd_temporal(x).data, np.concatenate([fwd, bwd], axis=1), atol=1e-14)


def test_ca_uniform_weights_for_identical_locations(rng):
    m = Model.build(tiny_config("trasend_ca", T=3), 0)
    F = m.config.conv_filters
    L = m.config.S * m.config.W3
    maps = np.broadcast_to(rng.standard_normal((2, 3, 1, F)), (2, 3, L, F)).copy()
    trace = {}
    m.ca_temporal(maps, trace=trace)
    np.testing.assert_allclose(trace["ca_weights"], 1.0 / L, atol=1e-12)


def test_ca_weights_are_convex(rng):
    m = Model.build(tiny_config("trasend_ca", T=4), 0)
    F, L = m.config.conv_filters, m.config.S * m.config.W3
    maps = rng.standard_normal((2, 4, L, F))
    trace = {}
    out = m.ca_temporal(maps, trace=trace)
    w = trace["ca_weights"]
    assert out.shape == (2, m.config.gru_units) and w.shape == (2, 4, L)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
    ctx = np.einsum("btl,btlf->btf", w, maps)
    assert np.all(ctx <= maps.max(axis=2) + 1e-12) and np.all(ctx >= maps.min(axis=2) - 1e-12)


def test_ca_single_location(rng):
    m = Model.build(tiny_config("trasend_ca", sensors=(("acc", 3),), f=7, T=3), 0)
    assert m.config.S * m.config.W3 == 1
    trace = {}
    m.ca_temporal(rng.standard_normal((2, 3, 1, m.config.conv_filters)), trace=trace)
    np.testing.assert_array_equal(trace["ca_weights"], 1.0)


# ---------------------------------------------------------------- full model


@pytest.mark.parametrize("variant", VARIANTS)
def test_classify_forward_contract(rng, variant):
    m = Model.build(tiny_config(variant, T=4), 0)
    x = inputs_for(m.config, 3, rng)
    p = m.classify_forward(x)
    assert p.shape == (3, 4) and np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(p, m.classify_forward(x))


@pytest.mark.parametrize("variant", VARIANTS)
def test_parameter_groups_partition(variant):
    m = Model.build(tiny_config(variant), 0)
    out = set(m.params.group(OUTPUT_LAYER))
    feat = set(m.params.group(FEATURE_EXTRACTOR))
    assert out == {"output.W", "output.b"}
    assert out | feat == set(m.params) and not out & feat


def test_flatten_reduction_width(rng):
    m = Model.build(tiny_config(T=3, temporal_reduction="flatten"), 0)
    assert m.params["output.W"].shape == (3 * m.config.d_model, 4)
    assert m.features(inputs_for(m.config, 2, rng)).shape == (2, 3 * m.config.d_model)


def test_train_mode_updates_running_stats(rng):
    m = Model.build(tiny_config(T=2), 0)
    before = m.params["indiv.0.conv1.bn.running_mean"].data.copy()
    m.logits(inputs_for(m.config, 4, rng), "train", np.random.default_rng(0))
    assert not np.array_equal(before, m.params["indiv.0.conv1.bn.running_mean"].data)


def test_seeded_build_is_reproducible():
    a, b = Model.build(tiny_config(), 3), Model.build(tiny_config(), 3)
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)
    c = Model.build(tiny_config(), 4)
    assert not np.array_equal(a.params["output.W"].data, c.params["output.W"].data)


def test_clone_is_independent():
    a = Model.build(tiny_config(), 0)
    b = a.clone()
    b.params["output.b"].data[:] = 5.0
    assert not np.any(a.params["output.b"].data == 5.0)


def test_float32_model_runs(rng):
    m = Model.build(tiny_config(T=2, dtype="float32"), 0)
    assert m.params["output.W"].dtype == np.float32
    assert np.all(np.isfinite(m.classify_forward(inputs_for(m.config, 2, rng))))


# ---------------------------------------------------------------- gradient checks


def test_tiny_model_gradcheck_eval_mode():
    m = Model.build(TINY_GRADCHECK_CONFIG, 0)
    rng = np.random.default_rng(1)
    for n in m.params:  # non-trivial running statistics for eval-mode batch norm
        if n.endswith("running_var"):
            m.params[n].data = 0.5 + rng.random(m.params[n].shape)
        elif n.endswith("running_mean"):
            m.params[n].data = 0.1 * rng.standard_normal(m.params[n].shape)
    x = inputs_for(m.config, 2, rng)
    y = one_hot([0, 2], 3)
    params = list(m.params.trainable().values())
    assert ad.gradcheck(lambda *_: ad.softmax_cross_entropy(m.logits(x, "eval"), y), params) < 1e-4


def test_tiny_model_gradcheck_train_mode():
    assert gradcheck_model() < 1e-4


@pytest.mark.parametrize("variant", ["deepsense", "trasend_bd", "trasend_ca"])
def test_variant_gradcheck(variant):
    c = ModelConfig(sensors=(("a", 1),), T=3, f=7, num_classes=3, variant=variant, conv_filters=2,
                    gru_units=3, dropout_conv=0.0, dropout_rnn=0.0, merge_kernels=(2, 2, 2))
    assert gradcheck_model(c, batch=3) < 1e-4


# ---------------------------------------------------------------- loss


def test_cross_entropy_uniform():
    assert cross_entropy_loss(np.full((1, 6), 1 / 6), one_hot([2], 6)) == pytest.approx(math.log(6))


def test_cross_entropy_perfect_prediction():
    assert cross_entropy_loss(one_hot([1, 0], 3), one_hot([1, 0], 3)) == 0.0


def test_cross_entropy_matches_double_sum(rng):
    p = rng.random((4, 5)) + 0.01
    p /= p.sum(axis=1, keepdims=True)
    y = one_hot([0, 4, 2, 2], 5)
    expected = -sum(np.longdouble(y[i, c]) * np.log(np.longdouble(p[i, c])) for i in range(4) for c in range(5))
    assert cross_entropy_loss(p, y) == pytest.approx(float(expected), rel=1e-14)


def test_cross_entropy_rejects_soft_targets():
    with pytest.raises(ValueError):
        cross_entropy_loss(np.full((1, 2), 0.5), np.full((1, 2), 0.5))


def test_logits_loss_agrees_with_probability_loss(rng):
    z = rng.standard_normal((3, 4))
    y = one_hot([1, 3, 0], 4)
    assert float(ad.softmax_cross_entropy(z, y).data) == pytest.approx(
        cross_entropy_loss(ad.softmax(z).data, y), rel=1e-12)
