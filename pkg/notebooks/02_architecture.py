# %% [markdown]
# # The network: convolutions, then self-attention over time
#
# Each sensor passes through its own three-layer convolution stack; a second
# stack merges the sensors; the temporal block is multi-head self-attention
# plus a position-wise feed-forward network, both with residual connections
# and layer normalisation.

# %%
import numpy as np

from trasend.model import Model, ModelConfig, positional_encoding

config = ModelConfig(sensors=(("acc", 3), ("gyro", 3)))
print("frequency widths through the individual convolutions:", config.widths(3))
print("d_model =", config.d_model, " FFN width =", config.ffn_width)

# %%
model = Model.build(config, seed=0)
print(f"{sum(p.data.size for p in model.params.values()):,} parameters")
rng = np.random.default_rng(0)
x = {sid: rng.standard_normal((2, config.T, 2 * config.f * d)) for sid, d in config.sensors}
print("class probabilities:", model.classify_forward(x).round(3))

# %% [markdown]
# Attention weights are a probability distribution over timesteps.

# %%
trace = {}
h = rng.standard_normal((1, config.T, config.d_model))
model.trasend_temporal_block(h, trace=trace)
print("attention:", trace["attention"].shape, "row sums", trace["attention"].sum(-1).min(), "..",
      trace["attention"].sum(-1).max())
pe = positional_encoding(config.T, config.d_model)
print("positional encoding, first row:", pe[0, :6])

# %% [markdown]
# The variants swap the temporal block: DeepSense's stacked GRU, a
# bidirectional GRU, or a GRU fed with convolutional attention.

# %%
for variant in ("deepsense", "trasend", "trasend_bd", "trasend_ca"):
    c = ModelConfig(sensors=config.sensors, variant=variant, conv_filters=8, gru_units=16, heads=2, d_k=8)
    print(f"{variant:11s} {sum(p.data.size for p in Model.build(c, 0).params.values()):>8,} parameters")
