# %% [markdown]
# # Checking the machinery
#
# Gradients of every primitive and of a whole small network are compared
# against central finite differences. Checkpoints must reproduce forward
# outputs bit for bit.

# %%
import tempfile
from pathlib import Path

import numpy as np

from trasend.checkpoint import load_checkpoint, save_checkpoint
from trasend.model import Model, ModelConfig
from trasend.validation import gradcheck_suite

errors = gradcheck_suite(seed=0, include_model=False)
for name, err in sorted(errors.items(), key=lambda kv: -kv[1])[:5]:
    print(f"{name:28s} {err:.2e}")
print("worst of", len(errors), "primitives:", f"{max(errors.values()):.2e}")

# %%
config = ModelConfig(sensors=(("acc", 3),), num_classes=3, conv_filters=4, gru_units=8, heads=2, d_k=4, T=4)
model = Model.build(config, 0)
x = {"acc": np.random.default_rng(0).standard_normal((2, 4, 60))}
with tempfile.TemporaryDirectory() as tmp:
    save_checkpoint(model, Path(tmp) / "ck")
    again = load_checkpoint(Path(tmp) / "ck").model()
print("bitwise identical forward:", again.classify_forward(x).tobytes() == model.classify_forward(x).tobytes())
