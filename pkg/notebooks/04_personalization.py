# %% [markdown]
# # Personalising the output layer
#
# A model trained without the target user is adapted by retraining only its
# final dense layer. Each of the user's labelled windows triggers one Adam
# step. The earlier half of every activity adapts; the later half tests.

# %%
from trasend.data import SyntheticSpec, extract_samples, generate_synthetic_dataset
from trasend.model import Model, ModelConfig
from trasend.personalize import personalize_run
from trasend.train import TrainConfig, train

spec = SyntheticSpec(users=3, classes=3, samples_per_class=16, user_offset=3.0, user_gain=1.0, seed=0)
samples = extract_samples(generate_synthetic_dataset(spec))
config = ModelConfig(sensors=(("acc", 3), ("gyro", 3)), num_classes=3, conv_filters=8, gru_units=16,
                     heads=2, d_k=8)

# %%
for target in sorted({s.user_id for s in samples}):
    model = Model.build(config, 0)
    train(model, [s for s in samples if s.user_id != target], TrainConfig(epochs=8, batch_size=16, augment_copies=0))
    result, session = personalize_run(model, [s for s in samples if s.user_id == target])
    print(f"{target}: macro-F1 {result.f1_before:.3f} -> {result.f1_after:.3f} "
          f"({result.n_adapt} adaptation / {result.n_test} test windows; "
          f"accuracy while adapting {result.prequential_accuracy:.3f})")
