# %% [markdown]
# # From raw sensor streams to DFT tensors
#
# A 5 s window of each sensor is cut into T = 20 intervals of 0.25 s. Every
# interval is resampled onto f = 10 evenly spaced points, and each axis is
# replaced by the magnitude/phase pairs of its discrete Fourier transform.

# %%
import numpy as np

from trasend.data import SyntheticSpec, extract_samples, generate_synthetic_dataset
from trasend.preprocess import PreprocessConfig, add_noise, dft_features, timestep_rows
from trasend.train import TrainConfig

cfg = PreprocessConfig()
print("T =", cfg.T, "f =", cfg.f)

# %% [markdown]
# A synthetic dataset: every class is a sinusoid of its own frequency.

# %%
ds = generate_synthetic_dataset(SyntheticSpec(users=2, classes=3, samples_per_class=2, seed=0))
samples = extract_samples(ds)
s = samples[0]
print(len(samples), "samples; label", s.label, "user", s.user_id)
print("accelerometer tensor (d x 2f x T):", s.tensors["acc"].shape)
print("network rows (T x 2fd):", timestep_rows(s.tensors["acc"]).shape)

# %% [markdown]
# The DFT features agree with the textbook direct sum, and Parseval's identity
# links the magnitudes back to the signal energy.

# %%
x = np.random.default_rng(1).standard_normal((3, 10))
out = dft_features(x)
n = np.arange(10)
direct = np.array([[np.sum(row * np.exp(-2j * np.pi * k * n / 10)) for k in n] for row in x])
print("max magnitude error:", np.max(np.abs(out[:, 0::2] - np.abs(direct))))
print("Parseval:", np.sum(out[:, 0::2] ** 2) / 10, "vs", np.sum(x ** 2))

# %% [markdown]
# Augmentation adds Gaussian noise to the raw window before preprocessing;
# the variance depends on the sensor kind.

# %%
noisy = add_noise(s, TrainConfig().augmentation, np.random.default_rng(0))
print("mean |change| of accelerometer magnitudes:",
      np.abs(noisy.tensors["acc"][:, 0::2] - s.tensors["acc"][:, 0::2]).mean())
