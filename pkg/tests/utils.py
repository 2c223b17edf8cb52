"""
Small configurations and random batches shared by the test modules.
"""
from dataclasses import replace

import numpy as np

from ifnoapp.config import ModelConfig, TrainConfig


def small_model_config(**overrides):
    config = ModelConfig(grid=8, d=2, modes=2, blocks=2, tau=1.0, hidden=8,
                         z_dim=4, vae_channels=(4, 8), dtype="f64")
    return replace(config, **overrides)


def small_train_config(**overrides):
    config = TrainConfig(lr=1e-3, lr_decay=0.99, batch=2, epochs1=1, epochs2=1,
                         epochs3=1, beta=1e-3, seed=0)
    return replace(config, **overrides)


def random_batch(seed, batch=2, grid=8, channels=1):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((batch, grid, grid, channels))
    u = rng.standard_normal((batch, grid, grid, channels))
    return f, u
