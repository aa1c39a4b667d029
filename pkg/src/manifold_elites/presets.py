"""Named experiment presets.

Desk-scale presets (`*-small-*`) target minutes on a laptop: reduced
descriptor grids, eight short loops on top of the 2000 initial samples, and
an AE regime with a raised learning rate and a few hundred epochs (at desk
budgets the reference rate of 1e-5 cannot move the network measurably).
Full-scale presets keep the reference AE regime and the reference
per-environment hyperparameters.
"""

from __future__ import annotations

from dataclasses import replace

from .errors import ConfigurationError
from .manifold import AeTrainConfig
from .runner import ALGORITHMS, ExperimentConfig

DESK_AE = AeTrainConfig(lr=1e-3, epochs=250, batch_size=64, test_fraction=0.30,
                        early_stop_window=100, early_stop_slope=1e-5)

# per-environment manifold hyperparameters: (hidden, latent, sigma_theta)
FULL_HYPERS = {"striker": (100, 50, 0.1), "kicker": (100, 100, 0.01)}
DESK_HYPERS = {"striker": (48, 10, 0.1), "kicker": (48, 10, 0.01)}

MAPE_ISO_SIGMA = 0.1


def _base(env: str, scale: str, algorithm: str) -> ExperimentConfig:
    if scale == "small":
        # 2000 + 8*25*200 = 42000 rollouts; more, shorter loops so the
        # manifold refits often enough for the latent-search dynamics to show
        hidden, latent, sigma = DESK_HYPERS[env]
        cfg = ExperimentConfig(
            env=env, grid="small", algorithm=algorithm, loops=8,
            iterations_per_loop=25, batch_budget=200, init_samples=2000,
            latent_dim=latent, ae_hidden=hidden, sigma_theta=sigma,
            ae=DESK_AE)
    else:
        hidden, latent, sigma = FULL_HYPERS[env]
        cfg = ExperimentConfig(
            env=env, grid="full", algorithm=algorithm, loops=10,
            iterations_per_loop=100, batch_budget=200, init_samples=2000,
            latent_dim=latent, ae_hidden=hidden, sigma_theta=sigma,
            ae=AeTrainConfig())
    if algorithm in ("mape-iso", "mape-isolinedd", "ps-uniform", "ps-glorot"):
        cfg = replace(cfg, sigma_theta=MAPE_ISO_SIGMA)
    return cfg


def preset_names() -> list[str]:
    return [f"{env}-{scale}-{algo}"
            for env in ("striker", "kicker")
            for scale in ("small", "full")
            for algo in ALGORITHMS]


def get_preset(name: str) -> ExperimentConfig:
    parts = name.split("-", 2)
    if len(parts) != 3:
        raise ConfigurationError(
            f"unknown preset {name!r}; format is <env>-<scale>-<algorithm>")
    env, scale, algo = parts
    if env not in ("striker", "kicker") or scale not in ("small", "full") \
            or algo not in ALGORITHMS:
        raise ConfigurationError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return _base(env, scale, algo)
