"""Mutation and generation operators.

Every operator is pure given its rng substream and leaves its parents
untouched; each child carries a branch tag that feeds the mixing-ratio
metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .archive import Archive
from .errors import ConfigurationError
from .manifold import (LatentCovariance, ManifoldModel, MutationScale, decode,
                       encode, latent_covariance, reconstruction_error,
                       sample_gaussian)
from .nets import MlpSpec, ParamVector, flatten_params

BRANCH_TAGS = ("latent", "parameter", "line", "crossover", "iso")


@dataclass(frozen=True)
class IsoLineParams:
    """Scales of the isotropic and directional mutation components."""

    sigma_iso: float = 0.01
    sigma_line: float = 0.2

    def __post_init__(self):
        if self.sigma_iso < 0 or self.sigma_line < 0:
            raise ConfigurationError("iso/line scales must be non-negative")


@dataclass(frozen=True)
class UcbBanditState:
    """UCB arm selector with exponentially-smoothed success rates."""

    arms: tuple[str, ...]
    rates: tuple[float, ...]
    pulls: tuple[int, ...]
    c: float = math.sqrt(2.0)
    alpha: float = 0.05

    @classmethod
    def fresh(cls, arms, c: float = math.sqrt(2.0),
              alpha: float = 0.05) -> "UcbBanditState":
        arms = tuple(arms)
        return cls(arms=arms, rates=(0.0,) * len(arms), pulls=(0,) * len(arms),
                   c=c, alpha=alpha)

    @property
    def total_pulls(self) -> int:
        return sum(self.pulls)

    def select(self) -> int:
        """Deterministic UCB choice; unpulled arms take priority in order."""
        for i, n in enumerate(self.pulls):
            if n == 0:
                return i
        total = self.total_pulls
        scores = [r + self.c * math.sqrt(math.log(total) / n)
                  for r, n in zip(self.rates, self.pulls)]
        return int(np.argmax(scores))


def ucb_update(bandit: UcbBanditState, arm, success: bool) -> UcbBanditState:
    """Record one pull: rate <- (1-alpha) rate + alpha success."""
    idx = bandit.arms.index(arm) if isinstance(arm, str) else int(arm)
    if not 0 <= idx < len(bandit.arms):
        raise ConfigurationError(f"unknown arm {arm!r}")
    rates = list(bandit.rates)
    pulls = list(bandit.pulls)
    rates[idx] = (1.0 - bandit.alpha) * rates[idx] + bandit.alpha * (1.0 if success else 0.0)
    pulls[idx] += 1
    return replace(bandit, rates=tuple(rates), pulls=tuple(pulls))


@dataclass
class MutationOutcome:
    child: ParamVector
    branch: str
    parent_eval_id: int

    def __post_init__(self):
        if self.branch not in BRANCH_TAGS:
            raise ConfigurationError(f"unknown branch tag {self.branch!r}")


# ---------------------------------------------------------------------------
# parameter-space operators


def mutate_iso(theta: ParamVector, scale: MutationScale,
               rng: np.random.Generator, parent_eval_id: int = -1) -> MutationOutcome:
    """child = theta + sqrt(sigma_theta) * u; sigma_theta is a variance."""
    std = math.sqrt(scale.sigma_theta)
    child = theta.values + std * rng.standard_normal(theta.values.shape[0])
    return MutationOutcome(ParamVector(child, theta.spec), "iso", parent_eval_id)


def mutate_iso_line(theta: ParamVector, theta_a: ParamVector,
                    theta_b: ParamVector, p: IsoLineParams,
                    rng: np.random.Generator,
                    parent_eval_id: int = -1) -> MutationOutcome:
    """child = theta + sigma_iso*u + sigma_line*n*(theta_b - theta_a)."""
    u = rng.standard_normal(theta.values.shape[0])
    n = rng.standard_normal()
    child = (theta.values + p.sigma_iso * u
             + p.sigma_line * n * (theta_b.values - theta_a.values))
    return MutationOutcome(ParamVector(child, theta.spec), "line", parent_eval_id)


# ---------------------------------------------------------------------------
# latent-space operators


def _parameter_branch(theta: ParamVector, scale: MutationScale,
                      rng: np.random.Generator, parent_eval_id: int) -> MutationOutcome:
    std = math.sqrt(scale.sigma_theta)
    child = theta.values + std * rng.standard_normal(theta.values.shape[0])
    return MutationOutcome(ParamVector(child, theta.spec), "parameter",
                           parent_eval_id)


def _take_latent_branch(theta: ParamVector, model: ManifoldModel,
                        epsilon_r: Optional[float],
                        rng: np.random.Generator) -> bool:
    """Region gate: below-threshold reconstruction error goes latent.

    Before the first fit there is no threshold; the first loop draws the
    branch with probability one half.
    """
    if epsilon_r is None:
        return bool(rng.random() < 0.5)
    return reconstruction_error(model, theta) < epsilon_r


def mutate_poms(theta: ParamVector, model: ManifoldModel,
                epsilon_r: Optional[float], scale: MutationScale,
                rng: np.random.Generator,
                parent_eval_id: int = -1) -> MutationOutcome:
    """Region-gated latent mutation with the Jacobian-scaled covariance."""
    if _take_latent_branch(theta, model, epsilon_r, rng):
        z = encode(model, theta)
        cov = latent_covariance(model, z, scale)
        z_mut = sample_gaussian(z, cov, rng)
        child = decode(model, z_mut)
        return MutationOutcome(child, "latent", parent_eval_id)
    return _parameter_branch(theta, scale, rng, parent_eval_id)


def mutate_poms_nojac(theta: ParamVector, model: ManifoldModel,
                      latent_ranges: np.ndarray, rng: np.random.Generator,
                      epsilon_r: Optional[float] = None,
                      scale: Optional[MutationScale] = None,
                      use_gate: bool = True,
                      parent_eval_id: int = -1) -> MutationOutcome:
    """Ablation: latent covariance from per-dimension ranges, no Jacobian.

    Keeps the same epsilon_r gate as the Jacobian-scaled operator (shared
    hyperparameters); use_gate=False forces the latent branch.
    """
    ranges = np.asarray(latent_ranges, dtype=np.float64)
    if ranges.shape != (model.latent_dim,):
        raise ConfigurationError(
            f"latent ranges shape {ranges.shape} != ({model.latent_dim},)")
    if use_gate:
        if scale is None:
            raise ConfigurationError("the gated form needs a parameter-branch scale")
        if not _take_latent_branch(theta, model, epsilon_r, rng):
            return _parameter_branch(theta, scale, rng, parent_eval_id)
    z = encode(model, theta)
    cov = LatentCovariance(np.diag(ranges), z)
    z_mut = sample_gaussian(z, cov, rng)
    child = decode(model, z_mut)
    return MutationOutcome(child, "latent", parent_eval_id)


DDE_ARMS = ("iso", "line", "crossover")


def dde_mutate(theta: ParamVector, archive: Archive, model: ManifoldModel,
               bandit: UcbBanditState, p: IsoLineParams,
               rng: np.random.Generator,
               parent_eval_id: int = -1) -> MutationOutcome:
    """Operator bundle with a UCB-selected arm.

    The crossover arm reconstructs through the model and perturbs: the
    reconstruction carries the mutation. Arm pulls are recorded by the caller
    through ucb_update once the child's insertion outcome is known.
    """
    arm = bandit.arms[bandit.select()]
    if arm == "iso":
        u = rng.standard_normal(theta.values.shape[0])
        child = theta.values + p.sigma_iso * u
        return MutationOutcome(ParamVector(child, theta.spec), "iso",
                               parent_eval_id)
    if arm == "line":
        theta_a, theta_b = archive.sample_elites(2, rng)
        return mutate_iso_line(theta, theta_a, theta_b, p, rng, parent_eval_id)
    if arm == "crossover":
        recon = decode(model, encode(model, theta)).values
        child = recon + p.sigma_iso * rng.standard_normal(theta.values.shape[0])
        return MutationOutcome(ParamVector(child, theta.spec), "crossover",
                               parent_eval_id)
    raise ConfigurationError(f"unknown bandit arm {arm!r}")


# ---------------------------------------------------------------------------
# random initialisers


def init_uniform(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """All entries i.i.d. U(-1, 1)."""
    return ParamVector(rng.uniform(-1.0, 1.0, spec.param_count), spec)


def init_glorot(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Per weight matrix U(+-sqrt(6/(n_in+n_out))); biases zero."""
    layers = []
    for n_in, n_out in spec.layer_shapes():
        limit = math.sqrt(6.0 / (n_in + n_out))
        layers.append((rng.uniform(-limit, limit, size=(n_in, n_out)),
                       np.zeros(n_out)))
    return ParamVector(flatten_params(spec, layers), spec)
