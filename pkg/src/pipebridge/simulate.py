"""Forward transport oracle and synthetic scenario generation.

Propagates a known initial mass through the prior and reads the sensors,
which yields ground truth plus observation files for end-to-end testing of
the reconstruction pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .algebra import as_mass_vector
from .types import MarkovPrior, ObservationModel

__all__ = ["Scenario", "propagate", "make_scenario"]


@dataclass(frozen=True)
class Scenario:
    """A prior, an initial mass, sensors, and an optional noise level."""

    prior: MarkovPrior
    mu0: np.ndarray
    obs: ObservationModel
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mu0", as_mass_vector(self.mu0, self.prior.n, name="mu0"))
        if self.noise_sigma < 0:
            raise ValueError("noise level must be nonnegative")

    @property
    def injected_total(self):
        return float(self.mu0.sum())


def propagate(scenario):
    """Noiseless marginals ``mu_{t+1} = A_t^T mu_t`` and readings ``rho_t = C mu_t``."""
    prior, obs = scenario.prior, scenario.obs
    mus = [scenario.mu0]
    for t in range(prior.horizon):
        mus.append(prior.matrices[t].T @ mus[-1])
    rho = np.vstack([obs.observe(mu) for mu in mus]) if obs.k else np.zeros((prior.horizon + 1, 0))
    return mus, rho


def apply_observation_noise(rho, sigma, seed):
    """Multiplicative truncated-Gaussian sensor noise ``rho * max(0, 1 + sigma xi)``."""
    if sigma == 0.0:
        return np.array(rho, dtype=np.float64, copy=True)
    rng = np.random.default_rng(seed)
    factors = np.maximum(0.0, 1.0 + sigma * rng.standard_normal(np.shape(rho)))
    return np.asarray(rho, dtype=np.float64) * factors


def make_scenario(network, flows, injection, noise_sigma=0.0, seed=0, out_dir=None):
    """Build the prior, inject mass, propagate, and optionally write a bundle.

    ``injection`` maps state ids (or indices) to grams.  Returns
    ``(scenario, marginals, observations)`` where the observations carry the
    requested noise; with ``out_dir`` set the scenario bundle (network, flows,
    observations, ground truth, manifest) is written there.
    """
    from . import io as io_mod
    from .network import build_prior

    prior = build_prior(network, flows)
    mu0 = np.zeros(network.n)
    for key, grams in injection.items():
        if isinstance(key, str):
            if key not in network.state_index:
                raise ValueError(
                    f"unknown injection state {key!r}; valid ids include "
                    f"{', '.join(network.state_ids[:8])}, ..."
                )
            idx = network.state_index[key]
        else:
            idx = int(key)
            if not 0 <= idx < network.n:
                raise ValueError(f"injection index {idx} out of range")
        if grams < 0:
            raise ValueError("injected mass must be nonnegative")
        mu0[idx] += grams

    sensors = tuple(network.state_index[s] for s in network.sensors)
    obs = ObservationModel(n=network.n, sensors=sensors)
    scenario = Scenario(prior=prior, mu0=mu0, obs=obs, noise_sigma=noise_sigma, seed=seed)
    mus, rho_clean = propagate(scenario)
    rho = apply_observation_noise(rho_clean, noise_sigma, seed)

    if out_dir is not None:
        io_mod.write_scenario_bundle(
            out_dir,
            network=network,
            flows=flows,
            marginals=mus,
            observations=rho,
            scenario=scenario,
            injection={network.state_ids[i]: float(mu0[i]) for i in np.nonzero(mu0)[0]},
        )
    return scenario, mus, rho
