"""Shared domain types: priors, observation models, transport plans, config."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .algebra import as_mass_vector, as_support_matrix, row_sums
from .errors import ShapeMismatch

__all__ = [
    "MarkovPrior",
    "ObservationModel",
    "TransportPlan",
    "SolverConfig",
]


@dataclass(frozen=True)
class MarkovPrior:
    """Time-indexed transition matrices of a (sub)stochastic Markov chain.

    ``matrices[t]`` moves mass from time ``t`` to ``t+1``.  Rows of a freshly
    built network prior sum to one; support reduction may leave sub-stochastic
    rows behind.  ``state_ids`` optionally labels the states.
    """

    matrices: tuple
    n: int
    state_ids: tuple | None = None

    @classmethod
    def from_matrices(cls, mats, n=None, state_ids=None):
        mats = tuple(as_support_matrix(m, name=f"A[{i}]") for i, m in enumerate(mats))
        if mats:
            n_eff = mats[0].shape[0]
            for i, m in enumerate(mats):
                if m.shape != (n_eff, n_eff):
                    raise ShapeMismatch(f"A[{i}] has shape {m.shape}, expected square {n_eff}")
            if n is not None and n != n_eff:
                raise ShapeMismatch(f"n={n} disagrees with matrices of size {n_eff}")
            n = n_eff
        elif n is None:
            raise ValueError("an empty prior needs an explicit state count")
        if state_ids is not None:
            state_ids = tuple(state_ids)
            if len(state_ids) != n:
                raise ShapeMismatch("state_ids length disagrees with state count")
        return cls(matrices=mats, n=n, state_ids=state_ids)

    @property
    def horizon(self):
        """Number of transport steps T."""
        return len(self.matrices)

    def max_row_sum_error(self):
        """Largest deviation of any row sum from one (conservation check)."""
        err = 0.0
        for m in self.matrices:
            if m.shape[0]:
                err = max(err, float(np.max(np.abs(row_sums(m) - 1.0))))
        return err

    def label(self, i):
        return self.state_ids[i] if self.state_ids is not None else str(i)


@dataclass(frozen=True)
class ObservationModel:
    """Ordered sensor placement over ``n`` states.

    ``sensors`` lists the observed state indices in measurement order; the
    selector picks those coordinates and the complement keeps the remaining
    indices in ascending order.
    """

    n: int
    sensors: tuple

    def __post_init__(self):
        sensors = tuple(int(s) for s in self.sensors)
        object.__setattr__(self, "sensors", sensors)
        if len(set(sensors)) != len(sensors):
            raise ValueError("sensor indices must be distinct")
        if any(s < 0 or s >= self.n for s in sensors):
            raise ValueError(f"sensor index out of range [0, {self.n})")

    @property
    def k(self):
        return len(self.sensors)

    @property
    def unobserved(self):
        """Ascending indices of the unobserved states."""
        return tuple(np.setdiff1d(np.arange(self.n), np.asarray(self.sensors, dtype=int)))

    def observe(self, x):
        """Select the observed coordinates of ``x`` in sensor order."""
        return np.asarray(x, dtype=np.float64)[list(self.sensors)]

    def lift_observed(self, y):
        """Embed a length-k vector at the sensor coordinates (zeros elsewhere)."""
        out = np.zeros(self.n)
        out[list(self.sensors)] = np.asarray(y, dtype=np.float64)
        return out

    def lift_unobserved(self, z):
        """Embed a length-(n-k) vector at the unobserved coordinates."""
        out = np.zeros(self.n)
        out[list(self.unobserved)] = np.asarray(z, dtype=np.float64)
        return out


def as_observation_series(rho, horizon, k):
    """Validate observations as a (T+1, k) nonnegative array."""
    arr = np.asarray(rho, dtype=np.float64)
    if arr.ndim == 1 and k == 1:
        arr = arr[:, None]
    if arr.shape != (horizon + 1, k):
        raise ShapeMismatch(
            f"observations must have shape {(horizon + 1, k)}, got {arr.shape}"
        )
    for t in range(arr.shape[0]):
        as_mass_vector(arr[t], k, name=f"rho[{t}]")
    return arr


@dataclass(frozen=True)
class TransportPlan:
    """Mass transport matrices ``M_t`` with support inside the prior's."""

    matrices: tuple

    @classmethod
    def from_matrices(cls, mats):
        return cls(tuple(as_support_matrix(m, name=f"M[{i}]") for i, m in enumerate(mats)))

    @property
    def horizon(self):
        return len(self.matrices)

    @property
    def n(self):
        return self.matrices[0].shape[0]

    def marginals(self):
        """Marginal trajectory ``mu_0 .. mu_T`` (row sums, plus final column sums)."""
        mus = [row_sums(m) for m in self.matrices]
        mus.append(np.asarray(self.matrices[-1].sum(axis=0)).ravel())
        return mus

    def initial_mass(self):
        return float(row_sums(self.matrices[0]).sum())

    def mass_matching_error(self):
        """Largest violation of ``M_t 1 = M_{t-1}^T 1`` across interior times."""
        err = 0.0
        for t in range(1, self.horizon):
            incoming = np.asarray(self.matrices[t - 1].sum(axis=0)).ravel()
            outgoing = row_sums(self.matrices[t])
            err = max(err, float(np.max(np.abs(outgoing - incoming))))
        return err


@dataclass
class SolverConfig:
    """Tolerances and knobs for the proximal bridge solver.

    ``eta_init=None`` spreads the total observed mass uniformly over the
    unobserved states (any strictly positive start is admissible).  The
    default two inner sweeps per outer step follow the inexact proximal
    scheme; ``exact=True`` forces inner convergence each outer step.
    ``log_domain=True`` runs the message recursions in log space for
    badly scaled stress cases.
    """

    outer_tol: float = 1e-8
    inner_sweeps_per_outer: int = 2
    max_outer_iters: int = 50_000
    residual_tol: float = 1e-9
    eta_init: np.ndarray | None = None
    exact: bool = False
    max_inner_sweeps: int = 100_000
    log_domain: bool = False
    dense_threshold: int = 512
    record_update_residuals: bool = False
    # inexact mode keeps sweeping (up to the cap) while the inner residual
    # exceeds this fraction of the previous eta step, so the outer update is
    # never computed from a state looser than its own progress scale
    inner_slack: float = 0.25
    inner_sweep_cap: int = 400

    def __post_init__(self):
        if self.outer_tol <= 0 or self.residual_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.inner_sweeps_per_outer < 1:
            raise ValueError("need at least one inner sweep per outer step")
        if self.eta_init is not None:
            self.eta_init = as_mass_vector(self.eta_init, name="eta_init")
            if self.eta_init.size and self.eta_init.min() <= 0.0:
                raise ValueError("eta_init must be strictly positive")
