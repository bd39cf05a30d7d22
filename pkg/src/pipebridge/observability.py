"""Observability of the sensor-filtered dynamics: uniqueness and optimal sets.

The reconstruction is unique exactly when the stacked sensor-response matrix
has full column rank.  Its kernel spans the initial-mass perturbations no
sensor can see; states whose columns vanish entirely (typically everything
strictly downstream of the sensors, plus the exit state) may carry arbitrary
mass, and the canonical reported solution zeroes them out at time zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse

from .algebra import row_sums, scale_cols, scale_rows
from .errors import (
    DivideByZero,
    InvarianceViolation,
    NegativeMass,
    NotCanonicalizableWarning,
    NotInKernel,
    ShapeMismatch,
)
from .types import MarkovPrior, TransportPlan

__all__ = [
    "ObservabilityReport",
    "observability_matrix",
    "kernel_and_rank",
    "downstream_unobserved_set",
    "analyze",
    "controlled_prior",
    "optimal_set_shift",
    "canonicalize",
]


@dataclass(frozen=True)
class ObservabilityReport:
    """Rank/kernel summary of the stacked sensor-response matrix.

    ``kernel_basis`` has orthonormal columns spanning the unobservable
    subspace; ``unobservable_downstream`` indexes the states with identically
    zero columns.  ``is_unique`` is the full-column-rank verdict.
    """

    rank: int
    kernel_basis: np.ndarray  # (n, dim) orthonormal columns
    unobservable_downstream: tuple
    is_unique: bool
    tolerance: float

    @property
    def kernel_dimension(self):
        return self.kernel_basis.shape[1]

    def to_dict(self, state_ids=None):
        labels = (
            [state_ids[i] for i in self.unobservable_downstream]
            if state_ids is not None
            else list(self.unobservable_downstream)
        )
        return {
            "rank": int(self.rank),
            "kernel_dimension": int(self.kernel_dimension),
            "kernel_basis": [list(map(float, v)) for v in self.kernel_basis.T],
            "unobservable_downstream_states": labels,
            "is_unique": bool(self.is_unique),
            "tolerance": float(self.tolerance),
        }


def observability_matrix(prior, obs):
    """Stack the sensor responses ``C, C A_0^T, ..., C A_{T-1}^T ... A_0^T``.

    Built by iterated sparse products of the transposed dynamics against an
    identity seed; rows come in T+1 blocks of k.  Returns a dense
    ``((T+1) k, n)`` array.
    """
    n = prior.n
    sensors = list(obs.sensors)
    phi = sparse.identity(n, format="csr", dtype=np.float64)
    blocks = [np.asarray(phi[sensors, :].todense())]
    for t in range(prior.horizon):
        phi = (prior.matrices[t].T @ phi).tocsr()
        blocks.append(np.asarray(phi[sensors, :].todense()))
    if not sensors:
        return np.zeros((0, n))
    return np.vstack(blocks)


def kernel_and_rank(o_matrix, tol=None):
    """Numerical rank and orthonormal kernel basis of the stacked matrix.

    The default tolerance is ``1e-10`` times the largest column norm; the
    basis comes from a singular value decomposition, so the output is
    deterministic for a fixed input.
    """
    o = np.asarray(o_matrix, dtype=np.float64)
    if o.ndim != 2:
        raise ShapeMismatch("observability matrix must be 2-d")
    n = o.shape[1]
    if tol is not None and tol <= 0:
        raise ValueError("tolerance must be positive")
    if o.size == 0:
        eff_tol = tol if tol is not None else 1e-10
        return 0, np.eye(n), eff_tol
    if tol is None:
        col_norms = np.sqrt((o * o).sum(axis=0))
        scale = float(col_norms.max()) if col_norms.size else 0.0
        tol = 1e-10 * scale if scale > 0.0 else 1e-10
    svals = linalg.svdvals(o)
    rank = int(np.sum(svals > tol))
    _, _, vt = linalg.svd(o, full_matrices=True)
    kernel = vt[rank:].T.copy()
    return rank, kernel, tol


def downstream_unobserved_set(o_matrix, prior=None):
    """States whose columns of the stacked matrix are identically zero.

    Entries of the stack are sums of products of nonnegative numbers, so the
    exact-zero test is cancellation-free.  When the prior is supplied the
    forward invariance of the set along the prior's support is asserted
    (guaranteed by construction; a failure indicates a bug).
    """
    o = np.asarray(o_matrix, dtype=np.float64)
    if o.size == 0:
        members = np.arange(o.shape[1])
    else:
        members = np.nonzero(~np.any(o != 0.0, axis=0))[0]
    member_set = set(int(i) for i in members)
    if prior is not None:
        for t, m in enumerate(prior.matrices):
            coo = m.tocoo()
            for i, j in zip(coo.row, coo.col):
                if int(i) in member_set and int(j) not in member_set:
                    raise InvarianceViolation(
                        f"state {prior.label(int(i))} is unobservable but feeds "
                        f"observable state {prior.label(int(j))} at time {t}"
                    )
    return tuple(sorted(member_set))


def analyze(prior, obs, tol=None):
    """Full observability report for a prior and sensor placement."""
    o = observability_matrix(prior, obs)
    rank, kernel, eff_tol = kernel_and_rank(o, tol)
    downstream = downstream_unobserved_set(o, prior)
    return ObservabilityReport(
        rank=rank,
        kernel_basis=kernel,
        unobservable_downstream=downstream,
        is_unique=kernel.shape[1] == 0,
        tolerance=eff_tol,
    )


def controlled_prior(state, prior):
    """Dynamics of the optimal plan: prior twisted by the recovered scalings.

    Uses the chained weights ``w_T = u_T``, ``w_t = u_t * A_t w_{t+1}`` and
    ``w_0 = 1``; each step is ``diag(u_t / w_t) A_t diag(w_{t+1})``.  Rows
    whose weight vanishes while carrying mass raise :class:`DivideByZero`;
    massless rows with vanishing weight are zeroed.
    """
    T = prior.horizon
    w = [None] * (T + 1)
    w[T] = state.scaling(T)
    for t in range(T - 1, 0, -1):
        w[t] = state.scaling(t) * (prior.matrices[t] @ w[t + 1])
    w[0] = np.ones(prior.n)
    mats = []
    for t in range(T):
        u_t = state.scaling(t)
        mu_t = state.marginal(t)
        dead = w[t] <= 0.0
        if np.any(dead & (mu_t > 0.0)):
            bad = [prior.label(int(i)) for i in np.nonzero(dead & (mu_t > 0.0))[0]]
            raise DivideByZero(f"zero chained weight on active rows {bad} at time {t}")
        factor = np.zeros(prior.n)
        factor[~dead] = u_t[~dead] / w[t][~dead]
        mats.append(scale_cols(scale_rows(prior.matrices[t], factor), w[t + 1]))
    return tuple(mats)


def _propagate_shift(z0, controlled):
    zs = [np.asarray(z0, dtype=np.float64)]
    for a in controlled:
        zs.append(a.T @ zs[-1])
    return zs


def optimal_set_shift(plan, controlled, z0, o_matrix=None, kernel_tol=1e-8):
    """Move an optimal plan along an unobservable direction of the initial mass.

    ``z0`` must lie in the kernel of the stacked sensor-response matrix (only
    checked when ``o_matrix`` is given) and keep the first marginal
    nonnegative.  The shifted plan adds ``diag(z_t) @ controlled[t]`` at every
    step with ``z_{t+1}`` propagated by the controlled dynamics; it satisfies
    the same observations, matching constraints, and objective value.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape != (plan.n,):
        raise ShapeMismatch(f"shift must have length {plan.n}")
    if o_matrix is not None and np.asarray(o_matrix).size:
        norm = float(np.linalg.norm(z0))
        if norm > 0.0 and float(np.linalg.norm(np.asarray(o_matrix) @ z0)) > kernel_tol * max(norm, 1.0):
            raise NotInKernel("shift direction is visible to the sensors")
    mu0 = row_sums(plan.matrices[0])
    shifted0 = mu0 + z0
    floor = -1e-12 * max(1.0, float(np.abs(mu0).max(initial=0.0)))
    if np.any(shifted0 < floor):
        raise NegativeMass("shift drives the initial marginal negative")
    zs = _propagate_shift(z0, controlled)
    mats = []
    for t, m in enumerate(plan.matrices):
        delta = scale_rows(controlled[t], zs[t])
        out = (m + delta).tocsr()
        if out.data.size:
            if np.any(out.data < floor):
                raise NegativeMass(f"shift drives step {t} negative")
            out.data = np.maximum(out.data, 0.0)
        out.eliminate_zeros()
        mats.append(out)
    return TransportPlan(matrices=tuple(mats))


def canonicalize(plan, report, controlled):
    """Zero the time-zero mass on downstream-unobserved states.

    Each zero column of the stacked matrix contributes a coordinate kernel
    direction, so removing the initial mass held by those states is always an
    admissible shift and never changes the objective.  When the kernel is
    larger than those coordinate directions the remaining ambiguity cannot be
    fixed this way and a :class:`NotCanonicalizableWarning` is emitted (the
    shifted or, if no downstream states exist, unchanged plan is returned).
    """
    members = list(report.unobservable_downstream)
    residual_ambiguity = report.kernel_dimension > len(members)
    if residual_ambiguity:
        warnings.warn(
            "non-uniqueness is not confined to downstream-unobserved states; "
            "canonical form is not unique",
            NotCanonicalizableWarning,
            stacklevel=2,
        )
    if not members:
        return plan
    mu0 = row_sums(plan.matrices[0])
    z0 = np.zeros(plan.n)
    z0[members] = -mu0[members]
    if not np.any(z0):
        return plan
    return optimal_set_shift(plan, controlled, z0)
