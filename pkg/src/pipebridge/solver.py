"""Bridge solver: proximal outer loop, coordinate-ascent inner sweeps, recovery.

The inner problem (all observed marginals pinned, first marginal fixed to a
prior guess ``mu_hat``) is solved by block coordinate ascent on its dual.  The
dual variables are per-time scaling vectors ``u_t`` that equal one on the
unobserved coordinates; forward messages ``fwd_t`` accumulate the scaled
dynamics left of ``t`` and backward messages ``bwd_t`` accumulate them to the
right, so the marginal at time ``t`` is ``fwd_t * u_t * bwd_t``.

The outer loop updates the unobserved part of the first marginal with the
entropic proximal rule: re-solve (or just sweep a few times) with the current
guess, then replace the guess by the unobserved part of the recovered first
marginal, until the change drops below tolerance.

Messages are stored as (T+1, n) arrays; instances past a size threshold run
the sweep through a compiled kernel, everything else through numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import logsumexp

from .algebra import as_mass_vector, kl_divergence, row_sums, scale_cols, scale_rows
from .errors import (
    DegenerateUpdate,
    Infeasible,
    MaxItersExceeded,
    NotConverged,
    ShapeMismatch,
)
from .types import (
    MarkovPrior,
    ObservationModel,
    SolverConfig,
    TransportPlan,
    as_observation_series,
)

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


__all__ = [
    "DualState",
    "ReductionReport",
    "TraceRow",
    "ProximalResult",
    "reduce_support",
    "backward_pass",
    "forward_pass",
    "init_dual_state",
    "bca_sweep",
    "observation_residual",
    "dual_objective",
    "recover_primal",
    "inner_solve",
    "proximal_solve",
    "primal_objective",
    "default_eta_init",
    "scaling_product_feasible",
]

# Message products below this value at a sensor demanding mass mean the prior
# cannot route anything there; dividing would produce inf multipliers.
DEGENERACY_FLOOR = 1e-300

# Instances at least this large (states times time points) go through the
# compiled sweep kernel; below it the numpy path wins on JIT-free startup.
_KERNEL_SIZE_THRESHOLD = 64


# ---------------------------------------------------------------------------
# support reduction


@dataclass(frozen=True)
class ReductionReport:
    """What a support reduction removed.

    ``blocked`` lists (t, state) pairs whose marginal is forced to zero;
    ``removed`` lists dropped prior entries as (t, i, j, weight).
    """

    blocked: tuple
    removed: tuple

    @property
    def changed(self):
        return bool(self.removed)


def reduce_support(prior, obs, rho):
    """Propagate forced zeros from zero observations into the prior's support.

    A zero sensor reading pins the marginal of that state to zero, which
    removes the state's outgoing prior entries at that time and its incoming
    entries from the previous step.  Emptied rows and columns propagate
    further.  Returns the reduced prior and a report; raises
    :class:`Infeasible` when a sensor demanding mass ends up blocked.
    The operation is idempotent.
    """
    T = prior.horizon
    n = prior.n
    rho = as_observation_series(rho, T, obs.k)
    sensors = np.asarray(obs.sensors, dtype=int)

    blocked = np.zeros((T + 1, n), dtype=bool)
    if sensors.size:
        for t in range(T + 1):
            blocked[t, sensors[rho[t] == 0.0]] = True

    patterns = []
    for m in prior.matrices:
        p = m.tocsr().copy()
        p.data = np.ones_like(p.data)
        patterns.append(p)

    changed = True
    while changed:
        changed = False
        for t in range(T):
            keep_cols = (~blocked[t + 1]).astype(np.float64)
            out_deg = patterns[t] @ keep_cols
            newly = (out_deg == 0.0) & ~blocked[t]
            if newly.any():
                blocked[t, newly] = True
                changed = True
            keep_rows = (~blocked[t]).astype(np.float64)
            in_deg = patterns[t].T @ keep_rows
            newly = (in_deg == 0.0) & ~blocked[t + 1]
            if newly.any():
                blocked[t + 1, newly] = True
                changed = True

    if sensors.size:
        for t in range(T + 1):
            bad = blocked[t, sensors] & (rho[t] > 0.0)
            if bad.any():
                which = [prior.label(int(s)) for s in sensors[bad]]
                raise Infeasible(
                    f"observations demand mass at blocked state(s) {which} at time {t}"
                )

    removed = []
    reduced = []
    for t, m in enumerate(prior.matrices):
        coo = m.tocoo()
        keep = ~(blocked[t, coo.row] | blocked[t + 1, coo.col])
        if keep.all():
            reduced.append(m)
            continue
        for i, j, v in zip(coo.row[~keep], coo.col[~keep], coo.data[~keep]):
            removed.append((t, int(i), int(j), float(v)))
        reduced.append(
            sparse.coo_array(
                (coo.data[keep], (coo.row[keep], coo.col[keep])), shape=m.shape
            ).tocsr()
        )

    blocked_pairs = tuple((int(t), int(s)) for t, s in zip(*np.nonzero(blocked)))
    report = ReductionReport(blocked=blocked_pairs, removed=tuple(removed))
    out = MarkovPrior(matrices=tuple(reduced), n=n, state_ids=prior.state_ids)
    return out, report


# ---------------------------------------------------------------------------
# message passes (public, linear domain)


def backward_pass(prior, u):
    """Backward messages: ``bwd_T = 1`` and ``bwd_t = A_t (u_{t+1} * bwd_{t+1})``."""
    T = prior.horizon
    bwd = [None] * (T + 1)
    bwd[T] = np.ones(prior.n)
    for t in range(T - 1, -1, -1):
        bwd[t] = prior.matrices[t] @ (u[t + 1] * bwd[t + 1])
    return bwd


def forward_pass(prior, u, mu_hat):
    """Forward messages: ``fwd_0 = mu_hat`` and ``fwd_{t+1} = A_t^T (fwd_t * u_t)``."""
    fwd = [as_mass_vector(mu_hat, prior.n, name="mu_hat")]
    for t in range(prior.horizon):
        fwd.append(prior.matrices[t].T @ (fwd[t] * u[t]))
    return fwd


# ---------------------------------------------------------------------------
# compiled sweep kernel


@njit(cache=True)
def _sweep_kernel(a3, fwd, bwd, u, rho, sens, pos, T, n):  # pragma: no cover
    """Full sweep over dense stacked dynamics; returns (degenerate_t, residual).

    ``degenerate_t >= 0`` flags a sensor demanding mass on a dead product at
    that time.  Arrays are updated in place.
    """
    k = sens.shape[0]
    for t in range(T + 1):
        for si in range(k):
            s = sens[si]
            denom = fwd[t, s] * bwd[t, s]
            r = rho[t, si]
            if pos[t, si]:
                if denom <= DEGENERACY_FLOOR:
                    return t, -1.0
                u[t, s] = r / denom
            else:
                u[t, s] = 1.0 if denom <= 0.0 else 0.0
        if t < T:
            for j in range(n):
                acc = 0.0
                for i in range(n):
                    acc += fwd[t, i] * u[t, i] * a3[t, i, j]
                fwd[t + 1, j] = acc
    for t in range(T - 1, -1, -1):
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += a3[t, i, j] * u[t + 1, j] * bwd[t + 1, j]
            bwd[t, i] = acc
    resid = 0.0
    for t in range(T + 1):
        for si in range(k):
            s = sens[si]
            err = abs(fwd[t, s] * u[t, s] * bwd[t, s] - rho[t, si])
            if err > resid:
                resid = err
    return -1, resid


# ---------------------------------------------------------------------------
# engine


class _Dynamics:
    """Per-step matvec helpers: CSR always, dense / stacked-dense fast paths."""

    def __init__(self, prior, dense_threshold, need_log):
        self.mats = [m.tocsr() for m in prior.matrices]
        self.matsT = [m.T.tocsr() for m in self.mats]
        self.n = prior.n
        use_dense = prior.n <= dense_threshold
        self.dense = [m.toarray() for m in self.mats] if use_dense else None
        self.stacked = (
            np.ascontiguousarray(np.stack(self.dense))
            if self.dense and len(self.dense) > 0
            else None
        )
        self.log_dense = None
        if need_log:
            dense = self.dense if self.dense is not None else [m.toarray() for m in self.mats]
            self.log_dense = []
            for d in dense:
                with np.errstate(divide="ignore"):
                    self.log_dense.append(
                        np.where(d > 0.0, np.log(np.maximum(d, 1e-317)), -np.inf)
                    )

    def apply(self, t, v):
        if self.dense is not None:
            return self.dense[t] @ v
        return self.mats[t] @ v

    def apply_t(self, t, v):
        if self.dense is not None:
            return v @ self.dense[t]
        return self.matsT[t] @ v

    def apply_log(self, t, lv):
        with np.errstate(invalid="ignore"):
            return logsumexp(self.log_dense[t] + lv[None, :], axis=1)

    def apply_t_log(self, t, lv):
        with np.errstate(invalid="ignore"):
            return logsumexp(self.log_dense[t] + lv[:, None], axis=0)


@dataclass
class DualState:
    """Dual scalings and messages of the inner problem.

    ``u``, ``fwd``, ``bwd`` are (T+1, n) arrays; in the linear domain they
    hold the quantities directly, with ``log_domain`` their natural
    logarithms (blocked coordinates are ``-inf``).  ``residual`` is the
    observation residual after the most recent sweep.
    """

    mu_hat: np.ndarray
    u: np.ndarray
    fwd: np.ndarray
    bwd: np.ndarray
    log_domain: bool = False
    residual: float = math.inf
    sweeps: int = 0
    update_residuals: list = field(default_factory=list)

    def marginal(self, t):
        """Current marginal ``fwd_t * u_t * bwd_t`` (always in linear scale)."""
        if self.log_domain:
            with np.errstate(invalid="ignore"):
                out = np.exp(self.fwd[t] + self.u[t] + self.bwd[t])
            return np.nan_to_num(out, nan=0.0, posinf=np.inf)
        return self.fwd[t] * self.u[t] * self.bwd[t]

    def marginals(self):
        if self.log_domain:
            with np.errstate(invalid="ignore"):
                out = np.exp(self.fwd + self.u + self.bwd)
            return np.nan_to_num(out, nan=0.0, posinf=np.inf)
        return self.fwd * self.u * self.bwd

    def scaling(self, t):
        """Scaling vector ``u_t`` in linear scale."""
        if self.log_domain:
            return np.exp(self.u[t])
        return self.u[t]


class _Engine:
    """Machinery binding one prior + observation model + config."""

    def __init__(self, prior, obs, config):
        if prior.n != obs.n:
            raise ShapeMismatch("prior and observation model disagree on state count")
        self.prior = prior
        self.obs = obs
        self.config = config
        self.sensors = np.asarray(obs.sensors, dtype=np.int64)
        self.unobserved = np.asarray(obs.unobserved, dtype=np.int64)
        self.T = prior.horizon
        self.n = prior.n
        self.dyn = _Dynamics(prior, config.dense_threshold, need_log=config.log_domain)
        self.log = config.log_domain
        self.use_kernel = (
            _HAVE_NUMBA
            and not self.log
            and self.dyn.stacked is not None
            and self.n * (self.T + 1) >= _KERNEL_SIZE_THRESHOLD
        )
        self._mask_key = None
        self._pos_masks = None

    def _positive_masks(self, rho):
        # demand masks are constant across the sweeps of one solve
        key = (rho.shape, rho.tobytes())
        if self._mask_key != key:
            self._pos_masks = rho > 0.0
            self._mask_key = key
        return self._pos_masks

    # -- state construction

    def init_state(self, mu_hat):
        mu_hat = as_mass_vector(mu_hat, self.n, name="mu_hat")
        T, n = self.T, self.n
        if self.log:
            u = np.zeros((T + 1, n))
            fwd = np.empty((T + 1, n))
            bwd = np.empty((T + 1, n))
            with np.errstate(divide="ignore"):
                fwd[0] = np.where(mu_hat > 0.0, np.log(np.maximum(mu_hat, 1e-317)), -np.inf)
            for t in range(T):
                fwd[t + 1] = self.dyn.apply_t_log(t, fwd[t] + u[t])
            bwd[T] = 0.0
            for t in range(T - 1, -1, -1):
                bwd[t] = self.dyn.apply_log(t, u[t + 1] + bwd[t + 1])
        else:
            u = np.ones((T + 1, n))
            fwd = np.empty((T + 1, n))
            bwd = np.empty((T + 1, n))
            fwd[0] = mu_hat
            for t in range(T):
                fwd[t + 1] = self.dyn.apply_t(t, fwd[t] * u[t])
            bwd[T] = 1.0
            for t in range(T - 1, -1, -1):
                bwd[t] = self.dyn.apply(t, u[t + 1] * bwd[t + 1])
        state = DualState(mu_hat=mu_hat, u=u, fwd=fwd, bwd=bwd, log_domain=self.log)
        state.residual = self.residual(state, None)
        return state

    def set_mu_hat(self, state, mu_hat):
        mu_hat = as_mass_vector(mu_hat, self.n, name="mu_hat")
        state.mu_hat = mu_hat
        if self.log:
            with np.errstate(divide="ignore"):
                state.fwd[0] = np.where(
                    mu_hat > 0.0, np.log(np.maximum(mu_hat, 1e-317)), -np.inf
                )
        else:
            state.fwd[0] = mu_hat

    # -- sweeps

    def sweep(self, state, rho, record=False):
        if self.log:
            self._sweep_log(state, rho, record)
            state.residual = self.residual(state, rho)
        elif self.use_kernel and not record:
            pos = self._positive_masks(rho)
            bad_t, resid = _sweep_kernel(
                self.dyn.stacked,
                state.fwd,
                state.bwd,
                state.u,
                rho,
                self.sensors,
                pos,
                self.T,
                self.n,
            )
            if bad_t >= 0:
                dead = (
                    state.fwd[bad_t][self.sensors] * state.bwd[bad_t][self.sensors]
                    <= DEGENERACY_FLOOR
                ) & pos[bad_t]
                raise DegenerateUpdate(
                    bad_t,
                    [self.prior.label(int(s)) for s in self.sensors[dead]],
                )
            state.residual = resid
        else:
            self._sweep_linear(state, rho, record)
            state.residual = self.residual(state, rho)
        state.sweeps += 1
        return state

    def _sweep_linear(self, state, rho, record):
        u, fwd, bwd = state.u, state.fwd, state.bwd
        sens = self.sensors
        dense = self.dyn.dense
        masks = self._positive_masks(rho)
        for t in range(self.T + 1):
            if sens.size:
                denom = fwd[t][sens] * bwd[t][sens]
                r = rho[t]
                pos = masks[t]
                if np.any(denom[pos] <= DEGENERACY_FLOOR):
                    bad = sens[pos & (denom <= DEGENERACY_FLOOR)]
                    raise DegenerateUpdate(t, [self.prior.label(int(s)) for s in bad])
                vals = np.zeros(sens.size)
                vals[pos] = r[pos] / denom[pos]
                # zero demand with a routable prior blocks the path; with an
                # already-dead product the multiplier is immaterial, keep 1
                vals[(~pos) & (denom <= 0.0)] = 1.0
                u[t][sens] = vals  # unobserved coordinates stay pinned to one
                if record:
                    achieved = denom * vals
                    scale = np.where(pos, r, 1.0)
                    state.update_residuals.append(
                        float(np.max(np.abs(achieved - r) / scale))
                    )
            if t < self.T:
                if dense is not None:
                    fwd[t + 1] = (fwd[t] * u[t]) @ dense[t]
                else:
                    fwd[t + 1] = self.dyn.apply_t(t, fwd[t] * u[t])
        if dense is not None:
            for t in range(self.T - 1, -1, -1):
                bwd[t] = dense[t] @ (u[t + 1] * bwd[t + 1])
        else:
            for t in range(self.T - 1, -1, -1):
                bwd[t] = self.dyn.apply(t, u[t + 1] * bwd[t + 1])

    def _sweep_log(self, state, rho, record):
        u, fwd, bwd = state.u, state.fwd, state.bwd
        sens = self.sensors
        masks = self._positive_masks(rho)
        log_floor = math.log(DEGENERACY_FLOOR)
        for t in range(self.T + 1):
            if sens.size:
                ldenom = fwd[t][sens] + bwd[t][sens]
                r = rho[t]
                pos = masks[t]
                if np.any(ldenom[pos] <= log_floor):
                    bad = sens[pos & (ldenom <= log_floor)]
                    raise DegenerateUpdate(t, [self.prior.label(int(s)) for s in bad])
                vals = np.full(sens.size, -np.inf)
                vals[pos] = np.log(r[pos]) - ldenom[pos]
                vals[(~pos) & ~np.isfinite(ldenom)] = 0.0
                u[t][sens] = vals
                if record:
                    with np.errstate(invalid="ignore"):
                        achieved = np.exp(ldenom + vals)
                    achieved = np.nan_to_num(achieved, nan=0.0)
                    scale = np.where(pos, r, 1.0)
                    state.update_residuals.append(
                        float(np.max(np.abs(achieved - r) / scale))
                    )
            if t < self.T:
                fwd[t + 1] = self.dyn.apply_t_log(t, fwd[t] + u[t])
        for t in range(self.T - 1, -1, -1):
            bwd[t] = self.dyn.apply_log(t, u[t + 1] + bwd[t + 1])

    # -- diagnostics

    def residual(self, state, rho):
        if rho is None or not self.sensors.size:
            return 0.0
        achieved = state.marginals()[:, self.sensors]
        return float(np.max(np.abs(achieved - rho)))

    def eta(self, state):
        return state.marginal(0)[self.unobserved]

    def dual_objective(self, state, rho, at_t=0):
        total = 0.0
        if self.sensors.size:
            mask = self._positive_masks(rho)
            u_obs = state.u[:, self.sensors]
            lam = u_obs if self.log else np.log(u_obs, out=np.full_like(u_obs, -np.inf), where=u_obs > 0)
            total += float(np.sum(rho[mask] * lam[mask]))
        return total - float(state.marginal(at_t).sum())

    def fast_primal(self, state):
        """Objective of the recovered plan against row-stochastic dynamics.

        Uses the telescoped closed form sum_t mu_t . log u_t - mu_0 . log bwd_0,
        which equals the transport objective whenever the plan is the current
        message product and the unreduced prior has unit row sums.
        """
        mus = state.marginals()
        mu0 = mus[0]
        m = mu0 > 0.0
        if self.log:
            total = -float(mu0[m] @ state.bwd[0][m])
        else:
            total = -float(mu0[m] @ np.log(state.bwd[0][m]))
        if self.sensors.size and self.T >= 1:
            mu_obs = mus[1:, self.sensors]
            u_obs = state.u[1:, self.sensors]
            mm = mu_obs > 0.0
            if mm.any():
                lam = u_obs if self.log else np.log(u_obs, out=np.zeros_like(u_obs), where=u_obs > 0)
                total += float(np.sum(mu_obs[mm] * lam[mm]))
        return total

    # -- recovery

    def recover(self, state):
        mats = []
        for t in range(self.T):
            if self.log:
                lr = state.fwd[t] + state.u[t]
                lc = state.u[t + 1] + state.bwd[t + 1]
                m = self.dyn.mats[t].copy()
                rows = np.repeat(np.arange(self.n), np.diff(m.indptr))
                with np.errstate(invalid="ignore", divide="ignore"):
                    m.data = np.exp(np.log(m.data) + lr[rows] + lc[m.indices])
                m.data = np.nan_to_num(m.data, nan=0.0)
                m.eliminate_zeros()
                mats.append(m)
            else:
                r = state.fwd[t] * state.u[t]
                c = state.u[t + 1] * state.bwd[t + 1]
                mats.append(scale_cols(scale_rows(self.dyn.mats[t], r), c))
        return TransportPlan(matrices=tuple(mats))


# ---------------------------------------------------------------------------
# public operations


def init_dual_state(prior, obs, mu_hat, config=None):
    """Fresh dual state (unit scalings, consistent messages) for ``mu_hat``."""
    config = config or SolverConfig()
    engine = _Engine(prior, obs, config)
    state = engine.init_state(mu_hat)
    state._engine = engine
    return state


def _engine_for(state, prior, obs, config=None):
    engine = getattr(state, "_engine", None)
    if engine is None or engine.prior is not prior or engine.obs is not obs:
        engine = _Engine(prior, obs, config or SolverConfig())
        state._engine = engine
    return engine


def bca_sweep(state, prior, obs, rho, record_update_residuals=False):
    """One full block-coordinate sweep (forward scaling updates, backward refresh).

    Updates every ``u_t`` in increasing ``t`` so the observed marginal matches
    ``rho_t`` exactly at the moment of its update, refreshing the forward
    message after each update and rebuilding the backward messages at the end.
    """
    engine = _engine_for(state, prior, obs)
    rho = as_observation_series(rho, prior.horizon, obs.k)
    return engine.sweep(state, rho, record=record_update_residuals)


def observation_residual(state, prior, obs, rho):
    """Largest absolute mismatch between achieved and demanded observations."""
    engine = _engine_for(state, prior, obs)
    rho = as_observation_series(rho, prior.horizon, obs.k)
    return engine.residual(state, rho)


def dual_objective(state, prior, obs, rho, at_t=0):
    """Dual value: multiplier-observation pairing minus the scaled total mass.

    The product term is evaluated through the message identity at time
    ``at_t``; any choice gives the same value once the messages are
    consistent with the scalings.
    """
    engine = _engine_for(state, prior, obs)
    rho = as_observation_series(rho, prior.horizon, obs.k)
    return engine.dual_objective(state, rho, at_t=at_t)


def recover_primal(state, prior, obs=None, residual_tol=None):
    """Transport plan from the current scalings and messages.

    With ``residual_tol`` set, raises :class:`NotConverged` when the state's
    observation residual exceeds it.  Row sums equal ``fwd*u*bwd`` and column
    sums equal the next step's marginal, so interior mass matching holds by
    construction.
    """
    if residual_tol is not None and not state.residual <= residual_tol:
        raise NotConverged(
            f"observation residual {state.residual:.3e} exceeds {residual_tol:.3e}"
        )
    engine = _engine_for(state, prior, obs or state._engine.obs)
    return engine.recover(state)


def default_eta_init(obs, rho):
    """Uniform positive start: total observed mass spread over unobserved states."""
    m = int(len(obs.unobserved))
    if m == 0:
        return np.zeros(0)
    total = float(np.sum(rho))
    if total <= 0.0:
        total = float(m)
    return np.full(m, total / m)


def inner_solve(prior, obs, rho, mu_hat, config=None, sweeps=None):
    """Solve (or partially sweep) the fixed-first-marginal bridge problem.

    With ``sweeps=None`` iterates until the observation residual drops below
    ``config.residual_tol`` (raising :class:`MaxItersExceeded` at the sweep
    cap); with an integer ``sweeps`` runs exactly that many sweeps, as used by
    the inexact proximal outer loop.  Returns ``(state, plan)``.
    """
    config = config or SolverConfig()
    rho = as_observation_series(rho, prior.horizon, obs.k)
    state = init_dual_state(prior, obs, mu_hat, config)
    engine = state._engine
    if sweeps is None:
        for _ in range(config.max_inner_sweeps):
            engine.sweep(state, rho, record=config.record_update_residuals)
            if state.residual <= config.residual_tol:
                break
        else:
            raise MaxItersExceeded(
                f"inner solve: residual {state.residual:.3e} after "
                f"{config.max_inner_sweeps} sweeps"
            )
        plan = recover_primal(state, prior, obs, residual_tol=config.residual_tol)
    else:
        for _ in range(int(sweeps)):
            engine.sweep(state, rho, record=config.record_update_residuals)
        plan = recover_primal(state, prior, obs)
    return state, plan


@dataclass(frozen=True)
class TraceRow:
    """Per-outer-iteration diagnostics."""

    iteration: int
    eta_change: float
    primal_objective: float
    dual_objective: float
    residual: float


@dataclass
class ProximalResult:
    """Everything the proximal solve produced."""

    plan: TransportPlan
    eta: np.ndarray
    trace: list
    state: DualState
    prior_reduced: MarkovPrior
    reduction: ReductionReport
    iterations: int
    converged: bool

    def __iter__(self):
        # allows ``plan, eta, trace = proximal_solve(...)``
        return iter((self.plan, self.eta, self.trace))


def proximal_solve(prior, obs, rho, config=None):
    """Entropic proximal solve of the partially observed bridge problem.

    Reduces the prior's support against zero observations, then alternates
    inner sweeps with updates of the unobserved initial mass ``eta`` until
    both the ``eta`` change and the observation residual are below tolerance.
    The traced primal objective is evaluated against unit-row-sum dynamics
    (the physical, unreduced prior), which is the quantity the proximal
    iteration descends.
    """
    config = config or SolverConfig()
    T = prior.horizon
    if T < 1:
        raise ValueError("proximal solve needs at least one transport step")
    rho = as_observation_series(rho, T, obs.k)

    reduced, report = reduce_support(prior, obs, rho)
    eta = config.eta_init if config.eta_init is not None else default_eta_init(obs, rho)
    eta = as_mass_vector(eta, len(obs.unobserved), name="eta")

    state = init_dual_state(
        reduced, obs, obs.lift_observed(rho[0]) + obs.lift_unobserved(eta), config
    )
    engine = state._engine

    trace = []
    converged = False
    iterations = 0
    last_change = math.inf
    for it in range(config.max_outer_iters):
        iterations = it + 1
        if config.exact:
            for _ in range(config.max_inner_sweeps):
                engine.sweep(state, rho, record=config.record_update_residuals)
                if state.residual <= config.residual_tol:
                    break
            else:
                raise MaxItersExceeded(
                    f"outer {it}: inner residual {state.residual:.3e} stuck above "
                    f"{config.residual_tol:.3e}",
                    trace=trace,
                )
        else:
            # a few sweeps always; keep sweeping while the inner state is
            # looser than the outer progress scale, so the eta update never
            # runs on a residual that drowns its own signal
            inner_target = max(config.residual_tol, config.inner_slack * last_change)
            for s in range(config.inner_sweep_cap):
                engine.sweep(state, rho, record=config.record_update_residuals)
                if s + 1 >= config.inner_sweeps_per_outer and state.residual <= inner_target:
                    break
        eta_new = engine.eta(state)
        change = float(np.max(np.abs(eta_new - eta))) if eta.size else 0.0
        trace.append(
            TraceRow(
                iteration=it,
                eta_change=change,
                primal_objective=engine.fast_primal(state),
                dual_objective=engine.dual_objective(state, rho),
                residual=state.residual,
            )
        )
        eta = eta_new
        last_change = change
        if change <= config.outer_tol and state.residual <= config.residual_tol:
            # leave mu_hat untouched so the state stays consistent with the
            # sweeps that produced it; eta already equals the plan's unobserved
            # first marginal
            converged = True
            break
        engine.set_mu_hat(state, obs.lift_observed(rho[0]) + obs.lift_unobserved(eta))
    if not converged:
        raise MaxItersExceeded(
            f"proximal solve did not converge in {config.max_outer_iters} outer "
            f"iterations (last eta change {trace[-1].eta_change:.3e}, residual "
            f"{trace[-1].residual:.3e})",
            trace=trace,
        )

    plan = recover_primal(state, reduced, obs, residual_tol=config.residual_tol)
    return ProximalResult(
        plan=plan,
        eta=eta,
        trace=trace,
        state=state,
        prior_reduced=reduced,
        reduction=report,
        iterations=iterations,
        converged=converged,
    )


def primal_objective(plan, prior):
    """Transport objective: summed KL of each ``M_t`` against ``diag(M_t 1) A_t``."""
    if plan.horizon != prior.horizon:
        raise ShapeMismatch("plan and prior disagree on the horizon")
    total = 0.0
    for t in range(plan.horizon):
        m = plan.matrices[t]
        ref = scale_rows(prior.matrices[t], row_sums(m))
        total += kl_divergence(m, ref)
    return total


def scaling_product_feasible(state, prior, tol=1e-9):
    """Check the chained-scaling dual constraint ``u_0 * A_0 (u_1 * ... ) <= 1``.

    This is the feasibility predicate of the original problem's dual at the
    recovered scalings; it is expected to hold (to ``tol``) at an outer fixed
    point.  Returns ``(ok, worst_excess)``.
    """
    T = prior.horizon
    v = state.scaling(T).copy()
    for t in range(T - 1, 0, -1):
        v = state.scaling(t) * (prior.matrices[t] @ v)
    v = state.scaling(0) * (prior.matrices[0] @ v) if T >= 1 else state.scaling(0)
    excess = float(np.max(v - 1.0)) if v.size else 0.0
    return excess <= tol, excess
