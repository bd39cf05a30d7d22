"""Command-line front end: build-prior, solve, observability, simulate.

Exit codes: 0 success, 2 infeasible observations, 3 not converged, 4 input
error.  ``PB_LOG`` sets the log level (DEBUG/INFO/WARNING/ERROR).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as io_mod
from . import observability as obs_mod
from .errors import (
    DegenerateUpdate,
    Infeasible,
    InputError,
    MaxItersExceeded,
    NotConverged,
    PipebridgeError,
)
from .network import build_prior
from .simulate import make_scenario
from .solver import primal_objective, proximal_solve
from .types import ObservationModel, SolverConfig

log = logging.getLogger("pipebridge")

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_NOT_CONVERGED = 3
EXIT_INPUT = 4


def _setup_logging():
    level = os.environ.get("PB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s")


def _load_network_and_flows(args):
    network = io_mod.load_network(args.network)
    flows = io_mod.load_flows(args.flows, network)
    return network, flows


def cmd_build_prior(args):
    network, flows = _load_network_and_flows(args)
    prior = build_prior(network, flows)
    io_mod.save_prior_archive(prior, args.out, dt=flows.dt, sensors=network.sensors)
    log.info("wrote prior archive with n=%d states, T=%d steps", prior.n, prior.horizon)
    print(f"prior archive: {args.out} (n={prior.n}, T={prior.horizon})")
    return EXIT_OK


def _resolve_instance(args):
    """Prior + sensors + dt from either a prior archive or network+flows."""
    if args.prior:
        prior, dt, sensors = io_mod.load_prior_archive(args.prior)
    else:
        if not (args.network and args.flows):
            raise InputError("need either --prior or both --network and --flows")
        network, flows = _load_network_and_flows(args)
        prior = build_prior(network, flows)
        dt = flows.dt
        sensors = list(network.sensors)
    if getattr(args, "sensors", None):
        sensors = [s.strip() for s in args.sensors.split(",") if s.strip()]
    state_ids = list(prior.state_ids) if prior.state_ids else [str(i) for i in range(prior.n)]
    index = {s: i for i, s in enumerate(state_ids)}
    missing = [s for s in sensors if s not in index]
    if missing:
        raise InputError(f"unknown sensor state(s) {missing}")
    return prior, dt, sensors, state_ids, index


def cmd_solve(args):
    prior, dt, sensors, state_ids, index = _resolve_instance(args)
    if not sensors:
        raise InputError("no sensors given (network file or --sensors)")
    obs = ObservationModel(n=prior.n, sensors=tuple(index[s] for s in sensors))
    rho = io_mod.load_observations(args.observations, sensors, prior.horizon, dt)

    eta_init = None
    if args.eta_init and args.eta_init != "uniform":
        eta_init = np.loadtxt(args.eta_init, ndmin=1)
    config = SolverConfig(
        outer_tol=args.outer_tol,
        inner_sweeps_per_outer=args.inner_sweeps,
        max_outer_iters=args.max_outer_iters,
        residual_tol=args.residual_tol,
        eta_init=eta_init,
        exact=args.exact,
    )

    result = proximal_solve(prior, obs, rho, config)
    plan = result.plan
    report = obs_mod.analyze(result.prior_reduced, obs)
    canonicalized = False
    if args.canonicalize:
        controlled = obs_mod.controlled_prior(result.state, result.prior_reduced)
        plan = obs_mod.canonicalize(plan, report, controlled)
        canonicalized = True

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    marginals = plan.marginals()
    io_mod.save_marginals(marginals, state_ids, dt, out / "marginals.csv")
    io_mod.save_plan_archive(plan, out / "plan", state_ids=state_ids)
    io_mod.save_trace(result.trace, out / "trace.csv")

    objective = primal_objective(plan, prior)
    summary = {
        "total_initial_mass_g": float(marginals[0].sum()),
        "objective": objective,
        "dual_objective": result.trace[-1].dual_objective,
        "residual": result.state.residual,
        "outer_iterations": result.iterations,
        "converged": result.converged,
        "is_unique": report.is_unique,
        "kernel_dimension": report.kernel_dimension,
        "unobservable_downstream_states": [state_ids[i] for i in report.unobservable_downstream],
        "canonicalized": canonicalized,
        "seed": args.seed,
        "exit_code": EXIT_OK,
    }
    io_mod.save_summary(summary, out / "summary.json")
    print(
        f"solved: initial mass {summary['total_initial_mass_g']:.6g} g, "
        f"objective {objective:.3e}, residual {result.state.residual:.3e}, "
        f"{result.iterations} outer iterations, unique={report.is_unique}"
    )
    return EXIT_OK


def cmd_observability(args):
    prior, dt, sensors, state_ids, index = _resolve_instance(args)
    if not sensors:
        raise InputError("no sensors given (network file or --sensors)")
    obs = ObservationModel(n=prior.n, sensors=tuple(index[s] for s in sensors))
    report = obs_mod.analyze(prior, obs, tol=args.rank_tol)
    io_mod.save_observability_report(report, args.out, state_ids=state_ids)
    print(
        f"rank {report.rank}/{prior.n}, kernel dimension {report.kernel_dimension}, "
        f"unique={report.is_unique}"
    )
    return EXIT_OK


def _parse_injection(specs, valid_ids):
    injection = {}
    for spec in specs:
        if "=" not in spec:
            raise InputError(f"injection {spec!r} must look like STATE_ID=GRAMS")
        sid, grams = spec.rsplit("=", 1)
        if sid not in valid_ids:
            candidates = ", ".join(list(valid_ids)[:10])
            raise InputError(f"unknown injection state {sid!r}; valid ids include {candidates}, ...")
        try:
            injection[sid] = injection.get(sid, 0.0) + float(grams)
        except ValueError as exc:
            raise InputError(f"injection {spec!r}: {exc}") from exc
    return injection


def cmd_simulate(args):
    network, flows = _load_network_and_flows(args)
    if args.sensors:
        network.sensors = [s.strip() for s in args.sensors.split(",") if s.strip()]
        for s in network.sensors:
            if s not in network.state_index:
                raise InputError(f"unknown sensor state {s!r}")
    if not network.sensors:
        raise InputError("no sensors given (network file or --sensors)")
    injection = _parse_injection(args.inject, network.state_index)
    try:
        scenario, mus, rho = make_scenario(
            network,
            flows,
            injection,
            noise_sigma=args.noise,
            seed=args.seed,
            out_dir=args.out,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    print(
        f"scenario bundle: {args.out} (injected {scenario.injected_total:.6g} g, "
        f"T={flows.horizon}, noise sigma={args.noise})"
    )
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pipebridge",
        description="Reconstruct mass transport on pipe networks from partial sensor data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-prior", help="build the transition prior from network + flows")
    p.add_argument("--network", required=True)
    p.add_argument("--flows", required=True)
    p.add_argument("--out", required=True, help="output archive directory")
    p.set_defaults(func=cmd_build_prior)

    p = sub.add_parser("solve", help="reconstruct transport from observations")
    p.add_argument("--network")
    p.add_argument("--flows")
    p.add_argument("--prior", help="prior archive directory (alternative to network+flows)")
    p.add_argument("--observations", required=True)
    p.add_argument("--sensors", help="comma-separated sensor state ids (overrides files)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--exact", action="store_true", help="solve each inner problem to tolerance")
    p.add_argument("--inner-sweeps", type=int, default=2, dest="inner_sweeps")
    p.add_argument("--outer-tol", type=float, default=1e-8, dest="outer_tol")
    p.add_argument("--residual-tol", type=float, default=1e-9, dest="residual_tol")
    p.add_argument("--max-outer-iters", type=int, default=50_000, dest="max_outer_iters")
    p.add_argument("--eta-init", default="uniform", help='"uniform" or a file with one value per unobserved state')
    p.add_argument("--canonicalize", action="store_true", help="zero initial mass on downstream-unobserved states")
    p.add_argument("--seed", type=int, default=0, help="recorded in the summary for provenance")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("observability", help="rank/kernel analysis of a prior + sensors")
    p.add_argument("--network")
    p.add_argument("--flows")
    p.add_argument("--prior")
    p.add_argument("--sensors")
    p.add_argument("--rank-tol", type=float, default=None, dest="rank_tol")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_observability)

    p = sub.add_parser("simulate", help="generate a synthetic scenario bundle")
    p.add_argument("--network", required=True)
    p.add_argument("--flows", required=True)
    p.add_argument("--inject", action="append", default=[], metavar="STATE_ID=GRAMS", required=True)
    p.add_argument("--sensors")
    p.add_argument("--noise", type=float, default=0.0, help="multiplicative sensor noise level")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="bundle directory")
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (Infeasible, DegenerateUpdate) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (MaxItersExceeded, NotConverged) as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except PipebridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
