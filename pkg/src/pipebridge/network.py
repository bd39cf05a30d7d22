"""Water-network model and construction of the advection transition prior.

Each pipe is split into equal-volume segments (capped at a configurable
volume), every segment is a state, storage tanks at source nodes are states,
and one absorbing exit state collects water leaving through consumers.  Within
one time step a parcel of water advances along its line of pipes by the
flow volume; the fraction of a segment's water reaching each downstream
segment follows from the normalized speeds of the traversed line, and
junctions split the result in proportion to the outgoing flows.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import (
    FlowBalanceError,
    HypothesisViolated,
    InvalidVolume,
    PipebridgeError,
    ShapeMismatch,
    TopologyError,
)
from .types import MarkovPrior

__all__ = [
    "PipeSpec",
    "Node",
    "NetworkModel",
    "FlowSeries",
    "EXIT_STATE",
    "pipe_volume_liters",
    "normalized_speed",
    "line_transitions",
    "pipe_row",
    "build_prior",
]

EXIT_STATE = "EXIT"


def pipe_volume_liters(length_m, diameter_mm):
    """Cylinder volume in liters for a length in meters and bore in millimeters."""
    if length_m <= 0 or diameter_mm <= 0:
        raise InvalidVolume("pipe length and diameter must be positive")
    return math.pi * diameter_mm**2 * length_m / 4000.0


@dataclass(frozen=True)
class PipeSpec:
    """One pipe: identifier, endpoints, length (m) and inner diameter (mm)."""

    id: str
    from_node: str
    to_node: str
    length_m: float
    diameter_mm: float

    def __post_init__(self):
        if self.length_m <= 0 or self.diameter_mm <= 0:
            raise InvalidVolume(f"pipe {self.id}: length and diameter must be positive")

    @property
    def volume_liters(self):
        return pipe_volume_liters(self.length_m, self.diameter_mm)


@dataclass(frozen=True)
class Node:
    """A junction, a source (pumping station with tank), or a consumer."""

    id: str
    kind: str  # "junction" | "source" | "consumer"
    tank_volume_liters: float | None = None

    def __post_init__(self):
        if self.kind not in ("junction", "source", "consumer"):
            raise ValueError(f"node {self.id}: unknown kind {self.kind!r}")
        if self.kind == "source":
            if self.tank_volume_liters is None or self.tank_volume_liters <= 0:
                raise InvalidVolume(f"source {self.id} needs a positive tank volume")


class NetworkModel:
    """Pipe network with a derived discrete state space.

    States are pipe segments (``<pipe_id>#<k>``, k counted from the inlet),
    one tank state per source node (``tank:<node_id>``), and the absorbing
    ``EXIT`` state, in that order.
    """

    def __init__(self, nodes, pipes, segment_volume_cap=1.5, sensors=None):
        if segment_volume_cap <= 0:
            raise InvalidVolume("segment volume cap must be positive")
        self.segment_volume_cap = float(segment_volume_cap)
        self.nodes = {}
        for node in nodes:
            if node.id in self.nodes:
                raise ValueError(f"duplicate node id {node.id!r}")
            self.nodes[node.id] = node
        self.pipes = {}
        for pipe in pipes:
            if pipe.id in self.pipes:
                raise ValueError(f"duplicate pipe id {pipe.id!r}")
            for end in (pipe.from_node, pipe.to_node):
                if end not in self.nodes:
                    raise ValueError(f"pipe {pipe.id} references unknown node {end!r}")
            self.pipes[pipe.id] = pipe

        self.outgoing = defaultdict(list)
        self.incoming = defaultdict(list)
        for pipe in self.pipes.values():
            self.outgoing[pipe.from_node].append(pipe)
            self.incoming[pipe.to_node].append(pipe)
        for node in self.nodes.values():
            if node.kind == "source" and self.incoming[node.id]:
                raise ValueError(f"source {node.id} cannot have incoming pipes")
            if node.kind == "consumer" and self.outgoing[node.id]:
                raise ValueError(f"consumer {node.id} cannot have outgoing pipes")

        self.segments = {}
        for pipe in self.pipes.values():
            count = max(1, math.ceil(pipe.volume_liters / self.segment_volume_cap))
            self.segments[pipe.id] = count

        self.state_ids = []
        for pipe in self.pipes.values():
            self.state_ids.extend(f"{pipe.id}#{k}" for k in range(self.segments[pipe.id]))
        self.tank_nodes = [n for n in self.nodes.values() if n.kind == "source"]
        self.state_ids.extend(f"tank:{n.id}" for n in self.tank_nodes)
        self.state_ids.append(EXIT_STATE)
        self.state_index = {s: i for i, s in enumerate(self.state_ids)}

        self.sensors = list(sensors) if sensors else []
        for s in self.sensors:
            if s not in self.state_index:
                raise ValueError(f"sensor {s!r} is not a state of this network")

    @property
    def n(self):
        return len(self.state_ids)

    @property
    def exit_index(self):
        return self.n - 1

    def segment_volume(self, pipe_id):
        return self.pipes[pipe_id].volume_liters / self.segments[pipe_id]

    def segment_state(self, pipe_id, k):
        return self.state_index[f"{pipe_id}#{k}"]

    def tank_state(self, node_id):
        return self.state_index[f"tank:{node_id}"]

    def describe_state(self, i):
        """("segment", pipe, k) | ("tank", node) | ("exit", None) for index ``i``."""
        sid = self.state_ids[i]
        if sid == EXIT_STATE:
            return ("exit", None)
        if sid.startswith("tank:"):
            return ("tank", self.nodes[sid[5:]])
        pipe_id, k = sid.rsplit("#", 1)
        return ("segment", self.pipes[pipe_id], int(k))


@dataclass
class FlowSeries:
    """Per-pipe flow rates (liters/second) over ``T`` uniform steps of ``dt`` seconds."""

    flows: dict
    dt: float = 1.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        horizon = None
        clean = {}
        for pipe_id, series in self.flows.items():
            arr = np.asarray(series, dtype=np.float64)
            if arr.ndim != 1:
                raise ShapeMismatch(f"flows for {pipe_id} must be a 1-d series")
            if horizon is None:
                horizon = arr.shape[0]
            elif arr.shape[0] != horizon:
                raise ShapeMismatch("all pipes must cover the same time steps")
            if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0):
                raise ValueError(f"flows for {pipe_id} must be finite and nonnegative")
            clean[pipe_id] = arr
        self.flows = clean
        self.horizon = horizon if horizon is not None else 0

    def at(self, pipe_id, t):
        return float(self.flows[pipe_id][t])

    def validate_against(self, network, rel_tol=1e-6):
        """Check coverage and junction flow balance; raise on violation."""
        for pipe_id in network.pipes:
            if pipe_id not in self.flows:
                raise FlowBalanceError(f"no flow series for pipe {pipe_id!r}")
        for node in network.nodes.values():
            if node.kind != "junction":
                continue
            for t in range(self.horizon):
                inflow = sum(self.at(p.id, t) for p in network.incoming[node.id])
                outflow = sum(self.at(p.id, t) for p in network.outgoing[node.id])
                scale = max(inflow, outflow)
                if scale > 0.0 and abs(inflow - outflow) > rel_tol * scale:
                    raise FlowBalanceError(
                        f"junction {node.id} at t={t}: inflow {inflow:g} L/s vs "
                        f"outflow {outflow:g} L/s"
                    )


def normalized_speed(flow_lps, dt_s, volume_liters):
    """Fraction of an element's volume replaced in one step: ``F dt / V``."""
    if volume_liters <= 0:
        raise InvalidVolume("volume must be positive")
    if dt_s <= 0:
        raise ValueError("dt must be positive")
    if flow_lps < 0:
        raise ValueError("flow must be nonnegative")
    return flow_lps * dt_s / volume_liters


_EXIT_MARK = -1


def _edge_positions(speeds, allow_exit):
    """Indices and fractional positions of the trailing and leading edges.

    ``n1``/``n2`` are the elements holding the trailing and leading edge of the
    source element's water after one step (``_EXIT_MARK`` when the edge leaves
    the line, only allowed with ``allow_exit``).  ``alpha``/``beta`` in [0, 1)
    are the fractions of those elements already traversed.
    """

    def scan(start):
        cum = 0.0
        for j in range(start, len(speeds)):
            s = speeds[j]
            if s <= 0.0:
                raise HypothesisViolated(
                    f"stagnant element at line position {j}; transitions through a "
                    "stopped pipe are undefined"
                )
            prev = cum
            cum += 1.0 / s
            if cum > 1.0:
                return j, s * (1.0 - prev)
        return _EXIT_MARK, 0.0

    n1, alpha = scan(0)
    n2, beta = scan(1)
    if (n1 == _EXIT_MARK or n2 == _EXIT_MARK) and not allow_exit:
        raise HypothesisViolated(
            "water would leave the line within one step; extend the line with "
            "the absorbing state"
        )
    return n1, alpha, n2, beta


def _line_distribution(speeds, allow_exit):
    """Fractions of the first element's water per line element, plus exit share."""
    fracs = np.zeros(len(speeds))
    if speeds[0] == 0.0:
        fracs[0] = 1.0
        return fracs, 0.0
    n1, alpha, n2, beta = _edge_positions(speeds, allow_exit)
    s1 = speeds[0]
    if n1 == _EXIT_MARK:
        return fracs, 1.0
    if n1 == n2:
        fracs[n1] = 1.0
        return fracs, 0.0
    fracs[n1] = (1.0 - alpha) * s1 / speeds[n1]
    last_mid = len(speeds) - 1 if n2 == _EXIT_MARK else n2 - 1
    for k in range(n1 + 1, last_mid + 1):
        fracs[k] = s1 / speeds[k]
    if n2 == _EXIT_MARK:
        return fracs, max(0.0, 1.0 - float(fracs.sum()))
    fracs[n2] = beta * s1 / speeds[n2]
    return fracs, 0.0


def line_transitions(speeds):
    """One-step distribution of the first pipe's water along a line of pipes.

    ``speeds[k]`` is the normalized speed of line element ``k``.  Requires the
    cumulative traversal time past the first element to exceed one step
    (otherwise water would exit the line and the caller must append the
    absorbing state); a stagnant first element returns the identity row.
    """
    speeds = [float(s) for s in speeds]
    if not speeds:
        raise ValueError("empty line")
    if any(s < 0 for s in speeds):
        raise ValueError("speeds must be nonnegative")
    fracs, _ = _line_distribution(speeds, allow_exit=False)
    return fracs


def _element_speed(network, flows, t, i):
    kind, obj = network.describe_state(i)[:2]
    if kind == "segment":
        _, pipe, _k = network.describe_state(i)
        return normalized_speed(flows.at(pipe.id, t), flows.dt, network.segment_volume(pipe.id))
    if kind == "tank":
        node = obj
        out = sum(flows.at(p.id, t) for p in network.outgoing[node.id])
        return normalized_speed(out, flows.dt, node.tank_volume_liters)
    return 0.0


def _collect_paths(network, flows, t, start_state, start_speed):
    """All downstream lines from a state, with their junction-split weights.

    Each result is ``(weight, states, speeds, reached_exit)``.  A line stops
    once the cumulative traversal time past its first element exceeds one step
    or the water reaches a consumer / dead end (``reached_exit``).
    """
    results = []

    def extend(states, speeds, cum, weight, cursor):
        while True:
            if cum > 1.0:
                results.append((weight, states, speeds, False))
                return
            kind, payload = cursor
            if kind == "pipe":
                pipe, k = payload
                if k >= network.segments[pipe.id]:
                    cursor = ("node", network.nodes[pipe.to_node])
                    continue
                idx = network.segment_state(pipe.id, k)
                if idx in states:
                    raise TopologyError(
                        f"loop through {network.state_ids[idx]} within one step"
                    )
                speed = normalized_speed(
                    flows.at(pipe.id, t), flows.dt, network.segment_volume(pipe.id)
                )
                states = states + [idx]
                speeds = speeds + [speed]
                if speed <= 0.0:
                    # only reachable with inconsistent flows; refuse to guess
                    raise HypothesisViolated(
                        f"stagnant pipe {pipe.id} on an active path at t={t}"
                    )
                cum += 1.0 / speed
                cursor = ("pipe", (pipe, k + 1))
                continue
            node = payload
            outs = [p for p in network.outgoing[node.id] if flows.at(p.id, t) > 0.0]
            if node.kind == "consumer" or not outs:
                results.append((weight, states, speeds, True))
                return
            total = sum(flows.at(p.id, t) for p in outs)
            if len(outs) == 1:
                cursor = ("pipe", (outs[0], 0))
                continue
            for p in outs:
                extend(states, speeds, cum, weight * flows.at(p.id, t) / total, ("pipe", (p, 0)))
            return

    kind, payload = network.describe_state(start_state)[:2]
    if kind == "segment":
        _, pipe, k = network.describe_state(start_state)
        extend([start_state], [start_speed], 0.0, 1.0, ("pipe", (pipe, k + 1)))
    else:  # tank: its outflow feeds the source node's pipes
        extend([start_state], [start_speed], 0.0, 1.0, ("node", payload))
    return results


def pipe_row(network, flows, t, i):
    """Transition row of state ``i`` at time ``t`` as a dense length-n vector.

    Enumerates every downstream branch line, applies the line distribution per
    branch, and combines branches weighted by their flow fractions; water that
    reaches a consumer or dead end goes to the absorbing exit state.  The row
    sums to one.
    """
    n = network.n
    row = np.zeros(n)
    kind = network.describe_state(i)[0]
    if kind == "exit":
        row[network.exit_index] = 1.0
        return row
    speed = _element_speed(network, flows, t, i)
    if speed <= 0.0:
        row[i] = 1.0
        return row
    for weight, states, speeds, reached_exit in _collect_paths(network, flows, t, i, speed):
        fracs, exit_frac = _line_distribution(speeds, allow_exit=reached_exit)
        for idx, f in zip(states, fracs):
            if f:
                row[idx] += weight * f
        if exit_frac:
            row[network.exit_index] += weight * exit_frac
    return row


def build_prior(network, flows, balance_tol=1e-6):
    """Row-stochastic transition matrices for every time step of the flows.

    Rows are assembled from :func:`pipe_row`; the absorbing exit row is pinned
    to itself.  Flow series are validated (coverage and junction balance)
    first.  Time steps with identical flows share one matrix computation.
    """
    flows.validate_against(network, rel_tol=balance_tol)
    n = network.n
    cache = {}
    mats = []
    for t in range(flows.horizon):
        key = tuple(float(flows.at(pid, t)) for pid in network.pipes)
        if key in cache:
            mats.append(cache[key])
            continue
        rows = []
        for i in range(n):
            try:
                rows.append(pipe_row(network, flows, t, i))
            except PipebridgeError as exc:
                raise type(exc)(
                    f"t={t}, state {network.state_ids[i]}: {exc}"
                ) from exc
        dense = np.vstack(rows)
        sums = dense.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-12:
            worst = int(np.argmax(np.abs(sums - 1.0)))
            raise TopologyError(
                f"t={t}: row for {network.state_ids[worst]} sums to {sums[worst]!r}"
            )
        mat = sparse.csr_array(dense)
        mat.eliminate_zeros()
        cache[key] = mat
        mats.append(mat)
    return MarkovPrior.from_matrices(mats, n=n, state_ids=network.state_ids)
