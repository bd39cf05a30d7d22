"""File formats: network JSON, flow/observation CSV, prior and plan archives.

All tabular data is CSV and all structured reports are JSON; outputs are
deterministic (sorted keys, shortest round-trip float formatting) so repeated
runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import shutil
from pathlib import Path

import jsonschema
import numpy as np

from .errors import InputError
from .network import FlowSeries, NetworkModel, Node, PipeSpec
from .types import MarkovPrior

__all__ = [
    "NETWORK_SCHEMA",
    "load_network",
    "save_network",
    "load_flows",
    "save_flows",
    "load_observations",
    "save_observations",
    "save_prior_archive",
    "load_prior_archive",
    "save_plan_archive",
    "save_marginals",
    "save_trace",
    "save_summary",
    "save_observability_report",
    "write_scenario_bundle",
]

NETWORK_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "pipebridge network description",
    "type": "object",
    "required": ["nodes", "pipes"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "segment_volume_cap_liters": {"type": "number", "exclusiveMinimum": 0},
        "nodes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "type"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "type": {"enum": ["junction", "source", "consumer"]},
                    "tank_volume_liters": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
        "pipes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "from", "to", "length_m", "diameter_mm"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "from": {"type": "string"},
                    "to": {"type": "string"},
                    "length_m": {"type": "number", "exclusiveMinimum": 0},
                    "diameter_mm": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
        "sensors": {"type": "array", "items": {"type": "string"}},
    },
}

_FLOW_HEADER = ["time", "pipe_id", "flow_lps"]
_OBS_HEADER = ["time", "sensor_id", "mass_g"]


def _fmt(x):
    return repr(float(x))


def load_network(path):
    """Parse and validate a network description JSON file."""
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    except OSError as exc:
        raise InputError(f"{path}: {exc}") from exc
    try:
        jsonschema.validate(doc, NETWORK_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"{path}: at {where}: {exc.message}") from exc
    try:
        nodes = [
            Node(
                id=n["id"],
                kind=n["type"],
                tank_volume_liters=n.get("tank_volume_liters"),
            )
            for n in doc["nodes"]
        ]
        pipes = [
            PipeSpec(
                id=p["id"],
                from_node=p["from"],
                to_node=p["to"],
                length_m=float(p["length_m"]),
                diameter_mm=float(p["diameter_mm"]),
            )
            for p in doc["pipes"]
        ]
        return NetworkModel(
            nodes=nodes,
            pipes=pipes,
            segment_volume_cap=float(doc.get("segment_volume_cap_liters", 1.5)),
            sensors=doc.get("sensors"),
        )
    except (ValueError, KeyError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def save_network(network, path, name=None):
    doc = {
        "segment_volume_cap_liters": network.segment_volume_cap,
        "nodes": [
            {
                "id": n.id,
                "type": n.kind,
                **(
                    {"tank_volume_liters": n.tank_volume_liters}
                    if n.tank_volume_liters is not None
                    else {}
                ),
            }
            for n in network.nodes.values()
        ],
        "pipes": [
            {
                "id": p.id,
                "from": p.from_node,
                "to": p.to_node,
                "length_m": p.length_m,
                "diameter_mm": p.diameter_mm,
            }
            for p in network.pipes.values()
        ],
        "sensors": list(network.sensors),
    }
    if name:
        doc["name"] = name
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_csv(path, header):
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise InputError(f"{path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path}: empty file")
    if rows[0] != header:
        raise InputError(f"{path}: line 1: expected header {','.join(header)!r}")
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise InputError(f"{path}: line {lineno}: expected {len(header)} columns")
        body.append((lineno, row))
    if not body:
        raise InputError(f"{path}: no data rows")
    return body


def _uniform_times(values, path):
    times = sorted(set(values))
    if len(times) == 1:
        return times, 1.0
    steps = np.diff(times)
    dt = steps[0]
    if dt <= 0 or np.max(np.abs(steps - dt)) > 1e-9 * max(dt, 1.0):
        raise InputError(f"{path}: time stamps are not uniformly spaced")
    return times, float(dt)


def load_flows(path, network=None):
    """Read a ``time,pipe_id,flow_lps`` CSV into a :class:`FlowSeries`."""
    path = Path(path)
    body = _read_csv(path, _FLOW_HEADER)
    records = {}
    for lineno, (t_str, pipe_id, flow_str) in body:
        try:
            t = float(t_str)
            f = float(flow_str)
        except ValueError as exc:
            raise InputError(f"{path}: line {lineno}: {exc}") from exc
        if f < 0:
            raise InputError(f"{path}: line {lineno}: negative flow")
        key = (t, pipe_id)
        if key in records:
            raise InputError(f"{path}: line {lineno}: duplicate entry for {pipe_id} at t={t_str}")
        records[key] = f
    times, dt = _uniform_times([t for t, _ in records], path)
    pipe_ids = sorted({p for _, p in records})
    if network is not None:
        missing = set(network.pipes) - set(pipe_ids)
        if missing:
            raise InputError(f"{path}: no flows for pipe(s) {sorted(missing)}")
        pipe_ids = list(network.pipes)
    flows = {}
    for pid in pipe_ids:
        series = []
        for t in times:
            if (t, pid) not in records:
                raise InputError(f"{path}: missing flow for pipe {pid!r} at t={t:g}")
            series.append(records[(t, pid)])
        flows[pid] = np.asarray(series)
    return FlowSeries(flows=flows, dt=dt)


def save_flows(flows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_FLOW_HEADER)
        for t in range(flows.horizon):
            for pid in flows.flows:
                writer.writerow([_fmt(t * flows.dt), pid, _fmt(flows.at(pid, t))])


def load_observations(path, sensor_ids, horizon, dt):
    """Read a ``time,sensor_id,mass_g`` CSV into a (T+1, k) array.

    Requires one row per sensor per time step 0..T; missing or extra entries
    are reported with the offending (time, sensor).
    """
    path = Path(path)
    body = _read_csv(path, _OBS_HEADER)
    records = {}
    for lineno, (t_str, sensor_id, mass_str) in body:
        try:
            t = float(t_str)
            m = float(mass_str)
        except ValueError as exc:
            raise InputError(f"{path}: line {lineno}: {exc}") from exc
        if m < 0:
            raise InputError(f"{path}: line {lineno}: negative mass")
        if sensor_id not in sensor_ids:
            raise InputError(f"{path}: line {lineno}: unknown sensor {sensor_id!r}")
        step = t / dt
        if abs(step - round(step)) > 1e-6:
            raise InputError(f"{path}: line {lineno}: time {t:g} is not a multiple of dt={dt:g}")
        records[(int(round(step)), sensor_id)] = m
    rho = np.zeros((horizon + 1, len(sensor_ids)))
    for t in range(horizon + 1):
        for j, sid in enumerate(sensor_ids):
            if (t, sid) not in records:
                raise InputError(
                    f"{path}: missing observation for sensor {sid!r} at t={t * dt:g}"
                )
            rho[t, j] = records[(t, sid)]
    return rho


def save_observations(rho, sensor_ids, dt, path):
    rho = np.asarray(rho)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_OBS_HEADER)
        for t in range(rho.shape[0]):
            for j, sid in enumerate(sensor_ids):
                writer.writerow([_fmt(t * dt), sid, _fmt(rho[t, j])])


# ---------------------------------------------------------------------------
# prior / plan archives


def _save_triplets(mats, path, value_name):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "i", "j", value_name])
        for t, m in enumerate(mats):
            coo = m.tocoo()
            order = np.lexsort((coo.col, coo.row))
            for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                writer.writerow([t, int(i), int(j), _fmt(v)])


def save_prior_archive(prior, out_dir, dt=1.0, sensors=None):
    """Write ``meta.json``, ``states.csv`` (index,state_id), and ``prior.csv`` (t,i,j,p)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state_ids = list(prior.state_ids) if prior.state_ids else [str(i) for i in range(prior.n)]
    meta = {
        "n": prior.n,
        "horizon": prior.horizon,
        "dt": dt,
        "sensors": list(sensors) if sensors else [],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(out / "states.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "state_id"])
        for i, sid in enumerate(state_ids):
            writer.writerow([i, sid])
    _save_triplets(prior.matrices, out / "prior.csv", "p")


def load_prior_archive(path):
    """Read a prior archive directory; returns ``(prior, dt, sensors)``."""
    from scipy import sparse

    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}/meta.json: {exc}") from exc
    for key in ("n", "horizon", "dt"):
        if key not in meta:
            raise InputError(f"{path}/meta.json: missing field {key!r}")
    n, horizon = int(meta["n"]), int(meta["horizon"])
    state_rows = _read_csv(path / "states.csv", ["index", "state_id"])
    state_ids = [None] * n
    for lineno, (idx, sid) in state_rows:
        i = int(idx)
        if not 0 <= i < n:
            raise InputError(f"{path}/states.csv: line {lineno}: index {i} out of range")
        state_ids[i] = sid
    if any(s is None for s in state_ids):
        raise InputError(f"{path}/states.csv: incomplete state map")
    entries = [([], [], []) for _ in range(horizon)]
    for lineno, (t_str, i_str, j_str, p_str) in _read_csv(path / "prior.csv", ["t", "i", "j", "p"]):
        try:
            t, i, j, p = int(t_str), int(i_str), int(j_str), float(p_str)
        except ValueError as exc:
            raise InputError(f"{path}/prior.csv: line {lineno}: {exc}") from exc
        if not (0 <= t < horizon and 0 <= i < n and 0 <= j < n):
            raise InputError(f"{path}/prior.csv: line {lineno}: index out of range")
        entries[t][0].append(p)
        entries[t][1].append(i)
        entries[t][2].append(j)
    mats = [
        sparse.coo_array((data, (rows, cols)), shape=(n, n)).tocsr()
        for data, rows, cols in entries
    ]
    prior = MarkovPrior.from_matrices(mats, n=n, state_ids=state_ids)
    sensors = meta.get("sensors") or []
    for s in sensors:
        if s not in state_ids:
            raise InputError(f"{path}/meta.json: sensor {s!r} is not a state")
    return prior, float(meta["dt"]), sensors


def save_plan_archive(plan, out_dir, state_ids=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if state_ids is not None:
        with open(out / "states.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "state_id"])
            for i, sid in enumerate(state_ids):
                writer.writerow([i, sid])
    _save_triplets(plan.matrices, out / "plan.csv", "mass_g")


def save_marginals(marginals, state_ids, dt, path):
    """Write the trajectory as ``time,state_id,mass_g`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "state_id", "mass_g"])
        for t, mu in enumerate(marginals):
            for i, sid in enumerate(state_ids):
                writer.writerow([_fmt(t * dt), sid, _fmt(mu[i])])


def save_trace(trace, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "eta_change", "primal_obj", "dual_obj", "residual"])
        for row in trace:
            writer.writerow(
                [
                    row.iteration,
                    _fmt(row.eta_change),
                    _fmt(row.primal_objective),
                    _fmt(row.dual_objective),
                    _fmt(row.residual),
                ]
            )


def save_summary(summary, path):
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def save_observability_report(report, path, state_ids=None):
    save_summary(report.to_dict(state_ids), path)


def write_scenario_bundle(out_dir, network, flows, marginals, observations, scenario, injection):
    """Scenario directory: network, flows, observations, ground truth, manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_network(network, out / "network.json")
    save_flows(flows, out / "flows.csv")
    save_observations(observations, network.sensors, flows.dt, out / "observations.csv")
    save_marginals(marginals, network.state_ids, flows.dt, out / "ground_truth.csv")
    manifest = {
        "seed": scenario.seed,
        "noise_sigma": scenario.noise_sigma,
        "injection_g": injection,
        "injected_total_g": scenario.injected_total,
        "dt": flows.dt,
        "horizon": flows.horizon,
        "sensors": list(network.sensors),
    }
    save_summary(manifest, out / "manifest.json")


def copy_into(src, dst_dir):
    dst = Path(dst_dir)
    dst.mkdir(parents=True, exist_ok=True)
    shutil.copy2(src, dst / Path(src).name)
