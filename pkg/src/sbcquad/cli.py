"""Command-line front end: ``simulate``, ``audit``, ``verify``, ``list-scenarios``.

Exit codes: 0 ok, 1 property or audit failure, 2 input error, 3 safety violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .barrier import barrier_value
from .flatness import ActuatorLimits, FlatSample, FlatnessSingularityError, actuator_audit
from .pipeline import SimulationAborted, audit_trace, run_scenario
from .scenarios import (BUILTIN_SCENARIOS, ScenarioError, builtin_document, config_from_dict,
                        load_scenario, parse_value)
from .verify import dumps_failure, run_verify

EXIT_OK, EXIT_PROPERTY, EXIT_INPUT, EXIT_SAFETY = 0, 1, 2, 3
SAFETY_TOL = -1e-9

TRACE_FILE, PAIRS_FILE, AUDIT_FILE, CONFIG_FILE = "trace.csv", "pairs.csv", "audit.json", "config.json"

_DERIVS = ("", "v", "a", "j")
_AXES = ("x", "y", "z")

log = logging.getLogger("sbcquad")


class ArchiveError(ValueError):
    pass


def _num(x) -> str:
    """Shortest round-tripping text for a float."""
    return repr(float(x))


def _json_float(x):
    x = float(x)
    return x if np.isfinite(x) else None


def trace_header(m: int) -> list:
    cols = ["step", "t"]
    for i in range(m):
        p = f"q{i + 1}_"
        for d in _DERIVS:
            cols += [f"{p}{d}{a}" for a in _AXES]
        cols += [f"{p}vhat_{a}" for a in _AXES]
        cols += [f"{p}vstar_{a}" for a in _AXES]
        cols += [f"{p}s", f"{p}sdot", f"{p}tilt_deg", f"{p}thrust_ratio",
                 f"{p}roll_deg", f"{p}pitch_deg", f"{p}yaw_deg"]
    return cols


PAIRS_HEADER = ["step", "t", "i", "j", "h", "slack", "slack_nominal", "active"]


def write_archive(out: Path, result, source: dict):
    trace = result.trace
    out.mkdir(parents=True, exist_ok=True)
    m = trace.m
    with open(out / TRACE_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(m))
        for k in range(trace.n_steps):
            row = [k, _num(trace.t[k])]
            for i in range(m):
                row += [_num(x) for x in trace.states[k, i].ravel()]
                row += [_num(x) for x in trace.vhat[k, i]]
                row += [_num(x) for x in trace.vstar[k, i]]
                row += [_num(trace.s[k, i]), _num(trace.sdot[k, i]),
                        _num(np.rad2deg(trace.tilt[k, i])), _num(trace.thrust_ratio[k, i])]
                row += [_num(x) for x in np.rad2deg(trace.euler[k, i])]
            w.writerow(row)
    with open(out / PAIRS_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIRS_HEADER)
        for k in range(trace.n_steps):
            for p, (i, j) in enumerate(trace.pairs):
                w.writerow([k, _num(trace.t[k]), i, j, _num(trace.h[k, p]), _num(trace.slack[k, p]),
                            _num(trace.slack_nominal[k, p]), int(trace.active[k, p])])
    (out / CONFIG_FILE).write_text(json.dumps(source, indent=2, sort_keys=True) + "\n")
    (out / AUDIT_FILE).write_text(json.dumps(simulation_summary(result), indent=2, sort_keys=True) + "\n")


def _table_min_h(h: np.ndarray, t: np.ndarray, pairs: list) -> dict:
    if h.size == 0:
        return {"value": None, "step": None, "t": None, "pair": None}
    k, p = np.unravel_index(int(np.argmin(h)), h.shape)
    return {"value": float(h[k, p]), "step": int(k), "t": float(t[k]), "pair": list(pairs[p])}


def _first_violation(h: np.ndarray, t: np.ndarray, pairs: list):
    bad = np.argwhere(h < SAFETY_TOL)
    if bad.size == 0:
        return None
    k, p = bad[0]
    return {"step": int(k), "t": float(t[k]), "pair": list(pairs[p]), "h": float(h[k, p])}


def _team_extremes(audits: list) -> dict:
    tilt = max(range(len(audits)), key=lambda i: audits[i].max_tilt)
    ratio = max(range(len(audits)), key=lambda i: audits[i].max_thrust_ratio)
    a, b = audits[tilt], audits[ratio]
    return {
        "max_tilt_deg": _json_float(a.max_tilt_deg),
        "max_tilt_vehicle": tilt,
        "max_tilt_time": _json_float(a.max_tilt_index * a.dt),
        "max_thrust_ratio": _json_float(b.max_thrust_ratio),
        "max_thrust_vehicle": ratio,
        "max_thrust_time": _json_float(b.max_thrust_index * b.dt),
        "passed": all(x.passed for x in audits),
        "failures": [f"q{i + 1}: {msg}" for i, x in enumerate(audits) for msg in x.failures],
    }


def simulation_summary(result) -> dict:
    trace = result.trace
    cfg = trace.config
    audits = result.audit.vehicles
    final_h, _, final_pair = trace.min_h()
    h_all = np.vstack([trace.h, [[barrier_value(trace.final_states[i], trace.final_states[j], cfg.geometry)
                                  for i, j in trace.pairs]]]) if trace.pairs else trace.h
    t_all = np.append(trace.t, trace.n_steps * cfg.dt)
    return {
        "version": __version__,
        "scenario": cfg.name,
        "m": trace.m,
        "n_steps": trace.n_steps,
        "dt": cfg.dt,
        "ks": cfg.ks,
        "attempts": [{"ks": a.ks, "passed": a.audit.passed,
                      "max_tilt_deg": _json_float(np.rad2deg(a.audit.max_tilt)),
                      "max_thrust_ratio": _json_float(a.audit.max_thrust_ratio)} for a in result.attempts],
        "min_h": _table_min_h(trace.h, trace.t, trace.pairs),
        "min_h_with_final": _json_float(final_h),
        "safe": _first_violation(h_all, t_all, trace.pairs) is None,
        "first_violation": _first_violation(h_all, t_all, trace.pairs),
        "max_kkt_residual": _json_float(trace.kkt.max()) if trace.n_steps else None,
        "relaxed_bound_steps": int(trace.relaxed.sum()),
        "modified_steps": int(np.any(trace.vstar != trace.vhat, axis=(1, 2)).sum()),
        "completion_times": [_json_float(x) for x in trace.completion_times()],
        "goal_errors": [_json_float(x) for x in trace.goal_errors()],
        "audit": _team_extremes(audits),
    }


# --- archive reading -------------------------------------------------------

def _read_csv(path: Path, header: list) -> list:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise ArchiveError(f"missing {path.name}") from None
    if not rows or rows[0] != header:
        raise ArchiveError(f"{path.name}: unexpected header")
    body = rows[1:]
    for n, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ArchiveError(f"{path.name}:{n}: expected {len(header)} fields, got {len(row)}")
    return body


def _floats(rows: list, name: str) -> np.ndarray:
    try:
        return np.array(rows, dtype=float).reshape(len(rows), -1)
    except ValueError as exc:
        raise ArchiveError(f"{name}: {exc}") from None


def read_archive(path: Path):
    """Returns ``(config, states (N, m, 4, 3), vstar (N, m, 3), t (N,), h (N, P), pairs, embedded summary)``."""
    path = Path(path)
    if not path.is_dir():
        raise ArchiveError(f"{path} is not a directory")
    try:
        source = json.loads((path / CONFIG_FILE).read_text())
        summary = json.loads((path / AUDIT_FILE).read_text())
    except FileNotFoundError as exc:
        raise ArchiveError(f"missing {Path(exc.filename).name}") from None
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"invalid JSON: {exc}") from None
    try:
        cfg = config_from_dict(source, validate_initial=False)
    except ScenarioError as exc:
        raise ArchiveError(f"{CONFIG_FILE}: {exc}") from None
    m = cfg.m
    data = _floats(_read_csv(path / TRACE_FILE, trace_header(m)), TRACE_FILE)
    N = data.shape[0]
    if N == 0:
        raise ArchiveError(f"{TRACE_FILE} has no rows")
    if not np.array_equal(data[:, 0], np.arange(N)):
        raise ArchiveError(f"{TRACE_FILE}: step column is not 0..{N - 1}")
    per = (data.shape[1] - 2) // m
    block = data[:, 2:].reshape(N, m, per)
    states = block[:, :, :12].reshape(N, m, 4, 3)
    vstar = block[:, :, 15:18]
    if not np.all(np.isfinite(states)) or not np.all(np.isfinite(vstar)):
        raise ArchiveError(f"{TRACE_FILE}: non-finite state or snap entries")

    pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
    prow = _floats(_read_csv(path / PAIRS_FILE, PAIRS_HEADER), PAIRS_FILE)
    if prow.shape[0] != N * len(pairs):
        raise ArchiveError(f"{PAIRS_FILE}: expected {N * len(pairs)} rows, got {prow.shape[0]}")
    h = prow[:, 4].reshape(N, len(pairs)) if pairs else np.zeros((N, 0))
    return cfg, states, vstar, data[:, 1], h, pairs, summary


def audit_archive(path: Path, limits: ActuatorLimits = None) -> dict:
    cfg, states, vstar, t, h_table, pairs, embedded = read_archive(path)
    limits = limits or cfg.limits
    audits = []
    for i in range(cfg.m):
        samples = [FlatSample.from_stack(np.vstack([states[k, i], vstar[k, i]])) for k in range(len(t))]
        audits.append(actuator_audit(samples, cfg.params, limits, dt=cfg.dt))
    # h recomputed from the stored positions, not copied from the pairs table
    h = np.array([[barrier_value(states[k, i], states[k, j], cfg.geometry) for i, j in pairs]
                  for k in range(len(t))]).reshape(len(t), len(pairs))
    report = _team_extremes(audits)
    report.update({
        "scenario": cfg.name,
        "n_steps": int(len(t)),
        "limits": {"max_tilt_deg": float(np.rad2deg(limits.max_tilt)),
                   "max_thrust_ratio": limits.max_thrust_ratio},
        "min_h": _table_min_h(h, t, pairs),
        "first_violation": _first_violation(h, t, pairs),
        "pairs_table_consistent": bool(np.array_equal(h, h_table)),
        "matches_embedded": None,
    })
    emb = embedded.get("audit", {})
    keys = ("max_tilt_deg", "max_thrust_ratio", "max_tilt_time", "max_thrust_time")
    report["matches_embedded"] = (all(emb.get(k) == report[k] for k in keys)
                                  and embedded.get("min_h") == report["min_h"])
    return report


# --- commands --------------------------------------------------------------

def _parse_sets(items: list) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ScenarioError(item, "expected key=value")
        key, _, value = item.partition("=")
        out[key.strip()] = parse_value(value)
    return out


def cmd_simulate(args) -> int:
    overrides = _parse_sets(args.set)
    if args.dt is not None:
        overrides["dt"] = args.dt
    cfg = load_scenario(args.scenario, overrides)
    out = Path(args.out or cfg.name)
    try:
        result = run_scenario(cfg)
    except SimulationAborted as exc:
        print(f"error: rectifier fault: {exc}", file=sys.stderr)
        return EXIT_PROPERTY
    write_archive(out, result, cfg.to_dict())
    summary = simulation_summary(result)
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        a = summary["audit"]
        print(f"scenario {cfg.name}: {result.trace.n_steps} steps, {cfg.m} vehicles -> {out}")
        print(f"min h {summary['min_h_with_final']:.6g}, max tilt {a['max_tilt_deg']:.2f} deg, "
              f"max thrust ratio {a['max_thrust_ratio']:.3f}, audit {'pass' if a['passed'] else 'FAIL'}")
    if not summary["safe"]:
        v = summary["first_violation"]
        print(f"safety violation at step {v['step']} (t = {v['t']:.3f} s), pair {tuple(v['pair'])}, "
              f"h = {v['h']:.3e}", file=sys.stderr)
        return EXIT_SAFETY
    if not summary["audit"]["passed"]:
        for msg in summary["audit"]["failures"]:
            print(f"audit: {msg}", file=sys.stderr)
        return EXIT_PROPERTY
    return EXIT_OK


def cmd_audit(args) -> int:
    try:
        cfg_limits = None
        if args.max_tilt_deg is not None or args.max_thrust_ratio is not None:
            base = json.loads((Path(args.archive) / CONFIG_FILE).read_text()).get("limits", {})
            cfg_limits = ActuatorLimits(
                max_tilt=float(np.deg2rad(args.max_tilt_deg if args.max_tilt_deg is not None
                                          else base.get("max_tilt_deg", 45.0))),
                max_thrust_ratio=float(args.max_thrust_ratio if args.max_thrust_ratio is not None
                                       else base.get("max_thrust_ratio", 2.0)))
        report = audit_archive(Path(args.archive), cfg_limits)
    except (ArchiveError, FileNotFoundError, json.JSONDecodeError, FlatnessSingularityError) as exc:
        print(f"error: corrupt archive: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        mh = report["min_h"]
        print(f"max tilt {report['max_tilt_deg']:.2f} deg (q{report['max_tilt_vehicle'] + 1}, "
              f"t = {report['max_tilt_time']:.2f} s)")
        print(f"max thrust ratio {report['max_thrust_ratio']:.3f} (q{report['max_thrust_vehicle'] + 1}, "
              f"t = {report['max_thrust_time']:.2f} s)")
        if mh["value"] is not None:
            print(f"min h {mh['value']:.6g} (pair {tuple(mh['pair'])}, t = {mh['t']:.2f} s)")
        for msg in report["failures"]:
            print(f"FAIL {msg}")
    if report["first_violation"] is not None:
        return EXIT_SAFETY
    return EXIT_OK if report["passed"] else EXIT_PROPERTY


def cmd_verify(args) -> int:
    if args.trials < 1:
        print("error: --trials must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    report = run_verify(args.seed, args.trials, inject_collision=args.inject_collision)
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        print("\n".join(report.lines()))
        for r in report.failures:
            print(f"counterexample: {dumps_failure(r)}")
    return EXIT_OK if report.passed else EXIT_PROPERTY


def cmd_list(args) -> int:
    for name in BUILTIN_SCENARIOS:
        doc = builtin_document(name)
        if args.json:
            print(json.dumps({"name": name, "vehicles": len(doc["vehicles"]),
                              "duration": doc.get("duration")}, sort_keys=True))
        else:
            print(f"{name}\t{len(doc['vehicles'])} vehicles")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sbcquad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scenario and write a trace archive")
    p.add_argument("--scenario", required=True, help="built-in name or path to a JSON scenario")
    p.add_argument("--out", help="archive directory (default: scenario name)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scenario field")
    p.add_argument("--dt", type=float)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("audit", help="re-audit a stored archive")
    p.add_argument("archive")
    p.add_argument("--max-tilt-deg", type=float)
    p.add_argument("--max-thrust-ratio", type=float)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("verify", help="randomised property checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--inject-collision", action="store_true",
                   help="append one colliding team to the feasibility fuzz")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("list-scenarios", help="list built-in scenarios")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_list)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
