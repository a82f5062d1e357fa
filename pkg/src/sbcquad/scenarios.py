"""Scenario configuration: dataclasses, JSON schema, built-ins and random scenarios."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .barrier import SafetyGeometry, barrier_value, check_initial_conditions
from .flatness import ActuatorLimits, VehicleParams
from .lindyn import DEFAULT_POLES, IntegratorState, place_poles
from .reference import ReferenceTrajectory, bezier_interp, circle_ref, hover_ref


class ScenarioError(ValueError):
    """Invalid scenario; ``path`` names the offending field (e.g. ``geometry.D_s``)."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["vehicles"],
    "properties": {
        "name": {"type": "string"},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "duration": {"type": "number", "exclusiveMinimum": 0},
        "ks": {"type": "number", "minimum": 0},
        "snap_bound": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "poles": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                  "minItems": 4, "maxItems": 4},
        "warm_start": {"type": "boolean"},
        "start": {"enum": ["rest", "reference"]},
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "D_s": {"type": "number", "exclusiveMinimum": 0},
                "c": {"type": "number", "minimum": 1},
                "shape": {"enum": ["rectangle", "cylinder"]},
                "n": {"type": "integer", "minimum": 2},
            },
        },
        "vehicle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mass": {"type": "number", "exclusiveMinimum": 0},
                "inertia": {"type": "array", "minItems": 3, "maxItems": 3, "items": _VEC3},
                "gravity": {"type": "number", "exclusiveMinimum": 0},
                "z_up": {"type": "boolean"},
            },
        },
        "limits": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_tilt_deg": {"type": "number", "exclusiveMinimum": 0, "maximum": 90},
                "max_thrust_ratio": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "retune": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "factor": {"type": "number", "exclusiveMinimum": 1},
                "max_retries": {"type": "integer", "minimum": 0},
                "initial_ks": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "vehicles": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["reference"],
                "properties": {
                    "name": {"type": "string"},
                    "reference": {
                        "oneOf": [
                            {
                                "type": "object",
                                "additionalProperties": False,
                                "required": ["type", "position"],
                                "properties": {"type": {"const": "hover"}, "position": _VEC3},
                            },
                            {
                                "type": "object",
                                "additionalProperties": False,
                                "required": ["type", "radius", "rate"],
                                "properties": {
                                    "type": {"const": "circle"},
                                    "radius": {"type": "number", "minimum": 0},
                                    "rate": {"type": "number"},
                                    "phase": {"type": "number"},
                                    "z": {"type": "number"},
                                    "center": _VEC3,
                                },
                            },
                            {
                                "type": "object",
                                "additionalProperties": False,
                                "required": ["type", "p0", "p1", "T"],
                                "properties": {
                                    "type": {"const": "bezier"},
                                    "p0": _VEC3,
                                    "p1": _VEC3,
                                    "T": {"type": "number", "exclusiveMinimum": 0},
                                    "t0": {"type": "number", "minimum": 0},
                                },
                            },
                        ]
                    },
                    "initial": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["r"],
                        "properties": {"r": _VEC3, "dr": _VEC3, "ddr": _VEC3, "dddr": _VEC3},
                    },
                },
            },
        },
    },
}

DEFAULTS = {
    "name": "custom",
    "dt": 0.02,
    "duration": 10.0,
    "ks": 0.0,
    "snap_bound": None,
    "poles": list(DEFAULT_POLES),
    "warm_start": True,
    "start": "rest",
    "geometry": {"D_s": 0.25, "c": 2.0, "shape": "rectangle", "n": 4},
    "vehicle": {"mass": 0.033, "inertia": [[1.4e-5, 0, 0], [0, 1.4e-5, 0], [0, 0, 2.2e-5]],
                "gravity": 9.81, "z_up": False},
    "limits": {"max_tilt_deg": 45.0, "max_thrust_ratio": 2.0},
    "retune": {"enabled": False, "factor": 10.0, "max_retries": 3, "initial_ks": 1.0},
}


@dataclass(frozen=True)
class RetunePolicy:
    enabled: bool = False
    factor: float = 10.0
    max_retries: int = 3
    initial_ks: float = 1.0

    def next_ks(self, ks: float) -> float:
        return ks * self.factor if ks > 0 else self.initial_ks


@dataclass
class ScenarioConfig:
    name: str
    references: list
    reference_specs: list
    initial_states: list
    geometry: SafetyGeometry = field(default_factory=SafetyGeometry)
    poles: tuple = DEFAULT_POLES
    ks: float = 0.0
    snap_bound: Optional[float] = None
    dt: float = 0.02
    duration: float = 10.0
    params: VehicleParams = field(default_factory=VehicleParams)
    limits: ActuatorLimits = field(default_factory=ActuatorLimits)
    retune: RetunePolicy = field(default_factory=RetunePolicy)
    warm_start: bool = True
    vehicle_names: list = field(default_factory=list)
    source: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.references)

    @property
    def gains(self):
        return place_poles(self.poles)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def with_ks(self, ks: float) -> "ScenarioConfig":
        doc = copy.deepcopy(self.source)
        doc["ks"] = float(ks)
        return config_from_dict(doc)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.source)


def _merge(defaults: dict, doc: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in doc.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _error_path(err: jsonschema.ValidationError) -> str:
    err = jsonschema.exceptions.best_match([err]) if err.context else err
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        return ".".join(parts + ["<unknown key>"])
    return ".".join(parts)


def build_reference(spec: dict) -> ReferenceTrajectory:
    kind = spec["type"]
    if kind == "hover":
        return hover_ref(spec["position"])
    if kind == "circle":
        return circle_ref(spec["radius"], spec["rate"], spec.get("phase", 0.0), spec.get("z", 0.0),
                          spec.get("center", (0.0, 0.0, 0.0)))
    if kind == "bezier":
        seg = bezier_interp(spec["p0"], spec["p1"], spec["T"])
        t0 = float(spec.get("t0", 0.0))
        if t0 == 0.0:
            return seg
        return ReferenceTrajectory(lambda t: seg(t - t0), seg.duration + t0, "bezier")
    raise ScenarioError("reference.type", f"unknown reference type {kind!r}")


def config_from_dict(doc: dict, validate_initial: bool = True) -> ScenarioConfig:
    """Validate a scenario document and build a :class:`ScenarioConfig`.

    Raises :class:`ScenarioError` carrying a dotted path to the bad field.
    """
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ScenarioError(_error_path(err), err.message)
    full = _merge(DEFAULTS, doc)

    g = full["geometry"]
    try:
        geom = SafetyGeometry(D_s=g["D_s"], c=g["c"], shape=g["shape"], n=g["n"])
    except ValueError as exc:
        raise ScenarioError("geometry", str(exc)) from None
    v = full["vehicle"]
    try:
        params = VehicleParams(mass=v["mass"], inertia=np.array(v["inertia"], dtype=float),
                               gravity=v["gravity"], z_up=v["z_up"])
    except ValueError as exc:
        raise ScenarioError("vehicle", str(exc)) from None
    lim = full["limits"]
    limits = ActuatorLimits(max_tilt=float(np.deg2rad(lim["max_tilt_deg"])),
                            max_thrust_ratio=float(lim["max_thrust_ratio"]))
    rt = full["retune"]
    retune = RetunePolicy(rt["enabled"], float(rt["factor"]), int(rt["max_retries"]), float(rt["initial_ks"]))

    refs, specs, initial, names = [], [], [], []
    for idx, veh in enumerate(full["vehicles"]):
        ref = build_reference(veh["reference"])
        refs.append(ref)
        specs.append(veh["reference"])
        names.append(veh.get("name", f"Q{idx + 1}"))
        if "initial" in veh:
            init = veh["initial"]
            initial.append(IntegratorState(init["r"], init.get("dr", (0, 0, 0)),
                                           init.get("ddr", (0, 0, 0)), init.get("dddr", (0, 0, 0))))
        elif full["start"] == "reference":
            initial.append(IntegratorState.from_stack(ref(0.0)[:4]))
        else:
            # at rest: eta = (h, 0, 0, 0) satisfies the output chain whenever h > 0
            initial.append(IntegratorState.at_rest(ref(0.0)[0]))

    cfg = ScenarioConfig(
        name=full["name"], references=refs, reference_specs=specs, initial_states=initial,
        geometry=geom, poles=tuple(float(p) for p in full["poles"]), ks=float(full["ks"]),
        snap_bound=None if full["snap_bound"] is None else float(full["snap_bound"]),
        dt=float(full["dt"]), duration=float(full["duration"]), params=params, limits=limits,
        retune=retune, warm_start=bool(full["warm_start"]), vehicle_names=names, source=full,
    )
    if validate_initial:
        validate_initial_states(cfg)
    return cfg


def validate_initial_states(cfg: ScenarioConfig):
    for i, j in combinations(range(cfg.m), 2):
        h = barrier_value(cfg.initial_states[i], cfg.initial_states[j], cfg.geometry)
        if not h > 0:
            raise ScenarioError(f"vehicles.{i}", f"initial pair ({i}, {j}) is not strictly safe (h = {h:.3e})")
    report = check_initial_conditions(cfg.initial_states, cfg.geometry, cfg.gains)
    if not report.passed:
        raise ScenarioError("vehicles", f"initial states violate the barrier output chain for pairs {report.failing_pairs}")


def load_scenario(path_or_name: str, overrides: Optional[dict] = None) -> ScenarioConfig:
    """Load a built-in scenario by name or a JSON scenario file, then apply overrides."""
    if path_or_name in BUILTIN_SCENARIOS:
        doc = builtin_document(path_or_name)
    else:
        path = Path(path_or_name)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ScenarioError("", f"no built-in scenario or file named {path_or_name!r}") from None
        except json.JSONDecodeError as exc:
            raise ScenarioError("", f"{path}: invalid JSON ({exc})") from None
    for key, value in (overrides or {}).items():
        apply_override(doc, key, value)
    return config_from_dict(doc)


_ALIASES = {"k_s": "ks", "D_s": "geometry.D_s", "c": "geometry.c", "alpha": "snap_bound"}


def apply_override(doc: dict, key: str, value):
    """Set a dotted key (``geometry.D_s``) in a scenario document."""
    key = _ALIASES.get(key, key)
    parts = key.split(".")
    node = doc
    for part in parts[:-1]:
        if isinstance(node, list):
            node = node[int(part)]
        else:
            node = node.setdefault(part, {})
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# --- built-in scenarios ---------------------------------------------------

ALT = -0.8
# The L4 barrier of a pair rotating at pi/2 rad/s oscillates at 2 pi rad/s;
# slower poles make the exponential chain fight the spinning formation itself.
BUILTIN_POLES = [8.0, 8.8, 9.6, 10.4]


def _static_formation() -> dict:
    ring = [(0.25, 0.0), (0.0, 0.25), (-0.25, 0.0), (0.0, -0.25)]
    vehicles = [{"name": f"Q{k + 1}", "reference": {"type": "hover", "position": [x, y, ALT]}}
                for k, (x, y) in enumerate(ring)]
    vehicles.append({"name": "Q5", "reference": {"type": "bezier", "p0": [0.6, -0.6, ALT],
                                                  "p1": [-0.6, 0.6, ALT], "T": 4.0, "t0": 1.0}})
    return {"name": "static_formation", "duration": 12.0, "poles": list(BUILTIN_POLES), "vehicles": vehicles}


def _spinning_formation() -> dict:
    phases = [-np.pi / 2, 0.0, np.pi / 2, np.pi]
    vehicles = [{"name": f"Q{k + 1}", "reference": {"type": "circle", "radius": 0.45, "rate": np.pi / 2,
                                                     "phase": ph, "z": ALT}}
                for k, ph in enumerate(phases)]
    vehicles.append({"name": "Q5", "reference": {"type": "bezier", "p0": [-0.9, -0.9, ALT],
                                                  "p1": [0.9, 0.9, ALT], "T": 4.0, "t0": 1.0}})
    return {"name": "spinning_formation", "duration": 12.0, "poles": list(BUILTIN_POLES),
            "start": "reference", "vehicles": vehicles}


def _two_quad_pass() -> dict:
    return {
        "name": "two_quad_pass",
        "duration": 10.0,
        "ks": 0.0,
        "poles": list(BUILTIN_POLES),
        "vehicles": [
            {"name": "Q1", "reference": {"type": "bezier", "p0": [-2.0, 0.1, ALT], "p1": [2.0, 0.1, ALT], "T": 2.0}},
            {"name": "Q2", "reference": {"type": "bezier", "p0": [2.0, -0.1, ALT], "p1": [-2.0, -0.1, ALT], "T": 2.0}},
        ],
    }


BUILTIN_SCENARIOS = {
    "static_formation": _static_formation,
    "spinning_formation": _spinning_formation,
    "two_quad_pass": _two_quad_pass,
}


def builtin_document(name: str) -> dict:
    return BUILTIN_SCENARIOS[name]()


def builtin(name: str, **overrides) -> ScenarioConfig:
    doc = builtin_document(name)
    for key, val in overrides.items():
        apply_override(doc, key, val)
    return config_from_dict(doc)


def random_scenario(rng: np.random.Generator, m: Optional[int] = None, duration: float = 5.0) -> ScenarioConfig:
    """Random hover/circle/Bezier team at rest, pairwise separated at start.

    Goals and circle tracks are drawn independently, so nominal paths
    routinely conflict and the certificates have to act.
    """
    m = int(rng.integers(2, 6)) if m is None else m
    D_s = float(rng.uniform(0.15, 0.35))
    c = float(rng.uniform(1.0, 3.0))
    box = 1.2
    while True:
        starts = rng.uniform(-box, box, size=(m, 3)) * np.array([1.0, 1.0, 0.4]) + np.array([0, 0, ALT])
        geom = SafetyGeometry(D_s=D_s, c=c)
        if all(barrier_value(IntegratorState(r=starts[i]), IntegratorState(r=starts[j]), geom) > 0.05 * D_s**4
               for i, j in combinations(range(m), 2)):
            break
    vehicles = []
    for k in range(m):
        kind = rng.choice(["hover", "bezier", "bezier", "circle"])
        start = starts[k].tolist()
        if kind == "hover":
            ref = {"type": "hover", "position": start}
        elif kind == "bezier":
            goal = (-starts[k] + rng.normal(scale=0.3, size=3) * np.array([1, 1, 0.3])).tolist()
            ref = {"type": "bezier", "p0": start, "p1": goal, "T": float(rng.uniform(1.5, 4.0)),
                   "t0": float(rng.uniform(0.0, 1.0))}
        else:
            radius = float(np.linalg.norm(starts[k][:2]))
            ref = {"type": "circle", "radius": radius, "rate": float(rng.uniform(-1.5, 1.5)),
                   "phase": float(np.arctan2(starts[k][1], starts[k][0])), "z": float(starts[k][2])}
        vehicles.append({"reference": ref, "initial": {"r": start}})
    doc = {
        "name": "random",
        "duration": duration,
        "poles": sorted(float(p) for p in rng.uniform(1.0, 4.0, size=4)),
        "geometry": {"D_s": D_s, "c": c},
        "vehicles": vehicles,
    }
    return config_from_dict(doc)
