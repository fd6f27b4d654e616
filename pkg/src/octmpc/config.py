"""Scenario configuration files (JSON or TOML).

A scenario names the plant, cost weights, horizon and the experiment settings.
Plants are given either in discrete time or as continuous matrices plus a
sampling time (forward Euler). Constraints and disturbance sets are boxes or
explicit halfspace data. ``profiles`` hold named overrides merged on top of
the base document, e.g. a small ``ci`` grid next to the ``full`` grid.
"""
from __future__ import annotations

import copy
import json
import os
import sys
from dataclasses import dataclass, field
from importlib import resources

import jsonschema
import numpy as np

from .design import FALLBACKS, hash_payload
from .model import CostWeights, LinearSystem, ModelError, box_constraints, forward_euler_discretize
from .polytope import PolytopeError, PolytopeH
from .simulation import DISTURBANCE_MODES, GridSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SUPPORTED_VERSIONS = (1,)
CONTROLLER_NAMES = ("oct", "tmpc", "nominal", "fpd")


class ConfigError(ValueError):
    pass


_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
_vector = {"type": "array", "items": {"type": "number"}}
_vec_or_scalar = {"oneOf": [{"type": "number"}, _vector]}

SYSTEM_SCHEMA = {
    "type": "object",
    "required": ["A", "B", "constraints", "disturbance"],
    "properties": {
        "name": {"type": "string"},
        "type": {"enum": ["discrete", "continuous"]},
        "sampling_time": {"type": "number", "exclusiveMinimum": 0},
        "A": _matrix,
        "B": {"oneOf": [_matrix, _vector]},
        "Bw": {"oneOf": [_matrix, _vector]},
        "constraints": {
            "oneOf": [
                {"type": "object", "required": ["F", "G", "b"], "additionalProperties": False,
                 "properties": {"F": _matrix, "G": _matrix, "b": _vector}},
                {"type": "object", "additionalProperties": False, "minProperties": 1,
                 "properties": {"x_max": _vec_or_scalar, "u_max": _vec_or_scalar}},
            ]
        },
        "disturbance": {
            "oneOf": [
                {"type": "object", "required": ["lower", "upper"], "additionalProperties": False,
                 "properties": {"lower": _vector, "upper": _vector}},
                {"type": "object", "required": ["D", "d"], "additionalProperties": False,
                 "properties": {"D": _matrix, "d": _vector}},
            ]
        },
        "notes": {"type": "string"},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "horizon"],
    "properties": {
        "schema_version": {"type": "integer"},
        "name": {"type": "string"},
        "notes": {"type": "string"},
        "system": SYSTEM_SCHEMA,
        "system_file": {"type": "string"},
        "weights": {
            "type": "object",
            "properties": {"Q": {"oneOf": [_matrix, _vector, {"const": "identity"}]},
                           "R": {"oneOf": [_matrix, _vector, {"const": "identity"}]}},
            "additionalProperties": False,
        },
        "horizon": {"type": "integer", "minimum": 2},
        "controllers": {"type": "array", "items": {"enum": list(CONTROLLER_NAMES)}, "minItems": 1,
                        "uniqueItems": True},
        "fallback": {"enum": list(FALLBACKS)},
        "grid": {
            "type": "object",
            "required": ["lower", "upper", "counts"],
            "properties": {"lower": _vector, "upper": _vector,
                           "counts": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                           "axes": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                           "base": _vector},
            "additionalProperties": False,
        },
        "monte_carlo": {
            "type": "object",
            "properties": {"runs": {"type": "integer", "minimum": 1}, "steps": {"type": "integer", "minimum": 1},
                           "seed": {"type": "integer", "minimum": 0},
                           "disturbance": {"enum": [m for m in DISTURBANCE_MODES if m != "sequence"]},
                           "cost_points": {"type": "integer", "minimum": 1},
                           "timing_points": {"type": "integer", "minimum": 1}},
            "additionalProperties": False,
        },
        "initial_states": {"type": "array", "items": _vector},
        "output_dir": {"type": "string"},
        "profiles": {"type": "object", "additionalProperties": {"type": "object"}},
    },
    "oneOf": [{"required": ["system"]}, {"required": ["system_file"]}],
    "additionalProperties": False,
}

DEFAULT_MONTE_CARLO = {"runs": 50, "steps": 60, "seed": 0, "disturbance": "uniform"}


@dataclass(eq=False)
class ScenarioConfig:
    name: str
    system: LinearSystem
    weights: CostWeights
    N: int
    controllers: tuple
    fallback: str
    grid: GridSpec
    monte_carlo: dict
    initial_states: np.ndarray
    output_dir: str
    profile: str | None = None
    raw: dict = field(default_factory=dict)

    @property
    def design_payload(self) -> dict:
        """Only the inputs that change the offline design enter the hash."""
        system = {k: v for k, v in self.system.to_dict().items() if k != "name"}
        return {"system": system, "weights": self.weights.to_dict(), "horizon": self.N,
                "fallback": self.fallback, "with_fpd": "fpd" in self.controllers}

    @property
    def config_hash(self) -> str:
        return hash_payload(self.design_payload)


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def read_document(path) -> dict:
    path = os.fspath(path)
    try:
        if path.endswith(".toml"):
            with open(path, "rb") as fh:
                return tomllib.load(fh)
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


def build_system(entry: dict) -> LinearSystem:
    """Resolve a ``system`` block into a discrete :class:`LinearSystem`."""
    try:
        jsonschema.validate(entry, SYSTEM_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"system: {exc.message}") from None
    A = np.atleast_2d(np.asarray(entry["A"], dtype=float))
    nx = A.shape[0]
    B = np.asarray(entry["B"], dtype=float).reshape(nx, -1)
    Bw = np.asarray(entry.get("Bw", np.eye(nx)), dtype=float).reshape(nx, -1)
    if entry.get("type", "discrete") == "continuous":
        if "sampling_time" not in entry:
            raise ConfigError("system: continuous plants need 'sampling_time'")
        A, B, Bw = forward_euler_discretize(A, B, Bw, entry["sampling_time"])
    nu = B.shape[1]
    cons = entry["constraints"]
    if "F" in cons:
        F, G, b = (np.asarray(cons[k], dtype=float) for k in ("F", "G", "b"))
        F, G = F.reshape(-1, nx), G.reshape(-1, nu)
    else:
        F, G, b = box_constraints(cons.get("x_max"), cons.get("u_max"), nx, nu)
    dist = entry["disturbance"]
    if "lower" in dist:
        W = PolytopeH.box(dist["lower"], dist["upper"])
    else:
        W = PolytopeH(np.asarray(dist["D"], dtype=float), np.asarray(dist["d"], dtype=float))
    try:
        return LinearSystem(A, B, Bw, F, G, b, W, entry.get("name", "system")).check()
    except (ModelError, ValueError) as exc:
        raise ConfigError(f"system: {exc}") from None


def _weight(value, n: int) -> np.ndarray:
    if value is None or value == "identity":
        return np.eye(n)
    M = np.asarray(value, dtype=float)
    return np.diag(M) if M.ndim == 1 else M


def parse_config(doc: dict, base_dir: str = ".", profile: str | None = None) -> ScenarioConfig:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"schema error at {where}: {exc.message}") from None
    if doc["schema_version"] not in SUPPORTED_VERSIONS:
        raise ConfigError(f"unsupported schema_version {doc['schema_version']}; supported: {SUPPORTED_VERSIONS}")
    if profile is not None:
        profiles = doc.get("profiles", {})
        if profile not in profiles:
            raise ConfigError(f"profile {profile!r} not defined; available: {sorted(profiles)}")
        doc = _deep_merge({k: v for k, v in doc.items() if k != "profiles"}, profiles[profile])
        try:
            jsonschema.validate(doc, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"profile {profile!r}: {exc.message}") from None

    if "system_file" in doc:
        path = os.path.join(base_dir, doc["system_file"])
        if not os.path.exists(path):
            raise ConfigError(f"system_file does not exist: {path}")
        sys_doc = read_document(path)
        system = build_system(sys_doc.get("system", sys_doc))
    else:
        system = build_system(doc["system"])
    w = doc.get("weights", {})
    try:
        weights = CostWeights(_weight(w.get("Q"), system.nx), _weight(w.get("R"), system.nu))
    except ModelError as exc:
        raise ConfigError(f"weights: {exc}") from None

    if "grid" in doc:
        g = doc["grid"]
        k = len(g["counts"])
        if len(g["lower"]) != k or len(g["upper"]) != k or ("axes" in g and len(g["axes"]) != k):
            raise ConfigError("grid: lower, upper, counts and axes must have equal lengths")
        if "axes" in g and max(g["axes"]) >= system.nx:
            raise ConfigError("grid: axis index out of range")
        if "axes" not in g and k != system.nx:
            raise ConfigError("grid: without 'axes' the grid must cover every state")
        grid = GridSpec(tuple(g["lower"]), tuple(g["upper"]), tuple(g["counts"]),
                        tuple(g["axes"]) if "axes" in g else None, system.nx,
                        tuple(g["base"]) if "base" in g else None)
    else:
        lo, hi = _state_box(system)
        grid = GridSpec(tuple(lo), tuple(hi), (50,) * system.nx if system.nx <= 2 else (10,) * system.nx,
                        None, system.nx)
    mc = {**DEFAULT_MONTE_CARLO, **doc.get("monte_carlo", {})}
    x0 = np.asarray(doc.get("initial_states", [np.zeros(system.nx).tolist()]), dtype=float)
    if x0.ndim != 2 or x0.shape[1] != system.nx:
        raise ConfigError(f"initial_states must be a list of {system.nx}-vectors")
    return ScenarioConfig(
        name=doc.get("name", system.name),
        system=system,
        weights=weights,
        N=int(doc["horizon"]),
        controllers=tuple(doc.get("controllers", ["tmpc", "oct", "fpd"])),
        fallback=doc.get("fallback", "cap-by-tmpc"),
        grid=grid,
        monte_carlo=mc,
        initial_states=x0,
        output_dir=doc.get("output_dir", os.path.join("out", doc.get("name", system.name))),
        profile=profile,
        raw=doc,
    )


def _state_box(system: LinearSystem):
    """Bounding box of the pure state rows (rows with ``G = 0``)."""
    rows = np.all(system.G == 0, axis=1)
    try:
        return PolytopeH(system.F[rows], system.b[rows]).bounding_box()
    except PolytopeError:  # unbounded state set: fall back to a unit box
        return -np.ones(system.nx), np.ones(system.nx)


def load_config(path, profile: str | None = None) -> ScenarioConfig:
    doc = read_document(path)
    return parse_config(doc, os.path.dirname(os.path.abspath(os.fspath(path))), profile)


def bundled_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("octmpc.scenarios").iterdir() if p.name.endswith(".json"))


def load_bundled(name: str, profile: str | None = None) -> ScenarioConfig:
    """Load one of the scenarios shipped inside the package (``system1``, ``system2``, ``scalar``)."""
    ref = resources.files("octmpc.scenarios").joinpath(f"{name}.json")
    if not ref.is_file():
        raise ConfigError(f"no bundled scenario {name!r}; available: {bundled_scenarios()}")
    with resources.as_file(ref) as path:
        return load_config(path, profile)
