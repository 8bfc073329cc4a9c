"""Scenario files: schema, cross-reference checks and loading.

A scenario references a robot model and a world by path (relative to the
scenario file) and carries either a ``plan`` section, a ``program`` section
with optimizer settings, or both.  A robot reference without a path separator
or extension names one of the bundled models.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .kinematics import JointState, ModelError, SerialChain
from .planner import CartesianGoal, Demonstration, JointGoal, PlannerConfig, PlanProblem
from .program import DEFAULT_SETTINGS, SKILL_PARAMS, OptimizerConfig, Program, ProgramError
from .world import SdfGrid, world_from_dict

SCHEMA_VERSION = 1

_NUM = {"type": "number"}
_VEC3 = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}
_PARAM = {
    "oneOf": [
        _NUM,
        {
            "type": "object",
            "required": ["value"],
            "additionalProperties": False,
            "properties": {
                "value": _NUM,
                "optimize": {"type": "boolean"},
                "bounds": {"type": "array", "minItems": 2, "maxItems": 2,
                           "items": {"type": ["number", "null"]}},
            },
        },
    ]
}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "robot", "world", "start"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "robot": {"type": "string"},
        "world": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
        "start": {"type": "array", "items": _NUM, "minItems": 1},
        "planner": {"type": "object", "properties": {
            k: {"type": ["number", "integer", "boolean", "string"]} for k in PlannerConfig.__dataclass_fields__},
            "additionalProperties": False},
        "plan": {
            "type": "object",
            "required": ["goal"],
            "additionalProperties": False,
            "properties": {
                "goal": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "joints": {"type": "array", "items": _NUM},
                        "position": _VEC3,
                        "rotation_vector": _VEC3,
                    },
                },
                "demonstration": {"type": "array", "items": _VEC3, "minItems": 2},
            },
        },
        "program": {
            "type": "object",
            "required": ["skills"],
            "additionalProperties": False,
            "properties": {
                "skills": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["kind", "params"],
                        "additionalProperties": False,
                        "properties": {
                            "kind": {"type": "string"},
                            "params": {"type": "object", "additionalProperties": _PARAM},
                            "horizon": {"type": "number", "exclusiveMinimum": 0},
                        },
                    },
                },
                "settings": {"type": "object", "additionalProperties": False, "properties": {
                    "dt": {"type": "number", "exclusiveMinimum": 0},
                    "hole": {"type": ["array", "null"], "items": _NUM, "minItems": 2, "maxItems": 2},
                    "sigma": {"type": "number", "exclusiveMinimum": 0},
                    "capture_radius": {"type": "number", "minimum": 0},
                    "compliance": {"type": "number", "minimum": 0},
                    "motion_success": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "seam_tol": {"type": "number", "exclusiveMinimum": 0},
                }},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                **{k: {"type": ["number", "integer", "boolean"]} for k in OptimizerConfig.__dataclass_fields__},
                "randomize_initial": {"type": "boolean"},
            },
        },
    },
}

WORLD_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "grid"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "grid": {
            "type": "object",
            "required": ["origin", "resolution", "dims"],
            "properties": {
                "origin": _VEC3,
                "resolution": {"type": "number", "exclusiveMinimum": 0},
                "dims": {"type": "array", "items": {"type": "integer", "minimum": 2},
                         "minItems": 3, "maxItems": 3},
            },
        },
        "obstacles": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["type", "center"],
                "properties": {
                    "type": {"enum": ["sphere", "box"]},
                    "center": _VEC3,
                    "radius": {"type": "number", "exclusiveMinimum": 0},
                    "size": _VEC3,
                },
            },
        },
    },
}


class ScenarioError(ValueError):
    """Input problem: schema violation, missing file or inconsistent reference."""


def _path_str(err) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def schema_issues(doc, schema) -> list[str]:
    v = jsonschema.Draft202012Validator(schema)
    return [f"{_path_str(e)}: {e.message}" for e in sorted(v.iter_errors(doc), key=lambda e: list(e.absolute_path))]


def _resolve(base: Path, ref: str, kind: str) -> Path | None:
    """Path of a referenced file; bundled robots may be named without a path."""
    if kind == "robot" and "/" not in ref and not ref.endswith(".json"):
        p = resources.files("spidp") / "data" / "robots" / f"{ref}.json"
        return Path(str(p))
    return (base / ref).resolve()


def defaulted_fields(doc: dict) -> dict:
    """Every field the loader fills in, with the value it uses."""
    out = {}
    if "seed" not in doc:
        out["seed"] = 0
    given = doc.get("planner", {})
    for k, v in PlannerConfig().to_dict().items():
        if k not in given:
            out[f"planner.{k}"] = v
    if "program" in doc:
        settings = doc["program"].get("settings", {})
        for k, v in DEFAULT_SETTINGS.items():
            if k not in settings:
                out[f"program.settings.{k}"] = v
        given = doc.get("optimizer", {})
        for k, v in OptimizerConfig().to_dict().items():
            if k not in given:
                out[f"optimizer.{k}"] = v
        if "randomize_initial" not in given:
            out["optimizer.randomize_initial"] = False
        for i, s in enumerate(doc["program"].get("skills", [])):
            for k, p in s.get("params", {}).items():
                if isinstance(p, dict):
                    if "optimize" not in p:
                        out[f"program.skills.{i}.params.{k}.optimize"] = False
                    if "bounds" not in p:
                        out[f"program.skills.{i}.params.{k}.bounds"] = [None, None]
    return out


def check(path) -> tuple[list[str], dict]:
    """Issues found in a scenario file (schema and cross references) and its defaulted fields."""
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        return [f"scenario file not found: {path}"], {}
    except json.JSONDecodeError as exc:
        return [f"{path}: invalid JSON ({exc})"], {}
    issues = schema_issues(doc, SCENARIO_SCHEMA)
    if not isinstance(doc, dict):
        return issues, {}
    base = path.parent
    chain = None
    if isinstance(doc.get("robot"), str):
        rp = _resolve(base, doc["robot"], "robot")
        if not rp.is_file():
            issues.append(f"robot: file not found: {rp}")
        else:
            try:
                chain = SerialChain.load(rp)
            except (ModelError, ValueError, KeyError) as exc:
                issues.append(f"robot: {rp}: {exc}")
    if isinstance(doc.get("world"), str):
        wp = _resolve(base, doc["world"], "world")
        if not wp.is_file():
            issues.append(f"world: file not found: {wp}")
        else:
            with open(wp) as fh:
                try:
                    wdoc = json.load(fh)
                    issues += [f"world ({wp}): {m}" for m in schema_issues(wdoc, WORLD_SCHEMA)]
                except json.JSONDecodeError as exc:
                    issues.append(f"world: {wp}: invalid JSON ({exc})")
    if "plan" not in doc and "program" not in doc:
        issues.append("<root>: needs a 'plan' or a 'program' section")
    if chain is not None and isinstance(doc.get("start"), list) and len(doc["start"]) != chain.n:
        issues.append(f"start: robot has {chain.n} joints, got {len(doc['start'])} values")
    goal = doc.get("plan", {}).get("goal", {}) if isinstance(doc.get("plan"), dict) else {}
    if isinstance(goal, dict) and "plan" in doc:
        if ("joints" in goal) == ("position" in goal):
            issues.append("plan/goal: give exactly one of 'joints' or 'position'")
        if chain is not None and isinstance(goal.get("joints"), list) and len(goal["joints"]) != chain.n:
            issues.append(f"plan/goal/joints: robot has {chain.n} joints, got {len(goal['joints'])} values")
    for i, s in enumerate(doc.get("program", {}).get("skills", []) if isinstance(doc.get("program"), dict) else []):
        if isinstance(s, dict) and isinstance(s.get("kind"), str) and s["kind"] not in SKILL_PARAMS:
            issues.append(f"program/skills/{i}/kind: unknown skill kind '{s['kind']}'")
    if not issues and "program" in doc:
        try:
            Program.from_dict(doc["program"])
        except ProgramError as exc:
            issues.append(f"program: {exc}")
    for key, cls in (("planner", PlannerConfig), ("optimizer", OptimizerConfig)):
        if not issues and key in doc:
            try:
                cls.from_dict({k: v for k, v in doc[key].items() if k != "randomize_initial"})
            except (ValueError, TypeError) as exc:
                issues.append(f"{key}: {exc}")
    return issues, defaulted_fields(doc)


@dataclass
class Scenario:
    name: str
    path: Path
    chain: SerialChain
    world: SdfGrid
    start: JointState
    seed: int
    planner: PlannerConfig
    doc: dict = field(repr=False)
    program: Program | None = None
    optimizer: OptimizerConfig | None = None
    randomize_initial: bool = False
    output: str | None = None

    def plan_problem(self) -> PlanProblem:
        sec = self.doc.get("plan")
        if sec is None:
            raise ScenarioError("scenario has no 'plan' section")
        g = sec["goal"]
        if "joints" in g:
            goal = JointGoal(np.asarray(g["joints"], float))
        else:
            from .so3 import exp_np
            rot = exp_np(g["rotation_vector"]) if "rotation_vector" in g else None
            goal = CartesianGoal(np.asarray(g["position"], float), rot)
        demo = Demonstration(np.asarray(sec["demonstration"], float)) if "demonstration" in sec else None
        return PlanProblem(self.chain, self.world, self.start, goal, demo=demo)

    def initial_x(self) -> np.ndarray:
        x = self.program.x0()
        if not self.randomize_initial or not len(x):
            return x
        lo, hi = self.program.bounds()
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ScenarioError("randomize_initial needs finite bounds on every optimized parameter")
        return np.random.default_rng(self.seed).uniform(lo, hi)


def load(path, seed: int | None = None, max_iters: int | None = None) -> Scenario:
    """Validate and load a scenario; raises :class:`ScenarioError` listing every issue."""
    path = Path(path)
    issues, _ = check(path)
    if issues:
        raise ScenarioError("; ".join(issues))
    with open(path) as fh:
        doc = json.load(fh)
    doc = copy.deepcopy(doc)
    chain = SerialChain.load(_resolve(path.parent, doc["robot"], "robot"))
    with open(_resolve(path.parent, doc["world"], "world")) as fh:
        world = world_from_dict(json.load(fh))
    pdict = dict(doc.get("planner", {}))
    odict = dict(doc.get("optimizer", {}))
    randomize = bool(odict.pop("randomize_initial", False))
    if max_iters is not None:
        pdict["j_max"] = max_iters
        if "program" in doc:
            odict["max_iters"] = max_iters
    planner = PlannerConfig.from_dict(pdict)
    program = Program.from_dict(doc["program"]) if "program" in doc else None
    optimizer = OptimizerConfig.from_dict(odict) if program is not None else None
    return Scenario(
        name=doc.get("name", path.stem), path=path, chain=chain, world=world,
        start=JointState(np.asarray(doc["start"], float)),
        seed=int(doc.get("seed", 0) if seed is None else seed), planner=planner, doc=doc,
        program=program, optimizer=optimizer, randomize_initial=randomize, output=doc.get("output"))
