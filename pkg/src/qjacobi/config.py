"""Experiment configuration: YAML parsing with line-referenced validation errors."""

import hashlib
import os
from dataclasses import dataclass, field

import yaml

from .solver import SolveConfig, SolverError

TASKS = ("minimize", "frequency", "blowup", "extend", "verify")
BOUNDARY_TYPES = ("constant", "modes", "file")
TOP_FIELDS = {"task", "seed", "scene", "h", "mesh", "Q", "boundary", "solver", "analysis", "output"}
ANALYSIS_FIELDS = {"pole", "r_min", "r_max", "n_radii", "tau_coin", "radius", "init", "source",
                   "field", "blowup_h", "n_shell"}


class ConfigError(ValueError):
    pass


def _line_map(node, path=(), out=None):
    """Map key paths to 1-based source lines."""
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = path + (k.value,)
            out[p] = k.start_mark.line + 1
            _line_map(v, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


@dataclass
class ExperimentConfig:
    task: str
    seed: int
    scene: dict
    h: float
    mesh: dict
    Q: int
    boundary: dict
    solver: SolveConfig
    analysis: dict
    output: str
    path: str = ""
    digest: str = ""
    raw: dict = field(default_factory=dict)


class _Checker:
    def __init__(self, path, lines):
        self.path = path
        self.lines = lines

    def fail(self, keypath, msg):
        kp = tuple(keypath)
        while kp not in self.lines and kp:
            kp = kp[:-1]
        line = self.lines.get(kp, 1)
        name = ".".join(str(k) for k in keypath) or "<root>"
        raise ConfigError(f"{self.path}:{line}: {name}: {msg}")


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"{path}: file not found")
    with open(path, "rb") as fh:
        blob = fh.read()
    text = blob.decode("utf-8")
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError(f"{path}:{line}: invalid YAML: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: the configuration must be a mapping of fields")
    chk = _Checker(path, _line_map(node))
    return parse_config(data, chk, path, hashlib.sha256(blob).hexdigest())


def _need(data, key, chk, keypath=()):
    if key not in data or data[key] is None:
        chk.fail(keypath + (key,), "missing required field")
    return data[key]


def _number(v, chk, keypath, kind=float, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        chk.fail(keypath, f"expected a number, got {v!r}")
    if kind is int and int(v) != v:
        chk.fail(keypath, f"expected an integer, got {v!r}")
    v = kind(v)
    if positive and not v > 0:
        chk.fail(keypath, f"must be positive, got {v!r}")
    return v


def parse_config(data, chk, path="<config>", digest=""):
    extra = set(data) - TOP_FIELDS
    if extra:
        chk.fail((sorted(extra)[0],), f"unknown field (allowed: {', '.join(sorted(TOP_FIELDS))})")
    task = _need(data, "task", chk)
    if task not in TASKS:
        chk.fail(("task",), f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    seed = _number(_need(data, "seed", chk), chk, ("seed",), int)
    scene = data.get("scene") or {}
    h = None
    Q = None
    mesh = dict(data.get("mesh") or {})
    boundary = dict(data.get("boundary") or {})
    if task != "verify":
        scene = _need(data, "scene", chk)
        if not isinstance(scene, dict) or "name" not in scene:
            chk.fail(("scene",), "expected a mapping with 'name' and optional 'params'")
        extra = set(scene) - {"name", "params"}
        if extra:
            chk.fail(("scene", sorted(extra)[0]), "unknown scene field")
        scene = {"name": scene["name"], "params": dict(scene.get("params") or {})}
        from .scene_geometry import SceneError, builtin_scene
        try:
            builtin_scene(scene["name"], scene["params"])
        except SceneError as exc:
            chk.fail(("scene",), str(exc))
        Q = _number(_need(data, "Q", chk), chk, ("Q",), int, positive=True)
        boundary = _need(data, "boundary", chk)
        _check_boundary(boundary, chk, path)
        if task != "extend":
            h = _number(_need(data, "h", chk), chk, ("h",), float, positive=True)
    solver_d = dict(data.get("solver") or {})
    if "seed" in solver_d:
        chk.fail(("solver", "seed"), "set the seed at top level only")
    extra = set(solver_d) - set(SolveConfig.__dataclass_fields__)
    if extra:
        chk.fail(("solver", sorted(extra)[0]), "unknown solver field")
    try:
        solver = SolveConfig.from_dict({**solver_d, "seed": seed})
    except (SolverError, TypeError) as exc:
        chk.fail(("solver",), str(exc))
    analysis = dict(data.get("analysis") or {})
    extra = set(analysis) - ANALYSIS_FIELDS
    if extra:
        chk.fail(("analysis", sorted(extra)[0]), f"unknown analysis field (allowed: {', '.join(sorted(ANALYSIS_FIELDS))})")
    for key in ("r_min", "r_max", "radius", "tau_coin", "blowup_h"):
        if key in analysis:
            analysis[key] = _number(analysis[key], chk, ("analysis", key), float, positive=True)
    if "n_radii" in analysis:
        analysis["n_radii"] = _number(analysis["n_radii"], chk, ("analysis", "n_radii"), int, positive=True)
    if analysis.get("init", "rolled") not in ("rolled", "none"):
        chk.fail(("analysis", "init"), "expected 'rolled' or 'none'")
    if analysis.get("source", "rolled") not in ("rolled", "file"):
        chk.fail(("analysis", "source"), "expected 'rolled' or 'file'")
    if analysis.get("source") == "file":
        fpath = analysis.get("field")
        if not fpath:
            chk.fail(("analysis", "field"), "source 'file' needs a field path")
        fpath = _resolve(path, fpath)
        if not os.path.exists(fpath):
            chk.fail(("analysis", "field"), f"file not found: {fpath}")
        analysis["field"] = fpath
    output = data.get("output") or os.path.join("qjacobi_out", task)
    return ExperimentConfig(task, seed, scene, h, mesh, Q, boundary, solver, analysis,
                            _resolve(path, output), path, digest, data)


def _resolve(cfg_path, p):
    if os.path.isabs(p) or not cfg_path or cfg_path == "<config>":
        return p
    return os.path.join(os.path.dirname(os.path.abspath(cfg_path)), p)


def _check_boundary(b, chk, path):
    if not isinstance(b, dict):
        chk.fail(("boundary",), "expected a mapping with a 'type'")
    kind = b.get("type")
    if kind not in BOUNDARY_TYPES:
        chk.fail(("boundary", "type"), f"expected one of {', '.join(BOUNDARY_TYPES)}, got {kind!r}")
    if kind == "constant":
        if "value" not in b and "values" not in b:
            chk.fail(("boundary",), "constant boundary needs 'value' (one vector) or 'values' (Q vectors)")
    elif kind == "modes":
        modes = b.get("modes")
        if not isinstance(modes, list) or not modes:
            chk.fail(("boundary", "modes"), "expected a non-empty list of {k, a0, a, b}")
        for i, md in enumerate(modes):
            for key in ("k", "a0", "a", "b"):
                if not isinstance(md, dict) or key not in md:
                    chk.fail(("boundary", "modes", i), f"mode entry is missing '{key}'")
    else:
        p = b.get("path")
        if not p:
            chk.fail(("boundary", "path"), "file boundary needs a path")
        rp = _resolve(path, p)
        if not os.path.exists(rp):
            chk.fail(("boundary", "path"), f"file not found: {rp}")
        b["path"] = rp
