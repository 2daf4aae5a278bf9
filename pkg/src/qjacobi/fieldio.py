"""Versioned text format for discrete Q-fields and deterministic JSON output."""

import json
import math

import numpy as np

from .mesh import build_mesh
from .qfield import DiscreteQField
from .scene_geometry import builtin_scene

FIELD_VERSION = 1


class FieldFormatError(ValueError):
    pass


def dumps_field(N):
    mesh = N.mesh
    n, Q, d = N.values.shape
    head = [
        f"qjacobi-field {FIELD_VERSION}",
        "scene " + json.dumps({"name": mesh.scene.name, "params": mesh.scene.params}, sort_keys=True),
        "mesh " + json.dumps(mesh.spec, sort_keys=True),
        f"shape {n} {Q} {d} normal {int(N.normal)}",
        "values",
    ]
    rows = [" ".join(repr(float(x)) for x in N.values[v].ravel()) for v in range(n)]
    return "\n".join(head + rows) + "\n"


def loads_field(text):
    lines = text.splitlines()
    if not lines or not lines[0].startswith("qjacobi-field "):
        raise FieldFormatError("line 1: not a qjacobi field file")
    version = int(lines[0].split()[1])
    if version != FIELD_VERSION:
        raise FieldFormatError(f"line 1: unsupported field format version {version}")
    try:
        scene_spec = json.loads(lines[1].split(" ", 1)[1])
        mesh_spec = json.loads(lines[2].split(" ", 1)[1])
        parts = lines[3].split()
        n, Q, d, normal = int(parts[1]), int(parts[2]), int(parts[3]), bool(int(parts[5]))
    except (IndexError, ValueError) as exc:
        raise FieldFormatError(f"malformed header: {exc}") from exc
    if lines[4].strip() != "values":
        raise FieldFormatError("line 5: expected 'values'")
    body = lines[5:5 + n]
    if len(body) != n:
        raise FieldFormatError(f"expected {n} value rows, found {len(body)}")
    vals = np.array([[float(x) for x in row.split()] for row in body])
    if vals.shape != (n, Q * d):
        raise FieldFormatError(f"value rows must hold Q*d = {Q * d} numbers")
    scene = builtin_scene(scene_spec["name"], scene_spec["params"])
    mesh = build_mesh(scene, mesh_spec)
    if mesh.n_vertices != n:
        raise FieldFormatError(f"rebuilt mesh has {mesh.n_vertices} vertices, file has {n}")
    return DiscreteQField(mesh, vals.reshape(n, Q, d), normal=normal)


def save_field(N, path):
    with open(path, "w") as fh:
        fh.write(dumps_field(N))


def load_field(path):
    with open(path) as fh:
        return loads_field(fh.read())


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps_json(obj):
    """Sorted keys, repr floats, non-finite values as null: identical input gives identical bytes."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"
