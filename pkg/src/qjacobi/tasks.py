"""Task pipelines behind ``qjacobi run``: each returns artifacts (name -> text) and warnings."""

import logging

import numpy as np

from .fieldio import dumps_field, dumps_json, loads_field
from .frequency import (ProfileError, VanishingError, decay_fit, monotonicity_audit,
                        multiplicity_strata, radial_profiles, tangent_map)
from .harmonic_boundary import (CircleMapDecomposition, DecompositionError, closed_form_energies,
                                decompose_irreducible, dumps_decomposition, harmonic_extension,
                                loads_decomposition)
from .mesh import build_mesh
from .qfield import DiscreteQField, dirichlet_energy, jac_energy
from .scene_geometry import FlatScene, builtin_scene
from .solver import certify_minimizer, minimize_jacobi

logger = logging.getLogger(__name__)


class TaskError(ValueError):
    """A valid-looking config that cannot be executed (shapes, domains, preconditions)."""


# --- config -> objects -----------------------------------------------------------------

def make_scene(cfg):
    return builtin_scene(cfg.scene["name"], cfg.scene["params"])


def make_mesh(cfg, scene):
    spec = {"kind": "disk", "radius": 1.0}
    spec.update(cfg.mesh)
    spec["h"] = cfg.h
    if spec["kind"] == "sphere" and cfg.task != "frequency":
        raise TaskError("mesh.kind 'sphere' has no boundary; use a disk (geodesic cap) mesh")
    if spec["kind"] != "disk" and cfg.task in ("minimize", "frequency", "blowup") and scene.m != 2:
        raise TaskError("only disk meshes are supported for m != 2")
    try:
        return build_mesh(scene, spec)
    except (ValueError, KeyError) as exc:
        raise TaskError(f"mesh: {exc}") from exc


def boundary_decomposition(cfg, k_normal):
    """Circle-map decomposition of the configured boundary, in normal-fiber coordinates."""
    b = cfg.boundary
    Q = cfg.Q
    if b["type"] == "constant":
        vals = np.asarray(b["values"] if "values" in b else [b["value"]] * Q, float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape != (Q, k_normal):
            raise TaskError(f"boundary values must have shape (Q={Q}, {k_normal}), got {vals.shape}")
        zero = np.zeros((1, k_normal))
        dec = CircleMapDecomposition.from_modes([(1, 2 * v, zero, zero) for v in vals])
    elif b["type"] == "modes":
        modes = []
        for i, md in enumerate(b["modes"]):
            a = np.atleast_2d(np.asarray(md["a"], float))
            bb = np.atleast_2d(np.asarray(md["b"], float))
            a0 = np.atleast_1d(np.asarray(md["a0"], float))
            if a0.shape != (k_normal,) or a.shape[1:] != (k_normal,) or bb.shape != a.shape:
                raise TaskError(f"boundary.modes[{i}]: a0 needs {k_normal} entries and a, b rows of "
                                f"{k_normal} entries with matching shapes")
            modes.append((int(md["k"]), a0, a, bb))
        try:
            dec = CircleMapDecomposition.from_modes(modes)
        except DecompositionError as exc:
            raise TaskError(f"boundary.modes: {exc}") from exc
    else:
        with open(b["path"]) as fh:
            text = fh.read()
        if not text.startswith("qjacobi-decomposition"):
            raise TaskError(f"{b['path']}: boundary files hold a decomposition (qjacobi-decomposition format)")
        try:
            dec = loads_decomposition(text)
        except DecompositionError as exc:
            raise TaskError(f"{b['path']}: {exc}") from exc
    if dec.Q != Q:
        raise TaskError(f"the boundary carries {dec.Q} sheets but Q = {Q}")
    if dec.d != k_normal:
        raise TaskError(f"boundary sheets have {dec.d} components; the normal fiber has {k_normal}")
    return dec


def rolled_field(dec, mesh):
    """The rolled harmonic extension of ``dec`` sampled at the mesh vertices, as a normal section."""
    scene = mesh.scene
    R = float(mesh.spec.get("radius", 1.0))
    vals = harmonic_extension(dec, R).evaluate(mesh.chart[:, :2])
    frame = scene.normal_frame(mesh.points)
    return DiscreteQField(mesh, np.einsum("nqk,nkd->nqd", vals, frame), normal=True)


def _pole(cfg, mesh):
    c = cfg.analysis.get("pole")
    if c is None:
        return mesh.pole
    c = np.asarray(c, float)
    if c.shape != (mesh.m,):
        raise TaskError(f"analysis.pole takes {mesh.m} chart coordinates")
    return mesh.scene.chart_to_point(c[None], mesh.pole)[0]


def _radii(cfg):
    a = cfg.analysis
    if "r_min" not in a and "r_max" not in a:
        return None
    if not ("r_min" in a and "r_max" in a) or a["r_min"] >= a["r_max"]:
        raise TaskError("analysis.r_min and analysis.r_max must both be set with r_min < r_max")
    return np.geomspace(a["r_min"], a["r_max"], a.get("n_radii", 16))


def _source_field(cfg, mesh):
    if cfg.analysis.get("source") == "file":
        N = loads_field(open(cfg.analysis["field"]).read())
        return N
    dec = boundary_decomposition(cfg, mesh.scene.k)
    return rolled_field(dec, mesh)


# --- tasks ---------------------------------------------------------------------------------

def task_minimize(cfg):
    scene = make_scene(cfg)
    mesh = make_mesh(cfg, scene)
    rolled = rolled_field(boundary_decomposition(cfg, scene.k), mesh)
    init = rolled.values if cfg.analysis.get("init", "rolled") == "rolled" else None
    res = minimize_jacobi(rolled.values, mesh, cfg.solver, init=init)
    warnings = list(res.flags)
    N = res.field
    rep = jac_energy(N)
    rolled_rep = jac_energy(rolled)
    solve = {
        "energy": res.energy,
        "dirichlet_normal": dirichlet_energy(N, flavor="normal"),
        "jac": rep.jac,
        "rolled_energy": rolled_rep.jac,
        "converged": res.converged,
        "trace": res.trace,
        "restart_energies": res.restart_energies,
        "best_restart": res.best_restart,
        "accepted_moves": res.accepted_moves,
        "flags": res.flags,
        "solver": cfg.solver.as_dict(),
        "mesh": mesh.spec,
        "Q": cfg.Q,
    }
    art = {"field.qf": dumps_field(N), "solve.json": dumps_json(solve)}
    if isinstance(scene, FlatScene):
        art["certify.json"] = dumps_json(certify_minimizer(N))
    else:
        warnings.append("certification_skipped: the variation identities are checked for Dir-minimizers on flat scenes")
    return art, warnings


def task_frequency(cfg):
    scene = make_scene(cfg)
    mesh = make_mesh(cfg, scene)
    N = _source_field(cfg, mesh)
    p = _pole(cfg, N.mesh)
    warnings = []
    try:
        prof = radial_profiles(N, p, _radii(cfg), cfg.analysis.get("n_shell", 4096))
    except ProfileError as exc:
        raise TaskError(str(exc)) from exc
    art = {"profile.csv": prof.to_csv()}
    fit = {"I0": None, "H0": None, "D0": None, "beta": None, "lambda": None, "C0": None}
    audit = {}
    try:
        audit = monotonicity_audit(prof)
        fit["lambda"], fit["C0"] = audit["lambda"], audit["C0"]
        if not audit["monotone_with_lambda"]:
            warnings.append("monotonicity_not_restored")
    except ProfileError as exc:
        warnings.append(f"audit_skipped: {exc}")
    try:
        f = decay_fit(prof)
        fit.update({k: f[k] for k in ("I0", "H0", "D0", "beta")})
        fit["exact_constant"] = f["exact_constant"]
        fit["contract_residual"] = f["contract_residual"]
        warnings.extend(f["flags"])
    except ProfileError as exc:
        warnings.append(f"fit_skipped: {exc}")
    st = multiplicity_strata(N)
    strata = {
        "D_Q": st.D_Q, "singular": st.singular, "components": st.components,
        "isolated": st.isolated, "lsc_ok": st.lsc_ok,
        "singular_points": N.mesh.chart[st.singular],
        "sigma_histogram": np.bincount(st.sigma, minlength=N.Q + 1)[1:],
    }
    art.update({"fit.json": dumps_json(fit), "audit.json": dumps_json(audit),
                "strata.json": dumps_json(strata)})
    return art, warnings


def task_blowup(cfg):
    scene = make_scene(cfg)
    mesh = make_mesh(cfg, scene)
    N = _source_field(cfg, mesh)
    p = _pole(cfg, N.mesh)
    try:
        limit, mu, diag = tangent_map(N, p)
    except VanishingError as exc:
        return {"tangent.json": dumps_json({"vanishing": True, "mu": None, "message": str(exc)})}, \
            ["dichotomy_vanishing"]
    except ProfileError as exc:
        raise TaskError(str(exc)) from exc
    out = {"vanishing": False, "mu": mu, **diag}
    return {"tangent.json": dumps_json(out), "field.qf": dumps_field(limit)}, list(diag["flags"])


def task_extend(cfg):
    scene = make_scene(cfg)
    dec = boundary_decomposition(cfg, scene.k)
    warnings = []
    if cfg.boundary["type"] == "constant":
        # re-derive from samples so the report reflects the decomposition routine
        try:
            dec = decompose_irreducible(dec.reassemble(), cfg.analysis.get("tau_coin", 1e-9))
        except DecompositionError as exc:
            warnings.append(f"decomposition: {exc}")
    R = cfg.analysis.get("radius", 1.0)
    ext = harmonic_extension(dec, R)
    cf = closed_form_energies(dec, 1.0)
    report = {
        "winding_orders": dec.winding_orders,
        "Q": dec.Q,
        "radius": R,
        **ext.energies,
        "bounds": ext.bounds,
        "unit_disk": {"disk_dirichlet": cf.disk_dirichlet, "circle_dirichlet": cf.circle_dirichlet,
                      "circle_l2": cf.circle_l2, "disk_l2": cf.disk_l2},
        "truncation": dec.truncation,
    }
    return {"extend.json": dumps_json(report), "decomposition.qd": dumps_decomposition(dec)}, warnings


def task_verify(cfg):
    from .verify import run_checks
    checks = run_checks(seed=cfg.seed)
    warnings = [f"check_failed: {c['name']}" for c in checks if not c["passed"]]
    return {"verify.json": dumps_json({"checks": checks})}, warnings, checks


TASK_FUNCS = {
    "minimize": task_minimize,
    "frequency": task_frequency,
    "blowup": task_blowup,
    "extend": task_extend,
}
