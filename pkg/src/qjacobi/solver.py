"""Minimization of the discrete Dirichlet and Jacobi energies over Q-fields with
prescribed boundary values, stability constants, and minimizer certification.

For a fixed sheet labeling (which stored sheet of every vertex plays the role
of label l in every cell) the discrete energy is a quadratic form in the vertex
values.  The solver alternates exact solves of that quadratic problem with
re-matching, and escapes wrong-monodromy basins by annealed label
permutations on geodesic balls.
"""

import logging
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu, eigsh

from .qfield import (DiscreteQField, InnerTest, OuterTest, dirichlet_energy, jac_energy,
                     lipschitz_selection, variation_residuals)
from .scene_geometry import FlatScene

logger = logging.getLogger("qjacobi")


class StabilityError(RuntimeError):
    pass


class SolverError(ValueError):
    pass


@dataclass
class SolveConfig:
    max_iter: int = 50
    tol: float = 1e-8                # relative energy decrease below which descent stops
    restarts: int = 8
    seed: int = 0
    anneal_steps: int = 12
    anneal_t0: float = 0.05          # initial temperature, relative to the current energy
    anneal_cooling: float = 0.8
    step_policy: str = "global"

    def __post_init__(self):
        if self.max_iter < 1 or self.restarts < 1 or self.anneal_steps < 0:
            raise SolverError("max_iter and restarts must be >= 1, anneal_steps >= 0")
        if not (self.tol > 0 and self.anneal_t0 > 0 and 0 < self.anneal_cooling <= 1):
            raise SolverError("tolerances and temperatures must be positive, cooling in (0, 1]")
        if self.step_policy != "global":
            raise SolverError(f"unknown step policy {self.step_policy!r}; only 'global' is available")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SolverError(f"unknown solver fields: {sorted(extra)}")
        return cls(**d)

    def as_dict(self):
        return asdict(self)


@dataclass
class SolveResult:
    field: DiscreteQField
    energy: float
    trace: list
    converged: bool
    restart_energies: list
    best_restart: int
    accepted_moves: int = 0
    flags: list = field(default_factory=list)


# --- labeled quadratic systems -----------------------------------------------------------

class _Problem:
    """Quadratic form of the discrete energy for a fixed labeling.

    Nodes are (vertex, stored sheet) pairs; each node carries r coefficients
    against the vertex frame F_v (d x r), so a sheet value is F_v c.
    """

    def __init__(self, mesh, Q, kind, fixed):
        self.mesh = mesh
        self.Q = Q
        self.kind = kind
        scene = mesh.scene
        n = mesh.n_vertices
        self.K = mesh.stiffness_local()
        self.M = mesh.vol[:, None, None] * mesh.mass_local[None]
        if kind == "dirichlet":
            self.r = 1                      # scalar form shared by all d components
            self.frames = None
        else:
            self.frames = np.swapaxes(scene.normal_frame(mesh.points), 1, 2)     # (n, d, k)
            self.r = self.frames.shape[2]
            P = scene.normal_projector(mesh.centroids)
            ric, aform, _ = scene.curvature_forms(mesh.centroids)
            self.S = P
            self.C = ric + aform
        self.fixed = np.asarray(fixed, bool)
        node_fixed = np.repeat(self.fixed, Q)
        self.dof_fixed = np.repeat(node_fixed, self.r)
        self.n_dof = n * Q * self.r

    def matrix(self, perm, with_mass=True):
        mesh = self.mesh
        cells = mesh.cells
        nc, mp1 = cells.shape
        Q, r = self.Q, self.r
        rows, cols, vals = [], [], []
        for i in range(mp1):
            for j in range(mp1):
                for l in range(Q):
                    ni = cells[:, i] * Q + perm[:, i, l]
                    nj = cells[:, j] * Q + perm[:, j, l]
                    if self.kind == "dirichlet":
                        rows.append(ni)
                        cols.append(nj)
                        vals.append(self.K[:, i, j])
                    else:
                        Fi = self.frames[cells[:, i]]
                        Fj = self.frames[cells[:, j]]
                        blk = self.K[:, i, j, None, None] * self.S
                        if with_mass:
                            blk = blk - self.M[:, i, j, None, None] * self.C
                        B = np.einsum("nda,nde,neb->nab", Fi, blk, Fj)
                        for a in range(r):
                            for b in range(r):
                                rows.append(ni * r + a)
                                cols.append(nj * r + b)
                                vals.append(B[:, a, b])
        A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.n_dof, self.n_dof))
        return A

    def mass_matrix(self, perm):
        """Consistent L2 mass for the labeling, on the coefficient dofs."""
        mesh = self.mesh
        cells = mesh.cells
        Q, r = self.Q, self.r
        rows, cols, vals = [], [], []
        for i in range(cells.shape[1]):
            for j in range(cells.shape[1]):
                for l in range(Q):
                    ni = cells[:, i] * Q + perm[:, i, l]
                    nj = cells[:, j] * Q + perm[:, j, l]
                    if self.frames is None:
                        rows.append(ni)
                        cols.append(nj)
                        vals.append(self.M[:, i, j])
                        continue
                    B = np.einsum("nda,ndb->nab", self.frames[cells[:, i]], self.frames[cells[:, j]])
                    for a in range(r):
                        for b in range(r):
                            rows.append(ni * r + a)
                            cols.append(nj * r + b)
                            vals.append(self.M[:, i, j] * B[:, a, b])
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n_dof, self.n_dof))

    def to_dofs(self, values):
        n, Q, d = values.shape
        if self.frames is None:
            return values.reshape(n * Q, d)
        return np.einsum("nda,nqd->nqa", self.frames, values).reshape(-1, 1)

    def from_dofs(self, x, shape):
        n, Q, d = shape
        if self.frames is None:
            return x.reshape(n, Q, d)
        c = x.reshape(n, Q, self.r)
        return np.einsum("nda,nqa->nqd", self.frames, c)

    def solve(self, perm, values):
        """Minimize the labeled quadratic form with the fixed dofs held at ``values``."""
        A = self.matrix(perm)
        x = self.to_dofs(values).astype(float)
        free = ~self.dof_fixed
        Aff = A[free][:, free].tocsc()
        rhs = -(A[free][:, self.dof_fixed] @ x[self.dof_fixed])
        lu = _factor(Aff)
        x[free] = lu.solve(np.asarray(rhs))
        return self.from_dofs(x, values.shape)


def _factor(A):
    lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
              options={"SymmetricMode": True})
    piv = lu.U.diagonal()
    if np.any(piv <= 0):
        raise StabilityError(
            "the zero-trace quadratic form is not positive definite (stability constant <= 0); "
            "a Jacobi minimizer with this trace need not exist or be unique on this domain")
    return lu


# --- drivers --------------------------------------------------------------------------------

def _boundary_array(boundary, mesh, Q_hint=None):
    bidx = np.flatnonzero(mesh.boundary)
    if callable(boundary):
        vals = np.asarray(boundary(mesh.points[bidx]), float)
    else:
        vals = np.asarray(boundary, float)
        if vals.ndim == 3 and vals.shape[0] == mesh.n_vertices:
            vals = vals[bidx]
    if vals.ndim == 2:
        vals = vals[:, None, :]
    if vals.ndim != 3 or vals.shape[0] != bidx.size or vals.shape[2] != mesh.scene.d:
        raise SolverError(f"boundary values must have shape ({bidx.size}, Q, {mesh.scene.d}), got {vals.shape}")
    if not np.all(np.isfinite(vals)):
        raise SolverError("boundary values must be finite")
    return bidx, vals


def _initial_values(mesh, bidx, bvals, problem, rng, restart):
    n = mesh.n_vertices
    Q, d = bvals.shape[1:]
    # harmonic extension of the boundary center of mass, then labeled solve from there
    mean = np.zeros((n, 1, d))
    mean[bidx, 0] = bvals.mean(axis=1)
    single = _Problem(mesh, 1, problem.kind, mesh.boundary)
    ident = np.zeros((mesh.n_cells, mesh.m + 1, 1), dtype=np.intp)
    eta = single.solve(ident, mean)
    vals = np.repeat(eta, Q, axis=1)
    if restart > 0:
        spread = float(np.sqrt(np.mean(np.sum((bvals - bvals.mean(axis=1, keepdims=True)) ** 2, axis=-1)))) or 1.0
        noise = rng.normal(scale=0.5 * spread, size=vals.shape)
        if problem.frames is not None:
            P = np.einsum("nda,nea->nde", problem.frames, problem.frames)
            noise = np.einsum("nde,nqe->nqd", P, noise)
        vals = vals + noise
    vals[bidx] = bvals
    return vals


class _Runner:
    def __init__(self, mesh, problem, energy_fn, normal, config):
        self.mesh = mesh
        self.problem = problem
        self.energy_fn = energy_fn
        self.normal = normal
        self.config = config

    def field(self, values):
        return DiscreteQField(self.mesh, values, normal=self.normal)

    def descend(self, u, E, trace):
        """Alternate labeled solves and re-matching while the official energy decreases."""
        cfg = self.config
        last = None
        for _ in range(cfg.max_iter):
            _, perm, _ = u.cell_alignment()
            if last is not None and np.array_equal(perm, last):
                return u, E, True          # labeling is a fixed point: the solve would repeat
            last = perm
            new = self.field(self.problem.solve(perm, u.values))
            E_new = self.energy_fn(new)
            if E_new < E - cfg.tol * max(abs(E), 1e-300):
                u, E = new, E_new
                trace.append(E)
            else:
                if E_new < E:
                    u, E = new, E_new
                    trace.append(E)
                return u, E, True
        return u, E, False

    def propose(self, u, rng):
        """Relabel sheets inside a random geodesic ball and re-solve with the twisted labeling."""
        mesh = self.mesh
        Q = u.Q
        canon = np.stack(lipschitz_selection(u).selections, axis=1)
        interior = np.flatnonzero(~mesh.boundary)
        c = interior[rng.integers(interior.size)]
        coords = mesh.log_coords(mesh.points[c])
        rmax = float(np.linalg.norm(coords, axis=1).max())
        rad = rng.uniform(0.1, 0.6) * rmax
        inside = (np.linalg.norm(coords, axis=1) <= rad) & ~mesh.boundary
        pi = rng.permutation(Q)
        while Q > 1 and np.all(pi == np.arange(Q)):
            pi = rng.permutation(Q)
        canon[inside] = canon[inside][:, pi]
        ident = np.broadcast_to(np.arange(Q), (mesh.n_cells, mesh.m + 1, Q))
        return self.field(self.problem.solve(ident, canon))

    def run(self, bidx, bvals, init, rng, restart):
        cfg = self.config
        if init is not None and restart == 0:
            vals = np.array(init, float)
            vals[bidx] = bvals
        else:
            vals = _initial_values(self.mesh, bidx, bvals, self.problem, rng, restart)
        u = self.field(vals)
        E = self.energy_fn(u)
        trace = [E]
        u, E, converged = self.descend(u, E, trace)
        best_u, best_E = u, E
        accepted = 0
        if u.Q > 1 and cfg.anneal_steps > 0:
            T = cfg.anneal_t0
            for _ in range(cfg.anneal_steps):
                cand = self.propose(best_u if rng.random() < 0.5 else u, rng)
                Ec = self.energy_fn(cand)
                ctrace = [Ec]
                cand, Ec, conv = self.descend(cand, Ec, ctrace)
                scale = max(abs(best_E), 1e-300)
                if Ec < E or rng.random() < np.exp(-(Ec - E) / (T * scale)):
                    u, E = cand, Ec
                    accepted += 1
                if E < best_E:
                    best_u, best_E = u, E
                    converged = conv
                    trace.append(best_E)
                T *= cfg.anneal_cooling
        return best_u, best_E, trace, converged, accepted


def _minimize(boundary, mesh, config, init, kind, normal, energy_fn):
    config = config or SolveConfig()
    bidx, bvals = _boundary_array(boundary, mesh)
    if bidx.size == 0:
        raise SolverError("the mesh has no boundary vertices to carry the trace")
    problem = _Problem(mesh, bvals.shape[1], kind, mesh.boundary)
    if normal:
        mesh.scene.check_in_fiber(np.repeat(mesh.points[bidx], bvals.shape[1], axis=0),
                                  bvals.reshape(-1, mesh.scene.d))
    runner = _Runner(mesh, problem, energy_fn, normal, config)
    results = []
    for r in range(config.restarts):
        rng = np.random.default_rng([config.seed, r])
        results.append(runner.run(bidx, bvals, init, rng, r))
    energies = [res[1] for res in results]
    best = int(np.argmin(energies))       # ties resolve to the lowest restart index
    u, E, trace, converged, accepted = results[best]
    flags = [] if converged else ["not_converged"]
    if not converged:
        logger.warning("solver stopped at max_iter=%d before the energy settled", config.max_iter)
    return SolveResult(u, E, trace, converged, energies, best, accepted, flags)


def minimize_dirichlet(boundary, mesh, config=None, init=None):
    """Discrete Dir-minimizer with the given boundary Q-values (array or callable of points)."""
    return _minimize(boundary, mesh, config, init, "dirichlet", False, dirichlet_energy)


def minimize_jacobi(boundary, mesh, config=None, init=None):
    """Discrete Jac-minimizer over normal-section Q-fields with the given trace."""
    if isinstance(mesh.scene, FlatScene):
        res = minimize_dirichlet(boundary, mesh, config, init)
        res.field = DiscreteQField(mesh, res.field.values, normal=True)
        return res
    return _minimize(boundary, mesh, config, init, "jacobi", True, lambda u: jac_energy(u).jac)


# --- stability constant -------------------------------------------------------------------

def _region_vertices(mesh, region):
    mask = mesh.region_mask(region)
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.cells[mask].ravel()] = True
    m = mesh.m
    faces = []
    for i in range(m + 1):
        idx = [j for j in range(m + 1) if j != i]
        faces.append(np.sort(mesh.cells[mask][:, idx], axis=1))
    allf = np.concatenate(faces) if faces else np.zeros((0, m), dtype=np.intp)
    uniq, counts = np.unique(allf, axis=0, return_counts=True)
    rim = np.zeros(mesh.n_vertices, dtype=bool)
    rim[uniq[counts == 1].ravel()] = True
    return mask, used, rim


def stability_constant(scene, mesh, region=None):
    """Smallest Rayleigh quotient Jac(u) / ||u||^2 over zero-trace single-valued normal sections."""
    if mesh.scene is not scene:
        raise SolverError("the mesh was built for a different scene")
    mask, used, rim = _region_vertices(mesh, region)
    problem = _Problem(mesh, 1, "jacobi", rim | ~used)
    # restrict cell contributions to the region
    keep = mask.astype(float)
    problem.K = problem.K * keep[:, None, None]
    problem.M = problem.M * keep[:, None, None]
    perm = np.zeros((mesh.n_cells, mesh.m + 1, 1), dtype=np.intp)
    A = problem.matrix(perm)
    B = problem.mass_matrix(perm)
    free = ~problem.dof_fixed
    A = A[free][:, free].tocsc()
    B = B[free][:, free].tocsc()
    if A.shape[0] == 0:
        raise SolverError("no free vertices in the region")
    _, _, _ = scene.curvature_forms(mesh.centroids[:1])
    ric, aform, _ = scene.curvature_forms(mesh.centroids[mask])
    cmax = float(np.max(np.abs(np.linalg.eigvalsh(ric + aform)))) if mask.any() else 0.0
    shift = -cmax - 1.0
    n = A.shape[0]
    if n <= 3:
        from scipy.linalg import eigh
        return float(eigh(A.toarray(), B.toarray(), eigvals_only=True)[0])
    vals = eigsh(A, k=1, M=B, sigma=shift, which="LM", v0=np.ones(n), return_eigenvectors=False)
    return float(vals[0])


# --- certification ----------------------------------------------------------------------------

def _bump(mesh, pole, R):
    scene = mesh.scene

    def eta(x):
        r = scene.distance_sigma(pole, x)
        s = np.clip(r / R, 0.0, 1.0)
        return (1 - s * s) ** 3

    return eta


def certify_minimizer(N, scene=None, pole=None, radius=None, radii=None, n_pairs=2000):
    """Residuals of the outer and inner variation identities plus regularity diagnostics."""
    from .frequency import ball_dirichlet, ball_l2

    mesh = N.mesh
    scene = scene or mesh.scene
    pole = mesh.pole if pole is None else np.asarray(pole, float)
    dist = scene.distance_sigma(pole, mesh.points)
    R = radius if radius is not None else 0.9 * float(dist[mesh.boundary].min()) if mesh.boundary.any() else 1.0
    eta = _bump(mesh, pole, R)
    frame = scene.normal_frame(mesh.points[:1])[0] if N.normal else np.eye(scene.d)
    span = frame if N.normal else np.eye(scene.d)[np.any(np.abs(N.values).reshape(-1, scene.d) > 0, axis=0)]
    tests = [OuterTest(lambda x, u: eta(x)[:, None] ** 2 * u, "eta^2 N")]
    for a, e in enumerate(span):
        tests.append(OuterTest(lambda x, u, e=e: eta(x)[:, None] * e[None, :], f"eta e{a}"))
    P = scene.tangent_projector

    def radial(x):
        v = -scene.log_sigma(x, np.broadcast_to(pole, x.shape))
        return eta(x)[:, None] * v

    tests.append(InnerTest(radial, "radial"))
    basis = scene.tangent_basis_at(pole)
    for a, e in enumerate(basis):
        def trans(x, e=e):
            v = np.einsum("nij,j->ni", P(x), e)
            return eta(x)[:, None] * v
        tests.append(InnerTest(trans, f"translate{a}"))
    residuals = []
    for t in tests:
        rep = variation_residuals(N, t)
        residuals.append({"kind": rep.kind, "name": t.name, "lhs": rep.lhs, "rhs": rep.rhs,
                          "residual": rep.residual, "scale": rep.scale, "relative": rep.relative})
    outer = max((r["relative"] for r in residuals if r["kind"] == "outer"), default=0.0)
    inner = max((r["relative"] for r in residuals if r["kind"] == "inner"), default=0.0)
    if radii is None:
        radii = np.geomspace(0.1, 0.5, 9) * (R / 0.9 if radius is None else R)
    radii = np.asarray(radii, float)
    D = np.array([ball_dirichlet(N, pole, r) for r in radii])
    L2 = np.array([ball_l2(N, pole, r) for r in radii])
    good = D > 0
    if good.sum() >= 2:
        slope = float(np.polyfit(np.log(radii[good]), np.log(D[good]), 1)[0])
    else:
        slope = float("nan")
    m = mesh.m
    alpha = float(np.clip((slope - m + 2) / 2, 1e-3, 1.0)) if np.isfinite(slope) else 1.0
    cacc = []
    for r in radii:
        l2 = ball_l2(N, pole, r)
        cacc.append(ball_dirichlet(N, pole, r / 2) * r * r / l2 if l2 > 0 else 0.0)
    # Hoelder quotient over deterministic vertex pairs in the inner ball
    inner_v = np.flatnonzero(dist <= R / 2)
    rng = np.random.default_rng(0)
    holder = 0.0
    if inner_v.size >= 2:
        i = rng.choice(inner_v, size=n_pairs)
        j = rng.choice(inner_v, size=n_pairs)
        E = mesh.edges
        ok = np.isin(E[:, 0], inner_v) & np.isin(E[:, 1], inner_v)
        i = np.concatenate([i, E[ok, 0]])
        j = np.concatenate([j, E[ok, 1]])
        keep = i != j
        i, j = i[keep], j[keep]
        from .aq_space import batch_g_distance
        gd = batch_g_distance(N.values[i], N.values[j])
        dxy = scene.distance_sigma(mesh.points[i], mesh.points[j])
        holder = float(np.max(gd / dxy ** alpha)) if gd.size else 0.0
    dir_total = dirichlet_energy(N, flavor="normal" if N.normal else "full")
    return {
        "outer_residual": outer,
        "inner_residual": inner,
        "residuals": residuals,
        "caccioppoli": float(np.max(cacc)) if len(cacc) else 0.0,
        "decay_radii": radii.tolist(),
        "decay_dirichlet": D.tolist(),
        "decay_exponent": slope,
        "holder_alpha": alpha,
        "holder_seminorm": holder,
        "holder_ratio": holder / np.sqrt(dir_total) if dir_total > 0 else 0.0,
        "radius": float(R),
        "l2_balls": L2.tolist(),
    }
