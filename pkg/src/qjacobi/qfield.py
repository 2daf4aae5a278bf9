"""Discrete Q-valued fields on meshes: energies, push-forward mass, variations, selections."""

import hashlib
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .aq_space import QPoint, TAU_COIN, batch_matchings, batch_support_cardinality

logger = logging.getLogger("qjacobi")

FLAVORS = ("full", "tangent_M", "normal")


class StaleMatchingError(RuntimeError):
    pass


class FieldError(ValueError):
    pass


def _digest(arr):
    return hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).hexdigest()


class DiscreteQField:
    """A Q-valued map sampled at the vertices of a mesh.

    values has shape (n_vertices, Q, d).  Sheet order at a vertex carries no
    meaning; all derived quantities go through optimal matchings.
    """

    def __init__(self, mesh, values, normal=False, tau_coin=TAU_COIN):
        values = np.array(values, dtype=float)
        if values.ndim == 2:
            values = values[:, None, :]
        if values.ndim != 3 or values.shape[0] != mesh.n_vertices:
            raise FieldError(f"values must have shape (n_vertices={mesh.n_vertices}, Q, d), got {values.shape}")
        if values.shape[2] != mesh.scene.d:
            raise FieldError(f"sheet dimension {values.shape[2]} does not match the ambient dimension {mesh.scene.d}")
        if not np.all(np.isfinite(values)):
            raise FieldError("field values must be finite")
        self.mesh = mesh
        self.normal = bool(normal)
        self.tau_coin = tau_coin
        if self.normal:
            n, Q, d = values.shape
            mesh.scene.check_in_fiber(np.repeat(mesh.points, Q, axis=0), values.reshape(n * Q, d))
        values.setflags(write=False)
        self.values = values
        self._matched_digest = None
        self._cache = {}

    @property
    def Q(self):
        return self.values.shape[1]

    @property
    def d(self):
        return self.values.shape[2]

    def qpoint(self, v):
        return QPoint(self.values[v])

    def with_values(self, values):
        return DiscreteQField(self.mesh, values, normal=self.normal, tau_coin=self.tau_coin)

    def scaled(self, s):
        return self.with_values(s * self.values)

    # --- matchings -------------------------------------------------------------------
    def _ensure_matched(self):
        digest = _digest(self.values)
        if self._matched_digest is None:
            self._matched_digest = digest
        elif digest != self._matched_digest:
            raise StaleMatchingError("field values changed after matching; rebuild the field with with_values()")

    def edge_matchings(self):
        """Optimal matchings along mesh edges: perm[e, l] is the sheet at edges[e, 1] matched to sheet l at edges[e, 0]."""
        self._ensure_matched()
        if "edge" not in self._cache:
            E = self.mesh.edges
            self._cache["edge"] = batch_matchings(self.values[E[:, 0]], self.values[E[:, 1]])
        return self._cache["edge"]

    def verify_matchings(self, tol=1e-12):
        perm, cost = self.edge_matchings()
        E = self.mesh.edges
        a = self.values[E[:, 0]]
        b = np.take_along_axis(self.values[E[:, 1]], perm[:, :, None], axis=1)
        realized = np.einsum("eqd,eqd->e", a - b, a - b)
        scale = np.einsum("eqd,eqd->e", a, a) + np.einsum("eqd,eqd->e", b, b) + 1e-300
        return bool(np.all(np.abs(realized - cost) <= tol * scale))

    def separation(self):
        """Minimum pairwise sheet distance at every vertex (0 for Q = 1)."""
        if "sep" not in self._cache:
            v = self.values
            if self.Q == 1:
                sep = np.zeros(len(v))
            else:
                diff = v[:, :, None, :] - v[:, None, :, :]
                dist = np.sqrt(np.einsum("nijk,nijk->nij", diff, diff))
                iu = np.triu_indices(self.Q, 1)
                sep = dist[:, iu[0], iu[1]].min(axis=1)
            self._cache["sep"] = sep
        return self._cache["sep"]

    def sigma(self):
        """Support cardinality card(spt N(x)) at every vertex."""
        if "sigma" not in self._cache:
            self._cache["sigma"] = batch_support_cardinality(self.values, self.tau_coin)
        return self._cache["sigma"]

    def cell_alignment(self):
        """Per-cell sheet alignment anchored at the cell vertex with the widest sheet separation.

        Returns (anchor, perm, inconsistent) where perm[c, i, l] is the stored
        sheet of local vertex i matched to anchor sheet l.
        """
        self._ensure_matched()
        if "cell" not in self._cache:
            cells = self.mesh.cells
            nc, mp1 = cells.shape
            sep = self.separation()[cells]
            # near-equal separations pick the lowest local index, so roundoff cannot move the anchor
            top = sep.max(axis=1, keepdims=True)
            anchor = np.argmax(sep >= top * (1 - 1e-9), axis=1)
            anchor_v = cells[np.arange(nc), anchor]
            perm = np.empty((nc, mp1, self.Q), dtype=np.intp)
            for i in range(mp1):
                p, _ = batch_matchings(self.values[anchor_v], self.values[cells[:, i]])
                perm[:, i] = p
            perm[np.arange(nc), anchor] = np.arange(self.Q)
            aligned = np.take_along_axis(self.values[cells], perm[..., None], axis=2)
            bad = np.zeros(nc, dtype=bool)
            if self.Q > 1:
                for i in range(mp1):
                    for j in range(i + 1, mp1):
                        a, b = aligned[:, i], aligned[:, j]
                        induced = np.einsum("nqd,nqd->n", a - b, a - b)
                        _, best = batch_matchings(a, b)
                        scale = np.einsum("nqd,nqd->n", a, a) + np.einsum("nqd,nqd->n", b, b)
                        bad |= induced > best + 1e-10 * scale + 1e-300
            if bad.any():
                logger.debug("%d cells with inconsistent pairwise matchings (anchored alignment used)", int(bad.sum()))
            self._cache["cell"] = (anchor, perm, bad)
            self._cache["aligned"] = aligned
        return self._cache["cell"]

    def aligned(self):
        """Cell-aligned sheet values, shape (n_cells, m+1, Q, d)."""
        self.cell_alignment()
        return self._cache["aligned"]

    def align_like(self, other_values):
        """Apply this field's cell alignment to another per-vertex (n, Q, d) array."""
        _, perm, _ = self.cell_alignment()
        return np.take_along_axis(np.asarray(other_values, float)[self.mesh.cells], perm[..., None], axis=2)

    def inconsistent_cells(self):
        return self.cell_alignment()[2]

    def cell_differences(self):
        al = self.aligned()
        return al[:, 1:] - al[:, :1]          # (nc, m, Q, d)

    def cell_gradients(self):
        """Per-cell, per-sheet differential as a d x d matrix acting on R^d (zero off the cell plane)."""
        delta = self.cell_differences()
        W = np.einsum("nai,nij->naj", self.mesh.edge_vectors, self.mesh.ginv)   # (nc, d, m)
        return np.einsum("njqo,nij->nqoi", delta, W)                          # (nc, Q, d_out, d_in)

    def cell_values_at_centroid(self):
        return self.aligned().mean(axis=1)


def _projector(mesh, flavor):
    if flavor not in FLAVORS:
        raise FieldError(f"unknown flavor {flavor!r}; expected one of {FLAVORS}")
    if flavor == "full":
        return None
    if flavor == "normal":
        return mesh.scene.normal_projector(mesh.centroids)
    return mesh.scene.ambient_tangent_projector(mesh.centroids)


def energy_density(u, flavor="full"):
    """Per-cell energy density sum_l |P D u^l|^2 (constant on each cell)."""
    if flavor != "full" and not u.normal:
        raise FieldError(f"flavor {flavor!r} requires a normal-section field")
    delta = u.cell_differences()
    P = _projector(u.mesh, flavor)
    if P is not None:
        delta = np.einsum("nij,nmqj->nmqi", P, delta)
    return np.einsum("nab,naqi,nbqi->n", u.mesh.ginv, delta, delta)


def dirichlet_energy(u, region=None, flavor="full"):
    mask = u.mesh.region_mask(region)
    dens = energy_density(u, flavor)
    return float(np.sum((u.mesh.vol * dens)[mask]))


def _pair_mass(mesh, f, g, C=None):
    """Per-cell integral of sum_l <f^l, C g^l> for P1 sheets f, g of shape (nc, m+1, Q, d)."""
    if C is None:
        return mesh.vol * np.einsum("ij,niqd,njqd->n", mesh.mass_local, f, g)
    return mesh.vol * np.einsum("ij,niqa,nab,njqb->n", mesh.mass_local, f, C, g)


def l2_norm_sq(u, region=None):
    mask = u.mesh.region_mask(region)
    al = u.aligned()
    return float(np.sum(_pair_mass(u.mesh, al, al)[mask]))


@dataclass
class JacReport:
    jac: float
    jac_perturbative: float
    dir_normal: float
    dir_full: float
    a_term: float
    ricci_term: float
    abar_term: float
    b_value: float
    l2: float
    c0_measured: float

    def as_dict(self):
        return dict(self.__dict__)


def jac_energy(N, region=None, rtol=1e-8):
    """Jacobi functional by two equivalent evaluations.

    (i)  normal Dirichlet energy - int |A.N|^2 - int Ri(N, N)
    (ii) full Dirichlet energy - B, with B = int (sum_i |Abar(xi_i, N)|^2 + 2|A.N|^2 + Ri(N, N))
    """
    if not N.normal:
        raise FieldError("jac_energy needs a normal-section field")
    mesh = N.mesh
    mask = mesh.region_mask(region)
    ric, aform, abar = mesh.scene.curvature_forms(mesh.centroids)
    al = N.aligned()
    vol = mesh.vol
    dir_normal = float(np.sum((vol * energy_density(N, "normal"))[mask]))
    dir_full = float(np.sum((vol * energy_density(N, "full"))[mask]))
    a_term = float(np.sum(_pair_mass(mesh, al, al, aform)[mask]))
    ricci_term = float(np.sum(_pair_mass(mesh, al, al, ric)[mask]))
    abar_term = float(np.sum(_pair_mass(mesh, al, al, abar)[mask]))
    l2 = float(np.sum(_pair_mass(mesh, al, al)[mask]))
    jac_i = dir_normal - a_term - ricci_term
    B = abar_term + 2 * a_term + ricci_term
    jac_ii = dir_full - B
    scale = abs(dir_full) + abs(B) + abs(dir_normal) + 1e-300
    if abs(jac_i - jac_ii) > rtol * scale:
        raise RuntimeError(f"the two Jacobi evaluations disagree: {jac_i!r} vs {jac_ii!r}")
    c0 = abs(B) / l2 if l2 > 0 else 0.0
    return JacReport(jac_i, jac_ii, dir_normal, dir_full, a_term, ricci_term, abar_term, B, l2, c0)


def pushforward_mass(N, t, region=None, check_orientation=True):
    """mu(t): mass of the push-forward of the region under x -> exp_x(t N^l(x)).

    Each cell and sheet contributes the volume of the simplex spanned by the
    images of its vertices, i.e. the exact integral of the Jacobian of the
    piecewise-affine interpolant of F_t.
    """
    if not N.normal:
        raise FieldError("pushforward_mass needs a normal-section field")
    mesh = N.mesh
    scene = mesh.scene
    mask = mesh.region_mask(region)
    al = N.aligned()[mask]                          # (nc, m+1, Q, d)
    nmax = float(np.sqrt(np.einsum("...i,...i->...", al, al).max())) if al.size else 0.0
    if abs(t) * nmax >= scene.inj:
        raise ValueError(f"|t| max|N| = {abs(t) * nmax:.4g} exceeds the injectivity bound {scene.inj:.4g}")
    base = mesh.points[mesh.cells[mask]][:, :, None, :]
    img = scene.exp_normal(base, t * al)            # (nc, m+1, Q, d)
    E = img[:, 1:] - img[:, :1]                     # (nc, m, Q, d)
    g = np.einsum("naqi,nbqi->nqab", E, E)
    det = np.linalg.det(g)
    m = mesh.m
    fact = float(np.prod(np.arange(1, m + 1)))
    vol = np.sqrt(np.maximum(det, 0.0)) / fact
    if check_orientation and t != 0.0:
        E0 = mesh.edge_vectors[mask]                # (nc, d, m)
        orient = np.linalg.det(np.einsum("nia,nbqi->nqab", E0, E))
        bad = int(np.count_nonzero(orient <= 0))
        if bad:
            logger.warning("push-forward orientation check failed on %d cell sheets at t=%g", bad, t)
    return float(np.sum(vol))


def default_t_step(N):
    nmax = float(np.sqrt(np.einsum("nqd,nqd->nq", N.values, N.values).max()))
    return 1e-2 / nmax if nmax > 0 else 1e-2


def fd_variations(N, t_step=None, region=None):
    """(delta1, delta2) ~ (mu'(0), mu''(0)) by 5-point stencils with one Richardson step."""
    s = default_t_step(N) if t_step is None else float(t_step)
    mu = {t: pushforward_mass(N, t * s, region) for t in (-4, -2, -1, 0, 1, 2, 4)}

    def d1(k):
        return (-mu[2 * k] + 8 * mu[k] - 8 * mu[-k] + mu[-2 * k]) / (12 * k * s)

    def d2(k):
        return (-mu[2 * k] + 16 * mu[k] - 30 * mu[0] + 16 * mu[-k] - mu[-2 * k]) / (12 * (k * s) ** 2)

    delta1 = (16 * d1(1) - d1(2)) / 15
    delta2 = (16 * d2(1) - d2(2)) / 15
    return delta1, delta2


# --- first variations ---------------------------------------------------------------

@dataclass
class OuterTest:
    """Outer variation N -> N + s psi(x, N); psi(points (n, d), values (n, d)) -> (n, d)."""
    psi: object
    name: str = "outer"


@dataclass
class InnerTest:
    """Inner variation along a compactly supported tangent field X(points (n, d)) -> (n, d)."""
    X: object
    name: str = "inner"
    fd_step: float = 1e-5


@dataclass
class ResidualReport:
    kind: str
    lhs: float
    rhs: float
    residual: float
    scale: float
    terms: dict = field(default_factory=dict)

    @property
    def relative(self):
        return abs(self.residual) / self.scale if self.scale > 0 else 0.0


def _flavor_for(N):
    return "normal" if N.normal else "full"


def variation_residuals(N, test, region=None):
    """Left side minus right side of the outer or inner first-variation identity."""
    mesh = N.mesh
    mask = mesh.region_mask(region)
    scene = mesh.scene
    ric, aform, abar = scene.curvature_forms(mesh.centroids)
    if isinstance(test, OuterTest):
        n, Q, d = N.values.shape
        pts = np.repeat(mesh.points, Q, axis=0)
        psi_v = np.asarray(test.psi(pts, N.values.reshape(n * Q, d)), float).reshape(n, Q, d)
        if N.normal:
            psi_v = np.einsum("nij,nqj->nqi", scene.normal_projector(mesh.points), psi_v)
        al = N.aligned()
        psi_al = N.align_like(psi_v)
        dN = al[:, 1:] - al[:, :1]
        dP = psi_al[:, 1:] - psi_al[:, :1]
        if N.normal:
            P = scene.normal_projector(mesh.centroids)
            dN = np.einsum("nij,nmqj->nmqi", P, dN)
            dP = np.einsum("nij,nmqj->nmqi", P, dP)
        dens = np.einsum("nab,naqi,nbqi->n", mesh.ginv, dN, dP)
        abs_dens = np.sqrt(np.einsum("nab,naqi,nbqi->n", mesh.ginv, dN, dN)
                           * np.einsum("nab,naqi,nbqi->n", mesh.ginv, dP, dP))
        lhs = float(np.sum((mesh.vol * dens)[mask]))
        e_a = float(np.sum(_pair_mass(mesh, al, psi_al, aform)[mask]))
        e_r = float(np.sum(_pair_mass(mesh, al, psi_al, ric)[mask]))
        rhs = e_a + e_r
        scale = float(np.sum((mesh.vol * abs_dens)[mask])) + abs(e_a) + abs(e_r)
        return ResidualReport("outer", lhs, rhs, lhs - rhs, scale, {"E_OV": rhs, "E_OV_A": e_a, "E_OV_Ri": e_r})
    if isinstance(test, InnerTest):
        c = mesh.centroids
        X = np.asarray(test.X(c), float)
        DX = _tangent_derivative(scene, test.X, c, test.fd_step)
        T = mesh.cell_projector
        DXc = np.einsum("nij,njk,nkl->nil", T, DX, T)
        grads = N.cell_gradients()                            # (nc, Q, d, d)
        if N.normal:
            grads = np.einsum("nij,nqjk->nqik", scene.normal_projector(c), grads)
        sq = np.einsum("nqij,nqij->n", grads, grads)
        div = np.einsum("nii->n", DXc)
        cross = np.einsum("nqij,nqik,nkj->n", grads, grads, DXc)
        lhs_c = -sq * div + 2 * cross
        lhs = float(np.sum((mesh.vol * lhs_c)[mask]))
        scale = float(np.sum((mesh.vol * (sq * np.abs(div) + 2 * np.abs(cross)))[mask]))
        Nc = N.cell_values_at_centroid()                     # (nc, Q, d)
        dXN = np.einsum("nqij,nj->nqi", grads, X)           # nabla_X N
        e2 = 2 * float(np.sum((mesh.vol * np.einsum("nqi,nij,nqj->n", Nc, aform, dXN))[mask]))
        e3 = 2 * float(np.sum((mesh.vol * np.einsum("nqi,nij,nqj->n", Nc, ric, dXN))[mask]))
        e1 = 2 * float(np.sum((mesh.vol * _abar_trace_term(scene, c, X, Nc, grads))[mask]))
        rhs = e1 + e2 + e3
        scale += abs(e1) + abs(e2) + abs(e3)
        return ResidualReport("inner", lhs, rhs, lhs - rhs, scale, {"E_IV1": e1, "E_IV2": e2, "E_IV3": e3})
    raise FieldError(f"unsupported test {type(test).__name__}; use OuterTest or InnerTest")


def _tangent_derivative(scene, Xfun, x, step):
    """Covariant derivative of a tangent field, as a d x d matrix on T_x Sigma, by central differences."""
    xi = scene.tangent_frame(x)
    P = scene.tangent_projector(x)
    n, m, d = xi.shape
    DX = np.zeros((n, d, d))
    for i in range(m):
        v = step * xi[:, i]
        fwd = np.asarray(Xfun(scene.exp_sigma(x, v)), float)
        bwd = np.asarray(Xfun(scene.exp_sigma(x, -v)), float)
        col = np.einsum("nij,nj->ni", P, (fwd - bwd) / (2 * step))
        DX += np.einsum("ni,nj->nij", col, xi[:, i])
    return DX


def _abar_trace_term(scene, x, X, Nc, grads):
    """Per-cell integrand of the Abar trace term of the inner variation identity."""
    n, Q, d, _ = grads.shape
    xi = scene.tangent_frame(x)
    out = np.zeros(n)
    for q in range(Q):
        u = Nc[:, q]
        abar_Xu = scene.ambient_second_form(x, X, u)
        for i in range(scene.m):
            e = xi[:, i]
            dN = np.einsum("nij,nj->ni", grads[:, q], e)
            t1 = np.einsum("ni,ni->n", scene.ambient_second_form(x, e, u), scene.ambient_second_form(x, X, dN))
            t2 = np.einsum("ni,ni->n", abar_Xu, scene.ambient_second_form(x, e, dN))
            out += t1 - t2
    return out


# --- selections ---------------------------------------------------------------------

@dataclass
class BranchEdge:
    edge: tuple
    cycle_type: tuple


@dataclass
class SelectionReport:
    selections: list
    branch_edges: list

    @property
    def has_monodromy(self):
        return bool(self.branch_edges)


def _cycle_type(perm):
    seen = np.zeros(len(perm), dtype=bool)
    lengths = []
    for s in range(len(perm)):
        if seen[s]:
            continue
        L = 0
        j = s
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            L += 1
        if L > 1:
            lengths.append(L)
    return tuple(sorted(lengths, reverse=True))


def relative_permutation(a, b, tau):
    """Permutation pi with a[l] close to b[pi[l]] (tau-coincident sheets treated as interchangeable).

    Returns None when a and b are not the same multiset up to tau.
    """
    Q = len(a)
    pi = -np.ones(Q, dtype=np.intp)
    used = np.zeros(Q, dtype=bool)
    for l in range(Q):
        # identity first so that coincident sheets map to themselves when possible
        order = [l] + [j for j in range(Q) if j != l]
        for j in order:
            if not used[j] and np.linalg.norm(a[l] - b[j]) <= tau:
                pi[l] = j
                used[j] = True
                break
        else:
            return None
    return pi


def lipschitz_selection(u, region=None):
    """Propagate edge matchings along a BFS spanning tree; report edges closing loops with holonomy."""
    mesh = u.mesh
    cmask = mesh.region_mask(region)
    vmask = np.zeros(mesh.n_vertices, dtype=bool)
    vmask[mesh.cells[cmask].ravel()] = True
    perm, _ = u.edge_matchings()
    E = mesh.edges
    inside = vmask[E[:, 0]] & vmask[E[:, 1]]
    emap = {}
    for e in np.flatnonzero(inside):
        a, b = E[e]
        emap[(a, b)] = perm[e]
        emap[(b, a)] = np.argsort(perm[e])
    Q = u.Q
    sel = -np.ones((mesh.n_vertices, Q), dtype=np.intp)
    verts = np.flatnonzero(vmask)
    tree = set()
    if verts.size:
        root = verts[0]
        sel[root] = np.arange(Q)
        queue = deque([root])
        while queue:
            a = queue.popleft()
            for b in mesh.neighbors[a]:
                if vmask[b] and sel[b, 0] < 0:
                    sel[b] = emap[(a, b)][sel[a]]
                    tree.add((min(a, b), max(a, b)))
                    queue.append(b)
    if np.any(sel[verts, 0] < 0):
        raise FieldError("lipschitz_selection needs a connected region")
    tau = u.tau_coin
    branch = []
    for e in np.flatnonzero(inside):
        a, b = E[e]
        if (a, b) in tree:
            continue
        carried = u.values[b, emap[(a, b)][sel[a]]]
        stored = u.values[b, sel[b]]
        pi = relative_permutation(carried, stored, tau)
        if pi is None or np.any(pi != np.arange(Q)):
            ctype = _cycle_type(pi) if pi is not None else (Q,)
            if ctype:
                branch.append(BranchEdge((int(a), int(b)), ctype))
    selections = []
    for l in range(Q):
        s = np.full((mesh.n_vertices, u.d), np.nan)
        s[verts] = u.values[verts, sel[verts, l]]
        selections.append(s)
    return SelectionReport(selections, branch)
