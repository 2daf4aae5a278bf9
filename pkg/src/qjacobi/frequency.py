"""Radial energy profiles about a pole, frequency function audits and fits,
blow-ups, tangent maps and multiplicity strata."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .aq_space import batch_g_distance, batch_matchings, spread_stats
from .mesh import disk_mesh
from .qfield import DiscreteQField, _pair_mass, energy_density, relative_permutation
from .scene_geometry import EquatorialSphere, FlatScene

logger = logging.getLogger("qjacobi")

N_SHELL = 4096
SLACK = 1e-3
CAUCHY_FLOOR = 1e-2


class ProfileError(ValueError):
    pass


class VanishingError(ValueError):
    pass


# --- geometry of geodesic balls in the log chart -----------------------------------------------

def _edge_disk_area(A, B, r):
    """Signed area of disk(0, r) intersected with the triangle (0, A, B), vectorized over rows."""
    d = B - A
    a = np.einsum("ni,ni->n", d, d)
    b = 2 * np.einsum("ni,ni->n", A, d)
    c = np.einsum("ni,ni->n", A, A) - r * r
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    safe = np.where(a > 0, a, 1.0)
    t1 = np.clip((-b - sq) / (2 * safe), 0.0, 1.0)
    t2 = np.clip((-b + sq) / (2 * safe), 0.0, 1.0)
    hit = (disc > 0) & (a > 0)
    t1 = np.where(hit, t1, 1.0)
    t2 = np.where(hit, t2, 1.0)
    P1 = A + t1[:, None] * d
    P2 = A + t2[:, None] * d

    def cross(U, V):
        return U[:, 0] * V[:, 1] - U[:, 1] * V[:, 0]

    def sector(U, V):
        return 0.5 * r * r * np.arctan2(cross(U, V), np.einsum("ni,ni->n", U, V))

    return sector(A, P1) + 0.5 * cross(P1, P2) + sector(P2, B)


def disk_fraction(tri, r):
    """Fraction of each chart triangle (n, 3, 2) inside the disk of radius r about the origin."""
    tri = np.asarray(tri, float)
    total = 0.0
    for i in range(3):
        total = total + _edge_disk_area(tri[:, i], tri[:, (i + 1) % 3], r)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    frac = np.where(area != 0, total / np.where(area != 0, area, 1.0), 0.0)
    return np.clip(frac, 0.0, 1.0)


def _sub_barycentric(level=4):
    """Uniform refinement of the reference triangle: (n_sub, 3, 3) barycentric vertex coordinates."""
    L = level
    subs = []
    for i in range(L):
        for j in range(L - i):
            a = np.array([i, j]) / L
            b = np.array([i + 1, j]) / L
            c = np.array([i, j + 1]) / L
            subs.append([a, b, c])
            if i + j < L - 1:
                dd = np.array([i + 1, j + 1]) / L
                subs.append([b, dd, c])
    subs = np.array(subs)                              # (n_sub, 3, 2) in (l1, l2)
    lam0 = 1 - subs.sum(axis=2, keepdims=True)
    return np.concatenate([lam0, subs], axis=2)


_SUB = _sub_barycentric(4)


class _BallGeometry:
    """Cached per-pole chart data for ball integrals."""

    def __init__(self, mesh, p):
        if mesh.m != 2:
            raise ProfileError("ball and shell integrals are implemented for m = 2")
        self.mesh = mesh
        self.p = np.asarray(p, float)
        self.coords = mesh.log_coords(self.p)
        self.tri = self.coords[mesh.cells]
        self.rad = np.linalg.norm(self.tri, axis=2)      # (nc, 3)

    def fractions(self, r):
        full = np.all(self.rad <= r, axis=1)
        frac = full.astype(float)
        part = ~full & (self.rad.min(axis=1) < r + np.ptp(self.rad, axis=1) + 1e-300)
        idx = np.flatnonzero(part)
        if idx.size:
            frac[idx] = disk_fraction(self.tri[idx], r)
        return frac, full


def _geometry_for(N, p):
    key = ("ballgeo", tuple(np.round(np.asarray(p, float), 15)))
    if key not in N._cache:
        N._cache[key] = _BallGeometry(N.mesh, p)
    return N._cache[key]


def _density(N):
    return energy_density(N, "normal" if N.normal else "full")


def ball_dirichlet(N, p, r):
    """Dirichlet energy of N on the geodesic ball B_r(p), with exact partial-cell areas in the chart."""
    geo = _geometry_for(N, p)
    frac, _ = geo.fractions(r)
    return float(np.sum(frac * N.mesh.vol * _density(N)))


def ball_l2(N, p, r):
    """int_{B_r(p)} |N|^2: exact on interior cells, 16 sub-triangles on cut cells."""
    geo = _geometry_for(N, p)
    mesh = N.mesh
    al = N.aligned()
    frac, full = geo.fractions(r)
    total = float(np.sum(_pair_mass(mesh, al, al)[full]))
    cut = np.flatnonzero((frac > 0) & ~full)
    if cut.size:
        total += _cut_integral(geo, al[cut], mesh.vol[cut], cut, r)
    return total


def _cut_integral(geo, al, vol, cut, r):
    """Sum over cut cells of the integral of |N|^2 over the part inside the disk."""
    sub = _SUB                                                    # (ns, 3, 3)
    ns = sub.shape[0]
    tri = geo.tri[cut]                                            # (nc, 3, 2)
    sub_tri = np.einsum("sab,nbk->nsak", sub, tri).reshape(-1, 3, 2)
    f = disk_fraction(sub_tri, r).reshape(len(cut), ns)
    mid = 0.5 * (sub + np.roll(sub, -1, axis=1))                  # edge midpoints, exact for quadratics
    vals = np.einsum("sab,nbqd->nsaqd", mid, al)
    sq = np.einsum("nsaqd,nsaqd->ns", vals, vals) / 3.0
    return float(np.sum(f * sq * (vol / ns)[:, None]))


# --- profiles ---------------------------------------------------------------------------

@dataclass
class FrequencyProfile:
    pole: np.ndarray
    radii: np.ndarray
    D: np.ndarray
    H: np.ndarray
    E: np.ndarray
    G: np.ndarray
    F: np.ndarray
    I: np.ndarray
    valid: np.ndarray
    m: int = 2
    extras: dict = field(default_factory=dict)

    def to_csv(self):
        lines = ["r,D,H,E,G,F,I,valid"]
        for i in range(len(self.radii)):
            row = [self.radii[i], self.D[i], self.H[i], self.E[i], self.G[i], self.F[i], self.I[i]]
            lines.append(",".join(repr(float(x)) for x in row) + f",{int(bool(self.valid[i]))}")
        return "\n".join(lines) + "\n"


def default_radii(h, r_max, ratio=2 ** 0.25):
    """Geometric grid from 4h up to r_max."""
    r_min = 4 * h
    if r_max <= r_min:
        raise ProfileError(f"r_max={r_max:.4g} does not exceed the smallest radius 4h={r_min:.4g}")
    n = int(math.floor(math.log(r_max / r_min) / math.log(ratio))) + 1
    return r_min * ratio ** np.arange(n)


def _radial_frame(scene, p, r, yhat):
    """Points on the geodesic sphere of radius r and their outward radial unit vectors."""
    if isinstance(scene, FlatScene):
        return p + r * yhat, np.broadcast_to(yhat, yhat.shape).copy(), r
    if isinstance(scene, EquatorialSphere):
        x = np.cos(r) * p + np.sin(r) * yhat
        return x, -np.sin(r) * p + np.cos(r) * yhat, np.sin(r)
    raise ProfileError(f"no shell quadrature for scene {scene.name}")


def _max_radius(mesh, p):
    scene = mesh.scene
    if mesh.boundary.any():
        bd = float(scene.distance_sigma(p, mesh.points[mesh.boundary]).min())
        # inscribed polygonal boundary: stay a cell-width inside the vertex circle
        h = float(mesh.spec.get("h", 0.0))
        return min(scene.inj, bd - 0.5 * h * h / max(bd, 1e-12) - 1e-9)
    return scene.inj * (1 - 1e-9)


def _shell_samples(N, p, r, n_shell):
    """Matched P1 values and radial derivatives of N on the geodesic circle of radius r."""
    mesh = N.mesh
    scene = mesh.scene
    basis = scene.tangent_basis_at(p)
    alpha = 2 * np.pi * (np.arange(n_shell) + 0.5) / n_shell
    ydir = np.stack([np.cos(alpha), np.sin(alpha)], 1)
    yhat = ydir @ basis
    x, radial, weight = _radial_frame(scene, p, r, yhat)
    loc = _locator_for(N, p)
    cell, bary = loc.locate(r * ydir)
    if np.any(cell < 0):
        raise ProfileError(f"radius {r:.6g} leaves the mesh around the pole")
    al = N.aligned()[cell]                                   # (ns, 3, Q, d)
    vals = np.einsum("na,naqd->nqd", bary, al)
    grads = N.cell_gradients()[cell]                         # (ns, Q, d, d)
    if N.normal:
        grads = np.einsum("nij,nqjk->nqik", scene.normal_projector(mesh.centroids[cell]), grads)
    dr = np.einsum("nqij,nj->nqi", grads, radial)
    w = weight * 2 * np.pi / n_shell
    return vals, dr, w


def _locator_for(N, p):
    mesh = N.mesh
    if np.allclose(p, mesh.pole, atol=1e-14, rtol=0):
        return mesh.locator()
    key = ("locator", tuple(np.round(np.asarray(p, float), 15)))
    if key not in N._cache:
        from .mesh import Locator
        N._cache[key] = Locator(mesh.log_coords(p), mesh.cells)
    return N._cache[key]


def radial_profiles(N, p=None, radii=None, n_shell=N_SHELL):
    mesh = N.mesh
    if mesh.m != 2:
        raise ProfileError("radial profiles are implemented for m = 2")
    p = mesh.pole if p is None else np.asarray(p, float)
    rmax = _max_radius(mesh, p)
    if radii is None:
        radii = default_radii(float(mesh.spec.get("h", 1 / 16)), 0.95 * rmax)
    radii = np.asarray(radii, float)
    if np.any(np.diff(radii) <= 0) or radii[0] <= 0:
        raise ProfileError("radii must be positive and strictly increasing")
    if radii[-1] > rmax:
        raise ProfileError(f"radius {radii[-1]:.6g} exceeds the admissible bound {rmax:.6g} "
                           "(injectivity radius or distance to the boundary)")
    M = len(radii)
    D, H, E, G, F, Dh, Dg = (np.zeros(M) for _ in range(7))
    geo = _geometry_for(N, p)
    dens = _density(N)
    gnorm = np.sqrt(np.einsum("nqd,nqd->n", N.values, N.values))
    grad_g = np.einsum("nid,ni->nd", mesh.grad_basis, gnorm[mesh.cells])
    dg = np.einsum("nd,nd->n", grad_g, grad_g)
    for i, r in enumerate(radii):
        frac, _ = geo.fractions(r)
        D[i] = float(np.sum(frac * mesh.vol * dens))
        Dg[i] = float(np.sum(frac * mesh.vol * dg))
        frac_h, _ = geo.fractions(r / 2)
        Dh[i] = float(np.sum(frac_h * mesh.vol * dens))
        F[i] = ball_l2(N, p, r)
        vals, dr, w = _shell_samples(N, p, r, n_shell)
        H[i] = float(np.sum(w * np.einsum("nqd,nqd->n", vals, vals)))
        E[i] = float(np.sum(w * np.einsum("nqd,nqd->n", vals, dr)))
        G[i] = float(np.sum(w * np.einsum("nqd,nqd->n", dr, dr)))
    scale = max(float(np.max(H)), 1e-300)
    valid = H > 1e-14 * scale
    valid &= H > 0
    I = np.where(valid, radii * D / np.where(valid, H, 1.0), 0.0)
    return FrequencyProfile(p, radii, D, H, E, G, F, I, valid, mesh.m,
                            {"D_half": Dh, "grad_abs_sq": Dg})


def closed_form_profile(decomp, radii):
    """Exact profile of the flat rolled harmonic field of a circle-map decomposition (m = 2)."""
    from .harmonic_boundary import closed_form_energies
    radii = np.asarray(radii, float)
    D = np.zeros(len(radii))
    H = np.zeros(len(radii))
    G = np.zeros(len(radii))
    F = np.zeros(len(radii))
    for i, r in enumerate(radii):
        e = closed_form_energies(decomp, r)
        D[i], H[i], F[i] = e.disk_dirichlet, e.circle_l2, e.disk_l2
        # radial derivative energy: pi sum k (2n/k)^2 / ... per mode, from rho^(n/k) scaling
        g = 0.0
        for pc in decomp.pieces:
            n = np.arange(1, pc.n_max + 1)
            mu = n / pc.k
            g += np.pi * pc.k * np.sum(mu ** 2 * r ** (2 * mu - 1) * pc.coeff_energy())
        G[i] = g
    E = D.copy()                                   # harmonic: int_{B_r} |Du|^2 = int_{dB_r} <u_r, u>
    valid = H > 0
    I = np.where(valid, radii * D / np.where(valid, H, 1.0), 0.0)
    return FrequencyProfile(np.zeros(2), radii, D, H, E, G, F, I, valid, 2, {"closed_form": True})


# --- audits and fits -------------------------------------------------------------------

def monotonicity_audit(profile, slack=SLACK):
    v = profile.valid
    if v.sum() < 8:
        raise ProfileError(f"need at least 8 valid radii, got {int(v.sum())}")
    r = profile.radii[v]
    I = profile.I[v]
    D, H, E, G, F = (getattr(profile, k)[v] for k in "DHEGF")
    m = profile.m
    lam = 0.0
    if np.any(I <= 0):
        lam = float("inf") if np.any((I[:-1] > 0) & (I[1:] <= 0)) else 0.0
        pos = I > 0
    else:
        pos = np.ones_like(I, dtype=bool)
    if np.isfinite(lam):
        ri, Ii = r[pos], I[pos]
        if Ii.size >= 2:
            need = (np.log(Ii[:-1]) - np.log(Ii[1:]) + np.log1p(-slack)) / np.diff(ri)
            lam = float(max(0.0, need.max()))
    scaled = np.exp(lam * r) * I if np.isfinite(lam) else I
    monotone = bool(np.all(scaled[1:] >= scaled[:-1] * (1 - slack) - 1e-300)) if np.isfinite(lam) else False
    C0 = float(np.max(I[:, None] / (1 + I[None, :]) * np.triu(np.ones((len(I), len(I))), 1)))
    dF = np.gradient(F, r)
    dH = np.gradient(H, r)
    nz = F > 0
    cs = E ** 2 <= G * H * (1 + 1e-12) + 1e-300
    Dh = profile.extras.get("D_half")
    Dg = profile.extras.get("grad_abs_sq")
    out = {
        "lambda": lam,
        "C0": C0,
        "monotone_with_lambda": monotone,
        "d_minus_e": float(np.max(np.abs(D - E)[nz] / F[nz])) if nz.any() else 0.0,
        "h_prime": float(np.max(np.abs(dH - (m - 1) / r * H - 2 * E)[H > 0] / (r * H)[H > 0])) if np.any(H > 0) else 0.0,
        "f_prime_minus_h": float(np.max(np.abs(dF - H)[1:-1] / np.maximum(H[1:-1], 1e-300))),
        "cauchy_schwarz": bool(np.all(cs)),
        "poincare": float(np.max(F[D > 0] / (r[D > 0] ** 2 * D[D > 0]))) if np.any(D > 0) else float("inf"),
        "reverse_poincare": float(np.max(D[F > 0] * r[F > 0] ** 2 / F[F > 0])) if np.any(F > 0) else 0.0,
    }
    if Dh is not None:
        out["caccioppoli"] = float(np.max(Dh[v][nz] * r[nz] ** 2 / F[nz])) if nz.any() else 0.0
    if Dg is not None:
        # int g^2 <= (1/m) r int_{dB} g^2 + C r^2 int |Dg|^2 with g = |N|
        lhs = F - r * H / m
        dgv = Dg[v]
        ok = dgv > 0
        out["lemma63"] = float(np.max(lhs[ok] / (r[ok] ** 2 * dgv[ok]))) if ok.any() else float(np.max(lhs))
    return out


def lemma63_terms(mesh, g, p, r, n_shell=N_SHELL):
    """(int_{B_r} g^2, int_{dB_r} g^2, int_{B_r} |Dg|^2) for a scalar P1 function g on an m = 2 mesh."""
    scene = mesh.scene
    vals = np.zeros((mesh.n_vertices, 1, scene.d))
    vals[:, 0, 0] = g
    N = DiscreteQField(mesh, vals)
    lhs = ball_l2(N, p, r)
    sv, _, w = _shell_samples(N, p, r, n_shell)
    bnd = float(np.sum(w * sv[:, 0, 0] ** 2))
    return lhs, bnd, ball_dirichlet(N, p, r)


def _aitken(x0, x1, x2):
    den = x0 - 2 * x1 + x2
    if abs(den) <= 1e-14 * (abs(x0) + abs(x1) + abs(x2)) + 1e-300:
        return x0
    return x0 - (x0 - x1) ** 2 / den


def decay_fit(profile, floor=1e-11):
    """Fit I0, H0, D0 and the decay exponent beta of the deviations."""
    v = profile.valid & (profile.H > 0)
    if v.sum() < 3:
        raise ProfileError("need at least 3 valid radii for the decay fit")
    r = profile.radii[v]
    I, H, D = profile.I[v], profile.H[v], profile.D[v]
    m = profile.m
    I0 = _aitken(I[0], I[1], I[2])
    h = H / r ** (m - 1 + 2 * I0)
    d = D / r ** (m - 2 + 2 * I0)
    H0 = _aitken(h[0], h[1], h[2])
    D0 = _aitken(d[0], d[1], d[2])
    dev = np.abs(I - I0) + np.abs(h - H0) + np.abs(d - D0)
    scale = abs(I0) + abs(H0) + abs(D0)
    use = dev > floor * max(scale, 1e-300)
    exact = not use[3:].any() if use.size > 3 else not use.any()
    if exact:
        beta = None
    else:
        # largest decade of radii
        sel = use & (r >= r[-1] / 10)
        if sel.sum() < 2:
            sel = use
        beta = float(np.polyfit(np.log(r[sel]), np.log(dev[sel]), 1)[0]) if sel.sum() >= 2 else None
    flags = []
    if m != 2:
        flags.append("heuristic_m")
    if I0 <= 0 and np.any(profile.F[v] > 0):
        flags.append("nonpositive_I0")
    contract = abs(D0 - I0 * H0) / abs(D0) if D0 != 0 else abs(I0 * H0)
    return {"I0": float(I0), "H0": float(H0), "D0": float(D0), "beta": beta,
            "exact_constant": bool(exact), "contract_residual": float(contract),
            "residuals": dev.tolist(), "flags": flags}


# --- blow-ups ---------------------------------------------------------------------------

def _interp(N, p, points_chart):
    """Matched P1 values of N at chart points about p: (n, Q, d)."""
    loc = _locator_for(N, p)
    cell, bary = loc.locate(points_chart)
    if np.any(cell < 0):
        raise ProfileError("blow-up samples leave the mesh; use a smaller radius")
    return np.einsum("na,naqd->nqd", bary, N.aligned()[cell])


def _jacobian(scene, rho):
    """Volume factor of the exponential map at geodesic radius rho, relative to the flat one (m = 2)."""
    if isinstance(scene, EquatorialSphere):
        m = scene.m
        s = np.where(rho > 0, np.sin(rho) / np.where(rho > 0, rho, 1.0), 1.0)
        return s ** (m - 1)
    return np.ones_like(rho)


def default_b1_mesh(N, h=1 / 32):
    scene = N.mesh.scene
    if N.normal:
        flat = FlatScene(scene.m, scene.k, scene.d - scene.m - scene.k)
    elif isinstance(scene, FlatScene):
        flat = scene
    else:
        raise ProfileError("blow-ups of non-normal fields need a flat scene")
    return disk_mesh(flat, 1.0, h)


def blow_up_map(N, p=None, r=0.5, mode="L2", b1_mesh=None):
    """Rescaled field y -> N(exp_p(r y)) on the unit disk, normalized in L2 or in Dirichlet energy."""
    mesh = N.mesh
    scene = mesh.scene
    p = mesh.pole if p is None else np.asarray(p, float)
    if mode not in ("L2", "D"):
        raise ValueError("mode must be 'L2' or 'D'")
    if r > _max_radius(mesh, p):
        raise ProfileError(f"blow-up radius {r:.6g} exceeds the admissible bound")
    b1 = b1_mesh or default_b1_mesh(N)
    S = _interp(N, p, r * b1.chart)
    if N.normal:
        Fsrc = scene.normal_frame(p[None])[0]
        Fdst = b1.scene.normal_frame(b1.points[:1])[0]
        S = np.einsum("ad,nqd->nqa", Fsrc, S) @ Fdst
    elif S.shape[2] != b1.scene.d:
        raise ProfileError("blow-up mesh has a different ambient dimension")
    raw = DiscreteQField(b1, S, normal=N.normal)
    m = b1.m
    J = _jacobian(scene, r * np.linalg.norm(b1.centroids[:, :m], axis=1))
    al = raw.aligned()
    norm_sq = r ** m * float(np.sum(J * _pair_mass(b1, al, al)))
    area = float(np.sum(b1.vol)) * r ** m
    if math.sqrt(max(norm_sq, 0.0)) < 1e-14 * area:
        raise VanishingError(f"||N||_L2(B_r) = {math.sqrt(max(norm_sq, 0.0)):.3e} vanishes at r={r:.4g}; "
                             "the field is identically zero near the pole (first branch of the dichotomy)")
    if mode == "L2":
        factor = r ** (m / 2) / math.sqrt(norm_sq)
    else:
        Dr = r ** (m - 2) * float(np.sum(J * b1.vol * energy_density(raw, "full")))
        if Dr <= 0:
            raise VanishingError(f"Dirichlet energy vanishes on B_r at r={r:.4g}")
        factor = r ** ((m - 2) / 2) / math.sqrt(Dr)
    return DiscreteQField(b1, factor * S, normal=N.normal)


def g_l2_distance(u, v):
    """sqrt(sum_v area_v G(u(v), w(v))^2) with lumped mass, for fields on the same mesh."""
    gd = batch_g_distance(u.values, v.values)
    return float(np.sqrt(np.sum(u.mesh.vertex_area * gd ** 2)))


def _is_collapsed_zero(N, p, tol):
    val = _interp(N, p, np.zeros((1, N.mesh.m)))[0]
    diam, _, _ = spread_stats(val, tol)
    return diam <= tol and float(np.linalg.norm(val.mean(axis=0))) <= tol


def tangent_map(N, p=None, radii=None, b1_mesh=None, tol=None):
    mesh = N.mesh
    p = mesh.pole if p is None else np.asarray(p, float)
    vmax = float(np.sqrt(np.einsum("nqd,nqd->nq", N.values, N.values).max()))
    tol = tol if tol is not None else 1e-9 * max(vmax, 1.0)
    if not _is_collapsed_zero(N, p, tol):
        raise ProfileError("tangent maps are taken at points where N = Q[[0]]; elsewhere the frequency "
                           "tends to 0 and the blow-up is a constant")
    rmax = _max_radius(mesh, p)
    if radii is None:
        # stop where B_r spans fewer than 16 cells across its radius
        h = float(mesh.spec.get("h", 1 / 64))
        radii = 0.5 * rmax * 2.0 ** (-np.arange(12) / 2)
        radii = radii[radii >= min(16 * h, radii[2])]
    radii = np.asarray(radii, float)
    b1 = b1_mesh or default_b1_mesh(N)
    blows = [blow_up_map(N, p, r, "L2", b1) for r in radii]
    cauchy = []
    for i in range(len(radii)):
        j = np.flatnonzero(np.isclose(radii, radii[i] / 2, rtol=1e-9))
        if j.size:
            cauchy.append((float(radii[i]), g_l2_distance(blows[i], blows[j[0]])))
    limit = blows[-1]
    prof = radial_profiles(limit, None, np.linspace(0.2, 0.9, 15))
    ok = prof.H > 0
    slope = float(np.polyfit(np.log(prof.radii[ok]), 0.5 * np.log(prof.H[ok]), 1)[0]) if ok.sum() >= 2 else float("nan")
    mu = slope - (limit.mesh.m - 1) / 2
    try:
        fit = decay_fit(radial_profiles(N, p))
        I0 = fit["I0"]
    except ProfileError:
        I0 = float("nan")
    eta = limit.values.mean(axis=1)
    lmax = float(np.abs(limit.values).max()) or 1.0
    flags = []
    diffs = [c[1] for c in cauchy]
    # differences below the interpolation floor of the mesh carry no signal
    if len(diffs) >= 2 and diffs[-1] >= diffs[0] and diffs[-1] > CAUCHY_FLOOR:
        flags.append("cauchy_not_decreasing")
    if np.isfinite(I0) and abs(mu - I0) > 5e-2:
        flags.append("mu_I0_mismatch")
    center = int(np.argmin(np.linalg.norm(limit.mesh.chart, axis=1)))
    diag = {
        "radii": radii.tolist(),
        "cauchy": cauchy,
        "mu_profile": mu,
        "I0": I0,
        "eta_max": float(np.abs(eta).max() / lmax),
        "center_spread": float(spread_stats(limit.values[center])[0]),
        "flags": flags,
    }
    return limit, mu, diag


# --- strata -----------------------------------------------------------------------------

@dataclass
class StrataReport:
    sigma: np.ndarray
    D_Q: np.ndarray
    singular: np.ndarray
    components: list
    isolated: bool
    lsc_ok: bool


def _link_order(mesh, v):
    nb = mesh.neighbors[v]
    T = mesh.scene.tangent_frame(mesh.points[v][None])[0]
    c = (mesh.points[nb] - mesh.points[v]) @ T.T
    return nb[np.argsort(np.arctan2(c[:, 1], c[:, 0]), kind="stable")]


def _link_holonomy(N, loop, edge_index, perms, tau):
    vals = N.values
    cur = np.arange(N.Q)
    for a, b in zip(loop, np.roll(loop, -1)):
        if a < b:
            cur = perms[edge_index[(a, b)]][cur]
        else:
            cur = np.argsort(perms[edge_index[(b, a)]])[cur]
    pi = relative_permutation(vals[loop[0]][cur], vals[loop[0]], tau)
    return pi is None or np.any(pi != np.arange(N.Q))


def multiplicity_strata(N, region=None):
    mesh = N.mesh
    sigma = N.sigma()
    cmask = mesh.region_mask(region)
    vmask = np.zeros(mesh.n_vertices, dtype=bool)
    vmask[mesh.cells[cmask].ravel()] = True
    nbmax = np.array([sigma[nb].max() if nb.size else s for nb, s in zip(mesh.neighbors, sigma)])
    singular = vmask & (sigma < nbmax)
    if mesh.m == 2 and N.Q > 1:
        perms, _ = N.edge_matchings()
        edge_index = {(int(a), int(b)): e for e, (a, b) in enumerate(mesh.edges)}
        for v in np.flatnonzero(vmask & ~singular & ~mesh.boundary & (sigma > 1)):
            nb = mesh.neighbors[v]
            if np.any(sigma[nb] != sigma[v]):
                continue
            loop = _link_order(mesh, v)
            if _link_holonomy(N, loop, edge_index, perms, N.tau_coin):
                singular[v] = True
    D_Q = np.flatnonzero(vmask & (sigma == 1))
    comps = _components(mesh, singular)
    h = float(mesh.spec.get("h", 0.0)) or float(np.sqrt(np.mean(mesh.vol)))
    isolated = all(_diameter(mesh, c) <= 3 * h for c in comps)
    lsc = bool(np.all(sigma[vmask] <= nbmax[vmask]))
    return StrataReport(sigma, D_Q, np.flatnonzero(singular), comps, isolated, lsc)


def _components(mesh, flag):
    idx = np.flatnonzero(flag)
    seen = set()
    comps = []
    fl = set(idx.tolist())
    for s in idx:
        if s in seen:
            continue
        stack = [s]
        comp = []
        seen.add(s)
        while stack:
            a = stack.pop()
            comp.append(int(a))
            for b in mesh.neighbors[a]:
                if b in fl and b not in seen:
                    seen.add(b)
                    stack.append(b)
        comps.append(sorted(comp))
    return comps


def _diameter(mesh, comp):
    P = mesh.points[comp]
    if len(comp) < 2:
        return 0.0
    diff = P[:, None] - P[None]
    return float(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff).max()))
