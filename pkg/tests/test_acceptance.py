"""Acceptance criteria, one test each; every test records a PASS/FAIL line with measured values."""

import itertools
import math

import numpy as np
import pytest

from qjacobi.aq_space import g_distance
from qjacobi.frequency import (blow_up_map, closed_form_profile, decay_fit, default_b1_mesh,
                               g_l2_distance, monotonicity_audit, multiplicity_strata,
                               radial_profiles, tangent_map)
from qjacobi.harmonic_boundary import (CircleMapDecomposition, closed_form_energies,
                                       collar_interpolation, harmonic_extension, homogeneous_extension)
from qjacobi.mesh import disk_mesh, sphere_mesh
from qjacobi.qfield import DiscreteQField, dirichlet_energy, fd_variations, jac_energy
from qjacobi.scene_geometry import builtin_scene
from qjacobi.solver import SolveConfig, certify_minimizer, minimize_dirichlet, minimize_jacobi, stability_constant

from conftest import embed_normal, w3_decomposition, w3_values

RESULTS = []


def record(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} [{criterion}] {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# --- 1 -------------------------------------------------------------------------------------

def brute_distances(A, B):
    """min over all permutations of the root-sum-square, for stacks (n, Q, d)."""
    Q = A.shape[1]
    P = np.array(list(itertools.permutations(range(Q))))
    diff = A[:, None, :, :] - B[:, P, :]                  # (n, Q!, Q, d)
    return np.sqrt(np.min(np.einsum("npqd,npqd->np", diff, diff), axis=1))


def test_01_metric_oracle():
    rng = np.random.default_rng(101)
    worst = 0.0
    for Q in range(2, 7):
        for d in (1, 2, 3):
            A = rng.normal(size=(1000, Q, d))
            B = rng.normal(size=(1000, Q, d))
            ours = np.array([g_distance(a, b) for a, b in zip(A, B)])
            worst = max(worst, float(np.max(np.abs(ours - brute_distances(A, B)))))
    viol = 0
    for _ in range(1000):
        Q = int(rng.integers(1, 7))
        d = int(rng.integers(1, 4))
        a, b, c = rng.normal(size=(3, Q, d))
        ab, ba, bc, ac = g_distance(a, b), g_distance(b, a), g_distance(b, c), g_distance(a, c)
        aa = g_distance(a, a[rng.permutation(Q)])
        viol += int(ab != ba or ac > ab + bc + 1e-12 or aa > 1e-12 or ab <= 0)
    record(1, worst <= 1e-12 and viol == 0,
           f"metric oracle: max |G - brute| = {worst:.2e} (tol 1e-12), axiom violations {viol}/1000")


# --- 2 -------------------------------------------------------------------------------------

def conformal_disk_dirichlet(modes, n_theta=2048, n_rad=64):
    """Oracle: Dir of the rolled extension equals the energy of zeta(z) = Re sum (a_n - i b_n) z^n
    on the unit z-disk, by conformal invariance of the Dirichlet integral."""
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    gx, gw = np.polynomial.legendre.leggauss(n_rad)
    s = (gx + 1) / 2
    total = 0.0
    for k, a0, a, b in modes:
        n = np.arange(1, a.shape[0] + 1)
        c = a - 1j * b
        for si, wi in zip(s, gw / 2):
            z = si * np.exp(1j * th)
            dF = (n[None, :] * z[:, None] ** (n - 1)[None, :]) @ c
            total += wi * si * np.sum(np.abs(dF) ** 2) * 2 * np.pi / n_theta
    return total


def test_02_fourier_identities():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(5):
        modes = []
        for k in rng.integers(1, 5, size=rng.integers(1, 4)):
            decay = 1.0 / (1 + np.arange(16))[:, None] ** 1.5
            modes.append((int(k), rng.normal(size=3), rng.normal(size=(16, 3)) * decay,
                          rng.normal(size=(16, 3)) * decay))
        dec = CircleMapDecomposition.from_modes(modes)
        cf = closed_form_energies(dec)
        disk = conformal_disk_dirichlet(modes)
        th = 2 * np.pi * np.arange(2048) / 2048
        phi = dec.evaluate(th)
        l2 = float(np.sum(phi * phi)) * 2 * np.pi / 2048
        worst = max(worst, abs(disk - cf.disk_dirichlet) / cf.disk_dirichlet,
                    abs(l2 - cf.circle_l2) / cf.circle_l2)
    k2 = CircleMapDecomposition.from_modes([(2, np.zeros(2), [[1.0, 0.0]], [[0.0, 1.0]])])
    e = closed_form_energies(k2).disk_dirichlet
    record(2, worst <= 1e-8 and abs(e - 2 * np.pi) <= 1e-8,
           f"Fourier identities: max rel err {worst:.2e} (tol 1e-8); k=2,n=1 disk Dirichlet {e:.12f} vs 2pi")


# --- 3 -------------------------------------------------------------------------------------

def test_03_extension_bounds():
    rng = np.random.default_rng(303)
    dir_ratio = l2_ratio = 0.0
    for _ in range(50):
        modes = []
        for k in rng.integers(1, 4, size=rng.integers(1, 4)):
            nm = int(rng.integers(1, 12))
            modes.append((int(k), rng.normal(size=2), rng.normal(size=(nm, 2)), rng.normal(size=(nm, 2))))
        dec = CircleMapDecomposition.from_modes(modes)
        r = float(rng.uniform(0.3, 3.0))
        ext = harmonic_extension(dec, r)
        # energies of the boundary map on the circle of radius r, measured by quadrature
        th = 2 * np.pi * np.arange(4096) / 4096
        phi = dec.evaluate(th)
        e = ext.energies
        circ_l2 = float(np.sum(phi * phi)) * 2 * np.pi / 4096 * r
        assert circ_l2 == pytest.approx(e["circle_l2"], rel=1e-9)
        dir_ratio = max(dir_ratio, e["disk_dirichlet"] / (dec.Q * e["circle_dirichlet"] * r))
        l2_ratio = max(l2_ratio, e["disk_l2"] / (0.5 * r * circ_l2))

    def phi4(om):
        return np.stack([om[:, :3], -om[:, :3], 0.5 * om[:, 1:4]], axis=1)

    hom = homogeneous_extension(phi4, 4).ratio
    ok = dir_ratio <= 1 + 1e-6 and l2_ratio <= 1 + 1e-6 and hom <= 0.5 + 1e-3
    record(3, ok, f"extension bounds: max Dir ratio {dir_ratio:.6f}, max L2 ratio {l2_ratio:.6f} "
                  f"(<= 1 + 1e-6); j=4 homogeneous ratio {hom:.6f} (<= 0.501)")


# --- 4, 5 ----------------------------------------------------------------------------------

def sphere_field(mesh, C):
    x = mesh.points
    X, Y, Z = x[:, 0], x[:, 1], x[:, 2]
    basis = np.stack([np.ones_like(X), X, Y, Z, X * Y, Y * Z, X * Z, X * X - Y * Y, Z * Z, X * Y * Z], 1)
    f = basis @ C.T
    nu = mesh.scene.normal_frame(x)[:, 0]
    return DiscreteQField(mesh, f[:, :, None] * nu[:, None, :], normal=True)


@pytest.fixture(scope="module")
def sphere_setup():
    sc = builtin_scene("equatorial_sphere", {"m": 2, "k": 1})
    rng = np.random.default_rng(404)
    coeffs = [rng.normal(size=(int(rng.integers(1, 4)), 10)) for _ in range(10)]
    meshes = {h: sphere_mesh(sc, h) for h in (1 / 8, 1 / 16, 1 / 32)}
    out = {}
    for h, mesh in meshes.items():
        rows = []
        for C in coeffs:
            N = sphere_field(mesh, C)
            d1, d2 = fd_variations(N, 1e-2 * 8 * h)
            nmax = float(np.sqrt(np.einsum("nqd,nqd->nq", N.values, N.values).max()))
            rows.append((d1, d2, jac_energy(N).jac, mesh.area() * nmax))
        out[h] = rows
    return sc, out


def test_04_first_variation(sphere_setup):
    _, out = sphere_setup
    hs = sorted(out, reverse=True)
    err = [max(abs(d1) / s for d1, _, _, s in out[h]) for h in hs]
    floor = 1e-12
    if max(err) <= floor:
        order = math.inf          # zero to roundoff at every resolution
    else:
        e = np.maximum(err, floor)
        order = float(np.polyfit(np.log(hs), np.log(e), 1)[0])
    ok = max(err) <= 1e-3 and order >= 1.8
    record(4, ok, f"first variation: max |delta1|/(area max|N|) = {max(err):.2e} (tol 1e-3) over 10 fields; "
                  f"errors by h {['%.1e' % v for v in err]}, measured order {order}")


def test_05_second_variation(sphere_setup):
    sc, out = sphere_setup
    rel = max(abs(d2 - jac) / abs(jac) for _, d2, jac, _ in out[1 / 32])
    mesh = sphere_mesh(sc, 1 / 32)
    nu = sc.normal_frame(mesh.points)[:, 0]
    N = DiscreteQField(mesh, np.stack([nu, -nu], axis=1), normal=True)
    _, d2 = fd_variations(N)
    target = -16 * np.pi
    ok = rel <= 1e-2 and abs(d2 - target) <= 1e-2 * abs(target)
    record(5, ok, f"second variation: max |delta2 - Jac|/|Jac| = {rel:.2e} at h=1/32 (tol 1e-2); "
                  f"[[nu]]+[[-nu]] delta2 = {d2:.5f} vs -16pi = {target:.5f}")


# --- 6 -------------------------------------------------------------------------------------

def test_06_stability_constants():
    flat = builtin_scene("flat_disk", {"m": 2, "k": 1})
    c_disk = stability_constant(flat, disk_mesh(flat, 1.0, 1 / 32))
    bessel = 2.404825557695773 ** 2
    sph = builtin_scene("equatorial_sphere", {"m": 2, "k": 1})
    c_sph = stability_constant(sph, sphere_mesh(sph, 1 / 16))
    ok = abs(c_disk - bessel) <= 1e-2 * bessel and abs(c_sph + 2) <= 2e-2
    record(6, ok, f"stability constants: disk {c_disk:.5f} vs j0^2 = {bessel:.5f}, "
                  f"sphere {c_sph:.5f} vs -2 (tol 1%)")


# --- 7 -------------------------------------------------------------------------------------

def test_07_homogeneous_frequency(w3_field64):
    radii = np.linspace(0.1, 0.5, 17)
    prof = radial_profiles(w3_field64, radii=radii)
    dev = float(np.max(np.abs(prof.I - 1.5)))
    scaled = prof.D / radii ** 3
    spread = float(np.ptp(scaled) / scaled.mean())
    _, mu, _ = tangent_map(w3_field64)
    b1 = default_b1_mesh(w3_field64)
    fixed = g_l2_distance(blow_up_map(w3_field64, r=0.4, b1_mesh=b1),
                          blow_up_map(w3_field64, r=0.2, b1_mesh=b1))
    ok = dev <= 1e-2 and spread <= 2e-2 and abs(mu - 1.5) <= 1e-2 and fixed <= 1e-2
    record(7, ok, f"homogeneous frequency: max|I - 1.5| = {dev:.2e}, D/r^3 spread {spread:.2e}, "
                  f"mu = {mu:.5f}, blow-up r vs r/2 distance {fixed:.2e}")


# --- 8 -------------------------------------------------------------------------------------

def test_08_solver_vs_extension(w3_field64):
    mesh = w3_field64.mesh
    cfg = SolveConfig(restarts=1, anneal_steps=2, seed=8)
    res = minimize_dirichlet(w3_field64.values, mesh, cfg, init=w3_field64.values)
    rolled = dirichlet_energy(w3_field64)
    cert = certify_minimizer(res.field)
    h = 1 / 64
    gap = abs(res.energy - rolled) / rolled
    ok = (res.energy <= 6 * np.pi * 1.02 and gap <= 5e-3
          and cert["outer_residual"] <= 10 * h * h and cert["inner_residual"] <= 10 * h * h)
    record(8, ok, f"solver: energy/6pi = {res.energy / (6 * np.pi):.6f} (<= 1.02), gap to rolled {gap:.2e} "
                  f"(<= 5e-3), residuals outer {cert['outer_residual']:.1e} inner {cert['inner_residual']:.1e} "
                  f"(<= 10h^2 = {10 * h * h:.1e})")


# --- 9 -------------------------------------------------------------------------------------

def test_09_almost_monotonicity():
    sc = builtin_scene("equatorial_sphere", {"m": 2, "k": 2})
    mesh = disk_mesh(sc, 1.0, 1 / 32)
    rolled = embed_normal(mesh, w3_values(mesh.chart))
    res = minimize_jacobi(rolled, mesh, SolveConfig(restarts=1, anneal_steps=2), init=rolled)
    prof = radial_profiles(res.field)
    audit = monotonicity_audit(prof, slack=1e-3)
    v = prof.valid
    cs = bool(np.all(prof.E[v] ** 2 <= prof.G[v] * prof.H[v]))
    ok = math.isfinite(audit["lambda"]) and math.isfinite(audit["C0"]) and audit["monotone_with_lambda"] and cs
    record(9, ok, f"almost monotonicity on cap: lambda = {audit['lambda']:.4g}, C0 = {audit['C0']:.4g}, "
                  f"monotone {audit['monotone_with_lambda']}, E^2 <= GH at all {int(v.sum())} radii: {cs}")


# --- 10 ------------------------------------------------------------------------------------

def test_10_singular_detection(flat2, w3_field64):
    st = multiplicity_strata(w3_field64)
    center = int(np.argmin(np.linalg.norm(w3_field64.mesh.chart, axis=1)))
    w3_ok = st.D_Q.tolist() == [center] and st.singular.tolist() == [center]
    lsc = []
    smooth_empty = True
    for h in (1 / 16, 1 / 32):
        mesh = disk_mesh(flat2, 1.0, h)
        f = np.stack([np.sin(2 * mesh.chart[:, 0]), np.cos(mesh.chart[:, 1])], axis=1)
        Ns = DiscreteQField(mesh, embed_normal(mesh, np.stack([f, f], axis=1)), normal=True)
        smooth_empty &= multiplicity_strata(Ns).singular.size == 0
        Nw = DiscreteQField(mesh, embed_normal(mesh, w3_values(mesh.chart)), normal=True)
        lsc.append(multiplicity_strata(Nw).lsc_ok)
    ok = w3_ok and smooth_empty and all(lsc)
    record(10, ok, f"singular detection: w3 D_Q = {st.D_Q.tolist()}, singular = {st.singular.tolist()} "
                   f"(center {center}); Q[[smooth]] singular empty {smooth_empty}; lsc at two resolutions {lsc}")


# --- 11 ------------------------------------------------------------------------------------

def test_11_decay_fit():
    eps = 0.05
    radii = np.geomspace(0.01, 0.5, 24)
    fit = decay_fit(closed_form_profile(w3_decomposition(eps), radii))
    contract = abs(fit["D0"] - fit["I0"] * fit["H0"]) / abs(fit["D0"])
    ok = fit["beta"] is not None and fit["beta"] > 0 and abs(fit["I0"] - 1.5) <= 1e-2 and contract <= 1e-2
    record(11, ok, f"decay fit: I0 = {fit['I0']:.6f} (1.5 +- 1e-2), beta = {fit['beta']}, "
                   f"|D0 - I0 H0|/D0 = {contract:.2e} (<= 1e-2)")


# --- 12 ------------------------------------------------------------------------------------

def test_12_collar_interpolation():
    rng = np.random.default_rng(1212)
    n = 128
    th = 2 * np.pi * np.arange(n) / n
    worst_end = 0.0
    c_dir = []
    c_l2 = []
    for _ in range(20):
        Q = int(rng.integers(1, 4))
        lam = float(rng.uniform(0.05, 0.8))
        sheets1, sheets2 = [], []
        for q in range(Q):
            c = rng.normal(size=(2, 3, 2))
            base = np.array([3.0 * q, 0.0])

            def curve(cc, base=base):
                return base + sum(np.outer(np.cos((j + 1) * th), cc[0][j]) + np.outer(np.sin((j + 1) * th), cc[1][j])
                                  for j in range(3)) / 3

            sheets1.append(curve(c))
            sheets2.append(curve(c + 0.5 * rng.normal(size=c.shape)))
        f1 = np.stack(sheets1, 1)
        f2 = np.stack(sheets2, 1)
        res = collar_interpolation(f1, f2, lam, n_loop=n)
        end0 = max(g_distance(a, b) for a, b in zip(res.values[0], f1))
        end1 = max(g_distance(a, b) for a, b in zip(res.values[-1], f2))
        worst_end = max(worst_end, end0, end1, res.endpoint_error)
        c_dir.append(res.c_dir)
        c_l2.append(res.c_l2)
    f = np.stack([np.stack([np.cos(th), np.sin(2 * th)], 1), np.stack([2 + np.cos(th), np.sin(th)], 1)], 1)
    lam = 0.3
    same = collar_interpolation(f, f, lam, n_loop=n)
    tang_err = abs(same.tangential - lam * same.dir_f1)
    finite = all(math.isfinite(c) for c in c_dir + c_l2)
    ok = worst_end <= 1e-12 and finite and tang_err <= 1e-8 and same.transverse == 0.0
    record(12, ok, f"collar: endpoint error {worst_end:.1e}, C_Dir max {max(c_dir):.4f}, C_L2 max {max(c_l2):.4f} "
                   f"over 20 pairs; f1=f2 tangential - lambda Dir(f1) = {tang_err:.1e}, transverse {same.transverse}")
