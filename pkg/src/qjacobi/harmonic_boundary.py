"""Q-valued circle maps: irreducible decomposition, Fourier data, rolled harmonic
extensions, zero-homogeneous extensions and collar interpolation."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .aq_space import TAU_COIN, batch_matchings, optimal_matching, permutations_lex

logger = logging.getLogger("qjacobi")

N_MAX_DEFAULT = 64


class DecompositionError(ValueError):
    pass


@dataclass
class Piece:
    """One irreducible piece: phi_l(theta) = sum_{j<k} [[gamma((theta + 2 pi j) / k)]].

    gamma(alpha) = a0/2 + sum_n (a[n-1] cos n alpha + b[n-1] sin n alpha).
    """
    k: int
    a0: np.ndarray
    a: np.ndarray
    b: np.ndarray
    gamma: np.ndarray = None          # samples on the uniform grid of k * n_samples points

    @property
    def d(self):
        return self.a0.shape[0]

    @property
    def n_max(self):
        return self.a.shape[0]

    def coeff_energy(self):
        """|a_n|^2 + |b_n|^2 for n = 1..n_max."""
        return np.sum(self.a ** 2, axis=1) + np.sum(self.b ** 2, axis=1)

    def generator(self, alpha):
        alpha = np.asarray(alpha, float)
        n = np.arange(1, self.n_max + 1)
        ang = np.multiply.outer(alpha, n)
        return self.a0 / 2 + np.cos(ang) @ self.a + np.sin(ang) @ self.b

    def generator_derivative(self, alpha):
        alpha = np.asarray(alpha, float)
        n = np.arange(1, self.n_max + 1)
        ang = np.multiply.outer(alpha, n)
        return (-np.sin(ang) * n) @ self.a + (np.cos(ang) * n) @ self.b


@dataclass
class CircleMapDecomposition:
    pieces: list
    n_samples: int
    truncation: float = 0.0           # L2 mass of Fourier modes beyond n_max

    @property
    def Q(self):
        return int(sum(p.k for p in self.pieces))

    @property
    def d(self):
        return self.pieces[0].d

    @property
    def winding_orders(self):
        return [p.k for p in self.pieces]

    @classmethod
    def from_modes(cls, modes, n_samples=2048):
        """Build from Fourier data: modes is a list of (k, a0, a, b) with a, b of shape (n_max, d)."""
        pieces = []
        for k, a0, a, b in modes:
            a = np.atleast_2d(np.asarray(a, float))
            b = np.atleast_2d(np.asarray(b, float))
            a0 = np.asarray(a0, float)
            if a.shape != b.shape or a.shape[1] != a0.shape[0]:
                raise DecompositionError("mode arrays must have matching shapes (n_max, d)")
            if int(k) < 1:
                raise DecompositionError("winding order must be >= 1")
            p = Piece(int(k), a0, a, b)
            p.gamma = p.generator(2 * np.pi * np.arange(p.k * n_samples) / (p.k * n_samples))
            pieces.append(p)
        if not pieces:
            raise DecompositionError("at least one piece is required")
        return cls(pieces, n_samples)

    def reassemble(self):
        """Samples (n_samples, Q, d) on the uniform grid, from the stored generator samples."""
        n = self.n_samples
        out = []
        for p in self.pieces:
            g = p.gamma.reshape(p.k, n, -1)            # g[j, i] = gamma at theta_i + 2 pi j
            out.append(np.swapaxes(g, 0, 1))
        return np.concatenate(out, axis=1)

    def evaluate(self, theta):
        """phi(theta) from the Fourier data, shape (len(theta), Q, d)."""
        theta = np.atleast_1d(np.asarray(theta, float))
        out = []
        for p in self.pieces:
            for j in range(p.k):
                out.append(p.generator((theta + 2 * np.pi * j) / p.k))
        return np.stack(out, axis=1)


# --- decomposition ------------------------------------------------------------------

def _groups(vals, tau):
    Q = vals.shape[0]
    diff = vals[:, None, :] - vals[None, :, :]
    close = np.einsum("ijk,ijk->ij", diff, diff) <= tau * tau
    label = np.arange(Q)
    for _ in range(Q):
        new = np.array([label[close[i]].min() for i in range(Q)])
        if np.array_equal(new, label):
            break
        label = new
    return label


def _step_matching(prev, nxt, tau):
    """Optimal matching prev -> nxt and the gap to the best inequivalent alternative."""
    Q = prev.shape[0]
    if Q == 1:
        return np.zeros(1, dtype=np.intp), np.inf
    if Q > 6:
        sigma, _ = optimal_matching(prev, nxt)
        return sigma, np.inf
    P = permutations_lex(Q)
    diff = prev[:, None, :] - nxt[None, :, :]
    C = np.einsum("ijk,ijk->ij", diff, diff)
    costs = C[np.arange(Q)[None, :], P].sum(axis=1)
    best = costs.min()
    tol = 1e-12 * (np.sum(prev ** 2) + np.sum(nxt ** 2)) + 1e-300
    i_best = int(np.argmax(costs <= best + tol))
    gs, gt = _groups(prev, tau), _groups(nxt, tau)
    codes = np.sort(gs[None, :] * Q + gt[P], axis=1)
    inequivalent = np.any(codes != codes[i_best], axis=1)
    gap = costs[inequivalent].min() - best if inequivalent.any() else np.inf
    return P[i_best], gap


def _check_resolved(prev, moved, tau, j):
    """Nearest matching is only trustworthy if each sheet moves less than half way to its neighbours."""
    Q = prev.shape[0]
    if Q == 1:
        return
    diff = prev[:, None, :] - prev[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    dist[dist <= tau] = np.inf          # coincident sheets are interchangeable
    step = np.linalg.norm(moved - prev, axis=1)
    if np.any(step >= dist.min(axis=1) / 2):
        raise DecompositionError(
            f"sheets move {step.max():.3e} between samples {j - 1} and {j} while the closest pair "
            f"is {dist.min():.3e} apart; refine the sampling")


def decompose_irreducible(samples, tau_coin=TAU_COIN, n_max=N_MAX_DEFAULT):
    """Split a Q-valued circle map sampled on a uniform grid into irreducible pieces.

    Sheets are tracked around the circle by consecutive optimal matchings; the
    cycles of the total monodromy permutation give the pieces.
    """
    samples = np.asarray(samples, float)
    if samples.ndim != 3:
        raise DecompositionError("samples must have shape (n_theta, Q, d)")
    n, Q, d = samples.shape
    if n < 8:
        raise DecompositionError("need at least 8 samples around the circle")
    track = np.empty((n + 1, Q), dtype=np.intp)
    track[0] = np.arange(Q)
    for j in range(1, n + 1):
        prev = samples[j - 1][track[j - 1]]
        nxt = samples[j % n]
        sigma, gap = _step_matching(prev, nxt, tau_coin)
        if gap <= tau_coin:
            raise DecompositionError(
                f"ambiguous sheet matching between samples {j - 1} and {j % n} "
                f"(cost gap {gap:.3e}); refine the sampling")
        _check_resolved(prev, nxt[sigma], tau_coin, j)
        track[j] = sigma
    monodromy = track[n]
    seen = np.zeros(Q, dtype=bool)
    pieces = []
    trunc = 0.0
    for start in range(Q):
        if seen[start]:
            continue
        cycle = []
        s = start
        while not seen[s]:
            seen[s] = True
            cycle.append(s)
            s = monodromy[s]
        k = len(cycle)
        gamma = np.concatenate([samples[np.arange(n), track[:n, l]] for l in cycle], axis=0)
        piece, dropped = _fourier_piece(k, gamma, n_max)
        trunc += dropped
        pieces.append(piece)
    return CircleMapDecomposition(pieces, n, trunc)


def _fourier_piece(k, gamma, n_max):
    L = gamma.shape[0]
    c = np.fft.rfft(gamma, axis=0) / L
    nyq = (L - 1) // 2
    use = min(n_max, nyq)
    d = gamma.shape[1]
    a = np.zeros((n_max, d))
    b = np.zeros((n_max, d))
    a0 = 2 * c[0].real
    a[:use] = 2 * c[1:use + 1].real
    b[:use] = -2 * c[1:use + 1].imag
    dropped = float(np.sum(np.abs(c[use + 1:]) ** 2) * 2 * np.pi * 2)
    return Piece(k, a0, a, b, gamma.copy()), dropped


# --- planar rolled harmonic extension ---------------------------------------------------

@dataclass
class ClosedFormEnergies:
    disk_dirichlet: float
    circle_dirichlet: float
    circle_l2: float
    disk_l2: float = float("nan")

    def __iter__(self):
        return iter((self.disk_dirichlet, self.circle_dirichlet, self.circle_l2))


def closed_form_energies(decomp, r=1.0):
    """Energies of the rolled harmonic field of ``decomp`` on the disk D_r and circle rS^1.

    The field is the one whose trace on the unit circle is the decomposed map;
    for a piece of winding order k its n-th mode scales like rho^(n/k).
    """
    r = float(r)
    disk = circ = l2 = dl2 = 0.0
    for p in decomp.pieces:
        k = p.k
        n = np.arange(1, p.n_max + 1)
        e = p.coeff_energy()
        a0sq = float(np.sum(p.a0 ** 2))
        disk += np.pi * np.sum(n * r ** (2 * n / k) * e)
        circ += np.pi * np.sum(n ** 2 / k * r ** (2 * n / k - 1) * e)
        l2 += np.pi * k * (r * a0sq / 2 + np.sum(r ** (2 * n / k + 1) * e))
        dl2 += np.pi * k * (r ** 2 * a0sq / 4 + np.sum(r ** (2 * n / k + 2) * e / (2 * n / k + 2)))
    return ClosedFormEnergies(float(disk), float(circ), float(l2), float(dl2))


class DiskExtension:
    """psi(x) = sum over pieces of sum_{z^k = x/R} [[zeta(z)]] on the disk of radius R."""

    def __init__(self, decomp, radius=1.0):
        self.decomp = decomp
        self.radius = float(radius)
        unit = closed_form_energies(decomp, 1.0)
        R = self.radius
        self.energies = {
            "disk_dirichlet": unit.disk_dirichlet,
            "circle_dirichlet": unit.circle_dirichlet / R,
            "circle_l2": unit.circle_l2 * R,
            "disk_l2": unit.disk_l2 * R * R,
        }
        Q = decomp.Q
        e = self.energies
        self.bounds = {
            "dirichlet_ratio": e["disk_dirichlet"] / (Q * R * e["circle_dirichlet"]) if e["circle_dirichlet"] > 0 else 0.0,
            "l2_ratio": e["disk_l2"] / (0.5 * R * e["circle_l2"]) if e["circle_l2"] > 0 else 0.0,
        }

    def _cover(self, points):
        x = np.atleast_2d(np.asarray(points, float))
        rho = np.hypot(x[:, 0], x[:, 1]) / self.radius
        theta = np.arctan2(x[:, 1], x[:, 0])
        return rho, theta

    def evaluate(self, points):
        rho, theta = self._cover(points)
        out = []
        for p in self.decomp.pieces:
            s = rho ** (1.0 / p.k)
            n = np.arange(1, p.n_max + 1)
            sn = s[:, None] ** n[None, :]
            for j in range(p.k):
                ang = np.multiply.outer((theta + 2 * np.pi * j) / p.k, n)
                out.append(p.a0 / 2 + (sn * np.cos(ang)) @ p.a + (sn * np.sin(ang)) @ p.b)
        return np.stack(out, axis=1)

    def gradient(self, points):
        """d psi / dx for every sheet, shape (n, Q, d, 2); undefined at the origin for k > 1."""
        x = np.atleast_2d(np.asarray(points, float))
        R = self.radius
        xc = (x[:, 0] + 1j * x[:, 1]) / R
        rho, theta = np.abs(xc), np.angle(xc)
        out = []
        for p in self.decomp.pieces:
            n = np.arange(1, p.n_max + 1)
            c = p.a - 1j * p.b                            # zeta = Re sum c_n z^n + a0/2
            for j in range(p.k):
                z = rho ** (1.0 / p.k) * np.exp(1j * (theta + 2 * np.pi * j) / p.k)
                Fp = (n[None, :] * z[:, None] ** (n - 1)[None, :]) @ c     # (npts, d)
                dxdz = R * p.k * z ** (p.k - 1)
                G = Fp / dxdz[:, None]
                out.append(np.stack([G.real, -G.imag], axis=-1))
        return np.stack(out, axis=1)


def harmonic_extension(decomp, radius=1.0):
    return DiskExtension(decomp, radius)


# --- zero-homogeneous extension ----------------------------------------------------------

def sphere_quadrature(j, n_polar=24, n_azimuth=48):
    """Product Gauss rule on S^(j-1) in hyperspherical coordinates: (points (n, j), weights)."""
    if j < 2:
        raise ValueError("need j >= 2")
    az = 2 * np.pi * np.arange(n_azimuth) / n_azimuth
    gx, gw = np.polynomial.legendre.leggauss(n_polar)
    phi = np.pi * (gx + 1) / 2
    wphi = np.pi / 2 * gw
    grids = [phi] * (j - 2) + [az]
    weights = [wphi * np.sin(phi) ** (j - 2 - i) for i in range(j - 2)] + [np.full(n_azimuth, 2 * np.pi / n_azimuth)]
    mesh = np.meshgrid(*grids, indexing="ij")
    W = np.ones_like(mesh[0])
    for i, w in enumerate(weights):
        shape = [1] * len(grids)
        shape[i] = -1
        W = W * w.reshape(shape)
    ang = [g.ravel() for g in mesh]
    x = np.empty((ang[0].size, j))
    s = np.ones(ang[0].size)
    for i in range(j - 1):
        x[:, i] = s * np.cos(ang[i])
        s = s * np.sin(ang[i])
    x[:, j - 1] = s
    return x, W.ravel()


def _tangent_basis(omega):
    n, j = omega.shape
    P = np.eye(j)[None] - np.einsum("ni,nj->nij", omega, omega)
    _, v = np.linalg.eigh(P)
    return np.swapaxes(v[:, :, 1:], 1, 2)          # (n, j-1, j)


def _matched_central(center, plus, minus, h):
    n, Q, d = center.shape
    sp, _ = batch_matchings(center, plus)
    sm, _ = batch_matchings(center, minus)
    fp = np.take_along_axis(plus, sp[..., None], axis=1)
    fm = np.take_along_axis(minus, sm[..., None], axis=1)
    return (fp - fm) / (2 * h)


class HomogeneousExtension:
    def __init__(self, boundary, j, n_polar=24, n_azimuth=48, n_radial=8, fd_step=1e-5):
        self.boundary = boundary
        self.j = j
        omega, w = sphere_quadrature(j, n_polar, n_azimuth)
        phi0 = np.asarray(boundary(omega), float)
        T = _tangent_basis(omega)
        dir_s = np.zeros(len(omega))
        for i in range(j - 1):
            t = T[:, i]
            plus = np.cos(fd_step) * omega + np.sin(fd_step) * t
            minus = np.cos(fd_step) * omega - np.sin(fd_step) * t
            g = _matched_central(phi0, np.asarray(boundary(plus), float), np.asarray(boundary(minus), float), fd_step)
            dir_s += np.einsum("nqd,nqd->n", g, g)
        self.dir_boundary = float(np.sum(w * dir_s))
        self.l2_boundary = float(np.sum(w * np.einsum("nqd,nqd->n", phi0, phi0)))
        gx, gw = np.polynomial.legendre.leggauss(n_radial)
        rho = (gx + 1) / 2
        wr = gw / 2
        dir_b = 0.0
        l2_b = 0.0
        for r, wt in zip(rho, wr):
            x = r * omega
            val = self.evaluate(x)
            dens = np.zeros(len(x))
            step = fd_step * r
            for i in range(j):
                e = np.zeros(j)
                e[i] = step
                g = _matched_central(val, self.evaluate(x + e), self.evaluate(x - e), step)
                dens += np.einsum("nqd,nqd->n", g, g)
            dir_b += wt * r ** (j - 1) * np.sum(w * dens)
            l2_b += wt * r ** (j - 1) * np.sum(w * np.einsum("nqd,nqd->n", val, val))
        self.dir_ball = float(dir_b)
        self.l2_ball = float(l2_b)
        self.ratio = self.dir_ball / self.dir_boundary if self.dir_boundary > 0 else 0.0
        self.constant = 1.0 / (j - 2)

    def evaluate(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        r = np.linalg.norm(x, axis=1, keepdims=True)
        omega = np.where(r > 0, x / np.where(r > 0, r, 1.0), np.eye(x.shape[1])[0])
        return np.asarray(self.boundary(omega), float)

    @property
    def energies(self):
        return {"dir_boundary": self.dir_boundary, "dir_ball": self.dir_ball, "ratio": self.ratio,
                "l2_boundary": self.l2_boundary, "l2_ball": self.l2_ball, "constant": self.constant}


def homogeneous_extension(boundary, j, **kw):
    """psi(x) = phi(x/|x|) on the unit ball of R^j, with quadrature energies."""
    if j < 3:
        raise ValueError("the zero-homogeneous extension needs j >= 3; for j = 2 use harmonic_extension")
    return HomogeneousExtension(boundary, j, **kw)


# --- collar interpolation ---------------------------------------------------------------

@dataclass
class CollarResult:
    lam: float
    t: np.ndarray
    theta: np.ndarray
    values: np.ndarray                  # (n_t, n_theta, Q, d) on the straight-line grid
    dirichlet: float
    tangential: float
    transverse: float
    l2: float
    dir_f1: float
    dir_f2: float
    l2_f1: float
    l2_f2: float
    g_sq: float
    c_l2: float
    c_dir: float
    patched_faces: list = field(default_factory=list)
    endpoint_error: float = 0.0


def _circle_dirichlet(f):
    """Dirichlet energy of the matched piecewise-linear circle map f (n, Q, d) on the unit circle."""
    n = f.shape[0]
    dth = 2 * np.pi / n
    _, cost = batch_matchings(f, np.roll(f, -1, axis=0))
    return float(np.sum(cost) / dth)


def collar_interpolation(f1, f2, lam, n_t=8, n_loop=256, n_sub=8, tau_coin=TAU_COIN):
    """Interpolate from f1 (t = 0) to f2 (t = lam) on S^1 x [0, lam].

    Sheets are joined by straight segments along the pointwise optimal matching
    of f1 and f2.  Where that matching is incompatible with the edge matchings
    (sheets of f2 swap relative to f1), a window about lambda wide around the
    face is filled instead with the rolled harmonic extension of its boundary
    loop.
    """
    f1 = np.asarray(f1, float)
    f2 = np.asarray(f2, float)
    if f1.shape != f2.shape or f1.ndim != 3:
        raise ValueError("f1 and f2 must be sampled on the same grid, shape (n_theta, Q, d)")
    if not 0 < lam < 1:
        raise ValueError("collar thickness must satisfy 0 < lambda < 1")
    n, Q, d = f1.shape
    dth = 2 * np.pi / n
    theta = dth * np.arange(n)
    sig, gcost = batch_matchings(f1, f2)                    # f1[l] <-> f2[sig[l]]
    f2m = np.take_along_axis(f2, sig[..., None], axis=1)    # f2 aligned with f1 pointwise
    D = f2m - f1
    nxt = (np.arange(n) + 1) % n
    p1, _ = batch_matchings(f1, f1[nxt])
    p2, _ = batch_matchings(f2m, f2m[nxt])
    # consistent when the pointwise-matched f2 follows the same edge pairing as f1
    a1 = np.take_along_axis(f1[nxt], p1[..., None], axis=1)
    b_via_f1 = np.take_along_axis(f2m[nxt], p1[..., None], axis=1)
    b_via_f2 = np.take_along_axis(f2m[nxt], p2[..., None], axis=1)
    consistent = np.all(np.linalg.norm(b_via_f1 - b_via_f2, axis=-1) <= tau_coin, axis=1)
    sA = (a1 - f1) / dth                                    # slopes of f1 along each edge
    sB = (b_via_f1 - f2m) / dth
    D1 = np.take_along_axis(D[nxt], p1[..., None], axis=1)
    tang_f = lam * dth * (np.einsum("nqd,nqd->n", sA, sA) + np.einsum("nqd,nqd->n", sA, sB)
                          + np.einsum("nqd,nqd->n", sB, sB)) / 3
    trans_f = dth / (3 * lam) * (np.einsum("nqd,nqd->n", D, D) + np.einsum("nqd,nqd->n", D, D1)
                                 + np.einsum("nqd,nqd->n", D1, D1))
    # L2 of the bilinear sheets, 2x2 Gauss points per face
    gx = np.array([0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3)])
    l2_f = np.zeros(n)
    for s in gx:
        for tau in gx:
            val = (1 - s) * ((1 - tau) * f1 + tau * a1) + s * ((1 - tau) * f2m + tau * b_via_f1)
            l2_f += 0.25 * lam * dth * np.einsum("nqd,nqd->n", val, val)
    windows = _obstruction_windows(~consistent, int(np.ceil(lam / dth)))
    free = np.ones(n, dtype=bool)
    tang = trans = l2 = 0.0
    patched = []
    if windows:
        p2r, _ = batch_matchings(f2, f2[nxt])
        for a, L in windows:
            e = _patch_window(f1, f2, f2m, p1, p2r, a, L, dth, lam, n_loop, n_sub, tau_coin)
            tang += e["tangential"]
            trans += e["transverse"]
            l2 += e["l2"]
            faces = (a + np.arange(L)) % n
            free[faces] = False
            patched.extend(int(j) for j in faces)
        logger.info("collar: %d faces in %d windows patched by harmonic extension", len(patched), len(windows))
    tang += float(np.sum(tang_f[free]))
    trans += float(np.sum(trans_f[free]))
    l2 += float(np.sum(l2_f[free]))
    ts = lam * np.arange(n_t + 1) / n_t
    s = (ts / lam)[:, None, None, None]
    values = (1 - s) * f1[None] + s * f2m[None]
    endpoint_error = float(max(np.abs(values[0] - f1).max(),
                               np.max(np.sqrt(batch_matchings(values[-1], f2)[1]))))
    dir1, dir2 = _circle_dirichlet(f1), _circle_dirichlet(f2)
    l2_1 = float(dth * np.sum(f1 ** 2))
    l2_2 = float(dth * np.sum(f2 ** 2))
    gsq = float(dth * np.sum(gcost))
    dirichlet = float(tang + trans)
    denom_dir = lam * (dir1 + dir2) + gsq / lam
    denom_l2 = lam * (l2_1 + l2_2)
    return CollarResult(
        lam=lam, t=ts, theta=theta, values=values, dirichlet=dirichlet,
        tangential=float(tang), transverse=float(trans), l2=float(l2),
        dir_f1=dir1, dir_f2=dir2, l2_f1=l2_1, l2_f2=l2_2, g_sq=gsq,
        c_l2=float(l2) / denom_l2 if denom_l2 > 0 else 0.0,
        c_dir=dirichlet / denom_dir if denom_dir > 0 else 0.0,
        patched_faces=patched, endpoint_error=endpoint_error)


def _obstruction_windows(bad, w):
    """Circular runs of faces within w faces of an obstructed face, as (first face, length)."""
    n = bad.size
    if not bad.any():
        return []
    cover = np.zeros(n, dtype=bool)
    for j in np.flatnonzero(bad):
        cover[(j + np.arange(-w, w + 1)) % n] = True
    if cover.all():
        raise ValueError("collar obstructions cover the whole circle; use a smaller lambda or finer sampling")
    start = int(np.argmin(cover))                  # a free face, so runs do not wrap past it
    runs = []
    j = 0
    while j < n:
        f = (start + j) % n
        if cover[f]:
            L = 0
            while j < n and cover[(start + j) % n]:
                L += 1
                j += 1
            runs.append((f, L))
        else:
            j += 1
    return runs


def _patch_window(f1, f2, f2m, p1, p2, a, L, dth, lam, n_loop, n_sub, tau):
    """Energy pieces of a run of L faces starting at face a, filled with the rolled
    harmonic extension of the boundary loop of the rectangle, pulled back through
    the square-to-disk map."""
    from .mesh import square_mesh
    from .qfield import DiscreteQField, l2_norm_sq
    from .scene_geometry import FlatScene

    n = f1.shape[0]

    def edge_value(f, perm, x):
        j = min(int(np.floor(x)), L - 1)
        fr = x - j
        i = (a + j) % n
        return (1 - fr) * f[i] + fr * f[(i + 1) % n][perm[i]]

    def loop_value(x, t):
        # x in [0, 1] along the window, t in [0, 1] across the collar
        if t <= 0.0:
            return edge_value(f1, p1, x * L)
        if t >= 1.0:
            return edge_value(f2, p2, x * L)
        i = a % n if x <= 0.0 else (a + L) % n
        return (1 - t) * f1[i] + t * f2m[i]

    alpha = 2 * np.pi * (np.arange(n_loop) + 0.5) / n_loop
    c, s = np.cos(alpha), np.sin(alpha)
    sq = np.clip(np.stack([c, s], 1) / np.maximum(np.abs(c), np.abs(s))[:, None], -1.0, 1.0)
    loop = np.array([loop_value((px + 1) / 2, (py + 1) / 2) for px, py in sq])
    decomp = decompose_irreducible(loop, tau)
    ext = harmonic_extension(decomp, 1.0)
    d = f1.shape[2]
    scene = FlatScene(2, 1, max(0, d - 3))
    mesh = square_mesh(scene, 1.0, 1.0 / min(64, max(n_sub, 2 * L)))
    u, v = mesh.chart[:, 0], mesh.chart[:, 1]
    px, py = 2 * u - 1, 2 * v - 1
    two = np.hypot(px, py)
    scale = np.where(two > 0, np.maximum(np.abs(px), np.abs(py)) / np.where(two > 0, two, 1.0), 0.0)
    vals = ext.evaluate(np.stack([px * scale, py * scale], 1))
    for i in np.flatnonzero(mesh.boundary):
        vals[i] = loop_value(u[i], v[i])
    pad = np.zeros((len(vals), vals.shape[1], scene.d))
    pad[:, :, :d] = vals
    fx = DiscreteQField(mesh, pad)
    grads = fx.cell_gradients()
    gu, gv = grads[:, :, :, 0], grads[:, :, :, 1]
    W = L * dth
    return {
        "tangential": float(np.sum(mesh.vol * np.einsum("nqd,nqd->n", gu, gu)) * lam / W),
        "transverse": float(np.sum(mesh.vol * np.einsum("nqd,nqd->n", gv, gv)) * W / lam),
        "l2": float(l2_norm_sq(fx) * W * lam),
        "pieces": decomp.winding_orders,
    }


# --- text serialization ------------------------------------------------------------------

def dumps_decomposition(decomp):
    lines = [f"qjacobi-decomposition 1 n_samples {decomp.n_samples} pieces {len(decomp.pieces)}"]
    for p in decomp.pieces:
        lines.append(f"piece k {p.k} d {p.d} n_max {p.n_max}")
        lines.append("a0 " + " ".join(repr(float(x)) for x in p.a0))
        for i in range(p.n_max):
            lines.append(f"mode {i + 1} " + " ".join(repr(float(x)) for x in np.concatenate([p.a[i], p.b[i]])))
    return "\n".join(lines) + "\n"


def loads_decomposition(text):
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not rows or rows[0][:2] != ["qjacobi-decomposition", "1"]:
        raise DecompositionError("not a version 1 decomposition file")
    n_samples = int(rows[0][3])
    modes = []
    i = 1
    while i < len(rows):
        head = rows[i]
        if head[0] != "piece":
            raise DecompositionError(f"line {i + 1}: expected 'piece', got {head[0]!r}")
        k, d, n_max = int(head[2]), int(head[4]), int(head[6])
        a0 = np.array([float(x) for x in rows[i + 1][1:]])
        ab = np.array([[float(x) for x in r[2:]] for r in rows[i + 2:i + 2 + n_max]])
        if a0.size != d or ab.shape != (n_max, 2 * d):
            raise DecompositionError(f"line {i + 1}: piece data has the wrong shape")
        modes.append((k, a0, ab[:, :d], ab[:, d:]))
        i += 2 + n_max
    return CircleMapDecomposition.from_modes(modes, n_samples)
