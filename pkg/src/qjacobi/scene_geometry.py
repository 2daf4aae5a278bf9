"""Analytic ambient geometries: a minimal submanifold Sigma inside M inside R^d.

Two families are built in:

* ``flat_disk``: Sigma = R^m x 0 inside M = R^(m+k) x 0 inside R^(m+k+K).
* ``equatorial_sphere``: Sigma = S^m (the equator, totally geodesic) inside
  the unit sphere M = S^(m+k) in R^(m+k+1).  k defaults to 1.

All points are handled as embedded vectors in R^d.  Chart coordinates are
exponential (geodesic polar) coordinates about the scene's base pole.
"""

import numpy as np

FRAME_TOL = 1e-8


class SceneError(ValueError):
    pass


class Scene:
    name = "abstract"

    def __init__(self, m, k, d, params):
        self.m = m
        self.k = k
        self.d = d
        self.params = dict(params)

    # --- projections and frames -------------------------------------------------
    def normal_frame(self, x):
        """Orthonormal normal-in-M frame, shape (n, k, d)."""
        x = np.atleast_2d(x)
        nu = np.zeros((self.k, self.d))
        nu[np.arange(self.k), self._normal_slots()] = 1.0
        return np.broadcast_to(nu, (x.shape[0], self.k, self.d))

    def normal_projector(self, x):
        nu = self.normal_frame(x)
        return np.einsum("nai,naj->nij", nu, nu)

    def tangent_projector(self, x):
        raise NotImplementedError

    def tangent_frame(self, x):
        """Orthonormal frame of T_x Sigma, shape (n, m, d)."""
        P = self.tangent_projector(np.atleast_2d(x))
        w, v = np.linalg.eigh(P)
        return np.swapaxes(v[:, :, -self.m:], 1, 2)

    def ambient_tangent_projector(self, z):
        raise NotImplementedError

    # --- curvature -----------------------------------------------------------------
    def second_form(self, x, X, Y):
        """A(X, Y) of Sigma in M for tangent X, Y; both built-in scenes are totally geodesic."""
        return np.zeros(np.broadcast_shapes(np.shape(X), np.shape(Y)))

    def ambient_second_form(self, z, X, Y):
        raise NotImplementedError

    def curvature(self, z, X, Y, W):
        """Riemann tensor R(X, Y)W of M."""
        raise NotImplementedError

    def sup_norms(self):
        """(sup|A|, sup|Abar|, sup|R|) over the scene."""
        raise NotImplementedError

    # --- exponentials ------------------------------------------------------------
    def exp_sigma(self, p, v):
        raise NotImplementedError

    def log_sigma(self, p, x):
        raise NotImplementedError

    def exp_normal(self, x, w):
        raise NotImplementedError

    def distance_sigma(self, p, x):
        return np.linalg.norm(self.log_sigma(p, x), axis=-1)

    def project_to_sigma(self, y):
        raise NotImplementedError

    def tangent_basis_at(self, p):
        """An orthonormal basis of T_p Sigma (m, d) used for exponential coordinates."""
        raise NotImplementedError

    def chart_to_point(self, c, pole=None):
        """Exponential coordinates about ``pole`` (default: the scene's base pole)."""
        pole = self.base_pole if pole is None else np.asarray(pole, float)
        basis = self.tangent_basis_at(pole)
        return self.exp_sigma(pole, np.atleast_2d(c) @ basis)

    def point_to_chart(self, x, pole=None):
        pole = self.base_pole if pole is None else np.asarray(pole, float)
        basis = self.tangent_basis_at(pole)
        return self.log_sigma(pole, np.atleast_2d(x)) @ basis.T

    # --- quadratic forms used in energies -----------------------------------------
    def curvature_forms(self, x):
        """Symmetric d x d matrices (ricci, a_form, abar_form) at points x.

        For u in the normal fiber at x:
          u^T ricci u     = sum_i <R(u, xi_i) xi_i, u>
          u^T a_form u    = sum_ij <A(xi_i, xi_j), u>^2
          u^T abar_form u = sum_i |Abar(xi_i, u)|^2
        The matrices vanish on the orthogonal complement of the fiber.
        """
        x = np.atleast_2d(x)
        n = x.shape[0]
        xi = self.tangent_frame(x)
        nu = self.normal_frame(x)
        k, d, m = self.k, self.d, self.m
        ric = np.zeros((n, k, k))
        aform = np.zeros((n, k, k))
        abar = np.zeros((n, k, k))
        for a in range(k):
            ua = nu[:, a]
            for b in range(k):
                ub = nu[:, b]
                for i in range(m):
                    Ri = self.curvature(x, ua, xi[:, i], xi[:, i])
                    ric[:, a, b] += np.einsum("ni,ni->n", Ri, ub)
                    ba = self.ambient_second_form(x, xi[:, i], ua)
                    bb = self.ambient_second_form(x, xi[:, i], ub)
                    abar[:, a, b] += np.einsum("ni,ni->n", ba, bb)
                    for j in range(m):
                        Aij = self.second_form(x, xi[:, i], xi[:, j])
                        aform[:, a, b] += np.einsum("ni,ni->n", Aij, ua) * np.einsum("ni,ni->n", Aij, ub)
        lift = lambda S: np.einsum("nai,nab,nbj->nij", nu, S, nu)
        return lift(0.5 * (ric + np.swapaxes(ric, 1, 2))), lift(aform), lift(abar)

    def check_in_fiber(self, x, u, tol=FRAME_TOL):
        x = np.atleast_2d(x)
        u = np.atleast_2d(u)
        P = self.normal_projector(x)
        off = u - np.einsum("nij,nj->ni", P, u)
        dev = float(np.abs(off).max()) if off.size else 0.0
        if dev > tol * max(1.0, float(np.abs(u).max())):
            raise SceneError(f"vector not in the normal fiber (off-fiber component {dev:.3e})")

    def describe(self):
        return {"name": self.name, "params": self.params, "m": self.m, "k": self.k, "d": self.d}


class FlatScene(Scene):
    name = "flat_disk"
    inj = np.inf

    def __init__(self, m=2, k=1, K=0):
        if m not in (1, 2, 3):
            raise SceneError(f"flat_disk needs m in {{1, 2, 3}}, got {m}")
        if k < 1 or K < 0:
            raise SceneError(f"flat_disk needs k >= 1 and K >= 0, got k={k}, K={K}")
        super().__init__(m, k, m + k + K, {"m": m, "k": k, "K": K})
        self.K = K
        self.base_pole = np.zeros(self.d)

    def _normal_slots(self):
        return np.arange(self.m, self.m + self.k)

    def tangent_projector(self, x):
        x = np.atleast_2d(x)
        P = np.zeros((self.d, self.d))
        P[: self.m, : self.m] = np.eye(self.m)
        return np.broadcast_to(P, (x.shape[0], self.d, self.d))

    def tangent_frame(self, x):
        x = np.atleast_2d(x)
        xi = np.eye(self.d)[: self.m]
        return np.broadcast_to(xi, (x.shape[0], self.m, self.d))

    def ambient_tangent_projector(self, z):
        z = np.atleast_2d(z)
        P = np.zeros((self.d, self.d))
        P[: self.m + self.k, : self.m + self.k] = np.eye(self.m + self.k)
        return np.broadcast_to(P, (z.shape[0], self.d, self.d))

    def ambient_second_form(self, z, X, Y):
        return np.zeros(np.broadcast_shapes(np.shape(X), np.shape(Y)))

    def curvature(self, z, X, Y, W):
        return np.zeros(np.broadcast_shapes(np.shape(X), np.shape(Y), np.shape(W)))

    def curvature_forms(self, x):
        x = np.atleast_2d(x)
        z = np.zeros((x.shape[0], self.d, self.d))
        return z, z.copy(), z.copy()

    def sup_norms(self):
        return 0.0, 0.0, 0.0

    def exp_sigma(self, p, v):
        return np.asarray(p, float) + np.asarray(v, float)

    def log_sigma(self, p, x):
        return np.asarray(x, float) - np.asarray(p, float)

    def exp_normal(self, x, w):
        return np.asarray(x, float) + np.asarray(w, float)

    def project_to_sigma(self, y):
        y = np.array(y, dtype=float)
        y[..., self.m:] = 0.0
        return y

    def tangent_basis_at(self, p):
        return np.eye(self.d)[: self.m]


class EquatorialSphere(Scene):
    name = "equatorial_sphere"
    inj = np.pi

    def __init__(self, m=2, k=1):
        if m < 1 or k < 1:
            raise SceneError(f"equatorial_sphere needs m >= 1 and k >= 1, got m={m}, k={k}")
        super().__init__(m, k, m + k + 1, {"m": m, "k": k})
        self.base_pole = np.zeros(self.d)
        self.base_pole[m] = 1.0

    def _normal_slots(self):
        return np.arange(self.m + 1, self.m + 1 + self.k)

    def tangent_projector(self, x):
        x = np.atleast_2d(x)
        n = x.shape[0]
        P = np.zeros((n, self.d, self.d))
        s = self.m + 1
        P[:, :s, :s] = np.eye(s) - np.einsum("ni,nj->nij", x[:, :s], x[:, :s])
        return P

    def ambient_tangent_projector(self, z):
        z = np.atleast_2d(z)
        return np.eye(self.d) - np.einsum("ni,nj->nij", z, z)

    def ambient_second_form(self, z, X, Y):
        # unit sphere in R^d: Abar(X, Y) = -<X, Y> z
        return -np.einsum("ni,ni->n", np.atleast_2d(X), np.atleast_2d(Y))[:, None] * np.atleast_2d(z)

    def curvature(self, z, X, Y, W):
        # constant curvature 1: R(X, Y)W = <Y, W> X - <X, W> Y
        X, Y, W = np.atleast_2d(X), np.atleast_2d(Y), np.atleast_2d(W)
        yw = np.einsum("ni,ni->n", Y, W)[:, None]
        xw = np.einsum("ni,ni->n", X, W)[:, None]
        return yw * X - xw * Y

    def curvature_forms(self, x):
        x = np.atleast_2d(x)
        n = x.shape[0]
        Pn = self.normal_projector(x)
        # Abar(xi, u) = -<xi, u> x vanishes for tangent xi and normal u
        zero = np.zeros((n, self.d, self.d))
        return self.m * Pn, zero, zero.copy()

    def sup_norms(self):
        # |A| = 0, |Abar| = 1 (unit sphere), |R| = 2 as a (3,1)-tensor bound
        return 0.0, 1.0, 2.0

    @staticmethod
    def _great_circle(p, v):
        p = np.asarray(p, float)
        v = np.asarray(v, float)
        t = np.linalg.norm(v, axis=-1, keepdims=True)
        safe = np.where(t > 0, t, 1.0)
        return np.cos(t) * p + np.where(t > 0, np.sin(t) / safe, 1.0) * v

    def exp_sigma(self, p, v):
        v = np.asarray(v, float)
        if np.any(np.linalg.norm(v, axis=-1) >= self.inj):
            raise SceneError(f"exponential radius exceeds the injectivity bound {self.inj:.6g}")
        return self._great_circle(p, v)

    def exp_normal(self, x, w):
        w = np.asarray(w, float)
        if np.any(np.linalg.norm(w, axis=-1) >= self.inj):
            raise SceneError(f"normal exponential radius exceeds the injectivity bound {self.inj:.6g}")
        return self._great_circle(x, w)

    def log_sigma(self, p, x):
        p = np.asarray(p, float)
        x = np.asarray(x, float)
        c = np.clip(np.sum(p * x, axis=-1, keepdims=True), -1.0, 1.0)
        w = x - c * p
        s = np.linalg.norm(w, axis=-1, keepdims=True)
        theta = np.arctan2(s, c)
        return np.where(s > 0, theta / np.where(s > 0, s, 1.0), 0.0) * w

    def project_to_sigma(self, y):
        y = np.array(y, dtype=float)
        y[..., self.m + 1:] = 0.0
        return y / np.linalg.norm(y, axis=-1, keepdims=True)

    def tangent_basis_at(self, p):
        p = np.asarray(p, float)
        s = self.m + 1
        # Gram-Schmidt of the standard basis of R^(m+1) against p, skipping the most parallel
        order = np.argsort(-np.abs(p[:s]), kind="stable")
        basis = []
        for i in sorted(order[1:]):
            e = np.zeros(self.d)
            e[i] = 1.0
            e = e - np.dot(e, p) * p
            for b in basis:
                e = e - np.dot(e, b) * b
            basis.append(e / np.linalg.norm(e))
        return np.array(basis)


SCENES = {
    "flat_disk": "Sigma = R^m x 0 in M = R^(m+k) x 0 in R^(m+k+K); params m in {1,2,3}, k >= 1, K >= 0",
    "equatorial_sphere": "Sigma = S^m equator in M = S^(m+k) in R^(m+k+1); params m >= 1, k >= 1 (default 1)",
}


def builtin_scene(name, params=None):
    params = dict(params or {})
    try:
        if name == "flat_disk":
            allowed = {"m", "k", "K"}
            ctor = lambda p: FlatScene(int(p.get("m", 2)), int(p.get("k", 1)), int(p.get("K", 0)))
        elif name == "equatorial_sphere":
            allowed = {"m", "k"}
            ctor = lambda p: EquatorialSphere(int(p.get("m", 2)), int(p.get("k", 1)))
        else:
            raise SceneError(f"unknown scene {name!r}; available: {', '.join(SCENES)}")
    except (TypeError, ValueError) as exc:
        raise SceneError(str(exc)) from exc
    extra = set(params) - allowed
    if extra:
        raise SceneError(f"unknown parameters for {name}: {sorted(extra)}")
    return ctor(params)


def partial_ricci(scene, x, u, v):
    """sum_i <R(u, xi_i) xi_i, v> for normal u, v at the point x of Sigma."""
    x = np.atleast_2d(np.asarray(x, float))
    u = np.atleast_2d(np.asarray(u, float))
    v = np.atleast_2d(np.asarray(v, float))
    scene.check_in_fiber(x, u)
    scene.check_in_fiber(x, v)
    xi = scene.tangent_frame(x)
    total = 0.0
    for i in range(scene.m):
        total = total + np.einsum("ni,ni->n", scene.curvature(x, u, xi[:, i], xi[:, i]), v)
    return total if total.size > 1 else float(total[0])


def second_form_contract(scene, x, u):
    """(sum_ij <A(xi_i, xi_j), u>^2, [|Abar(xi_i, u)|^2 for i = 1..m]) at one point."""
    x = np.atleast_2d(np.asarray(x, float))
    u = np.atleast_2d(np.asarray(u, float))
    scene.check_in_fiber(x, u)
    xi = scene.tangent_frame(x)
    a_sq = 0.0
    for i in range(scene.m):
        for j in range(scene.m):
            a_sq += float(np.einsum("ni,ni->", scene.second_form(x, xi[:, i], xi[:, j]), u) ** 2)
    row = np.array([float(np.sum(scene.ambient_second_form(x, xi[:, i], u) ** 2)) for i in range(scene.m)])
    return a_sq, row


def exponentials(scene, p, v=None, w=None):
    """Geodesic exponential on Sigma (tangent v) or normal exponential in M (normal w)."""
    if (v is None) == (w is None):
        raise ValueError("pass exactly one of v (tangent) or w (normal)")
    if v is not None:
        norm = np.linalg.norm(np.asarray(v, float), axis=-1)
        if np.any(norm >= scene.inj):
            raise SceneError(f"|v| exceeds the injectivity bound {scene.inj:.6g}")
        return scene.exp_sigma(p, v)
    return scene.exp_normal(p, w)
