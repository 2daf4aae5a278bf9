"""Simplicial meshes of domains in Sigma.

Vertices lie exactly on Sigma; cells are flat simplices in R^d.  Every mesh
keeps exponential coordinates of its vertices about a pole, which is what the
geodesic-ball quadrature in the frequency module works in.
"""

import math

import numpy as np
from scipy.spatial import cKDTree

from .scene_geometry import EquatorialSphere, FlatScene, SceneError


class MeshError(ValueError):
    pass


class Mesh:
    def __init__(self, scene, points, cells, boundary, pole, chart, spec):
        self.scene = scene
        self.points = np.ascontiguousarray(points, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.intp)
        self.boundary = np.asarray(boundary, dtype=bool)
        self.pole = np.asarray(pole, dtype=float)
        self.chart = np.ascontiguousarray(chart, dtype=float)
        self.spec = dict(spec)
        self.m = self.cells.shape[1] - 1
        if self.m != scene.m:
            raise MeshError(f"cells are {self.m}-simplices but the scene has m={scene.m}")
        self._geometry()
        self._edges()

    @property
    def n_vertices(self):
        return self.points.shape[0]

    @property
    def n_cells(self):
        return self.cells.shape[0]

    @property
    def radius(self):
        """Geodesic distance of every vertex from the pole."""
        return np.linalg.norm(self.chart, axis=1)

    def _geometry(self):
        X = self.points[self.cells]                      # (nc, m+1, d)
        E = np.swapaxes(X[:, 1:] - X[:, :1], 1, 2)       # (nc, d, m)
        g = np.einsum("nai,naj->nij", E, E)
        det = np.linalg.det(g)
        if np.any(det <= 0):
            raise MeshError("degenerate cell in mesh")
        self.ginv = np.linalg.inv(g)
        self.vol = np.sqrt(det) / math.factorial(self.m)
        W = np.einsum("nai,nij->naj", E, self.ginv)      # (nc, d, m)
        grad = np.empty((self.n_cells, self.m + 1, self.scene.d))
        grad[:, 1:] = np.swapaxes(W, 1, 2)
        grad[:, 0] = -grad[:, 1:].sum(axis=1)
        self.edge_vectors = E
        self.grad_basis = grad                            # gradients of barycentric functions
        self.cell_projector = np.einsum("nai,nbi->nab", E, W)   # orthogonal projector onto cell plane
        self.centroids = self.scene.project_to_sigma(X.mean(axis=1))
        m = self.m
        self.mass_local = (np.ones((m + 1, m + 1)) + np.eye(m + 1)) / ((m + 1) * (m + 2))
        vert_area = np.zeros(self.n_vertices)
        np.add.at(vert_area, self.cells.ravel(), np.repeat(self.vol / (m + 1), m + 1))
        self.vertex_area = vert_area

    def _edges(self):
        m = self.m
        pairs = []
        for i in range(m + 1):
            for j in range(i + 1, m + 1):
                pairs.append(np.sort(self.cells[:, [i, j]], axis=1))
        allpairs = np.concatenate(pairs)
        self.edges = np.unique(allpairs, axis=0)
        n = self.n_vertices
        nbrs = [[] for _ in range(n)]
        for a, b in self.edges:
            nbrs[a].append(b)
            nbrs[b].append(a)
        self.neighbors = [np.array(sorted(v), dtype=np.intp) for v in nbrs]

    def area(self, region=None):
        return float(np.sum(self.vol[self.region_mask(region)]))

    def region_mask(self, region):
        if region is None:
            return np.ones(self.n_cells, dtype=bool)
        region = np.asarray(region)
        if region.dtype == bool:
            if region.shape != (self.n_cells,):
                raise MeshError("boolean region mask must have one entry per cell")
            return region
        mask = np.zeros(self.n_cells, dtype=bool)
        mask[region] = True
        return mask

    def ball_cells(self, r):
        """Cells whose vertices all lie within geodesic radius r of the pole."""
        return np.all(self.radius[self.cells] <= r * (1 + 1e-12), axis=1)

    def stiffness_local(self):
        """Per-cell P1 stiffness matrices vol * <grad phi_i, grad phi_j>, shape (nc, m+1, m+1)."""
        return self.vol[:, None, None] * np.einsum("nid,njd->nij", self.grad_basis, self.grad_basis)

    def boundary_facets(self):
        m = self.m
        faces = []
        for i in range(m + 1):
            idx = [j for j in range(m + 1) if j != i]
            faces.append(np.sort(self.cells[:, idx], axis=1))
        allf = np.concatenate(faces)
        uniq, counts = np.unique(allf, axis=0, return_counts=True)
        return uniq[counts == 1]

    def boundary_loops(self):
        """Closed loops of boundary vertices (m=2) in traversal order."""
        if self.m != 2:
            raise MeshError("boundary loops are defined for m=2 meshes")
        facets = self.boundary_facets()
        adj = {}
        for a, b in facets:
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
        seen = set()
        loops = []
        for start in sorted(adj):
            if start in seen:
                continue
            loop = [start]
            seen.add(start)
            prev, cur = None, start
            while True:
                nxt = [v for v in adj[cur] if v != prev]
                nxt = nxt[0] if nxt else None
                if nxt is None or nxt == start:
                    break
                loop.append(nxt)
                seen.add(nxt)
                prev, cur = cur, nxt
            loops.append(np.array(loop, dtype=np.intp))
        return loops

    def locator(self):
        if not hasattr(self, "_locator"):
            self._locator = Locator(self.chart, self.cells)
        return self._locator

    def log_coords(self, p):
        """Exponential coordinates of all vertices about an arbitrary pole p on Sigma."""
        p = np.asarray(p, float)
        if np.allclose(p, self.pole, atol=1e-14, rtol=0):
            return self.chart
        basis = self.scene.tangent_basis_at(p)
        return self.scene.log_sigma(p, self.points) @ basis.T

    def describe(self):
        return {"scene": self.scene.describe(), "mesh": self.spec,
                "vertices": self.n_vertices, "cells": self.n_cells}


class Locator:
    """Point location in chart coordinates via a KD-tree over cell centroids."""

    def __init__(self, coords, cells, k=12):
        self.coords = np.asarray(coords, float)
        self.cells = cells
        self.k = min(k, cells.shape[0])
        self.tree = cKDTree(self.coords[cells].mean(axis=1))
        m = cells.shape[1] - 1
        V = self.coords[cells]
        T = np.swapaxes(V[:, 1:] - V[:, :1], 1, 2)      # (nc, m, m)
        self.Tinv = np.linalg.inv(T)
        self.origin = V[:, 0]
        self.m = m

    def bary(self, cell, q):
        lam = np.einsum("nij,nj->ni", self.Tinv[cell], q - self.origin[cell])
        return np.concatenate([1 - lam.sum(axis=1, keepdims=True), lam], axis=1)

    def locate(self, q, tol=1e-10):
        """Return (cell, barycentric) for each query; cell = -1 when outside the mesh."""
        q = np.atleast_2d(np.asarray(q, float))
        n = q.shape[0]
        cell = np.full(n, -1, dtype=np.intp)
        lam = np.zeros((n, self.m + 1))
        best = np.full(n, -np.inf)
        k = self.k
        _, cand = self.tree.query(q, k=k)
        cand = np.atleast_2d(cand).reshape(n, -1)
        for j in range(cand.shape[1]):
            c = cand[:, j]
            b = self.bary(c, q)
            score = b.min(axis=1)
            # the most-inside candidate wins; ties keep the nearer centroid
            take = score > best + 1e-13
            cell[take] = c[take]
            lam[take] = b[take]
            best[take] = score[take]
        outside = best < -tol
        cell[outside] = -1
        return cell, lam


# --- builders ---------------------------------------------------------------------

def _ring_counts(J, radius, min_first=8):
    h = radius / J
    counts = [1]
    for j in range(1, J + 1):
        counts.append(max(min_first, int(math.ceil(2 * math.pi * (j * h) / h - 1e-9))))
    return counts


def _merge_rings(inner, outer):
    """Triangulate the strip between two closed rings of vertex indices (CCW)."""
    tris = []
    na, nb = len(inner), len(outer)
    i = o = 0
    while i < na or o < nb:
        ta = (i + 1) / na if i < na else np.inf
        tb = (o + 1) / nb if o < nb else np.inf
        if ta <= tb:
            tris.append((inner[i % na], outer[o % nb], inner[(i + 1) % na]))
            i += 1
        else:
            tris.append((inner[i % na], outer[o % nb], outer[(o + 1) % nb]))
            o += 1
    return tris


def _planar_rings(radii, counts):
    pts = []
    rings = []
    for rho, n in zip(radii, counts):
        if n == 1:
            rings.append([len(pts)])
            pts.append((0.0, 0.0))
            continue
        start = len(pts)
        ang = 2 * np.pi * np.arange(n) / n
        pts.extend(zip(rho * np.cos(ang), rho * np.sin(ang)))
        rings.append(list(range(start, start + n)))
    return np.array(pts), rings


def _triangulate_rings(rings):
    tris = []
    for a, b in zip(rings[:-1], rings[1:]):
        if len(a) == 1:
            n = len(b)
            tris.extend((a[0], b[i], b[(i + 1) % n]) for i in range(n))
        else:
            tris.extend(_merge_rings(a, b))
    return np.array(tris, dtype=np.intp)


def _orient(chart, cells):
    V = chart[cells]
    e1, e2 = V[:, 1] - V[:, 0], V[:, 2] - V[:, 0]
    flip = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] < 0
    cells = cells.copy()
    cells[flip, 1], cells[flip, 2] = cells[flip, 2].copy(), cells[flip, 1].copy()
    return cells


def _embed_chart(scene, pole, chart):
    basis = scene.tangent_basis_at(pole)
    return scene.exp_sigma(pole, chart @ basis)


def _default_pole(scene, pole):
    if pole is None:
        return scene.base_pole.copy()
    pole = np.asarray(pole, float)
    if pole.shape != (scene.d,):
        raise MeshError(f"pole must be a point of R^{scene.d}")
    if np.linalg.norm(scene.project_to_sigma(pole) - pole) > 1e-10:
        raise MeshError("pole is not a point of Sigma")
    return pole


def disk_mesh(scene, radius=1.0, h=1 / 16, pole=None):
    """Geodesic ball of the given radius about ``pole`` (a flat disk or a spherical cap)."""
    pole = _default_pole(scene, pole)
    if radius >= scene.inj:
        raise SceneError(f"radius {radius} exceeds the injectivity bound {scene.inj}")
    spec = {"kind": "disk", "radius": float(radius), "h": float(h), "pole": [float(x) for x in pole]}
    m = scene.m
    J = max(1, int(math.ceil(radius / h - 1e-9)))
    if m == 1:
        chart = np.linspace(-radius, radius, 2 * J + 1)[:, None]
        cells = np.stack([np.arange(2 * J), np.arange(1, 2 * J + 1)], axis=1)
        boundary = np.zeros(2 * J + 1, dtype=bool)
        boundary[[0, -1]] = True
    elif m == 2:
        radii = radius * np.arange(J + 1) / J
        chart, rings = _planar_rings(radii, _ring_counts(J, radius))
        cells = _orient(chart, _triangulate_rings(rings))
        boundary = np.zeros(len(chart), dtype=bool)
        boundary[rings[-1]] = True
    elif m == 3:
        chart, cells, boundary = _kuhn_ball(radius, h)
    else:
        raise MeshError(f"disk meshes are available for m <= 3, got m={m}")
    points = _embed_chart(scene, pole, chart)
    return Mesh(scene, points, cells, boundary, pole, chart, spec)


def annulus_mesh(scene, r_in, r_out, h=1 / 16, pole=None):
    if scene.m != 2:
        raise MeshError("annulus meshes need m=2")
    if not 0 < r_in < r_out:
        raise MeshError("need 0 < r_in < r_out")
    pole = _default_pole(scene, pole)
    spec = {"kind": "annulus", "r_in": float(r_in), "r_out": float(r_out), "h": float(h),
            "pole": [float(x) for x in pole]}
    J = max(1, int(math.ceil((r_out - r_in) / h - 1e-9)))
    radii = r_in + (r_out - r_in) * np.arange(J + 1) / J
    counts = [max(8, int(math.ceil(2 * math.pi * r / h - 1e-9))) for r in radii]
    chart, rings = _planar_rings(radii, counts)
    cells = _orient(chart, _triangulate_rings(rings))
    boundary = np.zeros(len(chart), dtype=bool)
    boundary[rings[0]] = True
    boundary[rings[-1]] = True
    points = _embed_chart(scene, pole, chart)
    return Mesh(scene, points, cells, boundary, pole, chart, spec)


def square_mesh(scene, side=1.0, h=1 / 16, pole=None):
    """Axis-aligned square [0, side]^2 in exponential coordinates, split into right triangles."""
    if scene.m != 2:
        raise MeshError("square meshes need m=2")
    pole = _default_pole(scene, pole)
    spec = {"kind": "square", "side": float(side), "h": float(h), "pole": [float(x) for x in pole]}
    n = max(1, int(math.ceil(side / h - 1e-9)))
    g = side * np.arange(n + 1) / n
    X, Y = np.meshgrid(g, g, indexing="ij")
    chart = np.stack([X.ravel(), Y.ravel()], axis=1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    cells = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    cells = _orient(chart, cells)
    boundary = np.zeros(len(chart), dtype=bool)
    boundary[idx[0]] = boundary[idx[-1]] = boundary[idx[:, 0]] = boundary[idx[:, -1]] = True
    points = _embed_chart(scene, pole, chart)
    return Mesh(scene, points, cells, boundary, pole, chart, spec)


def _kuhn_ball(radius, h):
    n = max(2, int(math.ceil(2 * radius / h - 1e-9)))
    g = np.linspace(-radius, radius, n + 1)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    idx = np.arange((n + 1) ** 3).reshape(n + 1, n + 1, n + 1)
    kuhn = [(0, 1, 3, 7), (0, 1, 5, 7), (0, 2, 3, 7), (0, 2, 6, 7), (0, 4, 5, 7), (0, 4, 6, 7)]
    corner = lambda i, j, k: [idx[i + a, j + b, k + c] for a in (0, 1) for b in (0, 1) for c in (0, 1)]
    # corner order: bit pattern (a b c) -> 4a + 2b + c
    tets = []
    r2 = radius * radius * (1 + 1e-12)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                cs = corner(i, j, k)
                if np.all(np.sum(pts[cs] ** 2, axis=1) <= r2):
                    tets.extend([[cs[t] for t in tet] for tet in kuhn])
    tets = np.array(tets, dtype=np.intp)
    used = np.unique(tets)
    remap = -np.ones(len(pts), dtype=np.intp)
    remap[used] = np.arange(len(used))
    tets = remap[tets]
    pts = pts[used]
    # fix orientation
    V = pts[tets]
    det = np.linalg.det(np.swapaxes(V[:, 1:] - V[:, :1], 1, 2))
    flip = det < 0
    tets[flip, 1], tets[flip, 2] = tets[flip, 2].copy(), tets[flip, 1].copy()
    faces = np.concatenate([np.sort(tets[:, [a for a in range(4) if a != b]], axis=1) for b in range(4)])
    uniq, counts = np.unique(faces, axis=0, return_counts=True)
    boundary = np.zeros(len(pts), dtype=bool)
    boundary[np.unique(uniq[counts == 1])] = True
    return pts, tets, boundary


def sphere_mesh(scene, h=1 / 16):
    """The whole closed Sigma of an equatorial_sphere scene (m = 1 or 2)."""
    if not isinstance(scene, EquatorialSphere):
        raise MeshError("closed meshes are only available for equatorial_sphere scenes")
    m = scene.m
    spec = {"kind": "sphere", "h": float(h)}
    if m == 1:
        n = max(8, int(math.ceil(2 * math.pi / h - 1e-9)))
        ang = 2 * np.pi * np.arange(n) / n
        local = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        cells = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
    elif m == 2:
        freq = max(1, int(math.ceil(1.0515 / h - 1e-9)))
        local, cells = _icosphere(freq)
    else:
        raise MeshError("closed sphere meshes are available for m <= 2")
    points = np.zeros((len(local), scene.d))
    points[:, : m + 1] = local
    pole = scene.base_pole
    boundary = np.zeros(len(points), dtype=bool)
    chart = scene.log_sigma(pole, points) @ scene.tangent_basis_at(pole).T
    if m == 2:
        # orient outward
        V = local[cells]
        nrm = np.cross(V[:, 1] - V[:, 0], V[:, 2] - V[:, 0])
        flip = np.einsum("ni,ni->n", nrm, V.mean(axis=1)) < 0
        cells = cells.copy()
        cells[flip, 1], cells[flip, 2] = cells[flip, 2].copy(), cells[flip, 1].copy()
    spec["freq"] = int(freq) if m == 2 else int(n)
    return Mesh(scene, points, cells, boundary, pole, chart, spec)


def _icosphere(freq):
    t = (1 + 5 ** 0.5) / 2
    V = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=float)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    F = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    key_to_idx = {}
    pts = []

    def vid(face, i, j):
        # barycentric lattice point (freq-i-j, i, j) of the face, shared along edges
        a, b, c = face
        w = {a: freq - i - j, b: i, c: j}
        key = tuple(sorted((v, wt) for v, wt in w.items() if wt > 0))
        if key not in key_to_idx:
            p = sum(wt * V[v] for v, wt in key) / freq
            key_to_idx[key] = len(pts)
            pts.append(p / np.linalg.norm(p))
        return key_to_idx[key]

    tris = []
    for face in F:
        for i in range(freq):
            for j in range(freq - i):
                tris.append((vid(face, i, j), vid(face, i + 1, j), vid(face, i, j + 1)))
                if i + j < freq - 1:
                    tris.append((vid(face, i + 1, j), vid(face, i + 1, j + 1), vid(face, i, j + 1)))
    return np.array(pts), np.array(tris, dtype=np.intp)


def build_mesh(scene, spec):
    """Rebuild a mesh from its ``spec`` dictionary (as stored in field files)."""
    kind = spec.get("kind")
    h = float(spec["h"])
    pole = spec.get("pole")
    if kind == "disk":
        return disk_mesh(scene, float(spec["radius"]), h, pole)
    if kind == "annulus":
        return annulus_mesh(scene, float(spec["r_in"]), float(spec["r_out"]), h, pole)
    if kind == "sphere":
        return sphere_mesh(scene, h)
    if kind == "square":
        return square_mesh(scene, float(spec["side"]), h, pole)
    raise MeshError(f"unknown mesh kind {kind!r}")


def is_flat(scene):
    return isinstance(scene, FlatScene)
