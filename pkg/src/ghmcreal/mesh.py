"""Geodesic triangulation of a hyperbolic quotient surface and its calculus.

The mesh triangulates one closed fundamental polygon.  Boundary vertices
come in identified pairs: points are placed on one side of each pairing and
copied to the partner side by the exact pairing isometry, so quotient
identification is exact, not approximate.  Scalar fields live on quotient
vertex classes; operator fields live per face, expressed in per-face
orthonormal tangent frames, with explicit frame transport across edges
(including the side pairings).

Klein coordinates are used for triangulation only: geodesics are straight
chords there, so a Euclidean Delaunay triangulation of points in the convex
polygon is automatically a geodesic triangulation.  All metric quantities
(lengths, angles, areas) are computed from hyperboloid positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from .fuchsian import MarkedMetric, dirichlet_domain, _centering_iso
from .minkowski import (
    ETA,
    hyp_dist,
    mink_cross,
    mink_inner,
    normalize_point,
    parallel_transport,
    so21_inv,
    tangent_project,
)


def _klein(x):
    x = np.asarray(x)
    return x[..., :2] / x[..., 2:3]


def _from_klein(p):
    p = np.asarray(p)
    v = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    return normalize_point(v)


def _frame_at(x, hint=None):
    """Orthonormal tangent frame (e1, e2) at x with e2 = J e1."""
    if hint is None:
        hint = np.array([1.0, 0.0, 0.0])
    e1 = tangent_project(x, hint)
    n2 = mink_inner(e1, e1)
    if n2 < 1e-12:
        e1 = tangent_project(x, np.array([0.0, 1.0, 0.0]))
        n2 = mink_inner(e1, e1)
    e1 = e1 / np.sqrt(n2)
    e2 = mink_cross(x, e1)
    return np.column_stack([e1, e2])


def _frame_transport(xa, Ea, xb, Eb):
    """2x2 rotation taking frame-a components at xa to frame-b components
    at xb via parallel transport along the connecting geodesic."""
    P = parallel_transport(xa, xb)
    return Eb.T @ ETA @ P @ Ea


@dataclass
class EquivariantMesh:
    """Triangulated fundamental polygon with exact side identifications."""

    metric: MarkedMetric
    domain: object
    verts: np.ndarray          # (nv, 3) hyperboloid positions
    tris: np.ndarray           # (nf, 3) ccw vertex indices
    vclass: np.ndarray         # (nv,) canonical vertex index per vertex
    viso: np.ndarray           # (nv, 3, 3); verts[i] = viso[i] @ verts[vclass[i]]
    target_edge: float

    # filled by _finalize
    cid: np.ndarray = None             # (nv,) class id 0..nclasses-1
    class_rep: np.ndarray = None       # (nclasses,) mesh index of each rep
    face_angles: np.ndarray = None     # (nf, 3)
    face_areas: np.ndarray = None      # (nf,)
    centroids: np.ndarray = None       # (nf, 3)
    face_frames: np.ndarray = None     # (nf, 3, 2)
    vert_frames: np.ndarray = None     # (nclasses, 3, 2) at the rep position
    adjacency: list = None             # per face: 3 tuples (nbr, iso or None)
    edge_lengths: np.ndarray = None    # (nf, 3) length of edge k..k+1
    _charts: dict = field(default=None, repr=False)

    @property
    def nclasses(self):
        return len(self.class_rep)

    @property
    def nfaces(self):
        return len(self.tris)

    @property
    def area(self):
        return float(np.sum(self.face_areas))

    def euler_characteristic(self):
        ne = self._quotient_edge_count()
        return self.nclasses - ne + self.nfaces

    def _quotient_edge_count(self):
        halfedges = set()
        for f in range(self.nfaces):
            for k in range(3):
                a, b = self.tris[f][k], self.tris[f][(k + 1) % 3]
                halfedges.add((int(a), int(b)))
        interior = 0
        boundary = 0
        for a, b in halfedges:
            if (b, a) in halfedges:
                interior += 1
            else:
                boundary += 1
        # interior mesh edges counted twice; paired boundary edges are one
        # quotient edge each
        return interior // 2 + boundary // 2

    def min_angle(self):
        return float(np.min(self.face_angles))

    def max_edge(self):
        return float(np.max(self.edge_lengths))

    def scalar_at_faces(self, u):
        """Face averages of a per-class scalar field."""
        u = np.asarray(u, dtype=float)
        return np.mean(u[self.cid[self.tris]], axis=1)

    def face_chart_positions(self, cls):
        """Developed 2-ring chart of a vertex class: (class ids, positions,
        face list).  Positions are ambient, in the chart of the class rep."""
        return self._charts[cls]


# --- construction ----------------------------------------------------------

def _side_lists(dom, target_edge):
    """Subdivide polygon sides; canonical sides carry fresh points, partner
    sides carry their exact isometric copies (reversed).

    Returns (points, isos, classes, side_vertex_lists) where points is the
    full vertex position list (corner classes first), isos/classes give the
    identification data, and side_vertex_lists[i] is the ordered index list
    of vertices along side i from corner i to corner i+1.
    """
    n = dom.nsides
    # corner classes: representative = first corner of each cycle
    rep_of_corner = {}
    for cyc in dom.vertex_cycles:
        for i in cyc:
            rep_of_corner[i] = cyc[0]
    pts = []
    isos = []
    classes = []
    corner_index = {}
    for i in range(n):
        corner_index[i] = len(pts)
        iso = np.asarray(dom.cycle_isos[i], dtype=float)
        rep = rep_of_corner[i]
        # snap to the exact isometric image of the cycle representative so
        # the quotient identification is exact, not clipping-accurate
        pts.append(iso @ np.asarray(dom.verts[rep], dtype=float))
        isos.append(iso)
        classes.append(rep)
    # remap classes from corner labels to vertex indices
    classes = [corner_index[c] for c in classes]

    side_lists = [None] * n
    for i in range(n):
        j = dom.side_partner(i)
        if j < i:
            continue
        va, vb = pts[corner_index[i]], pts[corner_index[(i + 1) % n]]
        length = hyp_dist(va, vb)
        nseg = max(1, int(np.ceil(length / target_edge)))
        g = so21_inv(dom.side_mats[i])      # carries side i onto side j
        # tolerance is the arccosh conditioning floor for entries ~1e3
        if (hyp_dist(g @ va, pts[corner_index[(j + 1) % n]]) > 1e-5
                or hyp_dist(g @ vb, pts[corner_index[j]]) > 1e-5):
            raise RuntimeError("side pairing does not reverse side %d" % i)
        idx_i = [corner_index[i]]
        idx_j_rev = [corner_index[(j + 1) % n]]
        for k in range(1, nseg):
            t = k / nseg
            p = normalize_point(np.sinh((1 - t) * length) * va / np.sinh(length)
                                + np.sinh(t * length) * vb / np.sinh(length))
            ci = len(pts)
            pts.append(p)
            isos.append(np.eye(3))
            classes.append(ci)
            idx_i.append(ci)
            q = g @ p
            cj = len(pts)
            pts.append(q)
            isos.append(g)
            classes.append(ci)
            idx_j_rev.append(cj)
        idx_i.append(corner_index[(i + 1) % n])
        idx_j_rev.append(corner_index[j])
        side_lists[i] = idx_i
        side_lists[j] = list(reversed(idx_j_rev))
        if i == j:
            raise RuntimeError("side paired with itself")
    return pts, isos, classes, side_lists


def _sample_interior(dom, Tc, target_edge, rng):
    """Hyperbolic-uniform samples strictly inside the (centered) polygon."""
    kv = _klein(np.asarray([Tc @ v for v in dom.verts]))
    n = len(kv)
    # half-plane form of the polygon, shrunk by a hyperbolic margin
    normals = []
    for i in range(n):
        a, b = kv[i], kv[(i + 1) % n]
        d = b - a
        nrm = np.array([d[1], -d[0]])
        nrm /= np.linalg.norm(nrm)
        if nrm @ a < 0:
            nrm = -nrm
        normals.append((nrm, nrm @ a))
    Rmax = max(float(np.arctanh(min(np.linalg.norm(p), 1 - 1e-12))) for p in kv)
    target_count = max(30, int(np.ceil(4.0 * np.pi / (0.6 * target_edge ** 2))))
    margin = 0.55 * target_edge
    out = []
    budget = 400 * target_count
    while len(out) < target_count and budget > 0:
        budget -= 1
        u = rng.random()
        r = np.arccosh(1.0 + u * (np.cosh(Rmax) - 1.0))
        th = rng.uniform(0, 2 * np.pi)
        rho = np.tanh(r)
        p = np.array([rho * np.cos(th), rho * np.sin(th)])
        ok = True
        for nrm, off in normals:
            # euclidean clearance converted to a hyperbolic lower bound:
            # ds_hyp >= ds_euc / (1 - |p|^2)
            clear = (off - nrm @ p) / (1.0 - rho * rho)
            if clear < margin:
                ok = False
                break
        if ok:
            out.append(p)
    return np.array(out) if out else np.zeros((0, 2))


def _lloyd(points_k, fixed_k, iters, normals, inside=None):
    """Neighbor-averaging smoothing of interior Klein points.

    Works on the hyperboloid (averaging there is Mobius invariant enough
    for mesh grading); fixed points (boundary) never move.
    """
    if not len(points_k):
        return points_k
    for _ in range(iters):
        allk = np.vstack([fixed_k, points_k])
        tri = Delaunay(allk)
        nfix = len(fixed_k)
        hyp = _from_klein(allk)
        acc = np.zeros((len(allk), 3))
        cnt = np.zeros(len(allk))
        s = tri.simplices
        i0 = s[:, [0, 1, 2]].ravel()
        i1 = s[:, [1, 2, 0]].ravel()
        np.add.at(acc, i0, hyp[i1])
        np.add.at(acc, i1, hyp[i0])
        np.add.at(cnt, i0, 1.0)
        np.add.at(cnt, i1, 1.0)
        old = allk[nfix:]
        cnt_i = np.maximum(cnt[nfix:], 1.0)[:, None]
        prop = _klein(normalize_point(acc[nfix:] / cnt_i))
        if normals is not None:
            ok = np.ones(len(prop), dtype=bool)
            for nrm, off in normals:
                ok &= prop @ nrm < off - 1e-9
        else:
            ok = np.array([inside(p) for p in prop])
        ok &= cnt[nfix:] > 0
        points_k = np.where(ok[:, None], prop, old)
    return points_k


def build_mesh(m: MarkedMetric, target_edge: float, seed=0) -> EquivariantMesh:
    """Triangulate the quotient surface of a marked metric.

    target_edge is the intended intrinsic edge length; the mesh satisfies
    max edge <= 1.5 * target_edge and min triangle angle > 5 degrees, or
    construction raises after a retry budget.
    """
    if not (0.02 <= target_edge <= 0.5):
        raise ValueError("target_edge must lie in [0.02, 0.5]")
    dom = dirichlet_domain(m)
    last_err = None
    for attempt in range(6):
        try:
            return _build_once(m, dom, target_edge,
                               np.random.default_rng(seed + 1000 * attempt))
        except RuntimeError as e:
            last_err = e
    raise RuntimeError("mesh generation failed: %s" % last_err)


def build_disk_mesh(radius, target_edge, seed=0) -> EquivariantMesh:
    """Triangulated geodesic disk (no identifications): a local test patch."""
    rng = np.random.default_rng(seed)
    rho = np.tanh(radius)
    nbd = max(12, int(np.ceil(2 * np.pi * np.sinh(radius) / target_edge)))
    th = 2 * np.pi * np.arange(nbd) / nbd
    boundary_k = np.column_stack([rho * np.cos(th), rho * np.sin(th)])
    margin = 0.55 * target_edge
    rin = radius - margin
    ncount = max(10, int(np.ceil(2 * np.pi * (np.cosh(radius) - 1)
                                 / (0.6 * target_edge ** 2))))
    u = rng.random(ncount)
    rr = np.arccosh(1.0 + u * (np.cosh(rin) - 1.0))
    tt = rng.uniform(0, 2 * np.pi, ncount)
    interior_k = np.column_stack([np.tanh(rr) * np.cos(tt),
                                  np.tanh(rr) * np.sin(tt)])
    inside = lambda p: np.linalg.norm(p) < np.tanh(rin)
    interior_k = _lloyd(interior_k, boundary_k, 8, None, inside)
    for round_ in range(12):
        allk = np.vstack([boundary_k, interior_k])
        tris = _triangulate(allk, {})
        verts = _from_klein(allk)
        long_edges = set()
        for f in tris:
            for k in range(3):
                a, b = f[k], f[(k + 1) % 3]
                if a < nbd and b < nbd and abs(a - b) in (1, nbd - 1):
                    continue
                if hyp_dist(verts[a], verts[b]) > 1.35 * target_edge:
                    long_edges.add((min(a, b), max(a, b)))
        if not long_edges:
            break
        mids = [_klein(normalize_point(verts[a] + verts[b]))
                for a, b in long_edges]
        interior_k = np.vstack([interior_k, np.array(mids)])
        if round_ < 4:
            interior_k = _lloyd(interior_k, boundary_k, 2, None, inside)
    vclass = np.arange(len(verts))
    viso = np.tile(np.eye(3), (len(verts), 1, 1))
    mesh = EquivariantMesh(None, None, verts, np.array(tris, dtype=int),
                           vclass, viso, target_edge)
    _finalize(mesh, [])
    if mesh.min_angle() < np.deg2rad(5.0):
        raise RuntimeError("disk mesh min angle below quality gate")
    return mesh


def _triangulate(allk, span):
    """Oriented face list of the Klein Delaunay triangulation.

    Collinear boundary points make qhull emit zero-area sliver fans along
    the polygon sides; those are dropped, and kept faces bordering a chord
    that skips boundary points are fan-split through the skipped points.
    """
    def _cross2(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    tri = Delaunay(allk)
    tris = []
    for s in tri.simplices:
        a, b, c = allk[s]
        if _cross2(a, b, c) < 0.0:
            s = s[[0, 2, 1]]
            a, b, c = allk[s]
        if _cross2(a, b, c) <= 1e-13:
            continue
        tris.append(tuple(int(v) for v in s))
    queue = tris
    tris = []
    while queue:
        f = queue.pop()
        for k in range(3):
            a, b = f[k], f[(k + 1) % 3]
            if (a, b) in span:
                q = f[(k + 2) % 3]
                mids = list(span[(a, b)])
                if q in mids:
                    break      # collinear remnant, drop
                chain = [a] + mids + [b]
                for t in range(len(chain) - 1):
                    queue.append((chain[t], chain[t + 1], q))
                break
        else:
            tris.append(f)
    return tris


def _build_once(m, dom, target_edge, rng):
    Tc = _centering_iso(np.asarray(dom.base, dtype=float))
    pts, isos, classes, side_lists = _side_lists(dom, target_edge)
    boundary_k = _klein(np.asarray([Tc @ p for p in pts]))
    normals = []
    kv = _klein(np.asarray([Tc @ v for v in dom.verts]))
    n = len(kv)
    for i in range(n):
        a, b = kv[i], kv[(i + 1) % n]
        d = b - a
        nrm = np.array([d[1], -d[0]])
        nrm /= np.linalg.norm(nrm)
        if nrm @ a < 0:
            nrm = -nrm
        normals.append((nrm, nrm @ a))

    interior_k = _sample_interior(dom, Tc, target_edge, rng)
    interior_k = _lloyd(interior_k, boundary_k, 8, normals)

    # fan-split lookup: chords skipping collinear boundary points
    span = {}
    for lst in side_lists:
        for s0 in range(len(lst)):
            for t in range(s0 + 2, len(lst)):
                span[(lst[s0], lst[t])] = lst[s0 + 1:t]
                span[(lst[t], lst[s0])] = lst[t - 1:s0:-1]

    polyline = set()
    for lst in side_lists:
        for t in range(len(lst) - 1):
            polyline.add((min(lst[t], lst[t + 1]), max(lst[t], lst[t + 1])))

    Ti = so21_inv(np.asarray(Tc, dtype=float))
    nb = len(pts)
    for round_ in range(12):
        allk = (np.vstack([boundary_k, interior_k])
                if len(interior_k) else boundary_k)
        tris = _triangulate(allk, span)
        verts = np.array([Ti @ v for v in _from_klein(allk)])
        for i in range(nb):
            verts[i] = pts[i]       # exact boundary positions
        # split interior/mixed edges that came out too long
        tarr = np.array(tris, dtype=int)
        e0 = tarr[:, [0, 1, 2]].ravel()
        e1 = tarr[:, [1, 2, 0]].ravel()
        dist = hyp_dist(verts[e0], verts[e1])
        long_edges = set()
        for a, b in zip(e0[dist > 1.35 * target_edge],
                        e1[dist > 1.35 * target_edge]):
            key = (min(a, b), max(a, b))
            if key not in polyline:
                # boundary subdivision already meets the target
                long_edges.add(key)
        if not long_edges:
            break
        mids = [_klein(Tc @ normalize_point(verts[a] + verts[b]))
                for a, b in long_edges]
        interior_k = np.vstack([interior_k, np.array(mids)])
        if round_ < 4:
            # later rounds insert midpoints without smoothing so the
            # split-triangulate iteration cannot oscillate
            interior_k = _lloyd(interior_k, boundary_k, 2, normals)

    vclass = np.arange(len(verts))
    viso = np.tile(np.eye(3), (len(verts), 1, 1))
    for i in range(nb):
        vclass[i] = classes[i]
        viso[i] = isos[i]
    tris = np.array(tris, dtype=int)
    mesh = EquivariantMesh(m, dom, verts, tris, vclass, viso, target_edge)
    _finalize(mesh, side_lists)

    if mesh.min_angle() < np.deg2rad(5.0):
        raise RuntimeError("min angle %.2f deg below quality gate"
                           % np.rad2deg(mesh.min_angle()))
    if mesh.max_edge() > 1.5 * target_edge:
        raise RuntimeError("max edge %.3f exceeds 1.5 * target" % mesh.max_edge())
    if abs(mesh.area - 4 * np.pi) > 1e-4:
        raise RuntimeError("mesh area %.6f mismatch" % mesh.area)
    if mesh.euler_characteristic() != -2:
        raise RuntimeError("quotient Euler characteristic %d != -2"
                           % mesh.euler_characteristic())
    return mesh


def _finalize(mesh, side_lists):
    verts, tris = mesh.verts, mesh.tris
    nf = len(tris)

    # quotient classes
    reps = sorted(set(int(c) for c in mesh.vclass))
    idmap = {r: k for k, r in enumerate(reps)}
    mesh.class_rep = np.array(reps, dtype=int)
    mesh.cid = np.array([idmap[int(mesh.vclass[i])] for i in range(len(verts))])

    # metric quantities
    A, B, C = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    ang = np.zeros((nf, 3))
    for k, (x, y, z) in enumerate(((A, B, C), (B, C, A), (C, A, B))):
        u = tangent_project(x, y - x)
        v = tangent_project(x, z - x)
        nu = np.sqrt(np.maximum(mink_inner(u, u), 1e-300))
        nv = np.sqrt(np.maximum(mink_inner(v, v), 1e-300))
        ang[:, k] = np.arccos(np.clip(mink_inner(u, v) / (nu * nv), -1.0, 1.0))
    areas = np.maximum(np.pi - np.sum(ang, axis=1), 0.0)
    elen = np.column_stack([hyp_dist(A, B), hyp_dist(B, C), hyp_dist(C, A)])
    cent = normalize_point(A + B + C)
    e1 = tangent_project(cent, A - cent)
    e1 = e1 / np.sqrt(mink_inner(e1, e1))[:, None]
    e2 = mink_cross(cent, e1)
    frames = np.stack([e1, e2], axis=2)
    mesh.face_angles = ang
    mesh.face_areas = areas
    mesh.edge_lengths = elen
    mesh.centroids = cent
    mesh.face_frames = frames

    # vertex frames at class representatives
    vf = np.zeros((len(reps), 3, 2))
    for k, r in enumerate(reps):
        vf[k] = _frame_at(verts[r])
    mesh.vert_frames = vf

    # adjacency: interior edges by shared vertex pair; boundary edges via
    # the side lists (edge m of side i pairs with edge -(m+1) of partner)
    owner = {}
    for f in range(nf):
        for k in range(3):
            a, b = tris[f][k], tris[f][(k + 1) % 3]
            owner[(a, b)] = (f, k)
    dom = mesh.domain
    adjacency = [[None, None, None] for _ in range(nf)]
    for f in range(nf):
        for k in range(3):
            a, b = tris[f][k], tris[f][(k + 1) % 3]
            if (b, a) in owner:
                g, _ = owner[(b, a)]
                adjacency[f][k] = (g, None)
    # boundary
    bedge = {}
    for i, lst in enumerate(side_lists):
        for t in range(len(lst) - 1):
            bedge[(lst[t], lst[t + 1])] = (i, t)
    for f in range(nf):
        for k in range(3):
            if adjacency[f][k] is not None:
                continue
            a, b = tris[f][k], tris[f][(k + 1) % 3]
            if (b, a) in bedge:
                i, t = bedge[(b, a)]
            elif (a, b) in bedge:
                i, t = bedge[(a, b)]
            elif dom is None:
                adjacency[f][k] = (-1, None)    # true boundary (disk patch)
                continue
            else:
                raise RuntimeError("unmatched mesh edge (%d,%d)" % (a, b))
            j = dom.side_partner(i)
            lst_j = side_lists[j]
            m2 = len(lst_j) - 2 - t
            pa, pb = lst_j[m2], lst_j[m2 + 1]
            if (pb, pa) in owner:
                g, _ = owner[(pb, pa)]
            elif (pa, pb) in owner:
                g, _ = owner[(pa, pb)]
            else:
                raise RuntimeError("partner boundary edge has no face")
            # crossing side i: the neighboring developed copy is side_mats[i]
            adjacency[f][k] = (g, np.asarray(dom.side_mats[i], dtype=float))
    mesh.adjacency = [tuple(row) for row in adjacency]

    _build_charts(mesh)


def _build_charts(mesh):
    """Developed 2-ring charts around each vertex class.

    For each class, walk the faces around every copy (crossing side
    pairings with their isometries), develop positions into the chart of
    the class representative, and collect unique sample points.
    """
    verts, tris = mesh.verts, mesh.tris
    nf = mesh.nfaces
    # faces incident to each vertex index
    star = [[] for _ in range(len(verts))]
    for f in range(nf):
        for k in range(3):
            star[tris[f][k]].append(f)
    charts = {}
    for kcls, rep in enumerate(mesh.class_rep):
        # BFS over (face, develop) starting at every copy of the class
        copies = np.nonzero(mesh.cid == kcls)[0]
        seen_faces = {}
        queue = []
        for i in copies:
            D0 = so21_inv(mesh.viso[i])   # maps copy chart -> rep chart
            for f in star[i]:
                if f not in seen_faces:
                    seen_faces[f] = D0
                    queue.append((f, 0))
        # expand one layer of face adjacency to reach the full 2-ring
        qi = 0
        while qi < len(queue):
            f, depth = queue[qi]
            qi += 1
            if depth >= 2:
                continue
            D = seen_faces[f]
            for k in range(3):
                g, iso = mesh.adjacency[f][k]
                if g < 0 or g in seen_faces:
                    continue
                Dg = D if iso is None else D @ np.asarray(iso, dtype=float)
                seen_faces[g] = Dg
                queue.append((g, depth + 1))
        pos = {}
        for f, D in seen_faces.items():
            for idx in tris[f]:
                c = int(mesh.cid[idx])
                p = D @ verts[idx]
                key = (c, round(float(p[0]) / 1e-9), round(float(p[1]) / 1e-9))
                if key not in pos:
                    pos[key] = (c, p)
        ids = []
        pts = []
        for c, p in pos.values():
            ids.append(c)
            pts.append(p)
        charts[kcls] = (np.array(ids, dtype=int), np.array(pts),
                        dict((f, D) for f, D in seen_faces.items()))
    mesh._charts = charts


# --- scalar calculus -------------------------------------------------------

def integrate(mesh: EquivariantMesh, u) -> float:
    """Integral of a per-class scalar field by face-average quadrature."""
    ubar = mesh.scalar_at_faces(np.asarray(u, dtype=float))
    return float(np.sum(mesh.face_areas * ubar))


class LaplaceOperator:
    """Weak-form Laplace-Beltrami operator with lumped mass.

    ``stiffness`` is negative semidefinite with zero row sums (so the
    operator matches the analysts' sign convention where eigenvalues are
    <= 0); ``mass`` is the lumped (diagonal) mass vector.
    """

    def __init__(self, stiffness, mass):
        self.stiffness = stiffness
        self.mass = mass

    def apply(self, u):
        """Pointwise Laplacian M^{-1} L u."""
        return self.stiffness @ np.asarray(u, dtype=float) / self.mass

    def solve_shifted(self, rhs, shift):
        """Solve (Laplacian + shift) f = rhs in weak form."""
        from scipy.sparse import diags
        from scipy.sparse.linalg import spsolve
        A = self.stiffness + diags(shift * self.mass)
        return spsolve(A.tocsc(), self.mass * np.asarray(rhs, dtype=float))


def laplacian(mesh: EquivariantMesh) -> LaplaceOperator:
    from scipy.sparse import coo_matrix
    nc = mesh.nclasses
    rows, cols, vals = [], [], []
    mass = np.zeros(nc)
    for f in range(mesh.nfaces):
        ids = mesh.cid[mesh.tris[f]]
        for k in range(3):
            mass[ids[k]] += mesh.face_areas[f] / 3.0
            # edge (k, k+1) has opposite corner k+2
            i, j = ids[k], ids[(k + 1) % 3]
            w = 0.5 / np.tan(mesh.face_angles[f][(k + 2) % 3])
            rows += [i, j, i, j]
            cols += [j, i, i, j]
            vals += [w, w, -w, -w]
    L = coo_matrix((vals, (rows, cols)), shape=(nc, nc)).tocsr()
    return LaplaceOperator(L, mass)


# --- operator fields -------------------------------------------------------

J2 = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass
class OperatorField:
    """Symmetric 2x2 operator field in per-face frames."""

    mesh: EquivariantMesh
    face: np.ndarray           # (nf, 2, 2)

    def __post_init__(self):
        sym = np.max(np.abs(self.face - np.transpose(self.face, (0, 2, 1))))
        if sym > 1e-12:
            raise ValueError("operator field not symmetric (defect %.2e)" % sym)

    @staticmethod
    def identity(mesh):
        return OperatorField(mesh, np.tile(np.eye(2), (mesh.nfaces, 1, 1)))

    @staticmethod
    def zero(mesh):
        return OperatorField(mesh, np.zeros((mesh.nfaces, 2, 2)))

    def trace(self):
        return np.trace(self.face, axis1=1, axis2=2)

    def det(self):
        return np.linalg.det(self.face)

    def J_rotate(self):
        """M -> M J, with J the +90 degree rotation of each face frame.

        Raises if the result is not symmetric (it is exactly when M is
        symmetric trace-free, plus any multiple of J itself).
        """
        return OperatorField(self.mesh, self.face @ J2)

    def compose(self, other):
        return self.face @ other.face

    def apply(self, vecs):
        """Apply to per-face 2-vectors."""
        return np.einsum("fij,fj->fi", self.face, vecs)

    def __add__(self, other):
        return OperatorField(self.mesh, self.face + other.face)

    def __sub__(self, other):
        return OperatorField(self.mesh, self.face - other.face)

    def __mul__(self, s):
        return OperatorField(self.mesh, self.face * float(s))

    __rmul__ = __mul__

    def trace_at_classes(self):
        """Area-weighted vertex-class average of the trace."""
        t = self.trace()
        num = np.zeros(self.mesh.nclasses)
        den = np.zeros(self.mesh.nclasses)
        for f in range(self.mesh.nfaces):
            for k in range(3):
                c = self.mesh.cid[self.mesh.tris[f][k]]
                num[c] += self.mesh.face_areas[f] * t[f]
                den[c] += self.mesh.face_areas[f]
        return num / den

    def l2_norm(self):
        q = np.einsum("fij,fij->f", self.face, self.face)
        return float(np.sqrt(np.sum(self.mesh.face_areas * q)))

    def l2_pairing(self, other):
        q = np.einsum("fij,fij->f", self.face, other.face)
        return float(np.sum(self.mesh.face_areas * q))

    def min_eigenvalue(self):
        return float(np.min(np.linalg.eigvalsh(self.face)))

    def vertex_values(self):
        """Frame-transported area-weighted averages at class representatives."""
        mesh = self.mesh
        out = np.zeros((mesh.nclasses, 2, 2))
        wsum = np.zeros(mesh.nclasses)
        for c in range(mesh.nclasses):
            _, _, face_devs = mesh.face_chart_positions(c)
            xr = mesh.verts[mesh.class_rep[c]]
            Er = mesh.vert_frames[c]
            for f, D in face_devs.items():
                # only faces actually touching the class
                if c not in [mesh.cid[i] for i in mesh.tris[f]]:
                    continue
                cc = D @ mesh.centroids[f]
                Ef = D @ mesh.face_frames[f]
                R = _frame_transport(cc, Ef, xr, Er)
                out[c] += mesh.face_areas[f] * (R @ self.face[f] @ R.T)
                wsum[c] += mesh.face_areas[f]
        out /= wsum[:, None, None]
        return 0.5 * (out + np.transpose(out, (0, 2, 1)))


def hessian(mesh: EquivariantMesh, u) -> OperatorField:
    """Hessian of a scalar field by 2-ring cubic regression.

    Fits u around each vertex class in geodesic normal coordinates, reads
    the second-order part, then transports vertex Hessians to faces.  The
    fit is cubic where the ring is rich enough: a quadratic fit carries an
    O(edge) second-derivative bias from the odd ring moments, and that
    bias is rough from vertex to vertex, which would dominate every
    downstream first-order quantity.
    """
    u = np.asarray(u, dtype=float)
    nc = mesh.nclasses
    H = np.zeros((nc, 2, 2))
    for c in range(nc):
        ids, pts, _ = mesh.face_chart_positions(c)
        x0 = mesh.verts[mesh.class_rep[c]]
        E = mesh.vert_frames[c]
        # geodesic normal coordinates of the ring samples
        cs = -mink_inner(pts, x0[None, :])
        d = np.arccosh(np.maximum(cs, 1.0))
        w = pts + cs[:, None] * x0[None, :]
        nw = np.sqrt(np.maximum(mink_inner(w, w), 1e-300))
        scale = np.where(nw > 1e-14, d / nw, 1.0)
        tang = w * scale[:, None]
        xy = tang @ ETA @ E
        rad = np.max(np.abs(xy))
        if rad < 1e-14:
            raise RuntimeError("degenerate vertex ring")
        s = xy / rad
        cols = [np.ones(len(ids)), s[:, 0], s[:, 1],
                0.5 * s[:, 0] ** 2, s[:, 0] * s[:, 1], 0.5 * s[:, 1] ** 2]
        if len(ids) >= 14:
            cols += [s[:, 0] ** 3 / 6.0, 0.5 * s[:, 0] ** 2 * s[:, 1],
                     0.5 * s[:, 0] * s[:, 1] ** 2, s[:, 1] ** 3 / 6.0]
        X = np.column_stack(cols)
        ww = np.exp(-np.linalg.norm(s, axis=1) ** 2)
        A = X * ww[:, None]
        b = u[ids] * ww
        coef, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
        if rank < X.shape[1]:
            raise RuntimeError("rank-deficient vertex ring regression")
        H[c] = np.array([[coef[3], coef[4]],
                         [coef[4], coef[5]]]) / rad ** 2
    # transport vertex values to faces and average
    nf = mesh.nfaces
    face = np.zeros((nf, 2, 2))
    for f in range(nf):
        cc = mesh.centroids[f]
        Ef = mesh.face_frames[f]
        acc = np.zeros((2, 2))
        for k in range(3):
            i = mesh.tris[f][k]
            c = mesh.cid[i]
            V = mesh.viso[i]
            xr = V @ mesh.verts[mesh.class_rep[c]]
            Er = V @ mesh.vert_frames[c]
            R = _frame_transport(xr, Er, cc, Ef)
            acc += R @ H[c] @ R.T
        face[f] = acc / 3.0
    face = 0.5 * (face + np.transpose(face, (0, 2, 1)))
    return OperatorField(mesh, face)


def scalar_times_id(mesh: EquivariantMesh, u) -> OperatorField:
    """The operator field u * Id from a per-class scalar field."""
    ubar = mesh.scalar_at_faces(u)
    return OperatorField(mesh, ubar[:, None, None] * np.eye(2)[None])


def ambient_operator(x, E, M2):
    """Extend a 2x2 tangent operator at x (frame E) to an ambient 3x3 map.

    The normal direction carries trace(M)/2, so the identity extends to the
    ambient identity; this keeps closed chord sums exact for M = Id.
    """
    tan = E @ M2 @ E.T @ ETA
    nrm = -0.5 * np.trace(M2) * np.outer(x, x) @ ETA
    return tan + nrm
