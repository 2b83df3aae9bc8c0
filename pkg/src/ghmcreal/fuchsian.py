"""Marked genus-2 hyperbolic structures from Fenchel-Nielsen coordinates.

The pants decomposition is fixed once and for all: the two waist curves of
the handles plus the separating curve between them.  In terms of the
standard generators (a1, b1, a2, b2) with relator [a1,b1][a2,b2] these are

    curve 1 = a1   (length l1, twist t1)
    curve 2 = a2   (length l2, twist t2)
    curve 3 = [a1, b1]  (separating; length l3, twist t3)

Each handle is a one-holed torus obtained by gluing two boundary circles of
a pair of pants with boundary lengths (l, l, l3); the two handles are then
glued along the separating curve.  All constructions are carried out in
SL(2,R) acting on the hyperboloid through the adjoint representation, which
makes the surface relator hold to machine precision by construction.

The marked-length coordinate system uses the nine curves below; their
lengths separate points of Teichmueller space (the classical 9g-9 fact).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .minkowski import (
    ETA,
    check_iso21,
    exp_map,
    hyp_dist,
    invert_word,
    log_map,
    mink_cross,
    mink_inner,
    mink_norm2,
    normalize_point,
    normalize_spacelike,
    psl2_to_so21,
    sl2_from_vec,
    sl2_pole,
    sl2_translation,
    so21_inv,
    tangent_project,
    translation_length,
    word_matrix,
)

# generator indices: 1 = a1, 2 = b1, 3 = a2, 4 = b2
MARKING_WORDS = (
    (1,),                  # waist of handle 1
    (3,),                  # waist of handle 2
    (1, 2, -1, -2),        # separating curve
    (2,),
    (4,),
    (1, 2),
    (3, 4),
    (2, 4),                # crosses the separating curve
    (1, 4),                # crosses the separating curve
)

RELATOR = (1, 2, -1, -2, 3, 4, -3, -4)

BASE_POINT = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class FNCoords:
    """Fenchel-Nielsen coordinates: three lengths and three twists."""

    lengths: tuple
    twists: tuple

    def __post_init__(self):
        if len(self.lengths) != 3 or len(self.twists) != 3:
            raise ValueError("need 3 lengths and 3 twists")
        if any(l <= 0 for l in self.lengths):
            raise ValueError("pants curve lengths must be positive")

    def as_array(self):
        return np.array(list(self.lengths) + list(self.twists), dtype=float)

    @staticmethod
    def from_array(x):
        x = np.asarray(x, dtype=float)
        return FNCoords(tuple(x[:3]), tuple(x[3:6]))


@dataclass
class MarkedMetric:
    """A marked hyperbolic structure: FN coordinates plus holonomy."""

    fn: FNCoords
    gens_sl2: list            # (a1, b1, a2, b2) in SL(2,R)
    gens: list                # same, in SO+(2,1)
    marking_lengths: np.ndarray
    relator_residual: float   # relative to the conditioning of the product
    _domain_cache: dict = field(default_factory=dict, repr=False)


def _half_turn(m):
    """SL(2,R) rotation by pi about the hyperboloid point m."""
    return sl2_from_vec(m)


def _inv2(m):
    # adjugate inverse; works in extended precision where np.linalg does not
    return np.array([[m[1, 1], -m[0, 1]],
                     [-m[1, 0], m[0, 0]]]) / (m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])


def _rotor(v1, v2):
    """SL(2,R) element whose adjoint maps unit spacelike v1 to v2."""
    c = mink_inner(v1, v2)
    if c > -1.0 + 1e-6:
        vm = normalize_spacelike(v1 + v2)
        return sl2_from_vec(vm) @ sl2_from_vec(v1)
    # nearly opposite poles: map v1 -> -v2 (well conditioned), then apply a
    # half turn about a point of the geodesic with pole v2, which negates v2
    r = _rotor(v1, -v2)
    e3 = np.array([0.0, 0.0, 1.0])
    m = normalize_point(e3 - mink_inner(e3, v2) * v2)
    return sl2_from_vec(m) @ r


def _pants(l1, l2, l3):
    """Pair of pants group in SL(2,R) with boundary lengths (l1, l2, l3).

    Returns (x1, x2) with x3 := (x1 x2)^-1; the three boundary holonomies
    have 2x2 trace magnitudes 2*cosh(l_i/2).  The poles of x1 and x2 are
    placed at Minkowski angle cosh(gamma) given by the right-angled hexagon
    relation, which forces |tr(x1 x2)| = 2*cosh(l3/2).
    """
    a, b, c = np.longdouble(l1) / 2, np.longdouble(l2) / 2, np.longdouble(l3) / 2
    cg = (np.cosh(c) + np.cosh(a) * np.cosh(b)) / (np.sinh(a) * np.sinh(b))
    sg = np.sqrt(cg * cg - 1.0)
    u1 = np.array([1, 0, 0], dtype=np.longdouble)
    u2 = np.array([-cg, np.longdouble(0), sg])
    x1 = sl2_translation(u1, l1)
    x2 = sl2_translation(u2, l2)
    return x1, x2, u1, u2


def _handle(l, l3, theta):
    """One-holed torus with waist length l, boundary length l3, twist theta.

    Returns (a, b, bdry) in SL(2,R) with b a^-1 b^-1 = x2 and
    bdry = [b, a] = (x1 x2)^-1 of translation length l3.
    """
    x1, x2, u1, u2 = _pants(l, l, l3)
    w = normalize_spacelike(mink_cross(u1, u2))
    m1 = normalize_point(mink_cross(u1, w))
    m2 = normalize_point(mink_cross(u2, w))
    mid = normalize_point(m1 + m2)
    sigma = _half_turn(mid)
    # sigma maps axis(u1) to axis(u2); fix the pole orientation
    pole_image = psl2_to_so21(sigma) @ (-u1)
    if mink_inner(pole_image, u2) < 0:
        b0 = sigma @ _half_turn(m1)
    else:
        b0 = sigma
    b = sl2_translation(u2, np.longdouble(theta)) @ b0
    a = x1
    bdry = _inv2(x1 @ x2)
    return a, b, bdry


def fn_to_holonomy(fn: FNCoords) -> MarkedMetric:
    """Holonomy of the marked genus-2 surface with the given FN coordinates."""
    l1, l2, l3 = fn.lengths
    t1, t2, t3 = fn.twists
    a1, b1, x3 = _handle(l1, l3, t1)
    a2r, b2r, z3 = _handle(l2, l3, t2)
    # glue handle 2 across the separating axis so that [a2, b2] = x3 exactly;
    # aligning -pole(z3) with pole(x3) puts the second handle on the far
    # side of the axis from the first
    v1 = -sl2_pole(z3)
    v2 = sl2_pole(x3)
    g = sl2_translation(v2, np.longdouble(t3)) @ _rotor(v1, v2)
    gi = _inv2(g)
    a2 = g @ a2r @ gi
    b2 = g @ b2r @ gi
    gens_ld = [a1, b1, a2, b2]
    # move to a balanced frame: conjugating so the displacement-minimizing
    # point sits at the origin keeps all matrix entries small, which is what
    # bounds rounding error in every later word product
    x = _balance_point([np.asarray(psl2_to_so21(h), dtype=float)
                        for h in gens_ld])
    xl = normalize_point(np.asarray(x, dtype=np.longdouble))
    e3 = np.array([0, 0, 1], dtype=np.longdouble)
    mid = normalize_point(xl + e3)
    C = _half_turn(mid) @ _half_turn(xl)
    Ci = _inv2(C)
    gens_ld = [C @ h @ Ci for h in gens_ld]
    # the construction runs in extended precision; results are stored as
    # float64, and validation happens after the cast
    gens_sl2 = [np.asarray(h, dtype=float) for h in gens_ld]
    gens = [np.asarray(psl2_to_so21(h), dtype=float) for h in gens_ld]
    for mat in gens:
        scale = max(1.0, float(np.max(np.abs(mat))))
        if not check_iso21(mat, tol=1e-12 * scale * scale):
            raise ValueError("holonomy generator failed SO(2,1) validation")
    rel = word_matrix(gens, RELATOR)
    # the relator is exact by construction; the residual only reflects
    # rounding, and scales with the largest intermediate product
    peak = 1.0
    acc = np.eye(3)
    for s in RELATOR:
        acc = acc @ (gens[s - 1] if s > 0 else np.linalg.inv(gens[-s - 1]))
        peak = max(peak, float(np.max(np.abs(acc))))
    residual = float(np.max(np.abs(rel - np.eye(3))))
    # rounding the generators to float64 alone perturbs the relator by about
    # eps * |g|_max * peak; gate against that conditioning floor
    gmax = max(float(np.max(np.abs(g))) for g in gens)
    if residual > 1e-12 * gmax * peak:
        raise ValueError("relator residual %.2e exceeds tolerance" % residual)
    lengths = np.array([_word_length(gens, w) for w in MARKING_WORDS])
    if np.min(lengths) < 1e-3:
        raise ValueError("shortest marking curve degenerate; input rejected")
    return MarkedMetric(fn, gens_sl2, gens, lengths,
                        residual / (gmax * peak))


def _word_length(gens, word):
    return translation_length(word_matrix(gens, word))


def curve_length(m: MarkedMetric, word) -> float:
    """Translation length of the holonomy of a word (geodesic length)."""
    if not word:
        raise ValueError("identity word has no geodesic length")
    g = word_matrix(m.gens, word)
    scale = max(1.0, float(np.max(np.abs(g))))
    if np.max(np.abs(g - np.eye(3))) <= 1e-6 * scale:
        raise ValueError("word %r has identity holonomy" % (word,))
    try:
        return translation_length(g)
    except ValueError as e:
        raise ValueError("non-hyperbolic holonomy for word %r: %s" % (word, e))


def marking_lengths(m: MarkedMetric) -> np.ndarray:
    return m.marking_lengths.copy()


def teich_distance(m1: MarkedMetric, m2: MarkedMetric) -> float:
    """Marked-length-spectrum distance max_i |log(l_i / l_i')|."""
    return float(np.max(np.abs(np.log(m1.marking_lengths / m2.marking_lengths))))


# --- Dirichlet fundamental domain -----------------------------------------

@dataclass
class FundamentalDomain:
    """Convex geodesic Dirichlet polygon with side pairings.

    Corners are listed counterclockwise; side i runs from corner i to corner
    i+1 and lies on the bisector of (base, g_i base) where g_i is
    ``side_mats[i]``.  The pairing isometry carrying side i into the domain
    boundary again is g_i^{-1}, which maps it onto the side tagged with the
    inverse word.
    """

    base: np.ndarray
    verts: np.ndarray          # (n, 3) hyperboloid points, ccw
    side_words: list           # word tuples
    side_mats: np.ndarray      # (n, 3, 3)
    area: float
    vertex_cycles: list        # list of lists of corner indices
    cycle_isos: list           # per corner: iso mapping cycle-rep corner to it

    @property
    def nsides(self):
        return len(self.side_words)

    def side_partner(self, i):
        """Index of the side paired with side i."""
        w = invert_word(self.side_words[i])
        return self.side_words.index(w)

    def side_poles(self):
        """Unit spacelike poles u_i with the domain in { <x, u_i> <= 0 }."""
        q = self.side_mats @ self.base
        return normalize_spacelike(q - self.base)

    def max_vertex_distance(self):
        return float(max(hyp_dist(self.base, v) for v in self.verts))


def _klein(x):
    x = np.asarray(x)
    return x[..., :2] / x[..., 2:3]


def _clip_polygon(pts, tags, a, b, c, new_tag, eps=1e-13):
    """Clip a convex ccw polygon by the half-plane a*X + b*Y + c <= 0."""
    n = len(pts)
    vals = [a * p[0] + b * p[1] + c for p in pts]
    if all(v <= eps for v in vals):
        return pts, tags, False
    if all(v >= -eps for v in vals):
        return [], [], True
    out_pts, out_tags = [], []
    for i in range(n):
        j = (i + 1) % n
        vi, vj = vals[i], vals[j]
        pi, pj = pts[i], pts[j]
        if vi <= eps:
            out_pts.append(pi)
            out_tags.append(tags[i])
            if vj > eps:
                t = vi / (vi - vj)
                out_pts.append(pi + t * (pj - pi))
                out_tags.append(new_tag)
        else:
            if vj <= eps:
                t = vi / (vi - vj)
                out_pts.append(pi + t * (pj - pi))
                out_tags.append(tags[i])
    # the new_tag edge runs from the first inserted crossing onwards; fix the
    # tag ordering: edges are (pt[k] -> pt[k+1]) tagged tags[k]; the edge that
    # lies on the clip line is the one between the two crossing points.
    m = len(out_pts)
    cleaned_pts, cleaned_tags = [], []
    for k in range(m):
        if np.linalg.norm(out_pts[k] - out_pts[(k + 1) % m]) > 1e-12:
            cleaned_pts.append(out_pts[k])
            cleaned_tags.append(out_tags[k])
    return cleaned_pts, cleaned_tags, True


def _ball(gens_so21, base, disp_bound, prune_slack=None):
    """Group elements with displacement d(base, g base) <= disp_bound.

    Breadth-first search over words, pruning prefixes whose displacement
    exceeds disp_bound + prune_slack.  The slack must cover at least one
    generator displacement or valid paths get cut early.  Returns dict
    word -> matrix.
    """
    sigs = []
    letters = []
    for i, g in enumerate(gens_so21):
        sigs.extend([i + 1, -(i + 1)])
        letters.extend([g, so21_inv(g)])
    from scipy.spatial import cKDTree

    letters = np.array(letters)
    if prune_slack is None:
        gen_disp = np.arccosh(np.maximum(
            -mink_inner(base, letters @ base), 1.0))
        prune_slack = float(np.max(gen_disp)) + 0.5
    cosh_keep = np.cosh(disp_bound)
    cosh_prune = np.cosh(disp_bound + prune_slack)

    def sig_vec(mats):
        # the action is free, so g base determines g; distinct elements
        # displace base by at least the systole, far above float noise
        return mats @ base

    sigs = np.array(sigs)
    words = [()]
    mats = [np.eye(3)]
    seen_vecs = sig_vec(np.eye(3)[None])
    frontier_w = [()]
    frontier_m = np.eye(3)[None]
    frontier_last = np.array([0])      # last letter signature, 0 for none
    while len(frontier_w):
        # children[n, k] = frontier[n] @ letters[k]
        children = np.einsum('nij,kjl->nkil', frontier_m, letters)
        disp = -mink_inner(base, children @ base)
        keep = (disp <= cosh_prune) & (frontier_last[:, None] != -sigs[None, :])
        ns, ks = np.nonzero(keep)
        if len(ns) == 0:
            break
        cand_m = children[ns, ks]
        cand_v = sig_vec(cand_m)
        # self-dedup within the level; duplicate clusters are tight (float
        # noise), far tighter than the tolerance
        pairs = cKDTree(cand_v).query_pairs(1e-6, p=np.inf)
        drop = {max(i, j) for i, j in pairs}
        first = np.array([i for i in range(len(cand_v)) if i not in drop])
        ns, ks, cand_m, cand_v = ns[first], ks[first], cand_m[first], cand_v[first]
        hits = cKDTree(seen_vecs).query_ball_point(cand_v, 1e-6, p=np.inf)
        fresh = np.array([len(h) == 0 for h in hits], dtype=bool)
        if not np.any(fresh):
            break
        ns, ks, cand_m, cand_v = ns[fresh], ks[fresh], cand_m[fresh], cand_v[fresh]
        new_w = [frontier_w[n] + (int(sigs[k]),) for n, k in zip(ns, ks)]
        words.extend(new_w)
        mats.extend(cand_m)
        seen_vecs = np.vstack([seen_vecs, cand_v])
        frontier_w = new_w
        frontier_m = cand_m
        frontier_last = sigs[ks]
    out = {}
    for w, m in zip(words, mats):
        if w and -mink_inner(base, m @ base) <= cosh_keep:
            out[w] = m
    return out


def _point_reflection(m):
    """SO+(2,1) rotation by pi about the hyperboloid point m."""
    return -np.eye(3) - 2.0 * np.outer(m, ETA @ m)


def _centering_iso(base):
    """SO+(2,1) translation carrying base to (0,0,1)."""
    e3 = np.array([0.0, 0.0, 1.0])
    if hyp_dist(base, e3) < 1e-12:
        return np.eye(3)
    mid = normalize_point(base + e3)
    return _point_reflection(mid) @ _point_reflection(base)


def _polygon_from_ball(ball, base):
    """Clip the Klein disk by all orbit bisectors about base.

    Works in a translated frame with base at the disk center, so the seed
    polygon's chords stay hyperbolically far away.  Returns (pts, tags, T)
    with pts in the centered frame and T the centering isometry.
    """
    T = _centering_iso(base)
    # clipping is linear, so the seed may lie outside the disk: a square
    # strictly containing it truncates no half-plane data, and untagged
    # sides surviving to the end just mean the domain is not closed yet
    pts = [np.array([x, y]) for x, y in
           ((2.0, 2.0), (-2.0, 2.0), (-2.0, -2.0), (2.0, -2.0))]
    tags = [None] * len(pts)
    items = sorted(ball.items(),
                   key=lambda kv: -mink_inner(base, kv[1] @ base))
    e3 = np.array([0.0, 0.0, 1.0])
    for w, m in items:
        q = m @ base
        if -mink_inner(base, q) < 1.0 + 1e-12:
            continue    # numerically the identity; no bisector
        u = np.asarray(T @ q - e3, dtype=float)
        pts, tags, _ = _clip_polygon(pts, tags, u[0], u[1], -u[2], w)
        if not pts:
            raise RuntimeError("empty Dirichlet polygon (invalid holonomy?)")
    return pts, tags, T


def _corner_angles(verts):
    n = len(verts)
    ang = np.zeros(n)
    for i in range(n):
        p = verts[i]
        e1 = log_map(p, verts[(i - 1) % n])
        e2 = log_map(p, verts[(i + 1) % n])
        c = mink_inner(e1, e2) / np.sqrt(mink_norm2(e1) * mink_norm2(e2))
        ang[i] = np.arccos(np.clip(c, -1.0, 1.0))
    return ang


def _vertex_cycles(verts, side_words, side_mats, ball):
    """Group corners into quotient classes and check cycle relations.

    Returns (cycles, corner_iso) where corner_iso[i] maps the position of
    the cycle representative to the position of corner i.
    """
    n = len(verts)
    inv_index = {}
    for i, w in enumerate(side_words):
        inv_index[w] = i
    angles = _corner_angles(verts)
    assigned = [False] * n
    cycles = []
    corner_iso = [None] * n
    for start in range(n):
        if assigned[start]:
            continue
        cycle = []
        acc = np.eye(3)
        i = start
        iso_to_corner = {}
        while True:
            cycle.append(i)
            assigned[i] = True
            iso_to_corner[i] = so21_inv(acc)
            # corner i is the start of side i; apply the pairing of side i-1
            # (the side ending at corner i): pairing = side_mats[i-1]^-1
            e = (i - 1) % n
            g = so21_inv(side_mats[e])
            img = g @ verts[i]
            # locate the matching corner
            d = [float(-mink_inner(img, v)) for v in verts]
            j = int(np.argmin(d))
            if d[j] - 1.0 > 1e-6:
                raise RuntimeError("vertex cycle broke: no matching corner")
            acc = acc @ so21_inv(g)
            i = j
            if i == start:
                break
            if len(cycle) > 4 * n:
                raise RuntimeError("vertex cycle did not close")
        total = float(sum(angles[k] for k in cycle))
        if abs(total - 2.0 * np.pi) > 1e-6:
            raise RuntimeError(
                "vertex cycle angle sum %.6f != 2*pi" % total)
        cycles.append(cycle)
        for k in cycle:
            corner_iso[k] = iso_to_corner[k]
    return cycles, corner_iso


def central_base_point(m: MarkedMetric) -> np.ndarray:
    """Point minimizing the summed cosh displacement of the generators.

    The objective x -> sum_g -<x, g x> is convex on H^2 and keeps the
    Dirichlet domain (hence the word ball that builds it) small.
    """
    return _balance_point(m.gens)


def _balance_point(gens):
    # Q is eta-symmetric: eta Q = (eta Q)^T, so f(x) = -<x, Q x> has
    # Riemannian gradient -2 * tangent_project(x, Q x)
    Q = sum(g + so21_inv(g) for g in gens)

    def f(x):
        return -float(mink_inner(x, Q @ x))

    x = BASE_POINT.copy()
    for _ in range(500):
        grad = -2.0 * tangent_project(x, Q @ x)
        gn = np.sqrt(max(float(mink_norm2(grad)), 0.0))
        f0 = f(x)
        if gn <= 1e-12 * max(abs(f0), 1.0):
            break
        # backtracking line search from a unit-length manifold step; the
        # step floor must be relative, gn scales like cosh(displacement)
        t = 1.0 / gn
        moved = False
        while t * gn > 1e-12:
            xn = normalize_point(exp_map(x, -t * grad))
            if f(xn) < f0:
                moved = True
                break
            t *= 0.5
        if not moved:
            break
        x = xn
    return x


def reduce_word(word):
    """Freely reduce a word (cancel adjacent inverse letters)."""
    out = []
    for s in word:
        if out and out[-1] == -s:
            out.pop()
        else:
            out.append(s)
    return tuple(out)


def dirichlet_domain(m: MarkedMetric, base=None) -> FundamentalDomain:
    """Dirichlet fundamental domain of the holonomy about a base point.

    Clips the disk by orbit bisectors of a growing working set of group
    elements.  Any intersection of bisector half-planes contains the true
    Dirichlet domain, so closure + full side pairing + area exactly 4*pi
    (Gauss-Bonnet for genus 2) is a complete correctness certificate.  The
    working set grows by products of current side elements; a candidate
    whose bisector does not cut the current polygon can never cut a later
    (smaller) one and is discarded for good.
    """
    from scipy.spatial import cKDTree

    if base is None:
        base = central_base_point(m)
    base = np.asarray(base, dtype=float)
    key = tuple(np.round(base, 10))
    if key in m._domain_cache:
        return m._domain_cache[key]

    Tc = np.asarray(_centering_iso(base), dtype=np.longdouble)
    e3 = np.array([0.0, 0.0, 1.0])

    # products run in extended precision; SL(2,R) word products (entry sizes
    # are square roots of the SO(2,1) ones) decide exactly whether a short-
    # displacement word is the identity, e.g. a disguised relator, whose
    # float noise would otherwise cut a spurious bisector near the base
    gens_sl2_ld = [np.asarray(g, dtype=np.longdouble) for g in m.gens_sl2]
    inv_sl2_ld = [_inv2(g) for g in gens_sl2_ld]
    gmax_sl2 = max(float(np.max(np.abs(g))) for g in gens_sl2_ld)

    def word_is_identity(w):
        acc = np.eye(2, dtype=np.longdouble)
        peak = np.longdouble(1.0)
        for s in w:
            acc = acc @ (gens_sl2_ld[s - 1] if s > 0 else inv_sl2_ld[-s - 1])
            peak = max(peak, np.max(np.abs(acc)))
        tr = acc[0, 0] + acc[1, 1]
        dev = float(np.max(np.abs(acc - (tr / 2.0) * np.eye(2))))
        # the generators are double precision; a letter's rounding is
        # amplified by the prefix and suffix products around it, so an
        # identity word deviates by about eps * peak^2 per letter
        tol = min(1e-4,
                  max(1e-11, 3e-15 * float(peak) ** 2 * max(len(w), 1)))
        return dev <= tol and abs(float(abs(tr)) - 2.0) <= tol

    # the working set lives in SL(2,R): entries there are square roots of
    # their SO(2,1) counterparts, which keeps rounding in long products far
    # below the dedup scales; 3x3 matrices are derived views for geometry
    active = {}                # word -> float64 SO(2,1), for clipping
    active_sl2 = {}            # word -> longdouble SL(2,R), for products
    seen = []                  # base images of every element accepted
    seen_words = []

    def consider(w, g2, R=None):
        """Add the element and its inverse to the working set, deduped."""
        if R is None:
            R = np.asarray(psl2_to_so21(g2), dtype=float)
        gb = R @ base
        if not np.all(np.isfinite(gb)):
            return             # far beyond any bisector that matters
        c = -mink_inner(base, gb)
        if c < 1.0 + 1e-6:
            return             # indistinguishable from the identity
        if c < 1.005 and word_is_identity(w):
            return
        Ri = so21_inv(R)
        s2 = Ri @ base
        if seen:
            # distinct elements separate the base by at least the systole;
            # anything this close is a rewriting of an element already held
            # unless the exact group-identity test says otherwise
            tree = cKDTree(np.array(seen))
            for img, ww in ((gb, w), (s2, invert_word(w))):
                for j in tree.query_ball_point(img, 1e-3, p=np.inf):
                    diff = reduce_word(ww + invert_word(seen_words[j]))
                    if not diff or word_is_identity(diff):
                        return
        wi = invert_word(w)
        active[w] = R
        active[wi] = Ri
        active_sl2[w] = g2
        active_sl2[wi] = _inv2(g2)
        seen.append(gb)
        seen_words.append(w)
        seen.append(s2)
        seen_words.append(wi)

    for i, g2 in enumerate(gens_sl2_ld):
        consider((i + 1,), g2)
    Tcf = np.asarray(Tc, dtype=float)

    prev_sides = None
    for _ in range(200):
        pts, tags, T = _polygon_from_ball(active, base)
        closed = all(t is not None for t in tags) and \
            all(p[0] * p[0] + p[1] * p[1] < 1.0 - 1e-12 for p in pts)
        side_words = [w for w in tags if w is not None]
        if closed:
            Ti = so21_inv(T)
            verts = np.array([normalize_point(Ti @ np.array([p[0], p[1], 1.0]))
                              for p in pts])
            paired = all(invert_word(w) in side_words for w in side_words)
            angles = _corner_angles(verts)
            area = (len(verts) - 2) * np.pi - float(np.sum(angles))
            if paired and abs(area - 4.0 * np.pi) < 1e-6:
                side_mats = np.array([active[w] for w in side_words],
                                     dtype=float)
                cycles, corner_iso = _vertex_cycles(
                    verts, side_words, side_mats, active)
                dom = FundamentalDomain(base, verts, side_words, side_mats,
                                        area, cycles, corner_iso)
                m._domain_cache[key] = dom
                return dom
        # grow by products of side elements (and generators, so the chain
        # always reaches the whole group), keeping only what cuts the polygon
        basis = {w: active_sl2[w] for w in side_words}
        for i, g2 in enumerate(gens_sl2_ld):
            basis.setdefault((i + 1,), g2)
            basis.setdefault((-(i + 1),), inv_sl2_ld[i])
        stalled = prev_sides == set(side_words)
        prev_sides = set(side_words)
        pool = active_sl2 if stalled else basis
        before = len(active)
        P = np.array([[p[0], p[1]] for p in pts])
        for w1, g1 in list(pool.items()):
            for w2, g2 in list(basis.items()):
                w = reduce_word(w1 + w2)
                if not w or w in active:
                    continue
                g = g1 @ g2
                R = np.asarray(psl2_to_so21(g), dtype=float)
                if not np.all(np.isfinite(R)):
                    continue
                u = Tcf @ (R @ base) - e3
                if np.max(P @ u[:2]) - u[2] <= 1e-13:
                    continue   # never cuts the (shrinking) polygon again
                consider(w, g, R)
        if len(active) == before and stalled:
            raise RuntimeError(
                "Dirichlet domain stalled (non-discrete holonomy?)")
    raise RuntimeError("fundamental domain construction did not converge")
