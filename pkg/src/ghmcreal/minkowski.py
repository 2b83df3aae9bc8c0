"""Linear algebra of R^{2,1}, the hyperboloid model of H^2, and affine isometries.

Conventions fixed here and used everywhere else in the package:

* the bilinear form has signature (+, +, -):  <x, y> = x1*y1 + x2*y2 - x3*y3;
* H^2 is the upper sheet of <x, x> = -1 (x3 > 0);
* SL(2,R) acts on R^{2,1} through the adjoint representation on trace-free
  2x2 matrices, with the basis E1 = [[1,0],[0,-1]], E2 = [[0,1],[1,0]],
  E3 = [[0,-1],[1,0]] identifying (x1, x2, x3) with x1*E1 + x2*E2 + x3*E3;
* the complex structure at x in H^2 is J_x(v) = mink_cross(x, v), a rotation
  by +90 degrees of the tangent plane.

Group words are tuples of nonzero signed 1-based generator indices:
(1, -2) means "first generator, then inverse of second".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ETA = np.diag([1.0, 1.0, -1.0])

E1 = np.array([[1.0, 0.0], [0.0, -1.0]])
E2 = np.array([[0.0, 1.0], [1.0, 0.0]])
E3 = np.array([[0.0, -1.0], [1.0, 0.0]])

HYP_TOL = 1e-12
ISO_TOL = 1e-10


def _asfloat(x):
    """To a floating array, preserving extended precision if already float."""
    x = np.asarray(x)
    return x if np.issubdtype(x.dtype, np.floating) else x.astype(float)


def mink_inner(x, y):
    """Minkowski inner product; broadcasts over leading axes."""
    x = np.asarray(x)
    y = np.asarray(y)
    return x[..., 0] * y[..., 0] + x[..., 1] * y[..., 1] - x[..., 2] * y[..., 2]


def mink_norm2(x):
    return mink_inner(x, x)


def mink_cross(x, y):
    """Minkowski cross product: <mink_cross(x,y), z> = det[x, y, z]."""
    c = np.cross(np.asarray(x), np.asarray(y))
    return c * np.array([1.0, 1.0, -1.0])


def normalize_point(x):
    """Rescale a timelike vector onto the upper hyperboloid sheet."""
    x = _asfloat(x)
    n2 = mink_norm2(x)
    if np.any(n2 >= 0):
        raise ValueError("not timelike")
    y = x / np.sqrt(-n2)[..., None]
    return np.where(y[..., 2:3] > 0, y, -y)


def normalize_spacelike(u):
    u = _asfloat(u)
    n2 = mink_norm2(u)
    if np.any(n2 <= 0):
        raise ValueError("not spacelike")
    return u / np.sqrt(n2)[..., None]


def is_hyp_point(x, tol=HYP_TOL):
    x = np.asarray(x)
    return abs(mink_norm2(x) + 1.0) <= tol and x[2] > 0


def hyp_dist(x, y):
    """Hyperbolic distance arccosh(-<x,y>) between hyperboloid points."""
    c = -mink_inner(x, y)
    if np.any(c < 1.0 - 1e-9):
        raise ValueError("points not on the same hyperboloid sheet")
    return np.arccosh(np.maximum(c, 1.0))


def tangent_project(x, w):
    """Project an ambient vector onto the tangent plane of H^2 at x."""
    return w + mink_inner(x, w)[..., None] * x


def log_map(x, y):
    """Tangent vector at x pointing to y with |v| = dist(x, y)."""
    c = -mink_inner(x, y)
    c = np.maximum(c, 1.0)
    d = np.arccosh(c)
    w = y + mink_inner(x, y)[..., None] * x
    s = np.sqrt(np.maximum(c * c - 1.0, 0.0))
    # d/s -> 1 as y -> x
    scale = np.where(s > 1e-14, d / np.where(s > 1e-14, s, 1.0), 1.0)
    return w * scale[..., None]


def exp_map(x, v):
    """Geodesic exponential at x of a tangent vector v."""
    t = np.sqrt(np.maximum(mink_norm2(v), 0.0))
    small = t < 1e-14
    tt = np.where(small, 1.0, t)
    return np.cosh(t)[..., None] * x + (np.sinh(t) / tt)[..., None] * v


def parallel_transport(p, q):
    """3x3 matrix of parallel transport along the geodesic from p to q.

    Acts on tangent vectors at p; the normal direction is not preserved and
    should not be fed through it.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    denom = 1.0 - mink_inner(p, q)
    return np.eye(3) + np.outer(p + q, ETA @ q) / denom


def complex_structure(x, v):
    """J_x v: rotation of the tangent plane at x by +90 degrees."""
    return mink_cross(x, v)


def so21_inv(g):
    """Inverse of g in O(2,1): eta g^T eta, exact entry for entry."""
    g = np.asarray(g)
    return ETA @ g.T @ ETA


def check_iso21(g, tol=ISO_TOL):
    """Validate g in SO+(2,1): preserves the form, det +1, upper sheet."""
    g = np.asarray(g)
    err = np.max(np.abs(g.T @ ETA @ g - ETA))
    return err <= tol and np.linalg.det(g) > 0 and g[2, 2] > 0


# --- SL(2,R) <-> SO(2,1) bridge ------------------------------------------

def sl2_from_vec(x):
    return x[0] * E1 + x[1] * E2 + x[2] * E3


def vec_from_sl2(m):
    return np.array([
        0.5 * (m[0, 0] - m[1, 1]),
        0.5 * (m[0, 1] + m[1, 0]),
        0.5 * (m[1, 0] - m[0, 1]),
    ])


def psl2_to_so21(g):
    """Adjoint representation of g in SL(2,R) as a matrix in SO+(2,1)."""
    g = _asfloat(g)
    det = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
    gi = np.array([[g[1, 1], -g[0, 1]], [-g[1, 0], g[0, 0]]]) / det
    cols = [vec_from_sl2(g @ e @ gi) for e in (E1, E2, E3)]
    return np.column_stack(cols)


def sl2_translation(u, t):
    """SL(2,R) hyperbolic translation of length t along the geodesic with
    unit spacelike pole u."""
    return np.cosh(t / 2.0) * np.eye(2) + np.sinh(t / 2.0) * sl2_from_vec(u)


def sl2_rotation(x, alpha):
    """SL(2,R) rotation by angle alpha about the hyperboloid point x."""
    return np.cos(alpha / 2.0) * np.eye(2) + np.sin(alpha / 2.0) * sl2_from_vec(x)


def sl2_pole(m):
    """Unit spacelike pole of a hyperbolic element of SL(2,R).

    With alpha = tr(m)/2, m = alpha*I + sqrt(alpha^2-1)*pole_hat; the sign of
    the pole is tied to the sign of the trace, which makes conjugation
    identities exact: Ad(g) pole(m) = pole(g m g^-1).
    """
    m = _asfloat(m)
    alpha = 0.5 * (m[0, 0] + m[1, 1])
    s2 = alpha * alpha - 1.0
    if s2 <= 1e-14:
        raise ValueError("element is not hyperbolic")
    return vec_from_sl2(m - alpha * np.eye(2)) / np.sqrt(s2)


def so21_pole(g):
    """Unit spacelike pole (translation axis) of a hyperbolic g in SO+(2,1)."""
    g = np.asarray(g, dtype=float)
    w, v = np.linalg.eig(g)
    k = int(np.argmin(np.abs(w - 1.0)))
    if abs(w[k] - 1.0) > 1e-6:
        raise ValueError("no fixed axis")
    u = np.real(v[:, k])
    if mink_norm2(u) <= 0:
        raise ValueError("element is not hyperbolic")
    return u / np.sqrt(mink_norm2(u))


def translation_length(g):
    """Translation length of a hyperbolic g in SO+(2,1) from its trace."""
    tr = float(np.trace(g))
    if tr < 3.0 - 1e-7:
        raise ValueError("element is elliptic or parabolic (trace %.6f)" % tr)
    return float(np.arccosh(max((tr - 1.0) / 2.0, 1.0)))


# --- affine group SO(2,1) x R^{2,1} ---------------------------------------

@dataclass(frozen=True)
class AffineIso:
    """Affine isometry x -> linear @ x + trans of R^{2,1}."""

    linear: np.ndarray
    trans: np.ndarray

    @staticmethod
    def identity():
        return AffineIso(np.eye(3), np.zeros(3))

    def compose(self, other):
        """(g, X) * (h, Y) = (g h, X + g Y)."""
        return AffineIso(self.linear @ other.linear,
                         self.trans + self.linear @ other.trans)

    def __matmul__(self, other):
        return self.compose(other)

    def inverse(self):
        gi = so21_inv(self.linear)
        return AffineIso(gi, -gi @ self.trans)

    def apply(self, x):
        return np.asarray(x) @ self.linear.T + self.trans


def word_matrix(gens, word):
    """Product of SO(2,1) generators over a signed word."""
    g = np.eye(3)
    for s in word:
        m = gens[abs(s) - 1]
        g = g @ (m if s > 0 else so21_inv(m))
    return g


def cocycle_eval(gens, tau, word):
    """Evaluate the unique cocycle extension tau(w) of generator values.

    gens: list of SO(2,1) matrices; tau: list of R^{2,1} vectors (same order);
    word: signed 1-based indices.  Satisfies tau(gh) = tau(g) + rho(g) tau(h).
    """
    a = AffineIso.identity()
    for s in word:
        i = abs(s) - 1
        step = AffineIso(gens[i], np.asarray(tau[i], dtype=float))
        if s < 0:
            step = step.inverse()
        a = a @ step
    return a.trans


def cocycle_matrix(gens, tau, word):
    """Like cocycle_eval but returns the full AffineIso of the word."""
    a = AffineIso.identity()
    for s in word:
        i = abs(s) - 1
        step = AffineIso(gens[i], np.asarray(tau[i], dtype=float))
        if s < 0:
            step = step.inverse()
        a = a @ step
    return a


def coboundary_reduce(gens, tau):
    """Best coboundary approximation of a cocycle.

    Finds V minimizing sum_g |tau(g) - (V - rho(g) V)|^2 over the generators
    and returns (V, residual).  The normal equations are nonsingular exactly
    when rho admits no nonzero invariant vector (irreducible Fuchsian case).
    """
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for g, t in zip(gens, tau):
        m = np.eye(3) - g
        A += m.T @ m
        b += m.T @ np.asarray(t, dtype=float)
    if np.linalg.cond(A) > 1e12:
        raise ValueError("representation has an invariant vector (reducible)")
    v = np.linalg.solve(A, b)
    res2 = 0.0
    for g, t in zip(gens, tau):
        r = np.asarray(t, dtype=float) - (v - g @ v)
        res2 += float(r @ r)
    return v, np.sqrt(res2)


def invert_word(word):
    return tuple(-s for s in reversed(word))
