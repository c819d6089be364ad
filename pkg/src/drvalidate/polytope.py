"""Wrench-set geometry: zonotopes, H-representations, inscribed sets, tightening."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection
from scipy.spatial import QhullError

FACET_TOL = 1e-8
MAX_GENERATORS = 16


class GeometryError(ValueError):
    pass


class DegenerateHullError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class Polytope:
    """``{u : H u <= b}``."""

    H: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, float))
        b = np.asarray(self.b, float).reshape(-1)
        if H.shape[0] != b.shape[0]:
            raise GeometryError(f"H has {H.shape[0]} rows, b has {b.shape[0]}")
        if np.any(np.linalg.norm(H, axis=1) == 0):
            raise GeometryError("H has a zero row")
        H.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @classmethod
    def box(cls, upper, lower=None) -> "Polytope":
        upper = np.asarray(upper, float)
        lower = -upper if lower is None else np.asarray(lower, float)
        n = len(upper)
        return cls(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([upper, -lower]))

    def contains(self, x, tol: float = 1e-9) -> bool:
        return bool(np.all(self.H @ np.asarray(x, float) <= self.b + tol))

    def margin(self, x) -> float:
        """Largest signed violation ``max_i (h_i x - b_i)``; negative inside."""
        return float(np.max(self.H @ np.asarray(x, float) - self.b))

    def origin_inside(self) -> bool:
        return bool(np.all(self.b > 0))

    def scaled(self, factor: float) -> "Polytope":
        return Polytope(self.H, self.b * factor)

    def vertices(self) -> np.ndarray:
        if self.dim == 1:
            h = self.H[:, 0]
            up = np.min(self.b[h > 0] / h[h > 0])
            lo = np.max(self.b[h < 0] / h[h < 0])
            return np.array([[lo], [up]])
        center = chebyshev_center(self)
        hs = HalfspaceIntersection(np.hstack([self.H, -self.b[:, None]]), center)
        return _dedup(hs.intersections, 1e-9)

    def radial_scale(self, x) -> float:
        """Largest ``s`` in [0, 1] with ``s * x`` inside (origin must be inside)."""
        hx = self.H @ np.asarray(x, float)
        pos = hx > 0
        if not np.any(pos):
            return 1.0
        return float(min(1.0, np.min(self.b[pos] / hx[pos])))

    def to_dict(self) -> dict:
        return {"H": self.H.tolist(), "b": self.b.tolist()}


def chebyshev_center(p: Polytope) -> np.ndarray:
    norms = np.linalg.norm(p.H, axis=1)
    c = np.zeros(p.dim + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=np.hstack([p.H, norms[:, None]]), b_ub=p.b,
                  bounds=[(None, None)] * p.dim + [(0, None)], method="highs")
    if res.status == 3:
        raise GeometryError("polytope is unbounded")
    if res.status != 0 or res.x[-1] <= 1e-12:
        raise GeometryError("polytope has empty interior")
    return res.x[:-1]


def _dedup(points: np.ndarray, tol: float) -> np.ndarray:
    out: list[np.ndarray] = []
    for p in points:
        if not any(np.max(np.abs(p - q)) <= tol for q in out):
            out.append(p)
    return np.array(out)


@dataclass(frozen=True, eq=False)
class Zonotope:
    """Image of the thrust box ``mu_min <= mu <= mu_max`` under ``G``."""

    G: np.ndarray
    mu_min: np.ndarray
    mu_max: np.ndarray

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, float))
        lo = np.asarray(self.mu_min, float).reshape(-1)
        hi = np.asarray(self.mu_max, float).reshape(-1)
        if G.shape[1] != lo.size or lo.size != hi.size:
            raise GeometryError("generator count does not match thrust bounds")
        if np.any(lo > hi):
            raise GeometryError("mu_min exceeds mu_max")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "mu_min", lo)
        object.__setattr__(self, "mu_max", hi)

    def rotated(self, R) -> "Zonotope":
        return Zonotope(np.asarray(R) @ self.G, self.mu_min, self.mu_max)

    def support(self, u) -> float:
        gu = self.G.T @ np.asarray(u, float)
        return float(np.sum(np.maximum(self.mu_min * gu, self.mu_max * gu)))


def zonotope_vertices(z: Zonotope) -> np.ndarray:
    """Images of all thrust-box corners, deduplicated (superset of the hull vertices)."""
    m = z.G.shape[1]
    if m > MAX_GENERATORS:
        raise GeometryError(f"{m} generators exceeds enumeration limit {MAX_GENERATORS}")
    corners = np.array(list(itertools.product(*zip(z.mu_min, z.mu_max))))
    pts = corners @ z.G.T
    return _dedup(pts, 1e-9 * max(1.0, float(np.max(np.abs(pts)))))


def hrep_from_vertices(vertices) -> Polytope:
    """Facet description of the convex hull of ``vertices`` (dimension 1 to 3).

    Rows are unit normals; coplanar hull simplices are merged.
    """
    V = np.atleast_2d(np.asarray(vertices, float))
    d = V.shape[1]
    if d == 1:
        lo, hi = V[:, 0].min(), V[:, 0].max()
        if hi - lo <= FACET_TOL:
            raise DegenerateHullError("points do not span the line")
        return Polytope(np.array([[1.0], [-1.0]]), np.array([hi, -lo]))
    if d > 3:
        raise GeometryError("hull dimension above 3 is not supported")
    try:
        hull = ConvexHull(V)
    except QhullError as exc:
        raise DegenerateHullError(f"hull is lower dimensional: {exc.args[0].splitlines()[0]}") from None
    eq = hull.equations
    normals = eq[:, :-1]
    norms = np.linalg.norm(normals, axis=1)
    H = normals / norms[:, None]
    b = -eq[:, -1] / norms
    rows: list[tuple[np.ndarray, float]] = []
    for h, bi in zip(H, b):
        if not any(np.max(np.abs(h - h2)) <= FACET_TOL and abs(bi - b2) <= FACET_TOL * max(1.0, abs(bi))
                   for h2, b2 in rows):
            rows.append((h, bi))
    return Polytope(np.array([r[0] for r in rows]), np.array([r[1] for r in rows]))


def inscribed_sphere_radius(p: Polytope) -> float:
    """Radius of the largest origin-centered ball inside ``p``."""
    if not p.origin_inside():
        raise GeometryError("origin is not strictly inside the polytope")
    return float(np.min(p.b / np.linalg.norm(p.H, axis=1)))


_PHI = (1.0 + 5.0 ** 0.5) / 2.0


def icosahedron_vertices(radius: float = 1.0) -> np.ndarray:
    base = []
    for s1 in (-1.0, 1.0):
        for s2 in (-1.0, 1.0):
            base += [(0.0, s1, s2 * _PHI), (s1, s2 * _PHI, 0.0), (s2 * _PHI, 0.0, s1)]
    V = np.array(base)
    return radius * V / np.linalg.norm(V, axis=1)[:, None]


def inscribed_polytope(radius: float, shape: str = "cube", dim: int = 3) -> Polytope:
    """Polytope with all vertices on the sphere of ``radius``.

    ``cube`` generalizes to a square in 2-D and an interval in 1-D;
    ``icosahedron`` is 3-D only.
    """
    if not radius > 0:
        raise GeometryError(f"radius must be positive, got {radius}")
    if shape == "cube":
        half = radius / np.sqrt(dim)
        return Polytope.box(np.full(dim, half))
    if shape == "icosahedron":
        if dim != 3:
            raise GeometryError("icosahedron requires dim=3")
        return hrep_from_vertices(icosahedron_vertices(radius))
    raise GeometryError(f"unknown inscribed shape {shape!r}")


def _check_K(K, n: int) -> np.ndarray:
    K = np.eye(n) if K is None else np.atleast_2d(np.asarray(K, float))
    if K.shape != (n, n):
        raise GeometryError(f"K must be {n}x{n}, got {K.shape}")
    if np.linalg.matrix_rank(K) < n:
        raise GeometryError("K is singular")
    return K


def tightening_coefficients(p: Polytope, K, dbar) -> np.ndarray:
    """Per-row support of ``K [-dbar, dbar]``; tightened rows are ``b - alpha * t``."""
    dbar = np.asarray(dbar, float).reshape(-1)
    if dbar.size != p.dim:
        raise GeometryError(f"disturbance bound has {dbar.size} entries, polytope dim is {p.dim}")
    if np.any(dbar < 0):
        raise GeometryError("disturbance bound must be nonnegative")
    K = _check_K(K, p.dim)
    return np.abs(p.H @ K) @ dbar


def tighten(p: Polytope, K, dbar, alpha: float) -> Polytope:
    """Minkowski difference ``p - alpha K [-dbar, dbar]`` for a box disturbance."""
    if alpha < 0:
        raise GeometryError(f"alpha must be nonnegative, got {alpha}")
    return Polytope(p.H, p.b - alpha * tightening_coefficients(p, K, dbar))


def box_vertices(upper) -> np.ndarray:
    upper = np.asarray(upper, float)
    return np.array(list(itertools.product(*[(-u, u) for u in upper])))


def check_assumption2(U: Polytope, K, dbar) -> bool:
    """True when ``-U`` contains every corner of ``K [-dbar, dbar]``."""
    dbar = np.asarray(dbar, float).reshape(-1)
    if dbar.size != U.dim:
        raise GeometryError(f"disturbance bound has {dbar.size} entries, U has dim {U.dim}")
    K = _check_K(K, U.dim)
    corners = box_vertices(dbar) @ K.T
    return bool(np.all((-U.H) @ corners.T <= U.b[:, None] + 1e-12))


def alpha_max_for_zero_input(U: Polytope, K, dbar) -> float:
    """Largest alpha keeping the origin in the tightened set (inf without disturbance)."""
    if not np.all(U.b >= 0):
        raise GeometryError("origin is outside U")
    t = tightening_coefficients(U, K, dbar)
    pos = t > 0
    if not np.any(pos):
        return float("inf")
    return float(np.min(U.b[pos] / t[pos]))
