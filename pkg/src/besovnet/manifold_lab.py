"""Synthetic embedded manifolds, atlases with affine charts, a smooth partition of unity, and targets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ManifoldError",
    "SyntheticManifold",
    "Chart",
    "Atlas",
    "Target",
    "make_manifold",
    "sample",
    "build_atlas",
    "chart_map",
    "in_chart",
    "partition_weights",
    "make_target",
]

KINDS = ("circle", "sphere-2", "torus", "flat-patch")
FAMILIES = ("trig", "bump-sum", "lipschitz-kink")


class ManifoldError(ValueError):
    pass


@dataclass
class SyntheticManifold:
    """A manifold with a closed-form parameterization, placed in R^D by an orthonormal frame.

    `frame` has orthonormal columns spanning the natural coordinates
    (R^2 for the circle, R^3 for sphere and torus, R^d for the patch).
    """

    kind: str
    d: int
    D: int
    radius: float
    minor: float
    side: float
    frame: np.ndarray
    tau: float
    B: float
    SA: float

    @property
    def natural_dim(self):
        return self.frame.shape[1]

    def to_natural(self, X):
        return np.asarray(X, dtype=np.float64) @ self.frame

    def from_natural(self, Y):
        return np.asarray(Y, dtype=np.float64) @ self.frame.T

    # -- parameterization in natural coordinates

    def _embed_params(self, P):
        if self.kind == "circle":
            th = P[:, 0]
            return self.radius * np.stack([np.cos(th), np.sin(th)], axis=1)
        if self.kind == "sphere-2":
            # polar angle, azimuth
            a, b = P[:, 0], P[:, 1]
            return self.radius * np.stack([np.sin(a) * np.cos(b), np.sin(a) * np.sin(b), np.cos(a)], axis=1)
        if self.kind == "torus":
            u, v = P[:, 0], P[:, 1]
            ring = self.radius + self.minor * np.cos(v)
            return np.stack([ring * np.cos(u), ring * np.sin(u), self.minor * np.sin(v)], axis=1)
        return P.copy()

    def _jac_params(self, P):
        """d(natural point)/d(params), shape (n, natural_dim, d)."""
        if self.kind == "torus":
            u, v = P[:, 0], P[:, 1]
            ring = self.radius + self.minor * np.cos(v)
            du = np.stack([-ring * np.sin(u), ring * np.cos(u), np.zeros_like(u)], axis=1)
            dv = np.stack([-self.minor * np.sin(v) * np.cos(u), -self.minor * np.sin(v) * np.sin(u),
                           self.minor * np.cos(v)], axis=1)
            return np.stack([du, dv], axis=2)
        if self.kind == "circle":
            th = P[:, 0]
            return (self.radius * np.stack([-np.sin(th), np.cos(th)], axis=1))[:, :, None]
        raise NotImplementedError(self.kind)

    def tangent_basis(self, X):
        """Orthonormal tangent frames at manifold points X (n, D) -> (n, D, d)."""
        Y = self.to_natural(np.atleast_2d(X))
        n = Y.shape[0]
        if self.kind == "circle":
            th = np.arctan2(Y[:, 1], Y[:, 0])
            T = np.stack([-np.sin(th), np.cos(th)], axis=1)[:, :, None]
        elif self.kind == "sphere-2":
            normal = Y / np.linalg.norm(Y, axis=1, keepdims=True)
            T = np.empty((n, 3, 2))
            for i in range(n):
                # rows 1, 2 of the right singular vectors span the normal's complement
                _, _, vt = np.linalg.svd(normal[i][None, :])
                T[i] = vt[1:].T
        elif self.kind == "torus":
            J = self._jac_params(self._params_of(Y))
            T = J / np.linalg.norm(J, axis=1, keepdims=True)
        else:
            T = np.broadcast_to(np.eye(self.d), (n, self.d, self.d)).copy()
        return np.einsum("ab,nbc->nac", self.frame, T)

    def _params_of(self, Y):
        if self.kind == "circle":
            return np.arctan2(Y[:, 1], Y[:, 0])[:, None]
        if self.kind == "torus":
            u = np.arctan2(Y[:, 1], Y[:, 0])
            v = np.arctan2(Y[:, 2], np.hypot(Y[:, 0], Y[:, 1]) - self.radius)
            return np.stack([u, v], axis=1)
        if self.kind == "sphere-2":
            r = np.linalg.norm(Y, axis=1)
            return np.stack([np.arccos(np.clip(Y[:, 2] / r, -1, 1)), np.arctan2(Y[:, 1], Y[:, 0])], axis=1)
        return Y.copy()

    def coords(self, X):
        """Coordinates targets are written in: angles for circle and torus, natural coordinates otherwise."""
        Y = self.to_natural(np.atleast_2d(X))
        if self.kind in ("circle", "torus"):
            return self._params_of(Y)
        return Y

    def lift(self, center, V, t):
        """Manifold points near `center` whose tangent coordinates V^T(x - center) equal t.

        Rows that have no such point nearby come back as NaN.
        """
        t = np.atleast_2d(np.asarray(t, dtype=np.float64))
        c_nat = self.to_natural(center[None])[0]
        V_nat = self.frame.T @ V
        if self.kind == "flat-patch":
            return center[None] + t @ V.T
        if self.kind == "sphere-2":
            normal = c_nat / np.linalg.norm(c_nat)
            base = self.radius ** 2 - np.sum(t ** 2, axis=1)
            h = np.sqrt(np.where(base >= 0, base, np.nan))
            Y = t @ V_nat.T + h[:, None] * normal[None]
            return self.from_natural(Y)
        if self.kind == "circle":
            s = t[:, 0] / self.radius
            th0 = np.arctan2(c_nat[1], c_nat[0])
            direction = np.sign(V_nat[:, 0] @ np.array([-np.sin(th0), np.cos(th0)]))
            th = th0 + direction * np.arcsin(np.where(np.abs(s) <= 1, s, np.nan))
            return self.from_natural(self._embed_params(th[:, None]))
        # torus: Newton on the parameters, started at the center
        P = np.repeat(self._params_of(c_nat[None]), t.shape[0], axis=0)
        for _ in range(50):
            F = (self._embed_params(P) - c_nat[None]) @ V_nat - t
            J = np.einsum("ba,nbc->nac", V_nat, self._jac_params(P))
            step = np.linalg.solve(J, F[:, :, None])[:, :, 0]
            P = P - step
            if np.max(np.abs(step)) < 1e-15:
                break
        Y = self._embed_params(P)
        F = (Y - c_nat[None]) @ V_nat - t
        bad = np.max(np.abs(F), axis=1) > 1e-10
        Y[bad] = np.nan
        return self.from_natural(Y)

    def as_dict(self):
        return {"kind": self.kind, "d": self.d, "D": self.D, "radius": self.radius, "minor": self.minor,
                "side": self.side, "tau": self.tau, "B": self.B, "SA": self.SA}


def make_manifold(kind, D=None, radius=1.0, minor=0.3, side=1.0, d=2, rotation_seed=None):
    """Build one of the synthetic manifolds; a rotation seed embeds it in a random orientation."""
    if kind not in KINDS:
        raise ManifoldError(f"unknown manifold kind {kind!r}; expected one of {KINDS}")
    if kind == "circle":
        dim, nat, tau, SA = 1, 2, radius, 2 * math.pi * radius
        B = radius
    elif kind == "sphere-2":
        dim, nat, tau, SA = 2, 3, radius, 4 * math.pi * radius ** 2
        B = radius
    elif kind == "torus":
        if not 0 < minor < radius:
            raise ManifoldError("torus needs 0 < minor < radius")
        dim, nat = 2, 3
        tau = min(minor, radius - minor)
        SA = 4 * math.pi ** 2 * radius * minor
        B = radius + minor
    else:
        dim, nat = d, d
        tau = math.inf
        SA = side ** d
        B = side * math.sqrt(d) / 2
    D = nat if D is None else int(D)
    if D < nat:
        raise ManifoldError(f"ambient dimension {D} is below the natural dimension {nat}")
    if rotation_seed is None:
        frame = np.eye(D)[:, :nat]
    else:
        g = np.random.default_rng(rotation_seed).standard_normal((D, D))
        q, r = np.linalg.qr(g)
        frame = (q * np.sign(np.diag(r)))[:, :nat]
    return SyntheticManifold(kind, dim, D, float(radius), float(minor), float(side), frame, tau, B, SA)


def sample(manifold, n, seed=0):
    """n points distributed uniformly for the surface measure; same seed, same points."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    if manifold.kind == "circle":
        th = rng.uniform(0, 2 * math.pi, n)
        Y = manifold._embed_params(th[:, None])
    elif manifold.kind == "sphere-2":
        g = rng.standard_normal((n, 3))
        Y = manifold.radius * g / np.linalg.norm(g, axis=1, keepdims=True)
    elif manifold.kind == "torus":
        # area element is proportional to R + r cos v
        R, r = manifold.radius, manifold.minor
        out = []
        need = n
        while need > 0:
            v = rng.uniform(0, 2 * math.pi, 2 * need)
            keep = rng.uniform(0, R + r, 2 * need) < R + r * np.cos(v)
            out.append(v[keep][:need])
            need -= out[-1].size
        v = np.concatenate(out)
        u = rng.uniform(0, 2 * math.pi, n)
        Y = manifold._embed_params(np.stack([u, v], axis=1))
    else:
        Y = rng.uniform(-manifold.side / 2, manifold.side / 2, (n, manifold.d))
    return manifold.from_natural(Y)


@dataclass
class Chart:
    """phi(x) = scale * V^T (x - center) + shift on the ball |x - center| < omega."""

    center: np.ndarray
    omega: float
    V: np.ndarray
    scale: float
    shift: np.ndarray

    @property
    def d(self):
        return self.V.shape[1]

    def as_dict(self):
        return {"center": self.center.tolist(), "omega": self.omega, "V": self.V.tolist(),
                "scale": self.scale, "shift": self.shift.tolist()}


@dataclass
class Atlas:
    manifold: SyntheticManifold
    charts: list
    omega: float
    multiplicity: float = math.nan
    covering_margin: float = math.nan
    stats: dict = field(default_factory=dict)

    @property
    def C_M(self):
        return len(self.charts)

    def centers(self):
        return np.array([c.center for c in self.charts])

    def count_bound(self):
        """ceil(SA / omega^d * T) with T the measured mean covering multiplicity."""
        return math.ceil(self.manifold.SA / self.omega ** self.manifold.d * self.multiplicity)


def chart_map(chart, x):
    x = np.asarray(x, dtype=np.float64)
    return chart.scale * ((x - chart.center) @ chart.V) + chart.shift


def in_chart(chart, x):
    x = np.asarray(x, dtype=np.float64)
    return np.sum((x - chart.center) ** 2, axis=-1) <= chart.omega ** 2


def _sq_dists(X, C):
    return np.maximum(np.sum(X ** 2, 1)[:, None] - 2 * X @ C.T + np.sum(C ** 2, 1)[None, :], 0.0)


def build_atlas(manifold, omega, seed=0, n_dense=20000, fill=0.75, margin=0.05):
    """Cover the manifold by balls of radius omega centered on manifold points.

    Centers come from farthest-point traversal of a dense sample, stopping once
    every sample is within fill * omega of a center.  Each chart maps its ball
    into [margin, 1 - margin]^d.
    """
    if not omega > 0:
        raise ManifoldError("omega must be positive")
    if not omega < manifold.tau / 2:
        raise ManifoldError(f"omega={omega} must be below half the reach ({manifold.tau / 2})")
    X = sample(manifold, n_dense, seed)
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n_dense))
    centers = [first]
    dist = np.sqrt(np.sum((X - X[first]) ** 2, axis=1))
    while dist.max() > fill * omega:
        nxt = int(np.argmax(dist))
        centers.append(nxt)
        dist = np.minimum(dist, np.sqrt(np.sum((X - X[nxt]) ** 2, axis=1)))
    C = X[centers]
    V = manifold.tangent_basis(C)
    scale = (0.5 - margin) / omega
    charts = [Chart(C[i].copy(), float(omega), V[i], scale, np.full(manifold.d, 0.5)) for i in range(len(centers))]
    atlas = Atlas(manifold, charts, float(omega))
    sq = _sq_dists(X, C)
    atlas.multiplicity = float(np.mean(np.sum(sq <= omega ** 2, axis=1)))
    atlas.covering_margin = float(np.min(np.max(omega ** 2 - sq, axis=1)))
    atlas.stats = {"dense_samples": n_dense, "fill": fill, "max_gap": float(dist.max())}
    return atlas


class PartitionError(ManifoldError):
    pass


def partition_weights(atlas, x):
    """rho_i(x) = beta_i / sum_j beta_j with beta_i = exp(-1 / (1 - |x - c_i|^2 / omega^2)) inside the ball.

    Accepts one point (returns (C_M,)) or a batch (returns (n, C_M)).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    sq = _sq_dists(X, atlas.centers())
    t = sq / atlas.omega ** 2
    inside = t < 1.0
    covered = inside.any(axis=1)
    if not covered.all():
        i = int(np.argmin(covered))
        raise PartitionError(f"point {i} lies in no chart; nearest center at distance "
                             f"{math.sqrt(sq[i].min()):.6g} > omega={atlas.omega}")
    logb = np.where(inside, -1.0 / np.where(inside, 1.0 - t, 1.0), -np.inf)
    logb -= logb.max(axis=1, keepdims=True)
    b = np.where(inside, np.exp(logb), 0.0)
    rho = b / b.sum(axis=1, keepdims=True)
    return rho[0] if single else rho


@dataclass
class Target:
    """A target function on the manifold with its smoothness and size tags."""

    family: str
    fn: object
    s: float
    p: float
    q: float
    R: float
    c0_proxy: float
    lipschitz: float | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        out = self.fn(np.atleast_2d(X))
        return float(out[0]) if single else out

    def tags(self):
        return {"family": self.family, "s": self.s, "p": self.p, "q": self.q, "R": self.R,
                "c0_proxy": self.c0_proxy, "lipschitz": self.lipschitz, "params": self.params}


def _default_terms(manifold):
    if manifold.kind == "circle":
        return [[1.0, [1.0], 0.0]]
    if manifold.kind == "torus":
        return [[0.6, [1.0, 0.0], 0.0], [0.4, [0.0, 1.0], 0.5]]
    nat = manifold.natural_dim
    return [[1.0, [math.pi / (2 * max(manifold.radius, manifold.side))] * nat, 0.0]]


def make_target(manifold, family, params=None, seed=0):
    """Concrete target families.

    trig: sum amp * cos(<freq, coords> + phase)      (params: terms = [[amp, freq, phase], ...])
    bump-sum: sum height * exp(-1 / (1 - |x - p|^2 / width^2)) over bumps centered on manifold samples
    lipschitz-kink: sum amp * |sin(<freq, coords> + phase)|
    """
    params = dict(params or {})
    if family not in FAMILIES:
        raise ManifoldError(f"unknown target family {family!r}; expected one of {FAMILIES}")
    p_tag, q_tag = float(params.get("p", 2.0)), float(params.get("q", 2.0))
    if family in ("trig", "lipschitz-kink"):
        terms = params.get("terms") or _default_terms(manifold)
        amps = np.array([float(t[0]) for t in terms])
        freqs = np.array([np.atleast_1d(np.asarray(t[1], dtype=np.float64)) for t in terms])
        phases = np.array([float(t[2]) if len(t) > 2 else 0.0 for t in terms])
        kink = family == "lipschitz-kink"

        def fn(X):
            arg = manifold.coords(X) @ freqs.T + phases[None]
            wave = np.abs(np.sin(arg)) if kink else np.cos(arg)
            return wave @ amps

        fnorm = np.linalg.norm(freqs, axis=1)
        # coordinate speed: angles move at most 1/(smallest radius) per unit length
        speed = 1.0
        if manifold.kind == "circle":
            speed = 1.0 / manifold.radius
        elif manifold.kind == "torus":
            speed = 1.0 / manifold.minor
        lip = float(np.sum(np.abs(amps) * fnorm) * speed)
        s = float(params.get("s", 1.0 if kink else 2.0))
        c0 = float(np.sum(np.abs(amps) * (1 + (fnorm * speed) ** s)))
        R = float(np.sum(np.abs(amps)))
        stored = {"terms": [[float(a), f.tolist(), float(ph)] for a, f, ph in zip(amps, freqs, phases)]}
        return Target(family, fn, s, p_tag, q_tag, R, c0, lip, stored)
    count = int(params.get("count", 3))
    width = float(params.get("width", 0.5 * max(manifold.radius if manifold.kind != "flat-patch" else manifold.side,
                                                 1e-12)))
    if "centers" in params:
        P = np.asarray(params["centers"], dtype=np.float64)
    else:
        P = sample(manifold, count, seed)
    heights = np.asarray(params.get("heights", np.linspace(1.0, -0.5, len(P))), dtype=np.float64)

    def fn(X):
        t = _sq_dists(X, P) / width ** 2
        ins = t < 1.0
        return np.where(ins, np.exp(-1.0 / np.where(ins, 1.0 - t, 1.0)), 0.0) @ heights

    s = float(params.get("s", 2.0))
    R = float(np.sum(np.abs(heights)) * math.exp(-1.0))
    c0 = float(np.sum(np.abs(heights)) * (1 + (4.0 / width) ** s))
    # |d/dr exp(-1/(1-r^2/w^2))| peaks near 0.4 * 2/w
    lip = float(np.sum(np.abs(heights)) * 0.8 / width)
    stored = {"centers": P.tolist(), "heights": heights.tolist(), "width": width}
    return Target(family, fn, s, p_tag, q_tag, R, c0, lip, stored)
