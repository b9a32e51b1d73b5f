"""Explicit ReLU gadgets (product, squared distance, ball indicator, chart projection,
B-spline) and their assembly into one ConvResNet approximating a target on a manifold."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import bspline_engine as bs
from . import manifold_lab as ml
from .network_calculus import (
    CalculusError,
    cnn_chain,
    cnn_compose,
    cnn_lift_encoded_input,
    cnn_rescale,
    cnn_scale_output,
    cnn_stack,
    cnn_stack_many,
    cnn_sum_to_resnet,
    mlp_to_cnn,
)
from .network_ir import CnnNetwork, Envelope, MlpNetwork, audit, eval_cnn, eval_resnet

__all__ = [
    "BuildError",
    "StageBudgetError",
    "ToleranceBudget",
    "VerificationReport",
    "build_multiplication_net",
    "multiplication_levels",
    "build_square_net",
    "build_squared_distance_net",
    "build_indicator_net",
    "indicator_steps",
    "build_chart_projection_cnn",
    "build_bspline_mlp",
    "build_bspline_cnn",
    "bspline_cnn_envelope",
    "choose_tolerances",
    "ChartUnitKit",
    "assemble_chart_unit",
    "build_theorem1_network",
]


class BuildError(RuntimeError):
    pass


class StageBudgetError(BuildError):
    """A measured error exceeded its budget; ``stage`` names the offender."""

    def __init__(self, stage, message, report=None):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage
        self.report = report


# ---------------------------------------------------------------- small MLP kit
# A network here is a list of (W, b) pairs with ReLU after every pair but the last.


def _lin(W, b=None):
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    return [(W, np.zeros(W.shape[0]) if b is None else np.asarray(b, dtype=np.float64))]


def _then(f, g):
    """g after f, merging f's output layer into g's first layer."""
    Wf, bf = f[-1]
    Wg, bg = g[0]
    return f[:-1] + [(Wg @ Wf, Wg @ bf + bg)] + g[1:]


def _par(*nets):
    """Side by side on concatenated inputs; all parts must have the same depth."""
    depth = len(nets[0])
    if any(len(n) != depth for n in nets):
        raise BuildError("parallel parts need equal depth")
    out = []
    for li in range(depth):
        Ws = [n[li][0] for n in nets]
        W = np.zeros((sum(w.shape[0] for w in Ws), sum(w.shape[1] for w in Ws)))
        r = c = 0
        for w in Ws:
            W[r:r + w.shape[0], c:c + w.shape[1]] = w
            r += w.shape[0]
            c += w.shape[1]
        out.append((W, np.concatenate([n[li][1] for n in nets])))
    return out


def _carry(n, depth, signed=True):
    """Identity of the given depth; signed values ride as (+, -) pairs."""
    eye = np.eye(n)
    if depth == 1:
        return _lin(eye)
    if not signed:
        return [(eye, np.zeros(n))] * depth
    return ([(np.vstack([eye, -eye]), np.zeros(2 * n))] + [(np.eye(2 * n), np.zeros(2 * n))] * (depth - 2)
            + [(np.hstack([eye, -eye]), np.zeros(n))])


def _to_mlp(layers, envelope=None, provenance=None):
    return MlpNetwork([w for w, _ in layers], [b for _, b in layers], envelope=envelope, provenance=provenance)


# ---------------------------------------------------------------- products and squares


def multiplication_levels(C, eta):
    """Fewest sawtooth levels m with C^2 2^(-2m-2) < eta."""
    m = 1
    while C * C * 2.0 ** (-2 * m - 2) >= eta:
        m += 1
    return m


def _square_stage(n_branches, levels):
    """Layers after the absolute value: per branch (acc, u1, u2), interleaved across branches.

    Input per branch: (p, q) with p - q the argument and p + q = |argument|.
    Returns hidden layers only; the caller adds the output combination.
    """
    nb = n_branches
    # layer computing level-1 units from (p, q): acc = u1 = p + q, u2 = p + q - 1/2
    W = np.zeros((3 * nb, 2 * nb))
    b = np.zeros(3 * nb)
    for br in range(nb):
        for slot, bias in ((0, 0.0), (1, 0.0), (2, -0.5)):
            W[slot * nb + br, 2 * br] = 1.0
            W[slot * nb + br, 2 * br + 1] = 1.0
            b[slot * nb + br] = bias
    layers = [(W, b)]
    for s in range(2, levels + 1):
        W = np.zeros((3 * nb, 3 * nb))
        b = np.zeros(3 * nb)
        scale = 4.0 ** -(s - 1)
        for br in range(nb):
            acc, u1, u2 = br, nb + br, 2 * nb + br
            # t = 2 u1 - 4 u2 is the next sawtooth value
            W[acc, acc] = 1.0
            W[acc, u1] = -2.0 * scale
            W[acc, u2] = 4.0 * scale
            W[u1, u1], W[u1, u2] = 2.0, -4.0
            W[u2, u1], W[u2, u2] = 2.0, -4.0
            b[u2] = -0.5
        layers.append((W, b))
    return layers


def _square_readout(nb, levels, weights):
    """Row vector giving sum_br weights[br] * (acc - t_m / 4^m) for each branch."""
    last = 4.0 ** -levels
    out = np.zeros(3 * nb)
    for br, w in enumerate(weights):
        out[br] = w
        out[nb + br] = -2.0 * last * w
        out[2 * nb + br] = 4.0 * last * w
    return out


def build_square_net(levels):
    """Sawtooth square approximation on [0, 1]: error in [0, 2^(-2 levels - 2)]."""
    first = _lin(np.array([[1.0], [-1.0]]))[0]
    layers = [first] + _square_stage(1, levels)
    layers.append((_square_readout(1, levels, [1.0])[None, :], np.zeros(1)))
    return _to_mlp(layers, provenance={"op": "square", "params": {"levels": levels}})


def _mult_layers(C, levels):
    inv = 1.0 / (2.0 * C)
    # rows: (x+y)+, (x+y)-, (x-y)+, (x-y)- scaled into [0, 1]
    W1 = inv * np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
    layers = [(W1, np.zeros(4))] + _square_stage(2, levels)
    layers.append((_square_readout(2, levels, [C * C, -C * C])[None, :], np.zeros(1)))
    return layers


def build_multiplication_net(C_bound, eta):
    """(x, y) -> approximately x*y on [-C, C]^2 with error below eta.

    Uses xy = C^2 (|x+y|^2 - |x-y|^2) / (4 C^2) with a sawtooth square on each
    branch.  The two branches are interleaved unit by unit so that x = 0 or
    y = 0 makes them bitwise identical and the output cancels to exactly 0.
    """
    if not 0 < eta < 1:
        raise BuildError(f"eta must lie in (0, 1), got {eta}")
    if not C_bound > 0:
        raise BuildError("C_bound must be positive")
    C = float(C_bound)
    levels = multiplication_levels(C, eta)
    layers = _mult_layers(C, levels)
    env = Envelope(L=levels + 2, J=6, kappa1=max(C * C, 4.0))
    return _to_mlp(layers, envelope=env,
                   provenance={"op": "multiplication", "params": {"C": C, "eta": eta, "levels": levels}})


# ---------------------------------------------------------------- distance and indicator


def _distance_levels(theta):
    m = 1
    while 2.0 ** (-2 * m - 2) > theta / 2:
        m += 1
    return m


def build_squared_distance_net(center, B, D, theta, K=2):
    """x -> 4 B^2 sum_j sq(|x_j - c_j| / (2B)), within 4 B^2 D theta of |x - c|^2, as a CNN."""
    if not 0 < theta < 1:
        raise BuildError(f"theta must lie in (0, 1), got {theta}")
    c = np.asarray(center, dtype=np.float64)
    if c.shape != (D,):
        raise BuildError(f"center must have length D={D}")
    levels = _distance_levels(theta)
    inv = 1.0 / (2.0 * B)
    W1 = np.zeros((2 * D, D))
    b1 = np.zeros(2 * D)
    for j in range(D):
        W1[2 * j, j], b1[2 * j] = inv, -c[j] * inv
        W1[2 * j + 1, j], b1[2 * j + 1] = -inv, c[j] * inv
    layers = [(W1, b1)] + _square_stage(D, levels)
    layers.append((_square_readout(D, levels, [4.0 * B * B] * D)[None, :], np.zeros(1)))
    mlp = _to_mlp(layers, envelope=Envelope(L=levels + 2, J=3 * D, kappa1=max(4.0 * B * B, 4.0)),
                  provenance={"op": "squared_distance", "params": {"theta": theta, "levels": levels}})
    return mlp_to_cnn(mlp, D, 1 if D == 1 else K)


def indicator_steps(h, Delta):
    """Doubling steps so the transition band (1 - 2^-k) h .. h is at most Delta / 2 wide."""
    return max(1, math.ceil(math.log2(2.0 * h / Delta)))


def _unit_weight(h):
    """A float w with fl(h * w) == 1 near 1/h, or None if this h has none."""
    w = 1.0 / h
    cand = w
    for _ in range(4):
        if float(h * cand) == 1.0:
            return float(cand)
        cand = np.nextafter(cand, 0.0)
    cand = w
    for _ in range(4):
        cand = np.nextafter(cand, 2.0 * w)
        if float(h * cand) == 1.0:
            return float(cand)
    return None


def _threshold_with_unit_weight(h):
    """Largest float at or a few ulps below h that has an exact reciprocal weight."""
    for _ in range(256):
        w = _unit_weight(h)
        if w is not None:
            return float(h), w
        h = float(np.nextafter(h, 0.0))
    raise BuildError(f"no threshold near {h} admits a weight w with h*w == 1")


def build_indicator_net(omega, Delta, theta, B, D):
    """Scalar a -> approximate indicator of a < omega^2, as a CNN on length-one maps.

    With h = omega^2 - 4 B^2 D theta the steps t <- ReLU(2t - h) started from
    t = a reach 0 for a <= (1 - 2^-k) h and never drop below h for a >= h; the
    output w * ReLU(h - t) is then exactly 1 or exactly 0.
    """
    if not Delta >= 8 * B * B * D * theta:
        raise BuildError(f"collar width Delta={Delta} is below 8 B^2 D theta = {8 * B * B * D * theta}")
    h = omega * omega - 4 * B * B * D * theta
    if not h > 0:
        raise BuildError("omega^2 must exceed 4 B^2 D theta")
    # shaving a few ulps off h costs nothing against the collar width
    h, w = _threshold_with_unit_weight(h)
    k = indicator_steps(h, Delta)
    layers = [(np.array([[2.0]]), np.array([-h]))]
    for _ in range(k - 1):
        layers.append((np.array([[2.0]]), np.array([-h])))
    layers.append((np.array([[-1.0]]), np.array([h])))
    layers.append((np.array([[w]]), np.zeros(1)))
    mlp = _to_mlp(layers, envelope=Envelope(L=k + 2, J=1, kappa1=max(2.0, h, w)),
                  provenance={"op": "indicator", "params": {"h": h, "steps": k, "Delta": Delta}})
    return mlp_to_cnn(mlp, 1, 1)


# ---------------------------------------------------------------- chart projection


def build_chart_projection_cnn(chart, K, coordinate=None):
    """phi(x) = scale V^T (x - center) + shift as CNNs on R^D.

    Returns one scalar CNN per chart coordinate (or only the requested one).
    Affine maps carry no approximation error.
    """
    D = chart.center.shape[0]
    if D > 1 and not 2 <= K <= D:
        raise BuildError(f"filter size {K} out of range [2, {D}]")
    coords = range(chart.d) if coordinate is None else [coordinate]
    nets = []
    for r in coords:
        w = chart.scale * chart.V[:, r]
        b = chart.shift[r] - w @ chart.center
        mlp = MlpNetwork([w[None, :]], [np.array([b])],
                         provenance={"op": "chart_projection", "params": {"coordinate": r}})
        nets.append(mlp_to_cnn(mlp, D, 1 if D == 1 else K))
    return nets if coordinate is None else nets[0]


# ---------------------------------------------------------------- B-splines


def bspline_cnn_envelope(d, m, k, eps1, K, C=1.0):
    """Depth, width and weight bounds a B-spline CNN of these parameters must respect."""
    L = 3 + 2 * math.ceil(math.log2(max(3, m) / (C * eps1)) + 5) * math.ceil(math.log2(max(d, m))) + d
    J = 24 * d * m * (m + 2) + 8 * d
    kappa = max(2.0 * (m + 1) ** m, 2.0 ** k)
    return Envelope(L=L, J=J, K=K, kappa1=kappa, kappa2=kappa)


def _psi_coefficients(m):
    U = (m + 1) / 2.0
    ls = [l for l in range(m + 2) if l < U]
    coef = [(-1) ** l * math.comb(m + 1, l) * U ** m / math.factorial(m) for l in ls]
    return U, ls, coef


def build_bspline_mlp(idx, eps1, C_mult=1.125):
    """M_{k,j,m} on R^d as a ReLU MLP, exactly zero off 2^-k (j + [0, m+1]^d).

    Each factor psi_m(t) uses the fold s = U - |t - U| (U = (m+1)/2) and the
    left-half truncated-power sum in v_l = ReLU((s - l)/U); powers come from
    a chain of approximate products and the d factors from a product tree.
    """
    m, k, d = idx.m, idx.k, idx.d
    if m < 1:
        raise BuildError("B-spline networks need order m >= 1")
    if not 0 < eps1 < 1:
        raise BuildError(f"eps1 must lie in (0, 1), got {eps1}")
    U, ls, coef = _psi_coefficients(m)
    nl = len(ls)
    A = sum(abs(c) for c in coef) * (m - 1)
    eta_b = eps1 / (1.25 * (d * A + d - 1) + 1.0)
    levels = multiplication_levels(C_mult, eta_b)
    mult = _mult_layers(C_mult, levels)
    md = len(mult)
    # fold: a_i = ReLU((t_i - U)/2), b_i = ReLU((U - t_i)/2) with t_i = 2^k z_i - j_i
    W1 = np.zeros((2 * d, d))
    b1 = np.zeros(2 * d)
    half = 2.0 ** (k - 1)
    for i, ji in enumerate(idx.j):
        W1[2 * i, i], b1[2 * i] = half, -(ji + U) / 2.0
        W1[2 * i + 1, i], b1[2 * i + 1] = -half, (ji + U) / 2.0
    W2 = np.zeros((d * nl, 2 * d))
    b2 = np.zeros(d * nl)
    for i in range(d):
        for q, l in enumerate(ls):
            W2[i * nl + q, 2 * i] = W2[i * nl + q, 2 * i + 1] = -2.0 / U
            b2[i * nl + q] = (U - l) / U
    net = [(W1, b1), (W2, b2)] + _lin(np.eye(d * nl))
    npow = d * nl
    if m >= 2:
        # state per power: (p, v) with p = v initially
        dup = np.zeros((2 * npow, npow))
        for q in range(npow):
            dup[2 * q, q] = dup[2 * q + 1, q] = 1.0
        net = _then(net, _lin(dup))
        for r in range(2, m + 1):
            last = r == m
            if last:
                step = _par(*[mult] * npow)
            else:
                fan = _lin(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]))
                one = _then(fan, _par(mult, _carry(1, md, signed=False)))
                step = _par(*[one] * npow)
            net = _then(net, step)
    # psi_i = sum_l coef_l p_{i,l}
    comb = np.zeros((d, npow))
    for i in range(d):
        comb[i, i * nl:(i + 1) * nl] = coef
    net = _then(net, _lin(comb))
    width = d
    while width > 1:
        parts = []
        pairs = width // 2
        for _ in range(pairs):
            parts.append(mult)
        if width % 2:
            parts.append(_carry(1, md, signed=True))
        net = _then(net, _par(*parts))
        width = pairs + width % 2
    return _to_mlp(net, provenance={"op": "bspline", "params": {"k": k, "j": list(idx.j), "m": m,
                                                                 "eps1": eps1, "levels": levels}})


def build_bspline_cnn(idx, eps1, K=None, C=1.0):
    """The B-spline MLP lifted to a CNN on R^d, audited against the depth/width/weight bounds."""
    d = idx.d
    if K is None:
        K = 1 if d == 1 else 2
    if d == 1:
        if K != 1:
            raise BuildError("for d = 1 only filter size 1 fits")
    elif not 2 <= K <= d:
        raise BuildError(f"filter size {K} out of range [2, {d}]")
    mlp = build_bspline_mlp(idx, eps1)
    cnn = mlp_to_cnn(mlp, d, K)
    env = bspline_cnn_envelope(d, idx.m, idx.k, eps1, K, C)
    net = CnnNetwork(cnn.layers, readout=cnn.readout, readout_bias=cnn.readout_bias, first_row_only=True,
                     envelope=env, provenance=cnn.provenance)
    rep = audit(net)
    if not rep.passed:
        raise BuildError(f"B-spline CNN outside its bounds: {rep.failures()} (measured {rep.measured}, "
                         f"declared {rep.declared})")
    return net


# ---------------------------------------------------------------- tolerances


@dataclass
class ToleranceBudget:
    eps: float
    delta: float
    eta: float
    Delta: float
    theta: float
    N: int
    C_M: int
    C: float
    c: float
    c0: float
    omega: float
    tau: float
    B: float
    D: int
    d: int
    s: float

    def as_dict(self):
        return {k: (v if not isinstance(v, float) or math.isfinite(v) else str(v))
                for k, v in self.__dict__.items()}


def choose_tolerances(eps, manifold, atlas, s, d=None, C=1.0, c=1.0, c0=1.0):
    """Split the overall error eps across charts and gadgets.

    delta = eps/(3 C_M); eta = (delta^(d/s+1))/C; Delta = omega (1 - omega/tau) eps / (3 c (pi+1) C_M);
    theta = Delta / (16 B^2 D); N = ceil((delta / (2 C c0))^(-d/s)).
    """
    if not 0 < eps < 1:
        raise BuildError(f"eps must lie in (0, 1), got {eps}")
    d = manifold.d if d is None else d
    C_M = atlas.C_M
    omega, tau, B, D = atlas.omega, manifold.tau, manifold.B, manifold.D
    delta = eps / (3 * C_M)
    eta = delta ** (d / s + 1) / C
    ratio = 0.0 if math.isinf(tau) else omega / tau
    Delta = omega * (1 - ratio) * eps / (3 * c * (math.pi + 1) * C_M)
    theta = Delta / (16 * B * B * D)
    # a zero target needs no basis terms beyond the coarsest level
    N = 1 if c0 <= 0 else math.ceil((delta / (2 * C * c0)) ** (-d / s))
    return ToleranceBudget(eps, delta, eta, Delta, theta, N, C_M, C, c, c0, omega, tau, B, D, d, s)


# ---------------------------------------------------------------- chart units


@dataclass
class ChartUnitKit:
    """Pieces shared by every unit of one chart."""

    chart: object
    projections: list
    indicator: CnnNetwork
    head: CnnNetwork
    eps1: float
    K: int
    splines: dict = field(default_factory=dict)

    def spline(self, idx):
        key = (idx.k, tuple(idx.j), idx.m)
        if key not in self.splines:
            self.splines[key] = build_bspline_cnn(idx, self.eps1)
        return self.splines[key]


def _chart_indicator(chart, budget, K):
    dist = build_squared_distance_net(chart.center, budget.B, budget.D, budget.theta, K)
    ind = build_indicator_net(chart.omega, budget.Delta, budget.theta, budget.B, budget.D)
    return cnn_compose(dist, ind)


def _spline_part(kit, idx, alpha):
    spline = cnn_scale_output(kit.spline(idx), alpha)
    D = kit.chart.center.shape[0]
    if idx.d == 1:
        return cnn_compose(kit.projections[0], spline)
    body = cnn_stack_many(kit.projections)
    return cnn_chain(body, cnn_lift_encoded_input(spline, D))


def assemble_chart_unit(kit, idx, alpha):
    """x -> approx product of alpha * M(phi(x)) and the chart's ball indicator."""
    part = _spline_part(kit, idx, alpha)
    body = cnn_stack(part, kit.indicator)
    return cnn_chain(body, kit.head), part


# ---------------------------------------------------------------- report


@dataclass
class VerificationReport:
    """Measured errors against budgets, audits and timings for one build."""

    kind: str
    config: dict
    rows: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    audit: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def add_row(self, **row):
        self.rows.append(row)

    def check(self, name, measured, bound, passed=None, detail=None):
        ok = bool(measured <= bound) if passed is None else bool(passed)
        self.checks.append({"name": name, "measured": float(measured), "bound": float(bound), "passed": ok,
                            **({"detail": detail} if detail else {})})
        return ok

    @property
    def passed(self):
        return all(c["passed"] for c in self.checks) and self.audit.get("passed", True)

    def failures(self):
        return [c["name"] for c in self.checks if not c["passed"]] + \
            ([] if self.audit.get("passed", True) else ["size_audit"])

    def as_dict(self):
        return {"kind": self.kind, "config": self.config, "passed": self.passed, "checks": self.checks,
                "audit": self.audit, "summary": self.summary, "rows": self.rows, "timings": self.timings}


# ---------------------------------------------------------------- end-to-end build


def _chart_function(manifold, atlas, target, i, Z):
    """g_i(z) = target * rho_i at the manifold point of chart i with coordinates z (0 off the ball)."""
    ch = atlas.charts[i]
    t = (Z - ch.shift[None]) / ch.scale
    X = manifold.lift(ch.center, ch.V, t)
    ok = np.all(np.isfinite(X), axis=1)
    ok[ok] = np.sum((X[ok] - ch.center) ** 2, axis=1) < ch.omega ** 2
    out = np.zeros(Z.shape[0])
    if ok.any():
        rho = ml.partition_weights(atlas, X[ok])[:, i]
        out[ok] = target(X[ok]) * rho
    return out


def _grid(n, d):
    g = np.linspace(0.0, 1.0, n)
    if d == 1:
        return g[:, None], g[1] - g[0]
    mesh = np.meshgrid(*([g] * d), indexing="ij")
    return np.stack([mm.ravel() for mm in mesh], axis=1), g[1] - g[0]


def _chart_constants(manifold, atlas, target, s, p, n_grid=None):
    """Per-chart smoothness proxy ||g||_p + ||D^s g||_p and Lipschitz estimate on a grid."""
    d = manifold.d
    n = n_grid or (2001 if d == 1 else 161)
    Z, h = _grid(n, d)
    c0s, lips = [], []
    order = max(1, math.ceil(s))
    for i in range(atlas.C_M):
        g = _chart_function(manifold, atlas, target, i, Z).reshape([n] * d)
        norm = _lp(g, p)
        deriv = 0.0
        lip = 0.0
        for ax in range(d):
            dg = np.diff(g, n=order, axis=ax) / h ** order
            deriv += _lp(dg, p)
            lip = max(lip, float(np.max(np.abs(np.diff(g, axis=ax)))) / h)
        c0s.append(norm + deriv)
        lips.append(lip)
    return c0s, lips


def _lp(a, p):
    a = np.abs(np.asarray(a)).ravel()
    if p == math.inf:
        return float(a.max())
    return float(np.mean(a ** p) ** (1.0 / p))


def _collar_samples(manifold, atlas, per_chart, Delta, rng):
    """Points whose squared distance to a chart center lies in [omega^2 - 2 Delta, omega^2]."""
    out = []
    d = manifold.d
    for ch in atlas.charts:
        dirs = rng.standard_normal((per_chart, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        goal = ch.omega ** 2 - rng.uniform(0.0, 2.0 * Delta, per_chart)
        lo = np.zeros(per_chart)
        hi = np.full(per_chart, ch.omega)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            X = manifold.lift(ch.center, ch.V, mid[:, None] * dirs)
            dist = np.sum((X - ch.center) ** 2, axis=1)
            below = np.isfinite(dist) & (dist < goal)
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        X = manifold.lift(ch.center, ch.V, lo[:, None] * dirs)
        out.append(X[np.all(np.isfinite(X), axis=1)])
    return np.concatenate(out) if out else np.zeros((0, manifold.D))


def _pow2_at_least(x):
    return 2.0 ** math.ceil(math.log2(x)) if x > 1 else 1.0


def build_theorem1_network(target, manifold, eps, K=2, omega=None, atlas=None, C=1.0, c=None,
                           c1=None, lam=None, n_samples=10000, collar_per_chart=64, seed=0,
                           max_refinements=4, strict=True, log=None):
    """Compile `target` into one ConvResNet with sup error below eps on the manifold.

    Returns (network, report).  Every stage is measured against its budget;
    with strict=True a violated budget raises StageBudgetError carrying the report.
    """
    t_start = time.perf_counter()
    say = log or (lambda *a: None)
    D, d = manifold.D, manifold.d
    if D > 1 and not 2 <= K <= D:
        raise BuildError(f"filter size {K} out of range [2, {D}]")
    s, p, q = target.s, target.p, target.q
    if omega is None:
        omega = 0.45 * min(manifold.tau, 2.0 * manifold.B) if math.isfinite(manifold.tau) else manifold.B
    if atlas is None:
        atlas = ml.build_atlas(manifold, omega, seed=seed)
    timings = {"atlas": time.perf_counter() - t_start}
    t0 = time.perf_counter()
    c0s, lips = _chart_constants(manifold, atlas, target, s, p)
    c0 = max(c0s)
    c_used = max(lips) if c is None else float(c)
    if not c_used > 0:
        # pieces with zero variation have no collar error, so any positive constant is valid
        c_used = 1.0
    budget = choose_tolerances(eps, manifold, atlas, s, d, C=C, c=c_used, c0=c0)
    timings["constants"] = time.perf_counter() - t0
    config = {"eps": eps, "K": K, "omega": atlas.omega, "C": C, "c": c_used, "c1": c1, "lambda": lam,
              "seed": seed, "manifold": manifold.as_dict(), "target": target.tags(), "C_M": atlas.C_M}
    report = VerificationReport("manifold_approx", config)
    report.summary["budget"] = budget.as_dict()
    report.summary["atlas"] = {"C_M": atlas.C_M, "multiplicity": atlas.multiplicity,
                               "count_bound": atlas.count_bound(), "covering_margin": atlas.covering_margin}
    say(f"C_M={atlas.C_M} c0={c0:.4g} c={c_used:.4g} N={budget.N} delta={budget.delta:.3g}")

    def fail(stage, msg):
        report.timings = timings
        if strict:
            raise StageBudgetError(stage, msg, report)

    # spline fits per chart
    t0 = time.perf_counter()
    fits = []
    N_used = budget.N
    for i in range(atlas.C_M):
        g = (lambda Z, i=i: _chart_function(manifold, atlas, target, i, Z))
        N_i = budget.N
        for attempt in range(max_refinements + 1):
            # the coarsest dense scale alone needs (m+1)^d terms, m = ceil(s) + 1
            plan = bs.make_plan(max(N_i, (math.ceil(s) + 2) ** d), d, s, p, q, c1=c1, lam=lam)
            appr = bs.fit_coefficients(g, plan)
            if appr.residual_sup <= budget.delta / 2 or attempt == max_refinements:
                break
            N_i *= 2
        N_used = max(N_used, plan.N)
        fits.append(appr)
        report.add_row(stage="fit", chart=i, N=plan.N, terms=len(appr), residual=appr.residual_sup,
                       budget=budget.delta / 2, norm=appr.norm_value)
        if appr.residual_sup > budget.delta / 2:
            fail("spline_fit", f"chart {i}: fit residual {appr.residual_sup:.3g} > delta/2 = {budget.delta / 2:.3g}")
    timings["fit"] = time.perf_counter() - t0
    report.summary["N_formula"] = budget.N
    report.summary["N_used"] = N_used

    # gadgets
    t0 = time.perf_counter()
    amax = max([float(np.max(np.abs(a.alphas), initial=0.0)) for a in fits] + [0.0])
    S = max([_overlap_mass(a) for a in fits] + [1e-300])
    eps1 = min(0.5, budget.delta / (2.0 * S)) if S > 0 else 0.5
    C_bound = max(1.0, amax * (1.0 + eps1))
    head_mlp = build_multiplication_net(C_bound, budget.eta)
    head = cnn_lift_encoded_input(mlp_to_cnn(head_mlp, 2, 2), D)
    report.summary.update({"eps1": eps1, "C_bound": C_bound, "alpha_max": amax,
                           "mult_levels": head_mlp.provenance["params"]["levels"]})
    units, parts, owners, kits = [], [], [], []
    shared_splines = {}
    for i, ch in enumerate(atlas.charts):
        kit = ChartUnitKit(ch, build_chart_projection_cnn(ch, K), _chart_indicator(ch, budget, K), head, eps1, K,
                           shared_splines)
        kits.append(kit)
        for idx, a in fits[i].terms():
            u, part = assemble_chart_unit(kit, idx, a)
            units.append(u)
            parts.append(part)
            owners.append(i)
    timings["assemble"] = time.perf_counter() - t0
    M = len(units)
    say(f"units={M}")
    if M == 0:
        raise BuildError("no chart units were produced")

    # shared rescale by a power of two (exact), so conv weights are O(1)
    t0 = time.perf_counter()
    L = max(u.depth for u in units)
    kappa_pre = max(max(u.envelope.kappa1, u.measured_envelope().kappa1) for u in units)
    alpha_goal = kappa_pre * 8 * K * D * M ** (1.0 / L)
    alpha = _pow2_at_least(alpha_goal)
    cap = 2.0 ** max(0, math.floor(900 / L))
    capped = alpha > cap
    alpha = min(alpha, cap)
    scaled = [cnn_rescale(u, alpha) for u in units]
    shared = scaled[0].envelope
    for u in scaled[1:]:
        shared = shared.merge_max(u.envelope)
    shared = Envelope(L=shared.L, J=shared.J, K=shared.K, kappa1=shared.kappa1, kappa2=shared.kappa2,
                      R=target.R)
    prov = [{"op": "chart_unit", "params": {"chart": owners[n], "k": int(idx.k), "j": list(idx.j),
                                            "alpha": float(a)}}
            for n, (idx, a) in enumerate((t for f in fits for t in f.terms()))]
    meta = {"kind": "manifold_approx", "D": D, "d": d, "rescale": alpha, "rescale_capped": capped}
    net = cnn_sum_to_resnet(scaled, envelope=shared, provenance=prov, meta=meta)
    report.summary.update({"M": M, "L_unit": L, "rescale": alpha, "rescale_goal": alpha_goal,
                           "rescale_capped": capped, "kappa_pre": kappa_pre})
    timings["sum"] = time.perf_counter() - t0

    # ---- measurement
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 1)
    X = ml.sample(manifold, n_samples, seed + 2)
    Xc = _collar_samples(manifold, atlas, collar_per_chart, budget.Delta, rng)
    Xall = np.concatenate([X, Xc])
    f_star = target(Xall)
    rho = ml.partition_weights(atlas, Xall)
    sq = np.sum((Xall[:, None, :] - atlas.centers()[None]) ** 2, axis=2)
    tot_ledger = 0.0
    unit_idx = np.array(owners)
    locality = 0.0
    unit_sum = np.zeros(len(Xall))
    for i, ch in enumerate(atlas.charts):
        ball = sq[:, i] < ch.omega ** 2
        Xi = Xall[ball]
        f_i = f_star[ball] * rho[ball, i]
        mine = np.nonzero(unit_idx == i)[0]
        spline_sum = np.zeros(len(Xi))
        unit_vals = np.zeros(len(Xi))
        for n in mine:
            spline_sum += eval_cnn(parts[n], Xi)
            unit_vals += eval_cnn(scaled[n], Xi)
        ind = eval_cnn(kits[i].indicator, Xi)
        A1 = float(np.max(np.abs(unit_vals - spline_sum * ind), initial=0.0))
        A2 = float(np.max(np.abs(spline_sum - f_i), initial=0.0))
        inner = sq[ball, i] <= ch.omega ** 2 - budget.Delta
        A3 = float(np.max(np.abs(f_i) * np.abs(ind - 1.0), initial=0.0))
        # indicator sandwich: 1 on the inner ball, in [0, 1] on the collar
        sandwich_ok = bool(np.all(ind[inner] == 1.0) and np.all((ind >= 0) & (ind <= 1)))
        unit_sum[ball] += unit_vals
        out = ~ball
        if out.any() and len(mine):
            Xo = Xall[out][:200]
            loc = max(float(np.max(np.abs(eval_cnn(scaled[n], Xo)))) for n in mine[: min(len(mine), 8)])
            locality = max(locality, loc)
        b1 = len(mine) * budget.eta
        b3 = c_used * (math.pi + 1) * budget.Delta / (atlas.omega * (1 - (0.0 if math.isinf(manifold.tau)
                                                                           else atlas.omega / manifold.tau)))
        report.add_row(stage="chart", chart=i, units=len(mine), A1=A1, A1_budget=b1, A2=A2, A2_budget=budget.delta,
                       A3=A3, A3_budget=b3, indicator_sandwich=sandwich_ok)
        tot_ledger += A1 + A2 + A3
        for name, val, bound in (("A1", A1, b1), ("A2", A2, budget.delta), ("A3", A3, b3)):
            if val > bound:
                report.check(f"chart{i}_{name}", val, bound)
                fail(f"chart_{name}", f"chart {i}: {val:.3g} > {bound:.3g}")
        if not sandwich_ok:
            report.check(f"chart{i}_indicator", 1.0, 0.0, passed=False)
            fail("indicator", f"chart {i}: indicator leaves the sandwich")
    timings["ledger"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    fbar = eval_resnet(net, Xall)
    timings["resnet_eval"] = time.perf_counter() - t0
    sup_err = float(np.max(np.abs(fbar - f_star)))
    struct = float(np.max(np.abs(fbar[:100] - unit_sum[:100])))
    report.check("per_chart_ledger", 0.0, 0.0, passed=not any(not c["passed"] for c in report.checks))
    report.check("sup_error", sup_err, eps)
    report.check("sandwich_sup_le_ledger", sup_err, tot_ledger + 1e-12)
    report.check("ledger_le_eps", tot_ledger, eps)
    report.check("locality", locality, 1e-12)
    report.check("structural_equality", struct, 1e-9)
    rep = audit(net)
    channel_bound = max(math.ceil(48 * d * (s + 1) * (s + 3) + 28 * d + 6 * D), math.ceil(28 * d * (s + 1) * (s + 3) + 18 * d) + 6 * D)
    report.audit = dict(rep.as_dict())
    report.audit["channel_bound"] = channel_bound
    report.audit["channel_bound_alternative"] = min(math.ceil(48 * d * (s + 1) * (s + 3) + 28 * d + 6 * D),
                                                    math.ceil(28 * d * (s + 1) * (s + 3) + 18 * d) + 6 * D)
    report.check("channels_vs_bound", rep.measured.get("J", 0), channel_bound)
    report.summary.update({"sup_error": sup_err, "ledger_total": tot_ledger, "samples": int(len(Xall)),
                           "collar_samples": int(len(Xc)), "locality_max": locality,
                           "structural_max_dev": struct})
    timings["total"] = time.perf_counter() - t_start
    report.timings = timings
    if strict and not report.passed:
        raise StageBudgetError(report.failures()[0], f"failed checks {report.failures()}", report)
    return net, report


def _overlap_mass(appr):
    """Largest possible |sum_j alpha_j (M~_j - M_j)| per unit error: (m+1)^d max|alpha| per scale."""
    total = 0.0
    for k in np.unique(appr.ks):
        a = np.abs(appr.alphas[appr.ks == k])
        total += (appr.m + 1) ** appr.d * float(a.max(initial=0.0))
    return total
