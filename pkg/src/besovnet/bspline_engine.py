"""Cardinal B-splines, sparse-grid plans, coefficient fitting and the sequence quasi-norm."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BSplineIndex",
    "SparseGridPlan",
    "SplineApproximant",
    "PlanError",
    "FitError",
    "eval_psi",
    "eval_psi_truncated_power",
    "eval_tensor_bspline",
    "dense_count",
    "make_plan",
    "fit_coefficients",
    "eval_approximant",
    "quasi_norm",
    "design_matrix",
]


class PlanError(ValueError):
    """Smoothness parameters outside the regime a plan supports."""


class FitError(RuntimeError):
    """Coefficient fitting failed (rank deficiency or coefficient cap)."""


def eval_psi(m, x):
    """Cardinal B-spline of order m (support [0, m+1]) by the two-term recursion.

    psi_0 is the indicator of [0, 1); psi_m(x) = (x psi_{m-1}(x) + (m+1-x) psi_{m-1}(x-1)) / m.
    """
    if m < 0:
        raise ValueError("order must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    # values of psi_r(x - i) for i = 0..m, built up from r = 0
    vals = [((x - i >= 0.0) & (x - i < 1.0)).astype(np.float64) for i in range(m + 1)]
    for r in range(1, m + 1):
        nxt = []
        for i in range(m + 1 - r):
            t = x - i
            nxt.append((t * vals[i] + (r + 1 - t) * vals[i + 1]) / r)
        vals = nxt
    out = vals[0]
    return out if out.ndim else float(out)


def eval_psi_truncated_power(m, x):
    """psi_m from the truncated-power sum (1/m!) sum_j (-1)^j C(m+1, j) (x-j)_+^m."""
    x = np.asarray(x, dtype=np.float64)
    acc = np.zeros_like(x)
    for j in range(m + 2):
        t = x - j
        if m == 0:
            term = (t >= 0).astype(np.float64)
        else:
            term = np.where(t > 0, t, 0.0) ** m
        acc = acc + (-1) ** j * math.comb(m + 1, j) * term
    acc = acc / math.factorial(m)
    acc = np.where((x < 0) | (x > m + 1), 0.0, acc)
    return acc if acc.ndim else float(acc)


@dataclass(frozen=True)
class BSplineIndex:
    """M_{k,j,m}(x) = prod_i psi_m(2^k x_i - j_i)."""

    k: int
    j: tuple
    m: int

    @property
    def d(self):
        return len(self.j)

    def support(self):
        s = 2.0 ** (-self.k)
        return [(s * ji, s * (ji + self.m + 1)) for ji in self.j]


def eval_tensor_bspline(idx, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    if xb.shape[1] != idx.d:
        raise ValueError(f"point dimension {xb.shape[1]} != index dimension {idx.d}")
    scale = 2.0 ** idx.k
    out = np.ones(xb.shape[0])
    for i, ji in enumerate(idx.j):
        out = out * eval_psi(idx.m, scale * xb[:, i] - ji)
    return out[0] if single else out


def design_matrix(ks, js, m, X):
    """Columns M_{k,j,m} evaluated at rows of X (n, d)."""
    X = np.asarray(X, dtype=np.float64)
    ks = np.asarray(ks)
    js = np.asarray(js).reshape(len(ks), -1)
    A = np.ones((X.shape[0], len(ks)))
    for i in range(js.shape[1]):
        A *= eval_psi(m, (2.0 ** ks)[None, :] * X[:, i:i + 1] - js[None, :, i])
    return A


def _shifts(k, m, d):
    """Shifts whose support meets (0, 1)^d: j in {-m, ..., 2^k - 1}^d."""
    rng = range(-m, 2 ** k)
    return [tuple(t) for t in itertools.product(rng, repeat=d)]


def dense_count(H, m, d):
    return sum((2 ** k + m) ** d for k in range(H + 1))


@dataclass
class SparseGridPlan:
    N: int
    d: int
    s: float
    p: float
    q: float
    m: int
    c1: float
    lam: float
    nu: float
    u: float
    H: int
    H_star: int
    n_k: dict = field(default_factory=dict)
    dense_terms: int = 0
    tail_cap_hits: list = field(default_factory=list)

    @property
    def total(self):
        return self.dense_terms + sum(self.n_k.values())

    def shifts(self, k):
        return _shifts(k, self.m, self.d)

    def as_dict(self):
        return {"N": self.N, "d": self.d, "s": self.s, "p": _jnum(self.p), "q": _jnum(self.q), "m": self.m,
                "c1": self.c1, "lambda": self.lam, "nu": _jnum(self.nu), "u": self.u, "H": self.H,
                "H_star": self.H_star, "n_k": {str(k): v for k, v in self.n_k.items()},
                "dense_terms": self.dense_terms, "total": self.total}


def _jnum(x):
    return "inf" if x == math.inf else x


def _tail(N, H, lam, nu, m, d):
    if lam <= 0:
        return H, {}, []
    top = math.ceil(math.log(lam * N) / nu) + H + 1
    nk, hits = {}, []
    for k in range(H + 1, top + 1):
        want = math.ceil(lam * N * 2.0 ** (-nu * (k - H)))
        avail = (2 ** k + m) ** d
        if want > avail:
            hits.append(k)
        nk[k] = min(want, avail)
    return top, nk, hits


def make_plan(N, d, s, p=2.0, q=2.0, m=None, c1=None, lam=None):
    """Scale cutoffs and per-scale counts for a budget of N basis functions.

    H = ceil(c1 log N / d) dense scales, then a tail of geometrically shrinking
    counts n_k = ceil(lam N 2^{-nu (k - H)}) up to H*.  c1 defaults to d and is
    lowered when the dense part alone would exceed N; lam defaults to the
    largest value that keeps the total within N.
    """
    N = int(N)
    if N < 1:
        raise PlanError("budget must be positive")
    if m is None:
        m = math.ceil(s) + 1
    inv_p = 0.0 if p == math.inf else 1.0 / p
    u = d * inv_p
    if not s > u:
        raise PlanError(f"smoothness s={s} must exceed d/p={u}")
    if not 0 < s < min(m, m - 1 + inv_p):
        raise PlanError(f"need 0 < s < min(m, m - 1 + 1/p) = {min(m, m - 1 + inv_p)} (s={s}, m={m}, p={p})")
    logN = math.log(N) if N > 1 else 0.0

    def H_of(c):
        return max(0, math.ceil(c * logN / d)) if logN > 0 else 0

    if dense_count(0, m, d) > N:
        raise PlanError(f"budget {N} is below the coarsest dense level ({dense_count(0, m, d)} terms)")
    if c1 is None:
        c1 = float(d)
        if dense_count(H_of(c1), m, d) > N:
            H_max = 0
            while dense_count(H_max + 1, m, d) <= N:
                H_max += 1
            # any c1 in ((H_max - 1) d / log N, H_max d / log N] gives H = H_max
            c1 = (H_max - 0.5) * d / logN if H_max > 0 else 0.0
    H = H_of(c1)
    dense = dense_count(H, m, d)
    if dense > N:
        raise PlanError(f"dense part up to H={H} needs {dense} > N={N} terms; lower c1")
    nu = math.inf if u == 0 else (s - u) / (2 * u)
    if u == 0:
        return SparseGridPlan(N, d, s, p, q, m, c1, 0.0, nu, u, H, H, {}, dense)
    room = N - dense

    def fits(lmb):
        _, nk, _ = _tail(N, H, lmb, nu, m, d)
        return sum(nk.values()) <= room

    if lam is None:
        lo, hi = 0.0, 1.0
        while fits(hi) and hi < 1e6:
            lo, hi = hi, hi * 2
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if fits(mid):
                lo = mid
            else:
                hi = mid
        lam = lo
    elif not fits(lam):
        raise PlanError(f"lambda={lam} exceeds the budget")
    top, nk, hits = _tail(N, H, lam, nu, m, d)
    return SparseGridPlan(N, d, s, p, q, m, c1, lam, nu, u, H, max(top, H), nk, dense, hits)


@dataclass
class SplineApproximant:
    m: int
    d: int
    ks: np.ndarray
    js: np.ndarray
    alphas: np.ndarray
    plan: SparseGridPlan | None = None
    residual_sup: float = math.nan
    residual_rms: float = math.nan
    norm_value: float = math.nan
    selected: np.ndarray | None = None
    truncated: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.alphas)

    def terms(self):
        for k, j, a in zip(self.ks, self.js, self.alphas):
            yield BSplineIndex(int(k), tuple(int(t) for t in j), self.m), float(a)

    def nonzero(self):
        keep = self.alphas != 0.0
        return SplineApproximant(self.m, self.d, self.ks[keep], self.js[keep], self.alphas[keep], self.plan,
                                 self.residual_sup, self.residual_rms, self.norm_value)


def _local_basis(k, m, X):
    """Nonzero (point, shift) pairs of level k at points X (n, d).

    Returns rows, flat column ids over the shift box {-m, ..., 2^k - 1}^d, and values.
    """
    n, d = X.shape
    scale = 2.0 ** k
    width = 2 ** k + m
    base = np.floor(scale * X).astype(np.int64)
    rows, cols, vals = [], [], []
    for offs in itertools.product(range(m + 1), repeat=d):
        col = np.zeros(n, dtype=np.int64)
        val = np.ones(n)
        ok = np.ones(n, dtype=bool)
        for i in range(d):
            j = base[:, i] - offs[i]
            ok &= (j >= -m) & (j <= 2 ** k - 1)
            val = val * eval_psi(m, scale * X[:, i] - j)
            col = col * width + (j + m)
        ok &= val != 0.0
        rows.append(np.nonzero(ok)[0])
        cols.append(col[ok])
        vals.append(val[ok])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def _flat_shift(js, k, m):
    width = 2 ** k + m
    flat = np.zeros(js.shape[0], dtype=np.int64)
    for i in range(js.shape[1]):
        flat = flat * width + (js[:, i] + m)
    return flat


def _as_points(x, d):
    x = np.asarray(x, dtype=np.float64)
    if d == 1:
        return x.reshape(-1, 1), x.ndim == 0
    if x.ndim == 1:
        return x[None], True
    return x, False


def eval_approximant(appr, x):
    """Sum of alpha * M_{k,j,m}(x) over stored terms, accumulated scale by scale."""
    X, single = _as_points(x, appr.d)
    out = np.zeros(X.shape[0])
    for k in np.unique(appr.ks):
        sel = appr.ks == k
        flat = _flat_shift(appr.js[sel], int(k), appr.m)
        coef = dict()
        for f, a in zip(flat, appr.alphas[sel]):
            coef[int(f)] = coef.get(int(f), 0.0) + float(a)
        keys = np.array(sorted(coef))
        table = np.array([coef[t] for t in keys])
        rows, cols, vals = _local_basis(int(k), appr.m, X)
        pos = np.searchsorted(keys, cols)
        pos = np.minimum(pos, len(keys) - 1)
        hit = keys[pos] == cols
        np.add.at(out, rows[hit], vals[hit] * table[pos[hit]])
    return float(out[0]) if single else out


def quasi_norm(appr, s, p, q):
    """(sum_k [2^{k(s - d/p)} (sum_j |a_kj|^p)^{1/p}]^q)^{1/q}, sup-forms for infinite p, q."""
    if len(appr) == 0:
        return 0.0
    d = appr.d
    inv_p = 0.0 if p == math.inf else 1.0 / p
    per_level = []
    for k in np.unique(appr.ks):
        a = np.abs(appr.alphas[appr.ks == k])
        inner = float(a.max()) if p == math.inf else float(np.sum(a ** p) ** (1.0 / p))
        per_level.append(2.0 ** (k * (s - d * inv_p)) * inner)
    per_level = np.array(per_level)
    if q == math.inf:
        return float(per_level.max())
    return float(np.sum(per_level ** q) ** (1.0 / q))


# ---------------------------------------------------------------- fitting


def _uniform_grid(per_dim, d):
    g = np.linspace(0.0, 1.0, per_dim)
    if d == 1:
        return g[:, None]
    mesh = np.meshgrid(*([g] * d), indexing="ij")
    return np.stack([mm.ravel() for mm in mesh], axis=1)


MAX_GRID_POINTS = 300_000


def _level_points(k, m, d, oversample, at_least=0):
    rate = max(2, math.ceil(oversample ** (1.0 / d)))
    per_dim = rate * 2 ** k + 1
    while per_dim ** d < max(oversample * (2 ** k + m) ** d, at_least):
        per_dim += 1
    return per_dim


def _level_grid(k, m, d, oversample, at_least=0):
    """Uniform grid resolving scale k with oversample x as many points as level-k shifts."""
    return _uniform_grid(_level_points(k, m, d, oversample, at_least), d)


def _level_design(k, m, X):
    from scipy import sparse

    rows, cols, vals = _local_basis(k, m, X)
    ncol = (2 ** k + m) ** X.shape[1]
    return sparse.csc_matrix((vals, (rows, cols)), shape=(X.shape[0], ncol))


class _Greedy:
    """Order-recursive greedy selection on a dense design: pick the column whose
    addition most reduces the least-squares residual, keep an orthonormal basis."""

    def __init__(self, y, dep_tol=1e-7):
        self.y = y
        self.r = y.copy()
        self.Q = np.zeros((y.size, 0))
        self.picked = []
        self.dep_tol = dep_tol

    def run(self, A, stop_rel=1e-13):
        P = A.copy()
        base = np.linalg.norm(A, axis=0)
        alive = base > 0
        ynorm = max(np.linalg.norm(self.y), 1e-300)
        while True:
            pn = np.linalg.norm(P, axis=0)
            ok = alive & (pn > self.dep_tol * np.maximum(base, 1e-300))
            if not ok.any() or np.linalg.norm(self.r) <= stop_rel * ynorm:
                break
            score = np.where(ok, (P.T @ self.r) ** 2 / np.where(ok, pn ** 2, 1.0), -1.0)
            best = int(np.argmax(score))
            if score[best] <= (stop_rel * ynorm) ** 2:
                break
            q = P[:, best] / pn[best]
            q = q - self.Q @ (self.Q.T @ q)
            q /= np.linalg.norm(q)
            self.Q = np.column_stack([self.Q, q])
            self.r = self.r - q * (q @ self.r)
            P -= np.outer(q, q @ P)
            alive[best] = False
            self.picked.append(best)
        return self.picked


def _level_pursuit(A, r0, limit, k, stop_rel=1e-13):
    """Pick up to `limit` columns of the sparse level design greedily, refitting
    the picked set by least squares after every pick."""
    from scipy.linalg import cho_factor, cho_solve, LinAlgError

    norms2 = np.asarray(A.multiply(A).sum(axis=0)).ravel()
    usable = norms2 > 0
    scale = max(np.linalg.norm(r0), 1e-300)
    picked, coef = [], np.zeros(0)
    r = r0.copy()
    floor = (stop_rel * scale) ** 2
    while len(picked) < limit:
        c = A.T @ r
        score = np.where(usable, c ** 2 / np.where(usable, norms2, 1.0), -1.0)
        best = int(np.argmax(score))
        if score[best] <= floor:
            break
        picked.append(best)
        usable[best] = False
        S = A[:, picked]
        G = (S.T @ S).toarray()
        try:
            coef = cho_solve(cho_factor(G), S.T @ r0)
        except LinAlgError:
            raise FitError(f"rank-deficient design at scale k={k}: picked shifts are dependent") from None
        r = r0 - S @ coef
    return picked, coef, r


def _dense_indices(H, m, d):
    ks, js = [], []
    for k in range(H + 1):
        sh = _shifts(k, m, d)
        ks.extend([k] * len(sh))
        js.extend(sh)
    return np.array(ks, dtype=np.int64), np.array(js, dtype=np.int64).reshape(len(ks), d)


def _unflatten(flat, k, m, d):
    width = 2 ** k + m
    js = np.zeros((len(flat), d), dtype=np.int64)
    f = np.asarray(flat, dtype=np.int64).copy()
    for i in range(d - 1, -1, -1):
        js[:, i] = f % width - m
        f //= width
    return js


def fit_coefficients(target, plan, coef_cap=math.inf, oversample=4):
    """Fit the plan's coefficients to `target` (callable on (n, d) arrays).

    Dense scales k <= H: greedy residual-reduction selection over all dense
    terms followed by a least-squares solve of the picked columns, so a target
    that is one basis function comes back as a single unit coefficient.
    Tail scales: on a grid resolving each scale, up to n_k shifts picked
    greedily against the running residual and refit by least squares.
    Every grid carries at least `oversample` points per candidate term.
    Tail scales whose grid would exceed MAX_GRID_POINTS are not fitted; their
    budgets are listed in `truncated` on the result.
    """
    d, m = plan.d, plan.m
    dense_k, dense_j = _dense_indices(plan.H, m, d)
    X = _level_grid(plan.H, m, d, oversample, at_least=oversample * len(dense_k))
    y = np.asarray(target(X), dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(y)):
        raise FitError("target is not finite on the fitting grid")
    A = design_matrix(dense_k, dense_j, m, X)
    for k in range(plan.H + 1):
        blk = A[:, dense_k == k]
        rank = np.linalg.matrix_rank(blk)
        if rank < blk.shape[1]:
            raise FitError(f"rank-deficient design at scale k={k}: rank {rank} < {blk.shape[1]} columns")
    g = _Greedy(y)
    picked = g.run(A)
    alphas = np.zeros(len(dense_k))
    if picked:
        coef, *_ = np.linalg.lstsq(A[:, picked], y, rcond=None)
        alphas[picked] = coef
    selected = np.zeros(len(dense_k), dtype=bool)
    selected[picked] = True
    appr = SplineApproximant(m, d, dense_k, dense_j, alphas, plan, selected=selected)
    truncated = {}
    for k in range(plan.H + 1, plan.H_star + 1):
        limit = plan.n_k.get(k, 0)
        if limit == 0:
            continue
        if _level_points(k, m, d, oversample) ** d > MAX_GRID_POINTS:
            truncated[k] = limit
            continue
        Xk = _level_grid(k, m, d, oversample)
        rk = np.asarray(target(Xk), dtype=np.float64).reshape(-1) - eval_approximant(appr, Xk)
        Ak = _level_design(k, m, Xk)
        cols, coef, _ = _level_pursuit(Ak, rk, limit, k)
        if not cols:
            continue
        js = _unflatten(cols, k, m, d)
        appr = SplineApproximant(m, d, np.concatenate([appr.ks, np.full(len(cols), k, dtype=np.int64)]),
                                 np.concatenate([appr.js, js]), np.concatenate([appr.alphas, coef]), plan,
                                 selected=np.concatenate([appr.selected, np.ones(len(cols), dtype=bool)]))
    appr.truncated = truncated
    check_k = plan.H + 2
    while check_k > plan.H and _level_points(check_k, m, d, oversample) ** d > MAX_GRID_POINTS:
        check_k -= 1
    Xc = _level_grid(check_k, m, d, oversample)
    resid = np.asarray(target(Xc), dtype=np.float64).reshape(-1) - eval_approximant(appr, Xc)
    appr.residual_sup = float(np.max(np.abs(resid)))
    appr.residual_rms = float(np.sqrt(np.mean(resid ** 2)))
    big = np.abs(appr.alphas) > coef_cap
    if big.any():
        i = int(np.argmax(np.abs(appr.alphas)))
        raise FitError(f"coefficient {appr.alphas[i]:.6g} at scale k={appr.ks[i]}, shift {tuple(appr.js[i])} "
                       f"exceeds the cap {coef_cap:.6g} ({int(big.sum())} terms over)")
    appr.norm_value = quasi_norm(appr, plan.s, plan.p, plan.q)
    return appr
