"""Binary classification on a manifold: logistic risk, clip gates, the log-odds
network, the constructed classifier, covering-number bounds and a small SGD run."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import manifold_lab as ml
from .approx_builder import BuildError, VerificationReport, build_theorem1_network
from .network_ir import ConvResNet, Envelope, MlpNetwork, audit, eval_mlp
from .tensor_core import BiasMatrix, ConvFilter, ConvLayer, Tape, readout_batch, run_packed

__all__ = [
    "logistic_loss",
    "empirical_risk",
    "LabelModel",
    "make_label_model",
    "TruncatedLogOdds",
    "default_truncation",
    "build_gate_gn",
    "build_gate_gFn",
    "build_logodds_net",
    "logodds_lipschitz",
    "ClassifierBuildError",
    "build_classifier_network",
    "CoveringInputs",
    "CoveringBound",
    "covering_bound",
    "SgdConfig",
    "ResNetTemplate",
    "TrainedClassifier",
    "TrainingDivergedError",
    "train_erm",
    "excess_risk",
    "erm_trend",
]

CLASSIFIER_CHANNELS = 8


# ---------------------------------------------------------------- loss and risk


def logistic_loss(z):
    """log(1 + exp(-z)) without overflow."""
    return np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))


def empirical_risk(f_values, y):
    """Mean logistic loss of margins y*f.  The mean is taken around the first
    loss so a constant loss vector averages to itself bit for bit."""
    losses = np.atleast_1d(logistic_loss(np.asarray(y, dtype=np.float64) * np.asarray(f_values, dtype=np.float64)))
    if losses.size == 0:
        raise ValueError("empirical risk of an empty sample")
    base = losses[0]
    return float(base + np.mean(losses - base))


def _expected_loss(f, eta):
    """E_y[phi(y f) | x] for P(y=1|x) = eta."""
    return eta * logistic_loss(f) + (1.0 - eta) * logistic_loss(-f)


def excess_risk(f_values, eta_values):
    """Monte Carlo excess logistic risk against the log-odds minimizer.

    Labels are integrated out analytically given eta, so the per-point terms are
    nonnegative and only the x-sampling contributes noise.  Returns (mean, standard error).
    """
    eta = np.asarray(eta_values, dtype=np.float64)
    f = np.asarray(f_values, dtype=np.float64)
    fstar = _log_odds(eta)
    gap = _expected_loss(f, eta) - _expected_loss(fstar, eta)
    se = float(np.std(gap, ddof=1) / math.sqrt(gap.size)) if gap.size > 1 else 0.0
    return float(np.mean(gap)), se


def _log_odds(eta):
    eta = np.asarray(eta, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.log(eta) - np.log1p(-eta)


# ---------------------------------------------------------------- data model


@dataclass
class LabelModel:
    """P(y = 1 | x) = eta(x) for x drawn from the manifold's sampler."""

    manifold: object
    eta: object
    s: float = 2.0

    def __call__(self, X):
        return np.clip(self.eta(X), 0.0, 1.0)

    def sample(self, n, seed=0):
        X = ml.sample(self.manifold, n, seed)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        y = np.where(rng.random(n) < self(X), 1.0, -1.0)
        return X, y

    def log_odds(self, X):
        return _log_odds(self(X))


def make_label_model(manifold, kind="sine", level=0.5, amplitude=0.4):
    """Smooth synthetic eta as a trig target, so it can be compiled by the approximation builder.

    sine: level + amplitude * sin(first coordinate); constant: level everywhere.
    """
    nat = len(np.atleast_1d(manifold.coords(ml.sample(manifold, 1, 0))[0]))
    zero = [0.0] * nat
    terms = [[float(level), zero, 0.0]]
    if kind == "sine":
        first = [1.0] + [0.0] * (nat - 1)
        terms.append([float(amplitude), first, -math.pi / 2])
    elif kind != "constant":
        raise ValueError(f"unknown label model {kind!r}; expected 'sine' or 'constant'")
    target = ml.make_target(manifold, "trig", {"terms": terms})
    lo, hi = level - (amplitude if kind == "sine" else 0.0), level + (amplitude if kind == "sine" else 0.0)
    if not 0.0 < lo <= hi < 1.0:
        raise ValueError(f"eta range [{lo}, {hi}] must sit inside (0, 1)")
    return LabelModel(manifold, target, target.s)


def default_truncation(n, s, d):
    """F_n = s / (2s + 2 max(s, d)) * log n."""
    return s / (2 * s + 2 * max(s, d)) * math.log(n)


@dataclass
class TruncatedLogOdds:
    """log(eta / (1 - eta)) clipped to [-F, F]."""

    F: float
    model: LabelModel

    def __call__(self, X):
        return np.clip(self.model.log_odds(X), -self.F, self.F)


# ---------------------------------------------------------------- gates


def _gate_bounds(F):
    lo = 1.0 / (1.0 + math.exp(F))
    return lo, 1.0 - lo


def build_gate_gFn(F):
    """ReLU(-ReLU(-z + F) + 2F) - F: clips to [-F, F]."""
    if not F > 0:
        raise ValueError("truncation level must be positive")
    W = [np.array([[-1.0]]), np.array([[-1.0]]), np.array([[1.0]])]
    b = [np.array([F]), np.array([2.0 * F]), np.array([-F])]
    return MlpNetwork(W, b, envelope=Envelope(L=3, J=1, kappa1=2.0 * F), clip=F,
                      provenance={"op": "gate_gFn", "params": {"F": F}})


def build_gate_gn(F):
    """Clip to [1/(1+e^F), e^F/(1+e^F)] with the same two-ReLU pattern."""
    if not F > 0:
        raise ValueError("truncation level must be positive")
    lo, hi = _gate_bounds(F)
    W = [np.array([[-1.0]]), np.array([[-1.0]]), np.array([[1.0]])]
    b = [np.array([hi]), np.array([hi - lo]), np.array([lo])]
    return MlpNetwork(W, b, envelope=Envelope(L=3, J=1, kappa1=1.0), clip=hi,
                      provenance={"op": "gate_gn", "params": {"F": F, "lo": lo, "hi": hi}})


def logodds_lipschitz(F):
    """Largest slope of the log-odds on the clipped domain: (1 + e^F)^2 / e^F."""
    return (1.0 + math.exp(F)) ** 2 / math.exp(F)


def _logodds_knots(F, eps2):
    lo, hi = _gate_bounds(F)
    # linear interpolation of an L-Lipschitz function is off by at most L*h/2
    h_max = 2.0 * eps2 / logodds_lipschitz(F)
    count = max(1, math.ceil((hi - lo) / h_max))
    z = lo + (hi - lo) * np.arange(count + 1) / count
    z[-1] = hi
    y = np.clip(_log_odds(z), -F, F)
    y[0], y[-1] = -F, F
    return z, y


def build_logodds_net(F, eps2):
    """Piecewise-linear interpolant of the clipped log-odds on the gate range.

    One hidden layer: h(z) = -F + sum_i c_i ReLU(z - z_i), where c_i are the slope jumps.
    """
    if not 0.0 < eps2 < 1.0:
        raise ValueError("interpolation tolerance must lie in (0, 1)")
    z, y = _logodds_knots(F, eps2)
    slopes = np.diff(y) / np.diff(z)
    jumps = np.diff(slopes, prepend=0.0)
    knots = z[:-1]
    W1 = np.ones((knots.size, 1))
    b1 = -knots
    W2 = jumps[None, :]
    b2 = np.array([-F])
    net = MlpNetwork([W1, W2], [b1, b2], clip=None,
                     provenance={"op": "logodds_interpolant", "params": {"F": F, "eps2": eps2,
                                                                          "knots": int(knots.size)}})
    return net


# ---------------------------------------------------------------- classifier ConvResNet


class ClassifierBuildError(BuildError):
    def __init__(self, stage, message, report=None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.report = report


def _widen_block(blk, channels):
    """Re-embed a 3-channel sum block into a wider residual stream (extra channels untouched)."""
    out = []
    last = len(blk) - 1
    for li, (f, b) in enumerate(blk):
        r, k, l, v = f.entries()
        c_out = channels if li == last else f.c_out
        c_in = channels if li == 0 else f.c_in
        filt = ConvFilter.from_entries((c_out, f.K, c_in), r, k, l, v)
        bias = b.data
        if li == last:
            bias = np.zeros((b.shape[0], channels))
            bias[:, : b.shape[1]] = b.data
        out.append(ConvLayer(filt, BiasMatrix(bias)))
    return out


def _row_layer(D, c_out, c_in, entries, bias):
    """Size-one conv acting on the first row's channels: entries are (out, in, weight)."""
    rows = [e[0] for e in entries]
    ls = [e[1] for e in entries]
    vals = [e[2] for e in entries]
    filt = ConvFilter.from_entries((c_out, 1, c_in), rows, [0] * len(rows), ls, vals)
    return ConvLayer(filt, BiasMatrix.first_row(D, bias))


def _gate_blocks(D, F, back, logodds):
    """Residual blocks computing g_n, the log-odds interpolant and g_{F_n} on the first row.

    Channel use: 1, 2 hold the scaled eta sum; 3 the gated eta; 4, 5 the log-odds
    as a (+, -) pair; 6 and 7 hold v and F with output v - F.
    """
    C = CLASSIFIER_CHANNELS
    lo, hi = _gate_bounds(F)
    blocks, prov = [], []
    blocks.append([
        _row_layer(D, 1, C, [(0, 1, -back), (0, 2, back)], [hi]),
        _row_layer(D, 1, 1, [(0, 0, -1.0)], [hi - lo]),
        _row_layer(D, C, 1, [(3, 0, 1.0)], np.eye(C)[3] * lo),
    ])
    prov.append({"op": "gate_gn", "params": {"F": F}})
    knots = -logodds.biases[0]
    jumps = logodds.weights[1][0]
    const = -float(logodds.biases[1][0])
    for i, (zk, c) in enumerate(zip(knots, jumps)):
        if c == 0.0:
            continue
        ch = 4 if c > 0 else 5
        blocks.append([
            _row_layer(D, 1, C, [(0, 3, 1.0)], [-zk]),
            _row_layer(D, C, 1, [(ch, 0, abs(c))], np.zeros(C)),
        ])
        prov.append({"op": "logodds_knot", "params": {"index": i, "knot": float(zk), "jump": float(c)}})
    blocks.append([
        _row_layer(D, 1, C, [], [abs(const)]),
        _row_layer(D, C, 1, [(5 if const > 0 else 4, 0, 1.0)], np.zeros(C)),
    ])
    prov.append({"op": "logodds_constant", "params": {"value": -const}})
    blocks.append([
        _row_layer(D, 1, C, [(0, 4, -1.0), (0, 5, 1.0)], [F]),
        _row_layer(D, 1, 1, [(0, 0, -1.0)], [2.0 * F]),
        _row_layer(D, C, 1, [(6, 0, 1.0)], np.eye(C)[7] * F),
    ])
    prov.append({"op": "gate_gFn", "params": {"F": F}})
    return blocks, prov


def _pipeline(eta_vals, gn, logodds, gF):
    a = eval_mlp(gn, eta_vals[:, None])
    b = eval_mlp(logodds, a[:, None])
    return a, b, eval_mlp(gF, b[:, None])


def build_classifier_network(model, F, eps, K=2, n_samples=10000, seed=0, eta_build=None, strict=True,
                             log=None, **build_kwargs):
    """Compile the truncated log-odds classifier g_F o h o g_n o eta_bar into one ConvResNet.

    ``eta_build`` may pass a prebuilt (network, report) pair for the eta approximation
    at accuracy eps.  Returns (network, report); the certificate compares the
    network against the truncated log-odds on ``n_samples`` fresh manifold points.
    """
    say = log or (lambda *a: None)
    bound = 4.0 * math.exp(F) * eps
    if not bound < 1.0:
        raise ValueError(f"4 e^F eps = {bound:.3g} must be below 1")
    t_start = time.perf_counter()
    timings = {}
    manifold = model.manifold
    if eta_build is None:
        eta_net, eta_report = build_theorem1_network(model.eta, manifold, eps, K=K, seed=seed, log=log,
                                                     **build_kwargs)
    else:
        eta_net, eta_report = eta_build
    timings["eta"] = time.perf_counter() - t_start
    if eta_net.channels != 3:
        raise ClassifierBuildError("eta", "expected a three-channel summed network")
    t0 = time.perf_counter()
    back = float(eta_net.readout[0, 1])
    lip = logodds_lipschitz(F)
    eps2 = lip * eps
    gn, gF = build_gate_gn(F), build_gate_gFn(F)
    logodds = build_logodds_net(F, min(eps2, 0.5))
    D = eta_net.D
    C = CLASSIFIER_CHANNELS
    blocks = [_widen_block(b, C) for b in eta_net.blocks]
    prov = list(eta_net.provenance)
    gblocks, gprov = _gate_blocks(D, F, back, logodds)
    blocks += gblocks
    prov += gprov
    ro = np.zeros((D, C))
    ro[0, 6], ro[0, 7] = 1.0, -1.0
    probe = ConvResNet(D, C, blocks, ro, 0.0, provenance=prov)
    meas = probe.measured_envelope()
    env = Envelope(L=max(meas.L, eta_net.envelope.L), J=max(meas.J, C), K=meas.K,
                   kappa1=max(meas.kappa1, eta_net.envelope.kappa1), kappa2=1.0, M=len(blocks), R=F)
    net = ConvResNet(D, C, blocks, ro, 0.0, envelope=env, provenance=prov,
                     meta={"kind": "classifier", "F": F, "eps": eps, "eta_blocks": eta_net.M})
    timings["assemble"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    X = ml.sample(manifold, n_samples, seed + 17)
    eta = model(X)
    fstar_n = np.clip(_log_odds(eta), -F, F)
    # one pass gives both readouts: the gate blocks never touch the eta channels
    z = np.zeros((len(X), D, C))
    z[:, :, 0] = X
    q = run_packed(net.packed(), z)
    fbar = readout_batch(net.readout, 0.0, q)
    eta_ro = np.zeros((D, C))
    eta_ro[0, 1:3] = eta_net.readout[0, 1:3]
    eta_bar = readout_batch(eta_ro, eta_net.readout_bias, q)
    gated, h_val, direct = _pipeline(eta_bar, gn, logodds, gF)
    timings["evaluate"] = time.perf_counter() - t0

    config = {"F": F, "eps": eps, "K": K, "seed": seed, "n_samples": n_samples, "eps2": eps2,
              "manifold": manifold.as_dict(), "eta": model.eta.tags()}
    report = VerificationReport("classifier", config)
    sup = float(np.max(np.abs(fbar - fstar_n)))
    eta_err = float(np.max(np.abs(eta_bar - eta)))
    zs = np.linspace(*_gate_bounds(F), 10001)
    interp_err = float(np.max(np.abs(eval_mlp(logodds, zs[:, None]) - np.clip(_log_odds(zs), -F, F))))
    stages = {"eta": lip * eta_err, "logodds": interp_err}
    report.summary.update({"sup_error": sup, "certificate_bound": bound, "eta_sup_error": eta_err,
                           "logodds_sup_error": interp_err, "eps2": eps2, "knots": int(logodds.weights[0].shape[0]),
                           "stage_contributions": stages, "max_abs_output": float(np.max(np.abs(fbar))),
                           "eta_report": {"passed": eta_report.passed, "M": eta_net.M,
                                          "sup_error": eta_report.summary.get("sup_error")}})
    report.check("eta_accuracy", eta_err, eps)
    report.check("logodds_interpolation", interp_err, eps2)
    report.check("certificate", sup, bound)
    report.check("output_bound", float(np.max(np.abs(fbar))), F)
    report.check("structural_equality", float(np.max(np.abs(fbar - direct))), 1e-9)
    wrong = (np.abs(fstar_n) > bound + np.abs(fbar - fstar_n)) & (np.sign(fbar) != np.sign(fstar_n))
    report.check("sign_consistency", float(np.count_nonzero(wrong)), 0.0)
    rep = audit(net)
    report.audit = rep.as_dict()
    timings["total"] = time.perf_counter() - t_start
    report.timings = timings
    say(f"classifier: M={net.M} sup={sup:.3g} bound={bound:.3g} knots={report.summary['knots']}")
    if strict and not report.passed:
        stage = max(stages, key=stages.get) if "certificate" in report.failures() else report.failures()[0]
        raise ClassifierBuildError(stage, f"failed checks {report.failures()}", report)
    return net, report


# ---------------------------------------------------------------- covering numbers


@dataclass(frozen=True)
class CoveringInputs:
    M: int
    L: int
    J: int
    K: int
    kappa1: float
    kappa2: float
    D: int
    delta: float

    def __post_init__(self):
        for name in ("M", "L", "J", "K", "kappa1", "kappa2", "D", "delta"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"covering input {name} must be positive and finite, got {v!r}")


@dataclass(frozen=True)
class CoveringBound:
    log_N: float
    Lambda2: int
    log_Lambda1: float
    log_rho: float
    log_rho_tilde: float
    log_rho_plus: float
    log_rho_tilde_plus: float

    def as_dict(self):
        return dict(self.__dict__)


def _log1p_exp(a):
    return float(np.logaddexp(0.0, a))


def covering_bound(inputs=None, **kw):
    """Log of the sup-norm covering number bound (2 kappa Lambda1 / delta)^Lambda2, in log space."""
    x = inputs if inputs is not None else CoveringInputs(**kw)
    M, L, K, D = x.M, x.L, x.K, x.D
    lam2 = M * L * (16 * D * D * K + 4 * D) + 4 * D * D + 1
    base = math.log(4 * D * K) + math.log(x.kappa1)
    log_rho = L * base
    log_rho_plus = L * max(0.0, base)
    log_rho_tilde = M * _log1p_exp(log_rho)
    log_rho_tilde_plus = _log1p_exp(math.log(M * L) + log_rho_plus)
    log_lam1 = (math.log(8 * M + 12) + 2 * math.log(D) + max(0.0, math.log(x.kappa2)) + max(0.0, math.log(x.kappa1))
                + log_rho_tilde + log_rho_tilde_plus)
    kappa = max(x.kappa1, x.kappa2)
    log_N = lam2 * (math.log(2.0) + math.log(kappa) + log_lam1 - math.log(x.delta))
    return CoveringBound(log_N, lam2, log_lam1, log_rho, log_rho_tilde, log_rho_plus, log_rho_tilde_plus)


# ---------------------------------------------------------------- empirical risk minimization


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 1e-2
    epochs: int = 50
    batch: int = 32
    decay: float = 0.5
    decay_every_fraction: float = 0.25


@dataclass(frozen=True)
class ResNetTemplate:
    """Trainable ConvResNet: pad, residual blocks of two convolutions, readout, output clip."""

    D: int
    channels: int = 6
    blocks: int = 3
    K: int = 2
    F: float = 2.0

    def init(self, rng):
        C, K, D = self.channels, self.K, self.D
        params = []
        for _ in range(self.blocks):
            for _layer in range(2):
                params.append(rng.standard_normal((C, K, C)) * math.sqrt(1.0 / (K * C)))
                params.append(np.zeros((D, C)))
        params.append(rng.standard_normal((D, C)) * math.sqrt(1.0 / (D * C)))
        params.append(np.zeros(()))
        return params

    def forward(self, tape, x, params):
        """x: (n, D) array; params as produced by init (tape variables or arrays)."""
        C = self.channels
        pad = np.zeros((C, 1, 1))
        pad[0, 0, 0] = 1.0
        z = tape.conv(tape.constant(pad), tape.constant(np.asarray(x, dtype=np.float64)[:, :, None]))
        for b in range(self.blocks):
            w1, b1, w2, b2 = params[4 * b: 4 * b + 4]
            h = tape.relu(tape.add(tape.conv(w1, z), b1))
            h = tape.relu(tape.add(tape.conv(w2, h), b2))
            z = tape.add(z, h)
        out = tape.add(tape.inner(params[-2], z), params[-1])
        # output clip to [-F, F]
        u = tape.relu(tape.affine(out, -1.0, self.F))
        v = tape.relu(tape.affine(u, -1.0, 2.0 * self.F))
        return tape.affine(v, 1.0, -self.F)

    def predict(self, params, X, chunk=20000):
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(len(X))
        for s in range(0, len(X), chunk):
            out[s:s + chunk] = self.forward(Tape(), X[s:s + chunk], params).value
        return out

    def n_params(self):
        C, K, D = self.channels, self.K, self.D
        return self.blocks * 2 * (C * K * C + D * C) + D * C + 1


@dataclass
class TrainedClassifier:
    template: ResNetTemplate
    params: list
    history: list = field(default_factory=list)

    def __call__(self, X):
        return self.template.predict(self.params, X)

    def weight_magnitudes(self):
        conv = max(float(np.max(np.abs(p))) for p in self.params[:-2]) if len(self.params) > 2 else 0.0
        ro = max(float(np.max(np.abs(self.params[-2]))), float(abs(self.params[-1])))
        return {"kappa1": conv, "kappa2": ro}


def train_erm(template, X, y, config=None, seed=0):
    """Plain mini-batch SGD on the logistic loss with a step decay schedule."""
    config = config or SgdConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(X)
    if template.n_params() > 100000:
        raise ValueError("template exceeds the desk-scale parameter budget")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    params = template.init(rng)
    steps_per_epoch = max(1, math.ceil(n / config.batch))
    total = config.epochs * steps_per_epoch
    decay_at = max(1, int(round(total * config.decay_every_fraction)))
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for s in range(0, n, config.batch):
            lr = config.lr * config.decay ** (step // decay_at)
            idx = order[s:s + config.batch]
            tape = Tape()
            pv = [tape.param(p) for p in params]
            out = template.forward(tape, X[idx], pv)
            margin = y[idx] * out.value
            loss_sum += float(np.sum(logistic_loss(margin)))
            seed_grad = -y[idx] * expit(-margin) / len(idx)
            grads = tape.backward(out, seed_grad)
            for i, v in enumerate(pv):
                g = grads[v.index]
                if g is not None:
                    params[i] = params[i] - lr * g
            step += 1
        mean_loss = loss_sum / n
        if not math.isfinite(mean_loss) or not all(np.all(np.isfinite(p)) for p in params):
            big = max(float(np.max(np.abs(p))) for p in params)
            raise TrainingDivergedError(f"loss {mean_loss} at epoch {epoch} (step {step}, lr {lr:g}, "
                                        f"max |param| {big:.3g})")
        history.append(mean_loss)
    return TrainedClassifier(template, params, history)


def erm_trend(model, ns, seeds=5, n_test=100000, template=None, config=None, seed=0, log=None):
    """Median Monte Carlo excess risk of trained networks for each sample size."""
    say = log or (lambda *a: None)
    template = template or ResNetTemplate(D=model.manifold.D)
    Xt = ml.sample(model.manifold, n_test, seed + 1000003)
    eta_t = model(Xt)
    rows = []
    for n in ns:
        risks = []
        for r in range(seeds):
            data_seed = seed * 1000 + 10 * n + r
            X, y = model.sample(n, data_seed)
            t0 = time.perf_counter()
            fit = train_erm(template, X, y, config, seed=data_seed)
            risk, se = excess_risk(fit(Xt), eta_t)
            mags = fit.weight_magnitudes()
            rows.append({"n": n, "seed": r, "excess_risk": risk, "standard_error": se,
                         "final_train_loss": fit.history[-1], "seconds": time.perf_counter() - t0, **mags})
            risks.append(risk)
            say(f"n={n} seed={r} excess={risk:.4g} +- {se:.2g}")
        rows.append({"n": n, "seed": "median", "excess_risk": float(np.median(risks))})
    return rows
