"""Randomized exactness suites for the network calculus and the gadget networks."""

from __future__ import annotations

import math
import time

import numpy as np

from . import manifold_lab as ml
from .approx_builder import (
    build_bspline_cnn,
    build_indicator_net,
    build_multiplication_net,
    build_squared_distance_net,
    bspline_cnn_envelope,
)
from .bspline_engine import BSplineIndex, eval_tensor_bspline
from .network_calculus import (
    cnn_compose,
    cnn_lift_encoded_input,
    cnn_rescale,
    cnn_stack,
    cnn_sum_to_resnet,
    encode_plus_minus,
    mlp_to_cnn,
)
from .network_ir import CnnNetwork, MlpNetwork, eval_cnn, eval_cnn_features, eval_mlp, eval_resnet
from .tensor_core import BiasMatrix, ConvFilter, ConvLayer

__all__ = ["random_mlp", "random_cnn", "calculus_suite", "gadget_suite", "SUITES", "run_suite"]


def random_mlp(rng, in_dim, depth, width, out_dim=1, scale=1.0):
    dims = [in_dim] + [int(rng.integers(1, width + 1)) for _ in range(depth - 1)] + [out_dim]
    W = [rng.standard_normal((dims[i + 1], dims[i])) * scale / math.sqrt(dims[i]) for i in range(depth)]
    b = [rng.standard_normal(dims[i + 1]) * 0.3 * scale for i in range(depth)]
    return MlpNetwork(W, b)


def random_cnn(rng, D, depth, width, K, in_channels=1):
    """CNN with random filters and biases and a first-row readout."""
    layers = []
    c = in_channels
    for _ in range(depth):
        c_out = int(rng.integers(1, width + 1))
        k = int(rng.integers(1, K + 1))
        W = rng.standard_normal((c_out, k, c)) / math.sqrt(k * c)
        layers.append(ConvLayer(ConvFilter(W), BiasMatrix(rng.standard_normal((D, c_out)) * 0.3)))
        c = c_out
    ro = np.zeros((D, c))
    ro[0] = rng.standard_normal(c)
    return CnnNetwork(layers, readout=ro, readout_bias=float(rng.standard_normal()), first_row_only=True)


def _row(check, instance, dev, tol, bitwise=None):
    passed = bool(dev <= tol) if bitwise is None else bool(bitwise)
    return {"check": check, "instance": instance, "max_dev": float(dev), "tolerance": float(tol),
            "bitwise": bitwise, "passed": passed}


def _same_bits(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return a.shape == b.shape and np.array_equal(a.view(np.uint64), b.view(np.uint64))


def calculus_suite(seed=0, instances=20, inputs=100, max_D=16, max_L=6, max_J=8, tol=1e-9):
    """Every calculus operation against direct evaluation of its operands."""
    rows = []
    for i in range(instances):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3, i)))
        D = int(rng.integers(1, max_D + 1))
        K = 1 if D == 1 else int(rng.integers(2, min(D, 4) + 1))
        L1, L2 = int(rng.integers(1, max_L + 1)), int(rng.integers(1, max_L + 1))
        x = rng.uniform(-1.0, 1.0, (inputs, D))

        mlp = random_mlp(rng, D, L1, max_J)
        cnn = mlp_to_cnn(mlp, D, K)
        rows.append(_row("mlp_to_cnn", i, np.max(np.abs(eval_cnn(cnn, x) - eval_mlp(mlp, x))), tol))

        f1 = random_cnn(rng, D, L1, max_J, K)
        outer = mlp_to_cnn(random_mlp(rng, 1, L2, max_J), 1, 1)
        comp = cnn_compose(f1, outer)
        direct = eval_cnn(outer, eval_cnn(f1, x)[:, None])
        rows.append(_row("cnn_compose", i, np.max(np.abs(eval_cnn(comp, x) - direct)), tol))

        f2 = random_cnn(rng, D, L2, max_J, K)
        st = eval_cnn_features(cnn_stack(f1, f2), x)[:, 0, :]
        dev = max(np.max(np.abs(st[:, 0] - st[:, 1] - eval_cnn(f1, x))),
                  np.max(np.abs(st[:, 2] - st[:, 3] - eval_cnn(f2, x))))
        rows.append(_row("cnn_stack", i, dev, tol))
        # a shorter part carried through copy channels must come out bit for bit
        short, deep = (f1, f2) if f1.depth <= f2.depth else (f2, f1)
        alone = eval_cnn_features(cnn_stack(short, short), x)[:, 0, :2]
        carried = eval_cnn_features(cnn_stack(short, deep), x)[:, 0, :2]
        rows.append(_row("stack_copy", i, np.max(np.abs(alone - carried)), 0.0, _same_bits(alone, carried)))
        v = rng.standard_normal((inputs, 3))
        enc = encode_plus_minus(v, D)
        decoded = enc[:, 0, 0::2] - enc[:, 0, 1::2]
        rows.append(_row("negate_decode", i, np.max(np.abs(decoded - v)), 0.0, _same_bits(decoded, v)))

        Mdim = int(rng.integers(1, max(2, min(D, 6)) + 1))
        g = random_cnn(rng, Mdim, L1, max(2, max_J // 2), 1 if Mdim == 1 else min(2, Mdim))
        lifted = cnn_lift_encoded_input(g, D)
        vin = rng.uniform(-1.0, 1.0, (inputs, Mdim))
        dev = np.max(np.abs(eval_cnn(lifted, encode_plus_minus(vin, D)) - eval_cnn(g, vin)))
        rows.append(_row("cnn_lift_encoded_input", i, dev, tol))

        base = eval_cnn(f1, x)
        for alpha in (1, 2, 3):
            out = eval_cnn(cnn_rescale(f1, alpha), x)
            dev = np.max(np.abs(out - base))
            if alpha == 3:
                rows.append(_row("cnn_rescale_3", i, dev, tol * max(1.0, np.max(np.abs(base)))))
            else:
                rows.append(_row(f"cnn_rescale_{alpha}", i, dev, 0.0, _same_bits(out, base)))

        parts = [random_cnn(rng, D, int(rng.integers(1, max_L + 1)), max_J, K)
                 for _ in range(int(rng.integers(1, 5)))]
        res = cnn_sum_to_resnet(parts)
        direct = sum(eval_cnn(p, x) for p in parts)
        rows.append(_row("cnn_sum_to_resnet", i, np.max(np.abs(eval_resnet(res, x) - direct)), tol))
    return rows


def gadget_suite(seed=0, grid=200, samples=10000):
    """Multiplication, B-spline, distance and indicator gadgets against their error bounds."""
    rows = []
    a = np.linspace(-1.0, 1.0, grid)
    A, B = np.meshgrid(a, a, indexing="ij")
    pts = np.stack([A.ravel(), B.ravel()], axis=1)
    for eta in (1e-2, 1e-3):
        net = build_multiplication_net(1.0, eta)
        err = np.max(np.abs(eval_mlp(net, pts) - pts[:, 0] * pts[:, 1]))
        rows.append(_row(f"multiplication_eta={eta:g}", 0, err, eta))
        zx = eval_mlp(net, np.stack([a, np.zeros_like(a)], axis=1))
        zy = eval_mlp(net, np.stack([np.zeros_like(a), a], axis=1))
        zmax = float(max(np.max(np.abs(zx)), np.max(np.abs(zy))))
        rows.append(_row(f"multiplication_zero_eta={eta:g}", 0, zmax, 0.0, zmax == 0.0))

    for d, m in ((1, 3), (2, 3)):
        for eps1 in (1e-2, 1e-3):
            k = 2
            idx = BSplineIndex(k, (1,) * d, m)
            net = build_bspline_cnn(idx, eps1)
            n_side = 2001 if d == 1 else 161
            g = np.linspace(-0.1, 1.1, n_side)
            X = g[:, None] if d == 1 else np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
            vals = eval_cnn(net, X)
            exact = eval_tensor_bspline(idx, X)
            rows.append(_row(f"bspline_d={d}_eps1={eps1:g}", 0, np.max(np.abs(vals - exact)), eps1))
            box = np.asarray(idx.support())
            outside = np.any((X <= box[:, 0]) | (X >= box[:, 1]), axis=1)
            zmax = float(np.max(np.abs(vals[outside]), initial=0.0))
            rows.append(_row(f"bspline_outside_d={d}_eps1={eps1:g}", 0, zmax, 0.0, zmax == 0.0))
            K = 1 if d == 1 else 2
            declared = bspline_cnn_envelope(d, m, k, eps1, K)
            same = net.envelope == declared and net.depth <= declared.L
            rows.append(_row(f"bspline_envelope_d={d}_eps1={eps1:g}", 0, float(not same), 0.0, same))

    manifold = ml.make_manifold("circle", D=3, rotation_seed=seed + 7)
    X = ml.sample(manifold, samples, seed)
    center = X[0]
    omega, Delta = 0.45, 0.02
    Bm, D = manifold.B, manifold.D
    theta = Delta / (16 * Bm * Bm * D)
    dist = build_squared_distance_net(center, Bm, D, theta)
    d2 = eval_cnn(dist, X)
    true = np.sum((X - center) ** 2, axis=1)
    rows.append(_row("squared_distance", 0, np.max(np.abs(d2 - true)), 4 * Bm * Bm * D * theta))
    ind_net = build_indicator_net(omega, Delta, theta, Bm, D)
    ind = eval_cnn(ind_net, d2[:, None])
    inner = true <= omega ** 2 - Delta
    outer = true >= omega ** 2
    bad = int(np.count_nonzero(ind[inner] != 1.0) + np.count_nonzero(ind[outer] != 0.0)
              + np.count_nonzero((ind < 0.0) | (ind > 1.0)))
    rows.append(_row("indicator_sandwich", 0, float(bad), 0.0, bad == 0))
    return rows


SUITES = {"calculus": calculus_suite, "gadgets": gadget_suite}


def run_suite(name, seed=0, **kw):
    """Run one named suite (or 'all'); returns (rows, seconds)."""
    t0 = time.perf_counter()
    names = list(SUITES) if name == "all" else [name]
    rows = []
    for n in names:
        if n not in SUITES:
            raise KeyError(f"unknown suite {n!r}; expected one of {sorted(SUITES) + ['all']}")
        for r in SUITES[n](seed=seed, **kw):
            rows.append({"suite": n, **r})
    return rows, time.perf_counter() - t0
