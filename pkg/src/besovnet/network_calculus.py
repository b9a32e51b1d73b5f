"""Weight-level constructions that compose, stack, lift, rescale and sum networks exactly.

Signed intermediate values travel as (v+, v-) channel pairs so they survive ReLU
layers.  Each construction keeps the nonzero terms of every original sum in
their original order, which makes most results bitwise equal to the direct
evaluation.
"""

from __future__ import annotations

import math

import numpy as np

from .network_ir import CnnNetwork, ConvResNet, Envelope, MlpNetwork, audit
from .tensor_core import BiasMatrix, ConvFilter, ConvLayer, ShapeError

__all__ = [
    "CalculusError",
    "PlusMinusEncoding",
    "encode_plus_minus",
    "mlp_to_cnn",
    "cnn_compose",
    "cnn_stack",
    "cnn_stack_many",
    "cnn_lift_encoded_input",
    "cnn_chain",
    "cnn_rescale",
    "cnn_scale_output",
    "cnn_sum_to_resnet",
]


class CalculusError(ValueError):
    """A construction's precondition does not hold."""


class PlusMinusEncoding:
    """Feature maps whose first row carries (v1+, v1-, ..., vM+, vM-, *...)."""

    def __init__(self, data, M):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[2] < 2 * M:
            raise ShapeError(f"encoding of {M} values needs at least {2 * M} channels, got shape {data.shape}")
        self.data = data
        self.M = M

    @property
    def dont_care_columns(self):
        return list(range(2 * self.M, self.data.shape[2]))

    def decode(self):
        row = self.data[:, 0, :]
        return row[:, 0:2 * self.M:2] - row[:, 1:2 * self.M:2]


def encode_plus_minus(v, D, extra_channels=0, filler=None):
    """Encode vectors v (n, M) into (n, D, 2M + extra) maps; ``filler`` fills the don't-care slots."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    n, M = v.shape
    C = 2 * M + extra_channels
    out = np.zeros((n, D, C)) if filler is None else np.array(filler, dtype=np.float64).reshape(n, D, C)
    out[:, 0, 0:2 * M:2] = np.maximum(v, 0.0)
    out[:, 0, 1:2 * M:2] = np.maximum(-v, 0.0)
    return out


# ---------------------------------------------------------------- helpers


class _LayerBuilder:
    """Accumulates sparse filter entries and a dense bias for one conv layer."""

    def __init__(self, D, c_out, c_in, K=1):
        self.D, self.c_out, self.c_in, self.K = D, c_out, c_in, K
        self.rows, self.ks, self.ls, self.vals = [], [], [], []
        self.bias = np.zeros((D, c_out))

    def add(self, rows, ks, ls, vals):
        self.rows.append(np.asarray(rows, np.int64).ravel())
        self.ks.append(np.asarray(ks, np.int64).ravel())
        self.ls.append(np.asarray(ls, np.int64).ravel())
        self.vals.append(np.asarray(vals, np.float64).ravel())

    def add_filter(self, filt, row_offset, in_offset, scale=None):
        r, k, l, v = filt.entries()
        self.add(r + row_offset, k, l + in_offset, v if scale is None else v * scale)

    def build(self):
        cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0))
        K = self.K
        ks = cat(self.ks)
        if ks.size:
            K = max(K, int(ks.max()) + 1)
        filt = ConvFilter.from_entries((self.c_out, K, self.c_in), cat(self.rows), ks, cat(self.ls),
                                       cat(self.vals))
        return ConvLayer(filt, BiasMatrix(self.bias))


def _require_first_row(net, name):
    if net.readout is None:
        raise CalculusError(f"{name} needs a network with a readout")
    if not net.first_row_only:
        raise CalculusError(f"{name} requires a first-row-only readout")


def _row_bias(bias, D):
    """Place a 1 x C bias (from a length-one network) in the first row of a D x C matrix."""
    out = np.zeros((D, bias.shape[1]))
    out[0] = bias.data[0]
    return out


def _env_k(env, default):
    return default if env.K is None else env.K


def _prov(op, **params):
    return {"op": op, "params": params}


# ---------------------------------------------------------------- MLP -> CNN


def mlp_to_cnn(net, D, K, provenance=None):
    """Realize a scalar-output MLP on R^D as a CNN with filter size K.

    The first D layers gather the input: the coordinates ride up one row per
    layer in a (+, -) carry pair while (+, -) accumulators collect W1 x one
    coordinate at a time.  The remaining hidden layers become size-one
    filters on the first row and the output layer becomes the readout.
    """
    if not isinstance(net, MlpNetwork):
        raise TypeError("mlp_to_cnn expects an MlpNetwork")
    if net.in_dim != D:
        raise ShapeError(f"MLP input dimension {net.in_dim} != D={D}")
    if net.out_dim != 1:
        raise ShapeError(f"mlp_to_cnn realizes scalar outputs, MLP has {net.out_dim}")
    if D == 1:
        if K != 1:
            raise CalculusError(f"filter size {K} out of range for D=1 (only K=1 fits)")
    elif not 2 <= K <= D:
        raise CalculusError(f"filter size {K} out of range [2, {D}]")
    A, b1 = net.weights[0], net.biases[0]
    affine_only = net.depth == 1
    J1 = A.shape[0]
    layers = []
    # channels: acc+ (J1), acc- (J1), carry+, carry-
    acc_p = np.arange(J1)
    acc_n = J1 + acc_p
    cp, cn = 2 * J1, 2 * J1 + 1
    gather_c = 2 * J1 + 2
    for t in range(D):
        last = t == D - 1
        c_in = 1 if t == 0 else gather_c
        c_out = (2 if affine_only else J1) if last else gather_c
        lb = _LayerBuilder(D, c_out, c_in, K=1 if last else min(2, D))
        col = A[:, t]
        nz = np.nonzero(col)[0]
        if last:
            # h = ReLU(s + A[:, t] x_t + b1) on the first row; an affine MLP emits (+, -) instead
            outs = [(np.arange(J1), 1.0)] if not affine_only else [(np.array([0]), 1.0), (np.array([1]), -1.0)]
            for rows, sign in outs:
                if t > 0:
                    lb.add(rows, np.zeros(J1), acc_p, np.full(J1, sign))
                    lb.add(rows, np.zeros(J1), acc_n, np.full(J1, -sign))
                    lb.add(rows[nz], np.zeros(nz.size), np.full(nz.size, cp), sign * col[nz])
                    lb.add(rows[nz], np.zeros(nz.size), np.full(nz.size, cn), -sign * col[nz])
                else:
                    lb.add(rows[nz], np.zeros(nz.size), np.zeros(nz.size), sign * col[nz])
            if affine_only:
                lb.bias[0, 0] = b1[0]
                lb.bias[0, 1] = -b1[0]
            else:
                lb.bias[0, :] = b1
        else:
            if t > 0:
                lb.add(acc_p, np.zeros(J1), acc_p, np.ones(J1))
                lb.add(acc_p, np.zeros(J1), acc_n, -np.ones(J1))
                lb.add(acc_n, np.zeros(J1), acc_p, -np.ones(J1))
                lb.add(acc_n, np.zeros(J1), acc_n, np.ones(J1))
                lb.add(acc_p[nz], np.zeros(nz.size), np.full(nz.size, cp), col[nz])
                lb.add(acc_p[nz], np.zeros(nz.size), np.full(nz.size, cn), -col[nz])
                lb.add(acc_n[nz], np.zeros(nz.size), np.full(nz.size, cp), -col[nz])
                lb.add(acc_n[nz], np.zeros(nz.size), np.full(nz.size, cn), col[nz])
                # carry: next coordinate moves up one row
                lb.add([cp, cp, cn, cn], [1, 1, 1, 1], [cp, cn, cp, cn], [1.0, -1.0, -1.0, 1.0])
            else:
                lb.add(acc_p[nz], np.zeros(nz.size), np.zeros(nz.size), col[nz])
                lb.add(acc_n[nz], np.zeros(nz.size), np.zeros(nz.size), -col[nz])
                lb.add([cp, cn], [1, 1], [0, 0], [1.0, -1.0])
        layers.append(lb.build())
    for W, b in zip(net.weights[1:-1], net.biases[1:-1]):
        lb = _LayerBuilder(D, W.shape[0], W.shape[1])
        r, c = np.nonzero(W)
        lb.add(r, np.zeros(r.size), c, W[r, c])
        lb.bias[0] = b
        layers.append(lb.build())
    if affine_only:
        ro = np.zeros((D, 2))
        ro[0] = [1.0, -1.0]
        rb = 0.0
    else:
        WL = net.weights[-1]
        ro = np.zeros((D, WL.shape[1]))
        ro[0] = WL[0]
        rb = float(net.biases[-1][0])
    kap = max(net.envelope.kappa1, 1.0)
    env = Envelope(L=net.envelope.L + D, J=4 * net.envelope.J, K=K, kappa1=kap, kappa2=kap)
    prov = provenance or _prov("mlp_to_cnn", D=D, K=K, mlp=net.provenance)
    return _checked(CnnNetwork(layers, readout=ro, readout_bias=rb, first_row_only=True, envelope=env,
                               provenance=prov), "mlp_to_cnn")


def _checked(net, op):
    rep = audit(net)
    if not rep.passed:
        raise CalculusError(f"{op} produced a network outside its declared envelope: {rep.failures()} "
                            f"(measured {rep.measured}, declared {rep.declared})")
    return net


# ---------------------------------------------------------------- composition


def cnn_compose(f1, f2, provenance=None):
    """x -> f2(f1(x)) for f1 on R^D and f2 on R (length-one feature maps)."""
    _require_first_row(f1, "cnn_compose")
    _require_first_row(f2, "cnn_compose")
    if f2.D != 1 or f2.in_channels != 1:
        raise CalculusError(f"second network must act on scalars, got D={f2.D}, channels={f2.in_channels}")
    D = f1.D
    layers = list(f1.layers)
    # f1's readout as a (+, -) conv layer
    lb = _LayerBuilder(D, 2, f1.out_channels)
    c = np.nonzero(f1.readout[0])[0]
    lb.add(np.zeros(c.size), np.zeros(c.size), c, f1.readout[0, c])
    lb.add(np.ones(c.size), np.zeros(c.size), c, -f1.readout[0, c])
    lb.bias[0] = [f1.readout_bias, -f1.readout_bias]
    layers.append(lb.build())
    if f2.layers:
        first = f2.layers[0].filter
        lb = _LayerBuilder(D, first.c_out, 2)
        r, k, l, v = first.entries()
        rr = np.repeat(r, 2)
        ll = np.tile([0, 1], r.size)
        vv = np.stack([v, -v], axis=1).ravel()
        lb.add(rr, np.zeros(rr.size), ll, vv)
        lb.bias = _row_bias(f2.layers[0].bias, D)
        layers.append(lb.build())
        for f, b in f2.layers[1:]:
            layers.append(ConvLayer(f, BiasMatrix(_row_bias(b, D))))
        ro = np.zeros((D, f2.out_channels))
        ro[0] = f2.readout[0]
    else:
        ro = np.zeros((D, 2))
        ro[0] = [f2.readout[0, 0], -f2.readout[0, 0]]
    e1, e2 = f1.envelope, f2.envelope
    env = Envelope(L=e1.L + e2.L + 1, J=max(e1.J, e2.J, 2), K=max(_env_k(e1, 1), _env_k(e2, 1)),
                   kappa1=max(e1.kappa1, e1.kappa2, e2.kappa1), kappa2=e2.kappa2)
    prov = provenance or _prov("cnn_compose", inner=f1.provenance, outer=f2.provenance)
    return _checked(CnnNetwork(layers, readout=ro, readout_bias=f2.readout_bias, first_row_only=True,
                               envelope=env, provenance=prov), "cnn_compose")


# ---------------------------------------------------------------- stacking


def cnn_stack_many(nets, provenance=None):
    """Run several networks side by side; the first row of the output is
    (f1+, f1-, f2+, f2-, ...).  Shorter networks carry their (+, -) pair
    forward through copy channels until the longest one finishes."""
    if not nets:
        raise CalculusError("nothing to stack")
    for f in nets:
        _require_first_row(f, "cnn_stack")
    D, cin = nets[0].D, nets[0].in_channels
    for f in nets:
        if f.D != D or f.in_channels != cin:
            raise ShapeError(f"stacked networks must share input shape, got ({f.D}, {f.in_channels}) "
                             f"and ({D}, {cin})")
    Lmax = max(f.depth for f in nets)
    layers = []
    offs_in = [0] * len(nets)  # channel offset of each part in the current layer input
    widths_in = [cin] * len(nets)
    for t in range(Lmax + 1):
        widths_out = []
        for f in nets:
            if t < f.depth:
                widths_out.append(f.layers[t].filter.c_out)
            else:
                widths_out.append(2)
        offs_out = np.concatenate([[0], np.cumsum(widths_out)[:-1]]).astype(int).tolist()
        c_in = cin if t == 0 else sum(widths_in)
        lb = _LayerBuilder(D, sum(widths_out), c_in)
        for i, f in enumerate(nets):
            o_in = 0 if t == 0 else offs_in[i]
            o_out = offs_out[i]
            if t < f.depth:
                lb.add_filter(f.layers[t].filter, o_out, o_in)
                lb.bias[:, o_out:o_out + widths_out[i]] = f.layers[t].bias.data
            elif t == f.depth:
                c = np.nonzero(f.readout[0])[0]
                lb.add(np.full(c.size, o_out), np.zeros(c.size), c + o_in, f.readout[0, c])
                lb.add(np.full(c.size, o_out + 1), np.zeros(c.size), c + o_in, -f.readout[0, c])
                lb.bias[0, o_out] = f.readout_bias
                lb.bias[0, o_out + 1] = -f.readout_bias
            else:
                lb.add([o_out, o_out + 1], [0, 0], [o_in, o_in + 1], [1.0, 1.0])
        layers.append(lb.build())
        offs_in, widths_in = offs_out, widths_out
    envs = [f.envelope for f in nets]
    J = sum(max(e.J, 2) for e in envs)
    env = Envelope(L=Lmax + 1, J=J, K=max(_env_k(e, 1) for e in envs),
                   kappa1=max([1.0] + [max(e.kappa1, e.kappa2) for e in envs]))
    prov = provenance or _prov("cnn_stack", parts=[f.provenance for f in nets])
    return _checked(CnnNetwork(layers, readout=None, envelope=env, provenance=prov), "cnn_stack")


def cnn_stack(f1, f2, provenance=None):
    return cnn_stack_many([f1, f2], provenance=provenance)


# ---------------------------------------------------------------- input lift


def cnn_lift_encoded_input(g, D, provenance=None):
    """Run g (a CNN on R^M) on the first row of a length-D (+, -) encoding of its input.

    Position p and channel c of g become channel p*J + c, so every layer is a
    size-one filter acting on the first row; position-major ordering keeps
    g's (offset, channel) summation order.
    """
    _require_first_row_any(g)
    if g.in_channels != 1:
        raise CalculusError("the lifted network must take a vector input")
    if not g.layers:
        raise CalculusError("the lifted network needs at least one conv layer")
    M = g.D
    layers = []
    prev = 2  # input: (x_p+, x_p-) per position
    for li, (f, b) in enumerate(g.layers):
        J = f.c_out
        lb = _LayerBuilder(D, M * J, M * prev)
        r, k, l, v = f.entries()
        for p in range(M):
            ok = p + k < M
            src = p + k[ok]
            if li == 0:
                rows = np.repeat(p * J + r[ok], 2)
                cols = np.stack([2 * src, 2 * src + 1], axis=1).ravel()
                vals = np.stack([v[ok], -v[ok]], axis=1).ravel()
            else:
                rows = p * J + r[ok]
                cols = src * prev + l[ok]
                vals = v[ok]
            lb.add(rows, np.zeros(rows.size), cols, vals)
            lb.bias[0, p * J:(p + 1) * J] = b.data[p]
        layers.append(lb.build())
        prev = J
    ro = np.zeros((D, M * prev))
    ro[0] = g.readout.reshape(-1)
    e = g.envelope
    env = Envelope(L=e.L, J=M * max(e.J, 2), K=_env_k(e, 1), kappa1=e.kappa1, kappa2=e.kappa2)
    prov = provenance or _prov("cnn_lift_encoded_input", M=M, D=D, inner=g.provenance)
    return _checked(CnnNetwork(layers, readout=ro, readout_bias=g.readout_bias, first_row_only=True,
                               envelope=env, provenance=prov), "cnn_lift_encoded_input")


def _require_first_row_any(g):
    if g.readout is None:
        raise CalculusError("the lifted network needs a readout")


def cnn_chain(body, head, provenance=None):
    """Feed a conv-only body's output feature map into a CNN that reads feature maps."""
    if body.readout is not None:
        raise CalculusError("cnn_chain expects a conv-only body")
    if head.D != body.D or head.in_channels != body.out_channels:
        raise ShapeError(f"body emits ({body.D}, {body.out_channels}) maps, head reads "
                         f"({head.D}, {head.in_channels})")
    e1, e2 = body.envelope, head.envelope
    env = Envelope(L=e1.L + e2.L, J=max(e1.J, e2.J), K=max(_env_k(e1, 1), _env_k(e2, 1)),
                   kappa1=max(e1.kappa1, e2.kappa1), kappa2=e2.kappa2)
    prov = provenance or _prov("cnn_chain", body=body.provenance, head=head.provenance)
    return _checked(CnnNetwork(list(body.layers) + list(head.layers), readout=head.readout,
                               readout_bias=head.readout_bias, first_row_only=head.first_row_only,
                               envelope=env, provenance=prov), "cnn_chain")


# ---------------------------------------------------------------- rescaling


def cnn_rescale(f, alpha, provenance=None):
    """Filters times 1/alpha, layer-l biases times alpha^-l, readout times alpha^L."""
    alpha = float(alpha)
    if not alpha >= 1.0:
        raise CalculusError(f"rescale factor must be >= 1, got {alpha}")
    if alpha == 1.0:
        return f
    if f.readout is None:
        raise CalculusError("cnn_rescale needs a network with a readout")
    L = f.depth
    inv = 1.0 / alpha
    top = alpha ** L
    if not math.isfinite(top):
        raise CalculusError(f"alpha^L = {alpha}^{L} overflows")
    layers = []
    for l, (filt, b) in enumerate(f.layers, start=1):
        layers.append(ConvLayer(filt.scaled(inv), BiasMatrix(b.data * alpha ** (-l))))
    e = f.envelope
    env = Envelope(L=e.L, J=e.J, K=e.K, kappa1=e.kappa1 * inv, kappa2=e.kappa2 * top)
    prov = provenance or dict(f.provenance, rescale=alpha)
    return _checked(CnnNetwork(layers, readout=f.readout * top, readout_bias=f.readout_bias,
                               first_row_only=f.first_row_only, envelope=env, provenance=prov),
                    "cnn_rescale")


def cnn_scale_output(f, c, provenance=None):
    """c * f, by scaling the readout (weights and bias)."""
    e = f.envelope
    c = float(c)
    env = Envelope(L=e.L, J=e.J, K=e.K, kappa1=e.kappa1, kappa2=e.kappa2 * abs(c))
    return CnnNetwork(f.layers, readout=f.readout * c, readout_bias=f.readout_bias * c,
                      first_row_only=f.first_row_only, envelope=env, provenance=provenance or f.provenance)


# ---------------------------------------------------------------- sum into a ConvResNet


def _block_from_cnn(f, channels, read_channel, write_pos, write_neg, scale):
    """Residual block: f's layers read ``read_channel`` of the padded map and a
    final size-one layer writes ReLU(+-scale*f) into the two write channels."""
    D = f.D
    blk = []
    for li, (filt, b) in enumerate(f.layers):
        if li == 0:
            lb = _LayerBuilder(D, filt.c_out, channels)
            r, k, l, v = filt.entries()
            lb.add(r, k, np.full(r.size, read_channel), v)
            lb.bias = b.data.copy()
            blk.append(lb.build())
        else:
            blk.append(ConvLayer(filt, b))
    c_last = f.out_channels if f.layers else channels
    lb = _LayerBuilder(D, channels, c_last)
    c = np.nonzero(f.readout[0])[0]
    src = c if f.layers else np.full(c.size, read_channel)
    w = f.readout[0, c] * scale
    lb.add(np.full(c.size, write_pos), np.zeros(c.size), src, w)
    lb.add(np.full(c.size, write_neg), np.zeros(c.size), src, -w)
    lb.bias[0, write_pos] = f.readout_bias * scale
    lb.bias[0, write_neg] = -f.readout_bias * scale
    blk.append(lb.build())
    return blk


def cnn_sum_to_resnet(nets, envelope=None, provenance=None, meta=None):
    """One residual block per network; the skip path carries the running sum as
    (+, -) channels scaled by kappa1/kappa2, undone by the readout."""
    nets = list(nets)
    for f in nets:
        _require_first_row(f, "cnn_sum_to_resnet")
        if f.in_channels != 1:
            raise CalculusError("summed networks must take a vector input")
    if not nets:
        if envelope is None:
            raise CalculusError("an empty sum needs an explicit D through the envelope's meta")
    D = nets[0].D if nets else int(meta["D"])
    for f in nets:
        if f.D != D:
            raise ShapeError(f"networks disagree on D: {f.D} vs {D}")
    if envelope is None:
        envelope = nets[0].envelope
        for f in nets[1:]:
            envelope = envelope.merge_max(f.envelope)
    for m, f in enumerate(nets):
        rep = audit(f, Envelope(L=envelope.L, J=envelope.J, K=envelope.K, kappa1=envelope.kappa1,
                                kappa2=envelope.kappa2))
        if not rep.passed:
            raise CalculusError(f"network {m} violates the shared envelope: {rep.failures()}")
    k1, k2 = envelope.kappa1, envelope.kappa2
    scale = k1 / k2 if k1 > 0 and k2 and k2 > 0 else 1.0
    back = 1.0 / scale if scale != 1.0 else 1.0
    if k1 > 0 and k2 and k2 > 0:
        back = k2 / k1
    channels = 3
    blocks, prov = [], []
    for m, f in enumerate(nets):
        blocks.append(_block_from_cnn(f, channels, 0, 1, 2, scale))
        prov.append(provenance[m] if provenance is not None else _prov("cnn_sum_to_resnet", index=m,
                                                                        source=f.provenance))
    ro = np.zeros((D, channels))
    ro[0] = [0.0, back, -back]
    k1_decl = max(k1, (k2 or 0.0) * scale, 1.0 if not nets else 0.0)
    k2_decl = max(back, (k2 or 0.0) * max(1.0, 1.0 / k1 if k1 > 0 else 1.0))
    env = Envelope(L=envelope.L + 1, J=max(envelope.J, channels), K=envelope.K, kappa1=k1_decl,
                   kappa2=k2_decl, M=len(nets), R=envelope.R)
    net = ConvResNet(D, channels, blocks, ro, 0.0, envelope=env, provenance=prov, meta=meta)
    return _checked(net, "cnn_sum_to_resnet")
