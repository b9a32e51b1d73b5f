"""Immutable MLP, CNN and ConvResNet containers, size audits and JSON documents."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from importlib import resources

import numpy as np

from .tensor_core import (
    BiasMatrix,
    ConvFilter,
    ConvLayer,
    PackedLayers,
    ShapeError,
    readout_batch,
    run_packed,
)

__all__ = [
    "Envelope",
    "SizeAudit",
    "MlpNetwork",
    "CnnNetwork",
    "ConvResNet",
    "eval_mlp",
    "eval_cnn",
    "eval_cnn_features",
    "eval_resnet",
    "audit",
    "serialize",
    "deserialize",
    "dumps",
    "loads",
    "DocumentError",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = "1.0"


@dataclass(frozen=True)
class Envelope:
    """Declared size bounds.  Fields left as None are not part of the class."""

    L: int
    J: int
    K: int | None = None
    kappa1: float = math.inf
    kappa2: float | None = None
    M: int | None = None
    R: float | None = None

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def merge_max(self, other):
        """Field-wise maximum, used for a shared envelope over many networks."""
        out = {}
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            out[f.name] = a if b is None else b if a is None else max(a, b)
        return Envelope(**out)


_AUDIT_FIELDS = ("M", "L", "J", "K", "kappa1", "kappa2")


@dataclass(frozen=True)
class SizeAudit:
    measured: dict
    declared: dict
    verdicts: dict

    @property
    def passed(self):
        return all(self.verdicts.values())

    def failures(self):
        return [k for k, v in self.verdicts.items() if not v]

    def as_dict(self):
        return {"measured": self.measured, "declared": self.declared, "verdicts": self.verdicts,
                "passed": self.passed}


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("network parameters must be finite")
    a.setflags(write=False)
    return a


class MlpNetwork:
    """ReLU between layers, none after the last."""

    def __init__(self, weights, biases, envelope=None, clip=None, provenance=None):
        if len(weights) != len(biases) or not weights:
            raise ShapeError(f"{len(weights)} weight matrices but {len(biases)} bias vectors")
        self.weights = tuple(_frozen(np.atleast_2d(w)) for w in weights)
        self.biases = tuple(_frozen(np.atleast_1d(b)) for b in biases)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight shape {w.shape} vs bias length {b.shape[0]}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i}: weight shape {w.shape} does not chain with "
                                 f"{self.weights[i - 1].shape}")
        self.envelope = envelope if envelope is not None else self.measured_envelope()
        self.clip = clip
        self.provenance = dict(provenance) if provenance else {}
        self._packed = None

    @property
    def depth(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def width(self):
        if self.depth == 1:
            return self.out_dim
        return max(w.shape[0] for w in self.weights[:-1])

    @property
    def kappa(self):
        return max(max(float(np.max(np.abs(a), initial=0.0)) for a in self.weights),
                   max(float(np.max(np.abs(a), initial=0.0)) for a in self.biases))

    def measured_envelope(self):
        return Envelope(L=self.depth, J=self.width, kappa1=self.kappa)

    def packed(self):
        if self._packed is None:
            layers = [ConvLayer(ConvFilter(w[:, None, :]), BiasMatrix(b[None, :]))
                      for w, b in zip(self.weights, self.biases)]
            flags = [1] * (self.depth - 1) + [0]
            self._packed = PackedLayers([layers], 1, self.in_dim, relu_flags=flags)
        return self._packed


class CnnNetwork:
    """Conv layers followed by a readout; with ``readout=None`` it is a conv-only body."""

    def __init__(self, layers, readout=None, readout_bias=0.0, first_row_only=None, envelope=None,
                 provenance=None, D=None, in_channels=None):
        self.layers = tuple(ConvLayer(l.filter, l.bias if isinstance(l.bias, BiasMatrix) else BiasMatrix(l.bias))
                            for l in layers)
        if self.layers:
            self.D = self.layers[0].bias.shape[0]
            self.in_channels = self.layers[0].filter.c_in
        else:
            if D is None:
                raise ShapeError("a network without conv layers needs an explicit D")
            self.D = int(D)
            self.in_channels = int(in_channels or 1)
        if D is not None and int(D) != self.D:
            raise ShapeError(f"declared D={D} but layers have D={self.D}")
        c = self.in_channels
        for i, (f, b) in enumerate(self.layers):
            if f.c_in != c:
                raise ShapeError(f"layer {i}: filter shape {f.shape} expects {f.c_in} channels, got {c}")
            if b.shape != (self.D, f.c_out):
                raise ShapeError(f"layer {i}: bias shape {b.shape} != ({self.D}, {f.c_out})")
            if f.K > self.D:
                raise ShapeError(f"layer {i}: filter size {f.K} exceeds D={self.D}")
            c = f.c_out
        self.out_channels = c
        if readout is None:
            self.readout = None
            self.readout_bias = 0.0
            self.first_row_only = False
        else:
            self.readout = _frozen(readout)
            if self.readout.shape != (self.D, c):
                raise ShapeError(f"readout shape {self.readout.shape} != ({self.D}, {c})")
            self.readout_bias = float(readout_bias)
            if not math.isfinite(self.readout_bias):
                raise ValueError("readout bias must be finite")
            lower_zero = not np.any(self.readout[1:])
            if first_row_only and not lower_zero:
                raise ValueError("first-row-only readout has nonzero entries below the first row")
            self.first_row_only = lower_zero if first_row_only is None else bool(first_row_only)
        self.envelope = envelope if envelope is not None else self.measured_envelope()
        self.provenance = dict(provenance) if provenance else {}
        self._packed = None

    @property
    def depth(self):
        return len(self.layers)

    @property
    def is_conv_only(self):
        return self.readout is None

    def measured_envelope(self):
        J = max([self.in_channels] + [f.c_out for f, _ in self.layers])
        K = max([1] + [f.K for f, _ in self.layers])
        k1 = max([0.0] + [max(f.norm, b.norm) for f, b in self.layers])
        k2 = None
        if self.readout is not None:
            k2 = max(float(np.max(np.abs(self.readout), initial=0.0)), abs(self.readout_bias))
        return Envelope(L=self.depth, J=J, K=K, kappa1=k1, kappa2=k2)

    def packed(self):
        if self._packed is None:
            need = None
            if self.readout is not None:
                need = _rows_needed(self.readout)
            self._packed = PackedLayers([list(self.layers)], self.D, self.in_channels, needed_rows=need)
        return self._packed


def _rows_needed(W):
    """Per channel, one past the last row with a nonzero readout weight."""
    nz = W != 0
    rows = np.arange(1, W.shape[0] + 1)[:, None] * nz
    return rows.max(axis=0).astype(np.int64)


class ConvResNet:
    """x -> pad to C channels -> residual blocks (Conv + id) -> readout."""

    def __init__(self, D, channels, blocks, readout, readout_bias=0.0, envelope=None, provenance=None,
                 meta=None):
        self.D = int(D)
        self.channels = int(channels)
        self.blocks = tuple(tuple(ConvLayer(l.filter, l.bias if isinstance(l.bias, BiasMatrix)
                                            else BiasMatrix(l.bias)) for l in blk) for blk in blocks)
        for bi, blk in enumerate(self.blocks):
            c = self.channels
            if not blk:
                raise ShapeError(f"block {bi} has no layers")
            for li, (f, b) in enumerate(blk):
                if f.c_in != c:
                    raise ShapeError(f"block {bi} layer {li}: filter shape {f.shape} expects {f.c_in} "
                                     f"channels, got {c}")
                if b.shape != (self.D, f.c_out):
                    raise ShapeError(f"block {bi} layer {li}: bias shape {b.shape} != ({self.D}, {f.c_out})")
                if f.K > self.D:
                    raise ShapeError(f"block {bi} layer {li}: filter size {f.K} exceeds D={self.D}")
                c = f.c_out
            if c != self.channels:
                raise ShapeError(f"block {bi} ends with {c} channels, expected {self.channels}")
        self.readout = _frozen(readout)
        if self.readout.shape != (self.D, self.channels):
            raise ShapeError(f"readout shape {self.readout.shape} != ({self.D}, {self.channels})")
        self.readout_bias = float(readout_bias)
        self.first_row_only = not np.any(self.readout[1:])
        self.envelope = envelope if envelope is not None else self.measured_envelope()
        prov = list(provenance) if provenance is not None else [{} for _ in self.blocks]
        if len(prov) != len(self.blocks):
            raise ValueError(f"{len(prov)} provenance records for {len(self.blocks)} blocks")
        self.provenance = prov
        self.meta = dict(meta) if meta else {}
        self._packed = None

    @property
    def M(self):
        return len(self.blocks)

    def measured_envelope(self):
        J = max([self.channels] + [f.c_out for blk in self.blocks for f, _ in blk])
        K = max([1] + [f.K for blk in self.blocks for f, _ in blk])
        L = max([0] + [len(blk) for blk in self.blocks])
        k1 = max([0.0] + [max(f.norm, b.norm) for blk in self.blocks for f, b in blk])
        k2 = max(float(np.max(np.abs(self.readout), initial=0.0)), abs(self.readout_bias))
        return Envelope(L=L, J=J, K=K, kappa1=k1, kappa2=k2, M=self.M)

    def packed(self):
        if self._packed is None:
            self._packed = PackedLayers([list(b) for b in self.blocks], self.D, self.channels,
                                        residual=True, needed_rows=_rows_needed(self.readout))
        return self._packed


# ---------------------------------------------------------------- evaluation


def _batch_vectors(x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != dim:
        raise ShapeError(f"{what} expects inputs of dimension {dim}, got array of shape {x.shape}")
    return xb, single


def eval_mlp(net, x):
    xb, single = _batch_vectors(x, net.in_dim, "MLP")
    out = run_packed(net.packed(), xb[:, None, :])[:, 0, :]
    if net.out_dim == 1:
        out = out[:, 0]
    return out[0] if single else out


def _cnn_input(net, x):
    x = np.asarray(x, dtype=np.float64)
    if net.in_channels == 1 and x.ndim in (1, 2) and x.shape[-1] == net.D:
        single = x.ndim == 1
        xb = (x[None, :] if single else x)[:, :, None]
        return xb, single
    if x.ndim == 2 and x.shape == (net.D, net.in_channels):
        return x[None], True
    if x.ndim == 3 and x.shape[1:] == (net.D, net.in_channels):
        return x, False
    raise ShapeError(f"CNN expects vectors of length {net.D} or feature maps of shape "
                     f"({net.D}, {net.in_channels}), got array of shape {x.shape}")


def eval_cnn_features(net, x):
    """Final conv feature maps, shape (n, D, C) (or (D, C) for a single input)."""
    xb, single = _cnn_input(net, x)
    if net.readout is None:
        packed = net.packed()
    else:
        packed = PackedLayers([list(net.layers)], net.D, net.in_channels)
    q = run_packed(packed, xb) if net.layers else xb
    return q[0] if single else q


def eval_cnn(net, x):
    if net.readout is None:
        return eval_cnn_features(net, x)
    xb, single = _cnn_input(net, x)
    q = run_packed(net.packed(), xb) if net.layers else xb
    out = readout_batch(net.readout, net.readout_bias, q)
    return out[0] if single else out


def eval_resnet(net, x, chunk=256):
    xb, single = _batch_vectors(x, net.D, "ConvResNet")
    z = np.zeros((xb.shape[0], net.D, net.channels))
    z[:, :, 0] = xb
    q = run_packed(net.packed(), z, chunk=chunk) if net.blocks else z
    out = readout_batch(net.readout, net.readout_bias, q)
    return out[0] if single else out


# ---------------------------------------------------------------- audit


def audit(net, declared=None):
    """Measured envelope versus the declared one, field by field."""
    declared = declared if declared is not None else net.envelope
    meas = net.measured_envelope()
    m, d, v = {}, {}, {}
    for name in _AUDIT_FIELDS:
        dv = getattr(declared, name)
        mv = getattr(meas, name)
        if dv is None or mv is None:
            continue
        m[name] = mv
        d[name] = dv
        v[name] = bool(mv <= dv)
    if isinstance(net, ConvResNet) and declared.R is not None:
        d["R"] = declared.R
    return SizeAudit(measured=m, declared=d, verdicts=v)


# ---------------------------------------------------------------- documents


class DocumentError(ValueError):
    """A network document failed validation."""


def _num(x):
    return format(float(x), ".17g")


def _sparse(arr):
    arr = np.asarray(arr)
    idx = np.argwhere(arr != 0)
    return {"shape": list(arr.shape), "index": idx.tolist(), "values": [_num(arr[tuple(i)]) for i in idx]}


def _filter_doc(f):
    r, k, l, v = f.entries()
    return {"shape": list(f.shape), "index": np.stack([r, k, l], axis=1).tolist() if r.size else [],
            "values": [_num(x) for x in v]}


def _dense_from(doc):
    arr = np.zeros(doc["shape"])
    if doc["values"]:
        idx = np.asarray(doc["index"], dtype=np.int64)
        if idx.shape != (len(doc["values"]), len(doc["shape"])):
            raise DocumentError("index list does not match values")
        if np.any(idx < 0) or np.any(idx >= np.asarray(doc["shape"])):
            raise DocumentError("sparse index out of range")
        arr[tuple(idx.T)] = [float(s) for s in doc["values"]]
    return arr


def _filter_from(doc):
    shape = doc["shape"]
    if doc["values"]:
        idx = np.asarray(doc["index"], dtype=np.int64)
        if idx.shape != (len(doc["values"]), 3):
            raise DocumentError("filter index list does not match values")
        try:
            return ConvFilter.from_entries(shape, idx[:, 0], idx[:, 1], idx[:, 2],
                                           [float(s) for s in doc["values"]])
        except (ShapeError, ValueError) as exc:
            raise DocumentError(f"bad filter: {exc}") from exc
    return ConvFilter.from_entries(shape, [], [], [], [])


def _envelope_doc(env):
    out = {}
    for k, v in env.as_dict().items():
        out[k] = v if isinstance(v, int) and not isinstance(v, bool) else _num(v)
    return out


def _envelope_from(doc):
    kw = {}
    for k, v in doc.items():
        kw[k] = float(v) if isinstance(v, str) else v
    for k in ("L", "J", "K", "M"):
        if k in kw and kw[k] is not None:
            kw[k] = int(kw[k])
    return Envelope(**kw)


def _layers_doc(layers, relu_flags=None):
    out = []
    for i, (f, b) in enumerate(layers):
        out.append({"filter": _filter_doc(f), "bias": _sparse(b.data),
                    "relu": True if relu_flags is None else bool(relu_flags[i])})
    return out


def _layers_from(docs):
    return [ConvLayer(_filter_from(d["filter"]), BiasMatrix(_dense_from(d["bias"]))) for d in docs]


def serialize(net):
    """Network -> JSON-ready dict (weights as 17-significant-digit decimal strings)."""
    doc = {"format": "besovnet-network", "schema_version": SCHEMA_VERSION}
    if isinstance(net, MlpNetwork):
        layers = [ConvLayer(ConvFilter(w[:, None, :]), BiasMatrix(b[None, :]))
                  for w, b in zip(net.weights, net.biases)]
        flags = [True] * (net.depth - 1) + [False]
        doc.update(kind="mlp", D=1, in_channels=net.in_dim, envelope=_envelope_doc(net.envelope),
                   blocks=[{"layers": _layers_doc(layers, flags)}], readout=None,
                   provenance=[net.provenance])
        if net.clip is not None:
            doc["clip"] = _num(net.clip)
    elif isinstance(net, CnnNetwork):
        ro = None
        if net.readout is not None:
            ro = {"weight": _sparse(net.readout), "bias": _num(net.readout_bias),
                  "first_row_only": net.first_row_only}
        doc.update(kind="cnn", D=net.D, in_channels=net.in_channels, envelope=_envelope_doc(net.envelope),
                   blocks=[{"layers": _layers_doc(net.layers)}], readout=ro, provenance=[net.provenance])
    elif isinstance(net, ConvResNet):
        doc.update(kind="resnet", D=net.D, in_channels=1, channels=net.channels,
                   envelope=_envelope_doc(net.envelope),
                   blocks=[{"layers": _layers_doc(b)} for b in net.blocks],
                   readout={"weight": _sparse(net.readout), "bias": _num(net.readout_bias),
                            "first_row_only": net.first_row_only},
                   provenance=list(net.provenance), meta=net.meta)
    else:
        raise TypeError(f"cannot serialize {type(net).__name__}")
    return doc


def load_schema():
    text = resources.files("besovnet").joinpath("schemas/network.schema.json").read_text()
    return json.loads(text)


def deserialize(doc):
    """JSON dict -> network; rejects schema violations and envelope violations."""
    import jsonschema

    if isinstance(doc, dict) and doc.get("schema_version") not in (None, SCHEMA_VERSION):
        raise DocumentError(f"unsupported schema version {doc.get('schema_version')!r}, "
                            f"expected {SCHEMA_VERSION!r}")
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise DocumentError(f"schema violation at /{path}: {exc.message}") from exc
    env = _envelope_from(doc["envelope"])
    kind = doc["kind"]
    try:
        if kind == "mlp":
            blk = doc["blocks"][0]["layers"]
            ws, bs = [], []
            for d in blk:
                f = _filter_from(d["filter"])
                if f.K != 1:
                    raise DocumentError("MLP layers must have filter size 1")
                ws.append(f.weights[:, 0, :])
                bs.append(_dense_from(d["bias"])[0])
            clip = float(doc["clip"]) if "clip" in doc else None
            net = MlpNetwork(ws, bs, envelope=env, clip=clip, provenance=doc["provenance"][0])
        elif kind == "cnn":
            layers = _layers_from(doc["blocks"][0]["layers"])
            ro = doc["readout"]
            net = CnnNetwork(layers, readout=None if ro is None else _dense_from(ro["weight"]),
                             readout_bias=0.0 if ro is None else float(ro["bias"]),
                             first_row_only=None if ro is None else ro["first_row_only"],
                             envelope=env, provenance=doc["provenance"][0], D=doc["D"],
                             in_channels=doc["in_channels"])
        else:
            blocks = [_layers_from(b["layers"]) for b in doc["blocks"]]
            ro = doc["readout"]
            net = ConvResNet(doc["D"], doc["channels"], blocks, _dense_from(ro["weight"]),
                             float(ro["bias"]), envelope=env, provenance=doc["provenance"],
                             meta=doc.get("meta"))
    except (ShapeError, ValueError) as exc:
        if isinstance(exc, DocumentError):
            raise
        raise DocumentError(str(exc)) from exc
    rep = audit(net)
    if not rep.passed:
        bad = ", ".join(f"{k}: measured {rep.measured[k]} > declared {rep.declared[k]}" for k in rep.failures())
        raise DocumentError(f"network violates its declared envelope ({bad})")
    return net


def dumps(net):
    return json.dumps(serialize(net), sort_keys=True, separators=(",", ":"))


def loads(text):
    return deserialize(json.loads(text))
