"""Feature maps, one-sided convolution, ReLU, readout and a reverse-mode tape.

Every summation in the compiled kernels runs in the same order as the plain
loops (filter offset outer, input channel inner, bias last), so the fast path
is bitwise identical to the reference loops.  Constructions elsewhere in the
package rely on that to get exact cancellations.
"""

from __future__ import annotations

import os
from collections import namedtuple

import numba as nb
import numpy as np

__all__ = [
    "ShapeError",
    "FeatureMap",
    "ConvFilter",
    "BiasMatrix",
    "ConvLayer",
    "convolve",
    "convolve_loop",
    "relu",
    "conv_block_apply",
    "readout",
    "PackedLayers",
    "run_packed",
    "readout_batch",
    "Tape",
    "Var",
    "TapeReplayError",
    "grad",
]


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


def _threads_from_env():
    raw = os.environ.get("BESOVNET_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        return
    n = max(1, min(n, nb.config.NUMBA_NUM_THREADS))
    nb.set_num_threads(n)


_threads_from_env()


class FeatureMap:
    """A D x C array of finite reals."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"feature map must be a nonempty D x C array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map entries must be finite")
        arr.setflags(write=False)
        self.data = arr

    @property
    def D(self):
        return self.data.shape[0]

    @property
    def C(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"FeatureMap(D={self.D}, C={self.C})"


class ConvFilter:
    """Filter of shape (C_out, K, C_in), stored as nonzero entries per output channel.

    Entries for one output channel are kept in (k, l) lexicographic order, which
    is the summation order used by every evaluator.  ``weights`` rebuilds the
    dense array on demand.
    """

    __slots__ = ("shape", "indptr", "kidx", "lidx", "vals", "norm")

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 3 or min(w.shape) < 1:
            raise ShapeError(f"filter must be a nonempty C_out x K x C_in array, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("filter entries must be finite")
        rows, ks, ls = np.nonzero(w)
        self._set(w.shape, rows, ks, ls, w[rows, ks, ls])

    @classmethod
    def from_entries(cls, shape, rows, ks, ls, vals):
        """Build from coordinate lists; zero values are dropped, duplicates rejected."""
        obj = cls.__new__(cls)
        rows = np.asarray(rows, dtype=np.int64)
        ks = np.asarray(ks, dtype=np.int64)
        ls = np.asarray(ls, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        shape = tuple(int(s) for s in shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ShapeError(f"bad filter shape {shape}")
        if not (rows.shape == ks.shape == ls.shape == vals.shape):
            raise ShapeError("entry arrays must have equal length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= shape[0] or ks.min() < 0 or ks.max() >= shape[1] \
                    or ls.min() < 0 or ls.max() >= shape[2]:
                raise ShapeError(f"entry index out of range for filter shape {shape}")
            if not np.all(np.isfinite(vals)):
                raise ValueError("filter entries must be finite")
        keep = vals != 0.0
        rows, ks, ls, vals = rows[keep], ks[keep], ls[keep], vals[keep]
        order = np.lexsort((ls, ks, rows))
        rows, ks, ls, vals = rows[order], ks[order], ls[order], vals[order]
        if rows.size > 1:
            key = (rows * shape[1] + ks) * shape[2] + ls
            if np.any(np.diff(key) == 0):
                raise ValueError("duplicate filter entry")
        obj._set(shape, rows, ks, ls, vals)
        return obj

    def _set(self, shape, rows, ks, ls, vals):
        self.shape = tuple(int(s) for s in shape)
        counts = np.bincount(rows, minlength=self.shape[0]) if rows.size else np.zeros(self.shape[0], np.int64)
        indptr = np.zeros(self.shape[0] + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        self.indptr = indptr
        self.kidx = np.ascontiguousarray(ks, dtype=np.int64)
        self.lidx = np.ascontiguousarray(ls, dtype=np.int64)
        self.vals = np.ascontiguousarray(vals, dtype=np.float64)
        for a in (self.indptr, self.kidx, self.lidx, self.vals):
            a.setflags(write=False)
        self.norm = float(np.max(np.abs(self.vals))) if self.vals.size else 0.0

    @property
    def c_out(self):
        return self.shape[0]

    @property
    def K(self):
        return self.shape[1]

    @property
    def c_in(self):
        return self.shape[2]

    @property
    def nnz(self):
        return int(self.vals.size)

    def rows(self):
        return np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))

    def entries(self):
        """(row, k, l, value) arrays in storage order."""
        return self.rows(), self.kidx, self.lidx, self.vals

    @property
    def weights(self):
        w = np.zeros(self.shape)
        w[self.rows(), self.kidx, self.lidx] = self.vals
        return w

    def scaled(self, factor):
        r, k, l, v = self.entries()
        return ConvFilter.from_entries(self.shape, r, k, l, v * factor)

    def __repr__(self):
        return f"ConvFilter(C_out={self.c_out}, K={self.K}, C_in={self.c_in}, nnz={self.nnz})"


class BiasMatrix:
    """D x C_out bias added after a convolution."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"bias must be a D x C array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("bias entries must be finite")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def zeros(cls, D, c):
        return cls(np.zeros((D, c)))

    @classmethod
    def constant(cls, D, values):
        """Same bias vector on every row."""
        v = np.asarray(values, dtype=np.float64).ravel()
        return cls(np.tile(v, (D, 1)))

    @classmethod
    def first_row(cls, D, values):
        """Bias vector on the first row, zeros elsewhere."""
        v = np.asarray(values, dtype=np.float64).ravel()
        out = np.zeros((D, v.size))
        out[0] = v
        return cls(out)

    @property
    def shape(self):
        return self.data.shape

    @property
    def norm(self):
        return float(np.max(np.abs(self.data))) if self.data.size else 0.0


ConvLayer = namedtuple("ConvLayer", ["filter", "bias"])


def _check_conv_shapes(filt, D, C):
    if filt.c_in != C:
        raise ShapeError(f"filter expects {filt.c_in} input channels (filter shape {filt.shape}), "
                         f"feature map has shape ({D}, {C})")
    if filt.K > D:
        raise ShapeError(f"filter size {filt.K} exceeds feature map length {D} "
                         f"(filter shape {filt.shape}, feature map shape ({D}, {C}))")


def convolve_loop(filt, fm):
    """Reference convolution: the literal triple loop with zero padding at the bottom."""
    z = fm.data
    D, C = z.shape
    _check_conv_shapes(filt, D, C)
    w = filt.weights
    c_out, K, _ = w.shape
    y = np.zeros((D, c_out))
    for i in range(D):
        for j in range(c_out):
            acc = 0.0
            for k in range(K):
                if i + k >= D:
                    break
                for l in range(C):
                    acc = acc + w[j, k, l] * z[i + k, l]
            y[i, j] = acc
    return FeatureMap(y)


def convolve(filt, fm):
    """One-sided stride-one convolution (compiled path, same summation order as the loop)."""
    z = fm.data
    D, C = z.shape
    _check_conv_shapes(filt, D, C)
    x = np.ascontiguousarray(z[:, :, None])
    out = np.empty((D, filt.c_out, 1))
    _layer_kernel(x, out, filt.indptr, filt.kidx, filt.lidx, filt.vals, np.zeros((D, filt.c_out)), False)
    return FeatureMap(out[:, :, 0])


def relu(fm):
    return FeatureMap(np.maximum(fm.data, 0.0))


def conv_block_apply(filters, biases, fm):
    """Alternate convolve, add bias, ReLU; the ReLU also follows the last layer."""
    if len(filters) != len(biases):
        raise ShapeError(f"{len(filters)} filters but {len(biases)} biases")
    z = fm
    for filt, b in zip(filters, biases):
        bias = b.data if isinstance(b, BiasMatrix) else np.asarray(b, dtype=np.float64)
        y = convolve(filt, z)
        if bias.shape != y.shape:
            raise ShapeError(f"bias shape {bias.shape} does not match convolution output {y.shape}")
        z = FeatureMap(np.maximum(y.data + bias, 0.0))
    return z


def readout(W, b, Q):
    """Frobenius inner product <W, Q> + b, summed row-major."""
    W = np.asarray(W, dtype=np.float64)
    q = Q.data if isinstance(Q, FeatureMap) else np.asarray(Q, dtype=np.float64)
    if W.shape != q.shape:
        raise ShapeError(f"readout weight shape {W.shape} does not match feature map shape {q.shape}")
    acc = 0.0
    for i in range(W.shape[0]):
        for c in range(W.shape[1]):
            acc = acc + W[i, c] * q[i, c]
    return acc + float(b)


# ---------------------------------------------------------------- compiled kernels
#
# Batched tensors use the layout (D, C, n): samples are the innermost axis so the
# inner loop vectorizes across the batch without reordering any sum.


@nb.njit(cache=True)
def _layer_kernel(src, dst, indptr, kidx, lidx, vals, bias, relu_on):
    D = src.shape[0]
    n = src.shape[2]
    c_out = dst.shape[1]
    for i in range(D):
        for j in range(c_out):
            acc = dst[i, j]
            for b in range(n):
                acc[b] = 0.0
            for p in range(indptr[j], indptr[j + 1]):
                r = i + kidx[p]
                if r < D:
                    w = vals[p]
                    s = src[r, lidx[p]]
                    for b in range(n):
                        acc[b] += w * s[b]
            bij = bias[i, j]
            if relu_on:
                for b in range(n):
                    v = acc[b] + bij
                    acc[b] = v if v > 0.0 else 0.0
            else:
                for b in range(n):
                    acc[b] = acc[b] + bij


@nb.njit(cache=True)
def _packed_layer(src, dst, c_out, indptr, row_off, kidx, lidx, vals, bias, bias_off, relu_on,
                  nrow, nrow_off, D):
    n = src.shape[2]
    for j in range(c_out):
        lo = indptr[row_off + j]
        hi = indptr[row_off + j + 1]
        for i in range(nrow[nrow_off + j]):
            acc = dst[i, j]
            for b in range(n):
                acc[b] = 0.0
            for p in range(lo, hi):
                r = i + kidx[p]
                if r < D:
                    w = vals[p]
                    s = src[r, lidx[p]]
                    for b in range(n):
                        acc[b] += w * s[b]
            bij = bias[bias_off + i * c_out + j]
            if relu_on:
                for b in range(n):
                    v = acc[b] + bij
                    acc[b] = v if v > 0.0 else 0.0
            else:
                for b in range(n):
                    acc[b] = acc[b] + bij


@nb.njit(cache=True, parallel=True)
def _run_packed_kernel(x, meta, indptr, kidx, lidx, vals, bias, nrow, block_ptr, residual, c_final,
                       maxc, chunk):
    D = x.shape[0]
    c0 = x.shape[1]
    n = x.shape[2]
    nblocks = block_ptr.shape[0] - 1
    out = np.zeros((D, c_final, n))
    nchunks = (n + chunk - 1) // chunk
    for ci in nb.prange(nchunks):
        s0 = ci * chunk
        s1 = min(n, s0 + chunk)
        w = s1 - s0
        z = np.empty((D, c0, w))
        for i in range(D):
            for c in range(c0):
                for b in range(w):
                    z[i, c, b] = x[i, c, s0 + b]
        buf_a = np.zeros((D, maxc, w))
        buf_b = np.zeros((D, maxc, w))
        for blk in range(nblocks):
            src = z
            use_a = True
            last = -1
            for li in range(block_ptr[blk], block_ptr[blk + 1]):
                dst = buf_a if use_a else buf_b
                _packed_layer(src, dst, meta[li, 1], indptr, meta[li, 2], kidx, lidx, vals, bias,
                              meta[li, 3], meta[li, 4] != 0, nrow, meta[li, 5], D)
                src = dst
                use_a = not use_a
                last = li
            if last < 0:
                continue
            c_last = meta[last, 1]
            off = meta[last, 5]
            if residual:
                for c in range(c0):
                    for i in range(nrow[off + c]):
                        for b in range(w):
                            z[i, c, b] += src[i, c, b]
            else:
                for c in range(c_last):
                    for i in range(nrow[off + c]):
                        for b in range(w):
                            out[i, c, s0 + b] = src[i, c, b]
        if residual or nblocks == 0:
            for i in range(D):
                for c in range(c0):
                    for b in range(w):
                        out[i, c, s0 + b] = z[i, c, b]
    return out


@nb.njit(cache=True)
def _liveness_kernel(meta, indptr, kidx, lidx, block_ptr, residual, D, c0, final_need, nrow):
    """Per output channel, how many leading rows are ever read downstream."""
    nblocks = block_ptr.shape[0] - 1
    z_need = final_need.copy()
    for blk in range(nblocks - 1, -1, -1):
        lo_l = block_ptr[blk]
        hi_l = block_ptr[blk + 1]
        if hi_l == lo_l:
            continue
        out_need = z_need.copy()
        for li in range(hi_l - 1, lo_l - 1, -1):
            c_out = meta[li, 1]
            c_in = meta[li, 0]
            off = meta[li, 5]
            for j in range(c_out):
                nrow[off + j] = out_need[j]
            in_need = np.zeros(c_in, np.int64)
            row_off = meta[li, 2]
            for j in range(c_out):
                if out_need[j] == 0:
                    continue
                for p in range(indptr[row_off + j], indptr[row_off + j + 1]):
                    v = out_need[j] + kidx[p]
                    if v > D:
                        v = D
                    c = lidx[p]
                    if v > in_need[c]:
                        in_need[c] = v
            out_need = in_need
        if residual:
            for c in range(c0):
                if out_need[c] > z_need[c]:
                    z_need[c] = out_need[c]
        else:
            z_need = out_need


@nb.njit(cache=True)
def _readout_kernel(q, ri, rc, rv, b):
    n = q.shape[2]
    out = np.zeros(n)
    for p in range(ri.shape[0]):
        w = rv[p]
        s = q[ri[p], rc[p]]
        for t in range(n):
            out[t] += w * s[t]
    for t in range(n):
        out[t] = out[t] + b
    return out


class PackedLayers:
    """Flat arrays describing a sequence of blocks of conv layers, ready for the kernel."""

    __slots__ = ("D", "c_in", "c_out", "meta", "indptr", "kidx", "lidx", "vals", "bias",
                 "block_ptr", "maxc", "residual", "nrow")

    def __init__(self, blocks, D, c_in, relu_flags=None, residual=False, needed_rows=None):
        """``needed_rows`` gives, per final channel, how many leading rows the caller reads;
        rows nobody reads are skipped (their contents are unspecified)."""
        meta, indptrs, ks, ls, vs, bs = [], [], [], [], [], []
        block_ptr = [0]
        nnz_off = row_off = bias_off = nrow_off = 0
        maxc = c_in
        c_prev = c_in
        li = 0
        for block in blocks:
            c_prev_block = c_in if residual else c_prev
            cp = c_prev_block
            for layer in block:
                filt, bias = layer
                bdata = bias.data if isinstance(bias, BiasMatrix) else np.asarray(bias, dtype=np.float64)
                if filt.c_in != cp:
                    raise ShapeError(f"layer {li} expects {filt.c_in} input channels, previous layer gives {cp}")
                if filt.K > D:
                    raise ShapeError(f"layer {li} filter size {filt.K} exceeds D={D}")
                if bdata.shape != (D, filt.c_out):
                    raise ShapeError(f"layer {li} bias shape {bdata.shape} != ({D}, {filt.c_out})")
                relu_on = 1 if relu_flags is None else int(relu_flags[li])
                meta.append((filt.c_in, filt.c_out, row_off, bias_off, relu_on, nrow_off))
                indptrs.append(filt.indptr + nnz_off)
                ks.append(filt.kidx)
                ls.append(filt.lidx)
                vs.append(filt.vals)
                bs.append(bdata.ravel())
                nnz_off += filt.nnz
                row_off += filt.c_out + 1
                bias_off += bdata.size
                nrow_off += filt.c_out
                maxc = max(maxc, filt.c_out)
                cp = filt.c_out
                li += 1
            if residual and block and cp != c_in:
                raise ShapeError(f"residual block ends with {cp} channels, expected {c_in}")
            c_prev = cp
            block_ptr.append(li)
        self.D = D
        self.c_in = c_in
        self.c_out = c_in if residual else c_prev
        self.residual = residual
        self.meta = np.array(meta, dtype=np.int64).reshape(-1, 6)
        cat = np.concatenate
        self.indptr = cat(indptrs) if indptrs else np.zeros(1, np.int64)
        self.kidx = cat(ks) if ks else np.zeros(0, np.int64)
        self.lidx = cat(ls) if ls else np.zeros(0, np.int64)
        self.vals = cat(vs) if vs else np.zeros(0)
        self.bias = cat(bs) if bs else np.zeros(0)
        self.block_ptr = np.array(block_ptr, dtype=np.int64)
        self.maxc = maxc
        if needed_rows is None:
            final = np.full(self.c_out, D, dtype=np.int64)
        else:
            final = np.minimum(np.asarray(needed_rows, dtype=np.int64), D)
            if final.shape != (self.c_out,):
                raise ShapeError(f"needed_rows has shape {final.shape}, expected ({self.c_out},)")
        self.nrow = np.zeros(nrow_off, dtype=np.int64)
        if li:
            _liveness_kernel(self.meta, self.indptr, self.kidx, self.lidx, self.block_ptr, residual,
                             D, c_in, final, self.nrow)


def run_packed(packed, x, chunk=256):
    """Run packed layers on a batch laid out as (n, D, C); returns (n, D, C_out)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != packed.D or x.shape[2] != packed.c_in:
        raise ShapeError(f"batch shape {x.shape} does not match (n, {packed.D}, {packed.c_in})")
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs must be finite")
    xt = np.ascontiguousarray(np.transpose(x, (1, 2, 0)))
    out = _run_packed_kernel(xt, packed.meta, packed.indptr, packed.kidx, packed.lidx, packed.vals,
                             packed.bias, packed.nrow, packed.block_ptr, packed.residual, packed.c_out,
                             packed.maxc, chunk)
    return np.transpose(out, (2, 0, 1))


def readout_batch(W, b, q):
    """Row-major <W, Q> + b for a batch q of shape (n, D, C)."""
    W = np.asarray(W, dtype=np.float64)
    if q.shape[1:] != W.shape:
        raise ShapeError(f"readout weight shape {W.shape} does not match feature map shape {q.shape[1:]}")
    ri, rc = np.nonzero(W)
    qt = np.ascontiguousarray(np.transpose(q, (1, 2, 0)))
    return _readout_kernel(qt, ri.astype(np.int64), rc.astype(np.int64), W[ri, rc], float(b))


# ---------------------------------------------------------------- reverse mode


class TapeReplayError(RuntimeError):
    """Replaying the recorded operations did not reproduce the recorded values."""


def _shift_stack(z, K):
    """(n, D, C) -> (n, D, K, C) where slot k holds z shifted up by k rows, zero padded."""
    n, D, C = z.shape
    out = np.zeros((n, D, K, C))
    for k in range(K):
        out[:, : D - k, k, :] = z[:, k:, :]
    return out


def _unshift_stack(g, D):
    n, _, K, C = g.shape
    out = np.zeros((n, D, C))
    for k in range(K):
        out[:, k:, :] += g[:, : D - k, k, :]
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    __slots__ = ("tape", "index", "value")

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    def __add__(self, other):
        return self.tape.add(self, other)

    def __repr__(self):
        return f"Var(#{self.index}, shape={np.shape(self.value)})"


class Tape:
    """Records conv / add / relu / inner / affine operations on batched arrays.

    Values carry a leading batch axis where the op needs one: feature maps are
    (n, D, C), readout outputs are (n,).  Parameters have no batch axis.
    """

    def __init__(self):
        self.nodes = []  # (op, input indices, attrs, value)
        self._used = False

    def _push(self, op, inputs, attrs, value):
        self.nodes.append((op, tuple(inputs), attrs, value))
        return Var(self, len(self.nodes) - 1, value)

    def _as_var(self, v):
        if isinstance(v, Var):
            if v.tape is not self:
                raise ValueError("variable belongs to another tape")
            return v
        return self.constant(v)

    def constant(self, value):
        return self._push("const", (), None, np.asarray(value, dtype=np.float64))

    def param(self, value):
        return self._push("param", (), None, np.array(value, dtype=np.float64))

    def conv(self, w, z):
        w, z = self._as_var(w), self._as_var(z)
        wv, zv = w.value, z.value
        K = wv.shape[1]
        if zv.shape[2] != wv.shape[2] or K > zv.shape[1]:
            raise ShapeError(f"filter shape {wv.shape} incompatible with batch shape {zv.shape}")
        out = np.einsum("nikl,jkl->nij", _shift_stack(zv, K), wv)
        return self._push("conv", (w.index, z.index), None, out)

    def add(self, a, b):
        a, b = self._as_var(a), self._as_var(b)
        return self._push("add", (a.index, b.index), None, a.value + b.value)

    def relu(self, a):
        a = self._as_var(a)
        return self._push("relu", (a.index,), None, np.maximum(a.value, 0.0))

    def inner(self, w, q):
        """Per-sample Frobenius product of a (D, C) weight with a (n, D, C) batch."""
        w, q = self._as_var(w), self._as_var(q)
        return self._push("inner", (w.index, q.index), None, np.einsum("ndc,dc->n", q.value, w.value))

    def affine(self, a, scale, shift=0.0):
        a = self._as_var(a)
        return self._push("affine", (a.index,), (float(scale), float(shift)), a.value * scale + shift)

    def _recompute(self, op, ins, attrs, vals):
        if op == "conv":
            w, z = vals[ins[0]], vals[ins[1]]
            return np.einsum("nikl,jkl->nij", _shift_stack(z, w.shape[1]), w)
        if op == "add":
            return vals[ins[0]] + vals[ins[1]]
        if op == "relu":
            return np.maximum(vals[ins[0]], 0.0)
        if op == "inner":
            return np.einsum("ndc,dc->n", vals[ins[1]], vals[ins[0]])
        if op == "affine":
            return vals[ins[0]] * attrs[0] + attrs[1]
        raise ValueError(op)

    def replay(self):
        """Recompute every node from its inputs and check bit-for-bit agreement."""
        vals = []
        for idx, (op, ins, attrs, value) in enumerate(self.nodes):
            if op in ("const", "param"):
                vals.append(value)
                continue
            v = self._recompute(op, ins, attrs, vals)
            if v.shape != value.shape or not np.array_equal(v.view(np.uint64), value.view(np.uint64)):
                raise TapeReplayError(f"replay of node {idx} ({op}) diverged from the recorded value")
            vals.append(v)

    def backward(self, out, seed=None):
        """Gradients of sum(seed * out) with respect to every node; returns a list by node index."""
        if self._used:
            raise RuntimeError("a tape can be differentiated once")
        self._used = True
        out = self._as_var(out)
        grads = [None] * len(self.nodes)
        grads[out.index] = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for idx in range(out.index, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            op, ins, attrs, _ = self.nodes[idx]
            if op in ("const", "param"):
                continue
            if op == "conv":
                w, z = self.nodes[ins[0]][3], self.nodes[ins[1]][3]
                zs = _shift_stack(z, w.shape[1])
                self._acc(grads, ins[0], np.einsum("nikl,nij->jkl", zs, g))
                self._acc(grads, ins[1], _unshift_stack(np.einsum("nij,jkl->nikl", g, w), z.shape[1]))
            elif op == "add":
                for i in ins:
                    self._acc(grads, i, _unbroadcast(g, self.nodes[i][3].shape))
            elif op == "relu":
                # ReLU'(0) := 0
                self._acc(grads, ins[0], g * (self.nodes[ins[0]][3] > 0.0))
            elif op == "inner":
                w, q = self.nodes[ins[0]][3], self.nodes[ins[1]][3]
                self._acc(grads, ins[0], np.einsum("n,ndc->dc", g, q))
                self._acc(grads, ins[1], g[:, None, None] * w[None])
            elif op == "affine":
                self._acc(grads, ins[0], g * attrs[0])
        return grads

    @staticmethod
    def _acc(grads, i, g):
        grads[i] = g if grads[i] is None else grads[i] + g


def grad(forward, x, params, seed=None, check_replay=True):
    """Reverse-mode gradient of ``forward(tape, x, param_vars)`` with respect to ``params``.

    ``forward`` must build its computation from the tape primitives and return
    the output variable.  For batched outputs the gradient is of sum(seed*out).
    Returns (output value, list of gradient arrays shaped like ``params``).
    """
    tape = Tape()
    pvars = [tape.param(p) for p in params]
    out = forward(tape, tape.constant(x), pvars)
    if check_replay:
        tape.replay()
    grads = tape.backward(out, seed)
    result = [np.zeros_like(v.value) if grads[v.index] is None else grads[v.index] for v in pvars]
    return out.value, result
