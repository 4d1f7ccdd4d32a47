"""Differentiable operations over Tensors.

Every op is a plain function: it computes the forward value with numpy and,
when a GradientTape is supplied, records one vector-Jacobian closure per
input. Ops accept single samples (the shapes named in their docstrings) and,
where the model needs it, a leading batch dimension; no other broadcasting
is supported.

Output dtype follows the inputs, so graphs built from float64 leaves run
entirely at 64 bits (used by the finite-difference oracle).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import DimensionError, Tensor, UsageError

_NORM_FLOOR = 1e-30  # guards the 1/||a-b|| factor at coincident points


def _record(tape, out, pairs):
    if tape is not None:
        tape._record(out, pairs)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor, tape=None) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor._wrap(a.array + b.array)
    return _record(tape, out, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b: Tensor, tape=None) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor._wrap(a.array - b.array)
    return _record(tape, out, [(a, lambda g: g), (b, lambda g: -g)])


def scale(x: Tensor, factor: float, tape=None) -> Tensor:
    """Multiply by a python constant (not a trainable quantity)."""
    factor = float(factor)
    out = Tensor._wrap(x.array * factor)
    return _record(tape, out, [(x, lambda g: g * factor)])


def one_minus(x: Tensor, tape=None) -> Tensor:
    out = Tensor._wrap(1.0 - x.array)
    return _record(tape, out, [(x, lambda g: -g)])


def scalar_mul(s: Tensor, x: Tensor, tape=None) -> Tensor:
    """s * x where s is a size-1 tensor (trainable scalar such as an
    attribute importance weight)."""
    if s.size != 1:
        raise DimensionError(f"scalar_mul: scale has size {s.size}")
    sval = float(s.array.reshape(-1)[0])
    out = Tensor._wrap(x.array * sval)
    xs = x.array

    def vjp_s(g):
        return np.asarray(np.sum(g * xs), dtype=s.dtype).reshape(s.shape)

    return _record(tape, out, [(s, vjp_s), (x, lambda g: g * sval)])


def relu(x: Tensor, tape=None) -> Tensor:
    out = Tensor._wrap(np.maximum(x.array, 0))
    mask = x.array > 0
    return _record(tape, out, [(x, lambda g: g * mask)])


def rms_norm(x: Tensor, eps: float = 1e-5, tape=None) -> Tensor:
    """Divide each last-axis vector by its root-mean-square (channel
    response normalization; no learned parameters)."""
    xa = x.array
    k = xa.shape[-1]
    r = np.sqrt(np.mean(xa * xa, axis=-1, keepdims=True) + eps)
    out = Tensor._wrap(xa / r)

    def vjp(g):
        dot = np.sum(g * xa, axis=-1, keepdims=True)
        return g / r - xa * (dot / (k * r ** 3))

    return _record(tape, out, [(x, vjp)])


def square(x: Tensor, tape=None) -> Tensor:
    out = Tensor._wrap(x.array * x.array)
    xs = x.array
    return _record(tape, out, [(x, lambda g: 2.0 * g * xs)])


def sigmoid(x: Tensor, tape=None) -> Tensor:
    z = x.array
    out_arr = np.empty_like(z)
    pos = z >= 0
    out_arr[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out_arr[~pos] = ez / (1.0 + ez)
    out = Tensor._wrap(out_arr)
    s = out.array
    return _record(tape, out, [(x, lambda g: g * s * (1.0 - s))])


def flatten(x: Tensor, keep_batch: bool = False, tape=None) -> Tensor:
    shape = x.shape
    if keep_batch:
        if x.ndim < 2:
            raise DimensionError("flatten(keep_batch=True) needs rank >= 2")
        out = Tensor._wrap(x.array.reshape(shape[0], -1))
    else:
        out = Tensor._wrap(x.array.reshape(-1))
    return _record(tape, out, [(x, lambda g: g.reshape(shape))])


def concat(parts: Sequence[Tensor], tape=None) -> Tensor:
    """Join along the last axis; leading axes must agree."""
    if not parts:
        raise UsageError("concat: no parts")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise DimensionError("concat: leading dims differ")
    out = Tensor._wrap(np.concatenate([p.array for p in parts], axis=-1))
    pairs = []
    offset = 0
    for p in parts:
        w = p.shape[-1]
        lo, hi = offset, offset + w

        def vjp(g, lo=lo, hi=hi):
            return np.ascontiguousarray(g[..., lo:hi])

        pairs.append((p, vjp))
        offset = hi
    return _record(tape, out, pairs)


def stack(parts: Sequence[Tensor], tape=None) -> Tensor:
    """Stack equal-shape tensors into a new leading axis."""
    if not parts:
        raise UsageError("stack: no parts")
    shp = parts[0].shape
    for p in parts:
        if p.shape != shp:
            raise DimensionError("stack: shapes differ")
    out = Tensor._wrap(np.stack([p.array for p in parts], axis=0))
    pairs = [(p, (lambda g, i=i: g[i])) for i, p in enumerate(parts)]
    return _record(tape, out, pairs)


def take_rows(x: Tensor, indices, tape=None) -> Tensor:
    """Row gather: x[(i0, i1, ...)] for a rank >= 2 tensor."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim < 2:
        raise DimensionError("take_rows needs rank >= 2")
    out = Tensor._wrap(np.ascontiguousarray(x.array[idx]))
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        dx = np.zeros(shape, dtype=dtype)
        np.add.at(dx, idx, g)
        return dx

    return _record(tape, out, [(x, vjp)])


def weighted_concat(slots: Sequence[Tensor], weights: Tensor, tape=None) -> Tensor:
    """Per-slot scalar weighting followed by concatenation on the last axis.

    slots: A tensors of shape (D,) or (N, D); weights: shape (A,). Used to
    merge per-attribute vectors into the global representation.
    """
    a = len(slots)
    if weights.shape != (a,):
        raise DimensionError(f"weighted_concat: weights shape {weights.shape} != ({a},)")
    lead = slots[0].shape[:-1]
    for s in slots:
        if s.shape[:-1] != lead:
            raise DimensionError("weighted_concat: slot leading dims differ")
    w = weights.array
    out = Tensor._wrap(np.concatenate(
        [s.array * w[i] for i, s in enumerate(slots)], axis=-1))
    pairs = []
    offset = 0
    slot_arrays = [s.array for s in slots]
    widths = [s.shape[-1] for s in slots]

    def vjp_w(g):
        dw = np.zeros(a, dtype=weights.dtype)
        off = 0
        for i in range(a):
            dw[i] = np.sum(g[..., off:off + widths[i]] * slot_arrays[i])
            off += widths[i]
        return dw

    pairs.append((weights, vjp_w))
    for i, s in enumerate(slots):
        lo, hi = offset, offset + widths[i]

        def vjp_s(g, lo=lo, hi=hi, i=i):
            return np.ascontiguousarray(g[..., lo:hi]) * w[i]

        pairs.append((s, vjp_s))
        offset = hi
    return _record(tape, out, pairs)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, tape=None) -> Tensor:
    """(I,) @ (I, O) -> (O,)  or  (N, I) @ (I, O) -> (N, O)."""
    if b.ndim != 2:
        raise DimensionError(f"matmul: rhs must be rank 2, got {b.shape}")
    if a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor._wrap(a.array @ b.array)
    aa, ba = a.array, b.array

    def vjp_a(g):
        return g @ ba.T

    def vjp_b(g):
        if aa.ndim == 1:
            return np.outer(aa, g)
        return aa.T @ g

    return _record(tape, out, [(a, vjp_a), (b, vjp_b)])


def bias_add(x: Tensor, b: Tensor, tape=None) -> Tensor:
    """Add a (C,) bias along the last axis."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add: {x.shape} + {b.shape}")
    out = Tensor._wrap(x.array + b.array)
    lead_axes = tuple(range(x.ndim - 1))

    def vjp_b(g):
        return g.sum(axis=lead_axes) if lead_axes else g

    return _record(tape, out, [(x, lambda g: g), (b, vjp_b)])


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        pad_h = max((oh - 1) * stride + kh - h, 0)
        pad_w = max((ow - 1) * stride + kw - w, 0)
        pads = (pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2)
    elif padding == "valid":
        if kh > h or kw > w:
            raise DimensionError(f"conv2d: kernel {kh}x{kw} exceeds input {h}x{w}")
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        pads = (0, 0, 0, 0)
    else:
        raise UsageError(f"conv2d: unknown padding {padding!r}")
    return oh, ow, pads


def _im2col(xp, kh, kw, stride, oh, ow):
    # (N, Hp, Wp, C) -> (N*OH*OW, kh*kw*C), row-major over kernel taps.
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]            # (N, OH, OW, C, kh, kw)
    cols = win.transpose(0, 1, 2, 4, 5, 3)       # (N, OH, OW, kh, kw, C)
    n = xp.shape[0]
    return np.ascontiguousarray(cols).reshape(n * oh * ow, kh * kw * xp.shape[3])


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: str = "same",
           tape=None) -> Tensor:
    """Cross-correlation of an (H, W, Cin) map (or an (N, H, W, Cin) batch)
    with (kh, kw, Cin, Cout) kernels. No bias; see bias_add."""
    if kernels.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be rank 4, got {kernels.shape}")
    single = x.ndim == 3
    if not single and x.ndim != 4:
        raise DimensionError(f"conv2d: input must be rank 3 or 4, got {x.shape}")
    xa = x.array[None] if single else x.array
    kh, kw, cin, cout = kernels.shape
    n, h, w, cx = xa.shape
    if cx != cin:
        raise DimensionError(f"conv2d: input channels {cx} != kernel channels {cin}")
    if stride < 1:
        raise UsageError("conv2d: stride must be >= 1")
    oh, ow, (pt, pb, pl, pr) = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(xa, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else xa
    if kh > xp.shape[1] or kw > xp.shape[2]:
        raise DimensionError("conv2d: kernel exceeds padded input")

    wmat = kernels.array.reshape(kh * kw * cin, cout)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out_arr = (cols @ wmat).reshape(n, oh, ow, cout)
    out = Tensor._wrap(out_arr[0] if single else out_arr)

    kshape, kdtype = kernels.shape, kernels.dtype

    def vjp_x(g):
        gf = (g[None] if single else g).reshape(n * oh * ow, cout)
        dcols = (gf @ wmat.T).reshape(n, oh, ow, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride, :] += \
                    dcols[:, :, :, ki, kj, :]
        dxa = dxp[:, pt:pt + h, pl:pl + w, :]
        return dxa[0] if single else dxa

    def vjp_k(g):
        gf = (g[None] if single else g).reshape(n * oh * ow, cout)
        # cols are recomputed from the kept padded input to avoid holding
        # the large im2col buffer for the whole tape lifetime
        dk = _im2col(xp, kh, kw, stride, oh, ow).T @ gf
        return dk.reshape(kshape).astype(kdtype, copy=False)

    return _record(tape, out, [(x, vjp_x), (kernels, vjp_k)])


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def gap(x: Tensor, tape=None) -> Tensor:
    """Per-channel spatial sum of an (H, W, K) map or (N, H, W, K) batch."""
    if x.ndim == 3:
        out = Tensor._wrap(x.array.sum(axis=(0, 1)))
        shape = x.shape
        return _record(tape, out, [(x, lambda g: np.broadcast_to(
            g, shape).copy())])
    if x.ndim == 4:
        out = Tensor._wrap(x.array.sum(axis=(1, 2)))
        shape = x.shape

        def vjp(g):
            return np.broadcast_to(g[:, None, None, :], shape).copy()

        return _record(tape, out, [(x, vjp)])
    raise DimensionError(f"gap: rank 3 or 4 input required, got {x.shape}")


def _sample_coords(lo, hi, n_out, extent):
    # Output index i samples lo*(E-1) + i*(hi-lo)*(E-1)/(n_out-1); a single
    # output row samples the box-center coordinate.
    if n_out > 1:
        return lo * (extent - 1) + np.arange(n_out, dtype=np.float64) * \
            ((hi - lo) * (extent - 1) / (n_out - 1))
    return np.array([0.5 * (lo + hi) * (extent - 1)], dtype=np.float64)


def _validate_boxes(boxes: np.ndarray):
    if np.any(boxes < -1e-9) or np.any(boxes > 1 + 1e-9):
        raise UsageError("crop_and_resize: box coordinates must lie in [0, 1]")
    if np.any(boxes[:, 2] < boxes[:, 0]) or np.any(boxes[:, 3] < boxes[:, 1]):
        raise UsageError("crop_and_resize: box must satisfy y1 <= y2 and x1 <= x2")


def crop_and_resize(x: Tensor, box, out_h: int, out_w: int, tape=None) -> Tensor:
    """Bilinear crop of a normalized [y1, x1, y2, x2] box to (out_h, out_w).

    Single form: (H, W, K) map with one box. Batched form: (N, H, W, K) maps
    with (N, 4) boxes. Differentiable with respect to the map; boxes are
    treated as constants.
    """
    single = x.ndim == 3
    if not single and x.ndim != 4:
        raise DimensionError(f"crop_and_resize: rank 3 or 4 input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise UsageError("crop_and_resize: output size must be >= 1")
    xa = x.array[None] if single else x.array
    n, h, w, k = xa.shape
    boxes = np.asarray(box, dtype=np.float64).reshape(-1, 4)
    if single and boxes.shape[0] != 1:
        raise DimensionError("crop_and_resize: one box expected for a single map")
    if not single and boxes.shape[0] != n:
        raise DimensionError(f"crop_and_resize: {boxes.shape[0]} boxes for batch {n}")
    _validate_boxes(boxes)

    ys = np.stack([_sample_coords(b[0], b[2], out_h, h) for b in boxes])  # (N, oh)
    xs = np.stack([_sample_coords(b[1], b[3], out_w, w) for b in boxes])  # (N, ow)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(xa.dtype)[:, :, None, None]   # (N, oh, 1, 1)
    wx = (xs - x0).astype(xa.dtype)[:, None, :, None]   # (N, 1, ow, 1)

    ni = np.arange(n)[:, None, None]
    yy0, yy1 = y0[:, :, None], y1[:, :, None]
    xx0, xx1 = x0[:, None, :], x1[:, None, :]
    v00 = xa[ni, yy0, xx0]
    v01 = xa[ni, yy0, xx1]
    v10 = xa[ni, yy1, xx0]
    v11 = xa[ni, yy1, xx1]
    out_arr = (v00 * (1 - wy) * (1 - wx) + v01 * (1 - wy) * wx
               + v10 * wy * (1 - wx) + v11 * wy * wx)
    out = Tensor._wrap(out_arr[0] if single else out_arr)

    shape, dtype = xa.shape, xa.dtype

    def vjp(g):
        gb = g[None] if single else g
        dx = np.zeros(shape, dtype=dtype)
        np.add.at(dx, (ni, yy0, xx0), gb * (1 - wy) * (1 - wx))
        np.add.at(dx, (ni, yy0, xx1), gb * (1 - wy) * wx)
        np.add.at(dx, (ni, yy1, xx0), gb * wy * (1 - wx))
        np.add.at(dx, (ni, yy1, xx1), gb * wy * wx)
        return dx[0] if single else dx

    return _record(tape, out, [(x, vjp)])


# ---------------------------------------------------------------------------
# losses and reductions
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax over the last axis (not a tape op)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, label, tape=None) -> Tensor:
    """-log softmax probability of the true class.

    Rank-1 logits with an int label give a scalar; rank-2 (N, V) logits with
    N labels give the (N,) per-sample loss vector.
    """
    if logits.ndim == 1:
        v = logits.shape[0]
        if v < 2:
            raise DimensionError("softmax_cross_entropy: need >= 2 classes")
        label = int(label)
        if not 0 <= label < v:
            raise UsageError(f"label {label} out of range [0, {v})")
        z = logits.array
        m = z.max()
        lse = m + np.log(np.exp(z - m).sum())
        loss = Tensor._wrap(np.asarray(lse - z[label], dtype=logits.dtype))
        p = softmax(z)
        onehot = np.zeros(v, dtype=logits.dtype)
        onehot[label] = 1.0
        return _record(tape, loss, [(logits, lambda g: g * (p - onehot))])

    if logits.ndim == 2:
        n, v = logits.shape
        if v < 2:
            raise DimensionError("softmax_cross_entropy: need >= 2 classes")
        labels = np.asarray(label, dtype=np.int64)
        if labels.shape != (n,):
            raise DimensionError(f"labels shape {labels.shape} != ({n},)")
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= v:
            raise UsageError("label out of range")
        z = logits.array
        m = z.max(axis=1, keepdims=True)
        lse = (m[:, 0] + np.log(np.exp(z - m).sum(axis=1)))
        losses = Tensor._wrap((lse - z[np.arange(n), labels]).astype(
            logits.dtype))
        p = softmax(z)
        onehot = np.zeros((n, v), dtype=logits.dtype)
        onehot[np.arange(n), labels] = 1.0

        def vjp(g):
            return (p - onehot) * g[:, None]

        return _record(tape, losses, [(logits, vjp)])

    raise DimensionError(f"softmax_cross_entropy: rank 1 or 2 logits, got {logits.shape}")


def l2_distance(a: Tensor, b: Tensor, tape=None) -> Tensor:
    """Euclidean distance; (D,) pairs give a scalar, (N, D) pairs give (N,)."""
    _check_same_shape(a, b, "l2_distance")
    diff = a.array - b.array
    if a.ndim == 1:
        d = np.sqrt(np.sum(diff * diff))
        out = Tensor._wrap(np.asarray(d, dtype=a.dtype))
        inv = diff / max(float(d), _NORM_FLOOR)
        return _record(tape, out, [(a, lambda g: g * inv),
                                   (b, lambda g: -g * inv)])
    if a.ndim == 2:
        d = np.sqrt(np.sum(diff * diff, axis=1))
        out = Tensor._wrap(d.astype(a.dtype))
        inv = diff / np.maximum(d, _NORM_FLOOR)[:, None]
        return _record(tape, out, [(a, lambda g: g[:, None] * inv),
                                   (b, lambda g: -g[:, None] * inv)])
    raise DimensionError(f"l2_distance: rank 1 or 2, got {a.shape}")


def mean_all(x: Tensor, tape=None) -> Tensor:
    out = Tensor._wrap(np.asarray(x.array.mean(), dtype=x.dtype))
    shape, n = x.shape, x.size

    def vjp(g):
        return np.broadcast_to(g / n, shape).copy()

    return _record(tape, out, [(x, vjp)])


def sum_all(x: Tensor, tape=None) -> Tensor:
    out = Tensor._wrap(np.asarray(x.array.sum(), dtype=x.dtype))
    shape = x.shape

    def vjp(g):
        return np.broadcast_to(g, shape).copy()

    return _record(tape, out, [(x, vjp)])


def add_n(terms: Sequence[Tensor], tape=None) -> Tensor:
    """Sum of equal-shape tensors (loss accumulation)."""
    if not terms:
        raise UsageError("add_n: no terms")
    acc = terms[0].array.copy()
    for t in terms[1:]:
        _check_same_shape(terms[0], t, "add_n")
        acc = acc + t.array
    out = Tensor._wrap(acc)
    return _record(tape, out, [(t, lambda g: g) for t in terms])


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator,
            tape=None) -> Tensor:
    """Inverted dropout: zero with probability 1-keep_prob, scale the rest
    by 1/keep_prob. keep_prob == 1 is the identity and draws no randomness."""
    if not 0.0 < keep_prob <= 1.0:
        raise UsageError(f"dropout: keep_prob {keep_prob} outside (0, 1]")
    if keep_prob == 1.0:
        return x
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / keep_prob
    out = Tensor._wrap(x.array * mask)
    return _record(tape, out, [(x, lambda g: g * mask)])
