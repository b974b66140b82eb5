"""Dense float64 tensors with reverse-mode automatic differentiation.

Minimal engine sufficient for a small 3D CNN, MLP heads, recurrent
aggregation, temporal convolution probes and the contrastive losses.
Deliberately strict: no broadcasting (all shape coercions are explicit
ops), double precision only, cross-correlation semantics for conv3d.
"""

from __future__ import annotations

import numpy as np

try:
    from . import _convkernels as _ck
except ImportError:  # numba unavailable: numpy fallback below
    _ck = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class GraphError(RuntimeError):
    """Raised on invalid use of the differentiation graph."""


class Tensor:
    """n-dimensional float64 array, optionally attached to an autodiff graph.

    Leaf tensors created with ``requires_grad=True`` accumulate gradients
    in ``.grad`` across ``backward()`` calls. Tensors produced by ops carry
    the recorded backward closure; tensors whose inputs all have
    ``requires_grad=False`` stay detached from any graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Value copy with no graph attachment and no gradient tracking."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return neg(self)


def _tracked(t: Tensor) -> bool:
    """True if gradients must flow into this tensor (leaf or interior)."""
    return t.requires_grad or t._grad_fn is not None


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if any(_tracked(p) for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def grad_fn(g):
        return (g * b.data if _tracked(a) else None,
                g * a.data if _tracked(b) else None)

    return _from_op(a.data * b.data, (a, b), grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)
    out = a.data / b.data

    def grad_fn(g):
        return (g / b.data if _tracked(a) else None,
                -g * out / b.data if _tracked(b) else None)

    return _from_op(out, (a, b), grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _from_op(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _from_op(out, (a,), lambda g: (g * (a.data > 0.0),))


def sigmoid(a: Tensor) -> Tensor:
    # exp of a non-positive argument only, stable for large |x|
    z = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _from_op(out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")

    def grad_fn(g):
        return (g @ b.data.T if _tracked(a) else None,
                a.data.T @ g if _tracked(b) else None)

    return _from_op(a.data @ b.data, (a, b), grad_fn)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d: expects 2-d operand, got {a.shape}")
    return _from_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(i) for i in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.shape} axes")
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                    lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def bias_add(x: Tensor, b: Tensor, axis: int) -> Tensor:
    """Add 1-d bias ``b`` along ``axis`` of ``x`` (the one sanctioned broadcast)."""
    if b.data.ndim != 1:
        raise ShapeError(f"bias_add: bias must be 1-d, got {b.shape}")
    axis = axis % x.data.ndim
    if x.shape[axis] != b.shape[0]:
        raise ShapeError(
            f"bias_add: extent {x.shape[axis]} at axis {axis} of {x.shape} "
            f"does not match bias {b.shape}")
    bshape = [1] * x.data.ndim
    bshape[axis] = b.shape[0]
    other_axes = tuple(i for i in range(x.data.ndim) if i != axis)

    def grad_fn(g):
        return (g if _tracked(x) else None,
                g.sum(axis=other_axes) if _tracked(b) else None)

    return _from_op(x.data + b.data.reshape(bshape), (x, b), grad_fn)


def channel_map(x: Tensor, w: Tensor) -> Tensor:
    """Per-position linear map over the channel axis: [B,C,T] x [O,C] -> [B,O,T]."""
    if x.data.ndim != 3 or w.data.ndim != 2:
        raise ShapeError(f"channel_map: expects x [B,C,T] and w [O,C], got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel_map: channel extents differ, {x.shape} vs {w.shape}")
    out = np.moveaxis(np.tensordot(w.data, x.data, axes=([1], [1])), 1, 0)

    def grad_fn(g):
        gx = gw = None
        if _tracked(x):
            gx = np.moveaxis(np.tensordot(w.data, g, axes=([0], [1])), 1, 0)
        if _tracked(w):
            gw = np.tensordot(g, x.data, axes=([0, 2], [0, 2]))
        return gx, gw

    return _from_op(out, (x, w), grad_fn)


def normalize_rows(x: Tensor) -> Tensor:
    """L2-normalize each row of a 2-d tensor; errors on a zero row."""
    if x.data.ndim != 2:
        raise ShapeError(f"normalize_rows: expects 2-d operand, got {x.shape}")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("normalize_rows: zero-norm row (degenerate embedding)")
    out = x.data / norms

    def grad_fn(g):
        inner = np.sum(g * out, axis=1, keepdims=True)
        return ((g - inner * out) / norms,)

    return _from_op(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty operand list")
    nd = tensors[0].data.ndim
    axis = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != nd or any(
                t.shape[i] != ref[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} vs {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if _tracked(t) else None for p, t in zip(pieces, tensors))

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis),
                    tuple(tensors), grad_fn)


def concat_lastdim(tensors) -> Tensor:
    return concat(tensors, axis=-1)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = axis % a.data.ndim
    extent = a.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ShapeError(f"slice: bounds [{start}, {stop}) outside extent {extent} of {a.shape}")
    idx = tuple(slice(start, stop) if i == axis else slice(None)
                for i in range(a.data.ndim))

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _from_op(a.data[idx].copy(), (a,), grad_fn)


def slice_lastdim(a: Tensor, start: int, stop: int) -> Tensor:
    return slice_axis(a, start, stop, axis=-1)


def sum_all(a: Tensor) -> Tensor:
    return _from_op(a.data.sum(), (a,), lambda g: (np.full_like(a.data, float(g)),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    axis = axis % a.data.ndim
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _from_op(out, (a,), grad_fn)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows of a 2-d tensor; repeated indices accumulate on backward."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows: expects 2-d operand, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ShapeError(f"take_rows: indices out of range for {a.shape[0]} rows")

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _from_op(a.data[idx].copy(), (a,), grad_fn)


# ---------------------------------------------------------------------------
# spatio-temporal ops (leading batch axis optional)

def _split_batch(x: Tensor, op: str):
    if x.data.ndim == 4:
        return x.data[None], False
    if x.data.ndim == 5:
        return x.data, True
    raise ShapeError(f"{op}: expects [C,T,H,W] or [B,C,T,H,W], got {x.shape}")


def _triples(name: str, v) -> tuple[int, int, int]:
    t = tuple(int(u) for u in v)
    if len(t) != 3:
        raise ShapeError(f"{name}: expected 3 components, got {v!r}")
    return t


def _offsets(ksz):
    kt, kh, kw = ksz
    return [(a, b, c) for a in range(kt) for b in range(kh) for c in range(kw)]


def _build_cols(xp: np.ndarray, ksz, stride, out_sz) -> np.ndarray:
    """Patch matrix [B, ot, oh, ow, n_offsets*C] from channels-last padded input."""
    bsz, c = xp.shape[0], xp.shape[-1]
    ot, oh, ow = out_sz
    st, sh, sw = stride
    cols = np.empty((bsz, ot, oh, ow, len(_offsets(ksz)) * c))
    for o, (a, b, d) in enumerate(_offsets(ksz)):
        cols[..., o * c:(o + 1) * c] = xp[:, a: a + ot * st: st,
                                          b: b + oh * sh: sh,
                                          d: d + ow * sw: sw, :]
    return cols


def conv3d(x: Tensor, k: Tensor, stride=(1, 1, 1), pad=(0, 0, 0)) -> Tensor:
    """Strided zero-padded cross-correlation of [*,C_in,T,H,W] with [C_out,C_in,kt,kh,kw]."""
    xd, batched = _split_batch(x, "conv3d")
    if k.data.ndim != 5:
        raise ShapeError(f"conv3d: kernel must be 5-d, got {k.shape}")
    stride = _triples("stride", stride)
    pad = _triples("pad", pad)
    c_out, c_in, kt, kh, kw = k.shape
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv3d: input channels {xd.shape[1]} vs kernel {k.shape}")
    ksz = (kt, kh, kw)
    out_sz = []
    for i in range(3):
        n = (xd.shape[2 + i] + 2 * pad[i] - ksz[i]) // stride[i] + 1
        if n < 1:
            raise ShapeError(
                f"conv3d: nonpositive output extent on axis {i} "
                f"(input {xd.shape[2 + i]}, pad {pad[i]}, kernel {ksz[i]}, stride {stride[i]})")
        out_sz.append(n)
    ot, oh, ow = out_sz

    if _ck is not None:
        xc = np.ascontiguousarray(xd)
        kc = np.ascontiguousarray(k.data)
        out = _ck.conv3d_forward(xc, kc, *stride, *pad, ot, oh, ow)

        def grad_fn(g):
            gb = np.ascontiguousarray(g if batched else g[None])
            gx = gk = None
            if _tracked(k):
                gk = _ck.conv3d_grad_kernel(xc, gb, *stride, *pad,
                                            c_out, c_in, kt, kh, kw)
            if _tracked(x):
                gx = _ck.conv3d_grad_input(gb, kc, *stride, *pad,
                                           xd.shape[2], xd.shape[3], xd.shape[4])
                if not batched:
                    gx = gx[0]
            return gx, gk

        return _from_op(out if batched else out[0], (x, k), grad_fn)

    # numpy fallback: channels-last im2col, one GEMM per direction
    bsz = xd.shape[0]
    n_pos = bsz * ot * oh * ow
    n_taps = kt * kh * kw
    xcl = np.ascontiguousarray(np.moveaxis(xd, 1, -1))
    xp = np.pad(xcl, ((0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2]), (0, 0)))
    cols = _build_cols(xp, ksz, stride, out_sz)
    # kernel as [n_taps*C_in, C_out] in the cols row order (tap-major, channel-minor)
    w2 = k.data.reshape(c_out, c_in, n_taps).transpose(2, 1, 0).reshape(n_taps * c_in, c_out)
    out2 = cols.reshape(n_pos, -1) @ w2
    out = np.moveaxis(out2.reshape(bsz, ot, oh, ow, c_out), -1, 1)

    def grad_fn(g):
        gb = g if batched else g[None]
        gcl = np.ascontiguousarray(np.moveaxis(gb, 1, -1)).reshape(n_pos, c_out)
        cols2 = _build_cols(xp, ksz, stride, out_sz).reshape(n_pos, -1)
        gx = gk = None
        if _tracked(k):
            dw2 = cols2.T @ gcl
            gk = dw2.reshape(n_taps, c_in, c_out).transpose(2, 1, 0).reshape(k.shape)
        if _tracked(x):
            dcols = (gcl @ w2.T).reshape(bsz, ot, oh, ow, n_taps, c_in)
            gxp = np.zeros_like(xp)
            st, sh, sw = stride
            for o, (a, b, d) in enumerate(_offsets(ksz)):
                gxp[:, a: a + ot * st: st, b: b + oh * sh: sh,
                    d: d + ow * sw: sw, :] += dcols[..., o, :]
            gcrop = gxp[:, pad[0]: xp.shape[1] - pad[0],
                        pad[1]: xp.shape[2] - pad[1],
                        pad[2]: xp.shape[3] - pad[2], :]
            gx = np.ascontiguousarray(np.moveaxis(gcrop, -1, 1))
            if not batched:
                gx = gx[0]
        return gx, gk

    return _from_op(out if batched else out[0], (x, k), grad_fn)


def _pool_geometry(op: str, in_sz, window, stride):
    counts = []
    for i in range(3):
        span = in_sz[i] - window[i]
        if span < 0 or span % stride[i] != 0:
            raise ShapeError(
                f"{op}: window {window[i]} stride {stride[i]} does not tile "
                f"extent {in_sz[i]} on axis {i}")
        n = span // stride[i] + 1
        if window[i] + (n - 1) * stride[i] != in_sz[i]:
            raise ShapeError(
                f"{op}: window {window[i]} stride {stride[i]} does not tile "
                f"extent {in_sz[i]} on axis {i}")
        counts.append(n)
    return counts


def avg_pool3d(x: Tensor, window, stride=None) -> Tensor:
    """Average pooling with exact tiling (no clipped windows)."""
    xd, batched = _split_batch(x, "avg_pool3d")
    window = _triples("window", window)
    stride = window if stride is None else _triples("stride", stride)
    in_sz = xd.shape[2:]
    ot, oh, ow = _pool_geometry("avg_pool3d", in_sz, window, stride)
    vol = window[0] * window[1] * window[2]

    def tap(arr, a, b, c):
        return arr[:, :,
                   a: a + ot * stride[0]: stride[0],
                   b: b + oh * stride[1]: stride[1],
                   c: c + ow * stride[2]: stride[2]]

    out = np.zeros((xd.shape[0], xd.shape[1], ot, oh, ow))
    for a in range(window[0]):
        for b in range(window[1]):
            for c in range(window[2]):
                out += tap(xd, a, b, c)
    out /= vol

    def grad_fn(g):
        gb = (g if batched else g[None]) / vol
        gx = np.zeros_like(xd)
        for a in range(window[0]):
            for b in range(window[1]):
                for c in range(window[2]):
                    tap(gx, a, b, c)[...] += gb
        return (gx if batched else gx[0],)

    return _from_op(out if batched else out[0], (x,), grad_fn)


def global_avg_pool3d(x: Tensor) -> Tensor:
    """Mean over all spatio-temporal positions: [*,C,T,H,W] -> [*,C]."""
    xd, batched = _split_batch(x, "global_avg_pool3d")
    vol = xd.shape[2] * xd.shape[3] * xd.shape[4]
    out = xd.mean(axis=(2, 3, 4))

    def grad_fn(g):
        gb = g if batched else g[None]
        gx = np.broadcast_to((gb / vol)[:, :, None, None, None], xd.shape).copy()
        return (gx if batched else gx[0],)

    return _from_op(out if batched else out[0], (x,), grad_fn)


# ---------------------------------------------------------------------------
# channels-last variants used on the encoder hot path. Same semantics as
# their channels-first counterparts on transposed data; conv3d_cl is
# stride-1 only, which is all the encoder needs (pooling downsamples).

def conv3d_cl(x: Tensor, k: Tensor, pad=(0, 0, 0)) -> Tensor:
    """Stride-1 cross-correlation of [B,T,H,W,C_in] with [kt,kh,kw,C_in,C_out]."""
    if x.data.ndim != 5 or k.data.ndim != 5:
        raise ShapeError(f"conv3d_cl: expects 5-d operands, got {x.shape}, {k.shape}")
    pad = _triples("pad", pad)
    kt, kh, kw, c_in, c_out = k.shape
    if x.shape[4] != c_in:
        raise ShapeError(f"conv3d_cl: input channels {x.shape[4]} vs kernel {k.shape}")
    t_in, h_in, w_in = x.shape[1], x.shape[2], x.shape[3]
    for i, (ext, ksz) in enumerate(zip((t_in, h_in, w_in), (kt, kh, kw))):
        if ext + 2 * pad[i] - ksz + 1 < 1:
            raise ShapeError(
                f"conv3d_cl: nonpositive output extent on axis {i} "
                f"(input {ext}, pad {pad[i]}, kernel {ksz})")

    if _ck is not None:
        xc = np.ascontiguousarray(x.data)
        kc = np.ascontiguousarray(k.data)
        out = _ck.forward_cl(xc, kc, *pad)

        def grad_fn(g):
            gc = np.ascontiguousarray(g)
            gx = gk = None
            if _tracked(k):
                gk = _ck.grad_kernel_cl(xc, gc, *pad, kt, kh, kw)
            if _tracked(x):
                k2t = np.ascontiguousarray(kc.transpose(0, 1, 2, 4, 3))
                gx = _ck.grad_input_cl(gc, k2t, *pad, t_in, h_in, w_in)
            return gx, gk

        return _from_op(out, (x, k), grad_fn)

    # numpy fallback through the channels-first implementation
    out_cf = conv3d(permute(x, (0, 4, 1, 2, 3)), permute(k, (4, 3, 0, 1, 2)),
                    stride=(1, 1, 1), pad=pad)
    return permute(out_cf, (0, 2, 3, 4, 1))


def avg_pool3d_cl(x: Tensor, window) -> Tensor:
    """Non-overlapping average pooling on [B,T,H,W,C] (stride = window)."""
    if x.data.ndim != 5:
        raise ShapeError(f"avg_pool3d_cl: expects [B,T,H,W,C], got {x.shape}")
    window = _triples("window", window)
    bsz, t_in, h_in, w_in, c = x.shape
    for i, ext in enumerate((t_in, h_in, w_in)):
        if ext % window[i] != 0:
            raise ShapeError(
                f"avg_pool3d_cl: window {window[i]} does not tile extent {ext} on axis {i}")
    ot, oh, ow = t_in // window[0], h_in // window[1], w_in // window[2]
    vol = window[0] * window[1] * window[2]
    split = x.data.reshape(bsz, ot, window[0], oh, window[1], ow, window[2], c)
    out = split.mean(axis=(2, 4, 6))

    def grad_fn(g):
        gexp = np.broadcast_to(
            g[:, :, None, :, None, :, None, :] / vol,
            (bsz, ot, window[0], oh, window[1], ow, window[2], c))
        return (gexp.reshape(x.shape).copy(),)

    return _from_op(out, (x,), grad_fn)


def global_avg_pool3d_cl(x: Tensor) -> Tensor:
    """Mean over all spatio-temporal positions: [B,T,H,W,C] -> [B,C]."""
    if x.data.ndim != 5:
        raise ShapeError(f"global_avg_pool3d_cl: expects [B,T,H,W,C], got {x.shape}")
    vol = x.shape[1] * x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(1, 2, 3))

    def grad_fn(g):
        return (np.broadcast_to(g[:, None, None, None, :] / vol, x.shape).copy(),)

    return _from_op(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# backward pass and gradient checking

def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable
    requires_grad leaf. Repeated calls without zero_grad() add up."""
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _tracked(p):
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is not None:
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not _tracked(parent):
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g


def grad_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between the autodiff gradient of scalar-valued
    ``f`` at leaf ``x`` and central finite differences with the given step.
    Relative error uses denominator max(|g|, |g_hat|, 1e-8) elementwise."""
    x.requires_grad = True
    x.zero_grad()
    loss = f(x)
    backward(loss)
    g = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        f_plus = float(f(x).data.reshape(()))
        flat[i] = keep - step
        f_minus = float(f(x).data.reshape(()))
        flat[i] = keep
        nflat[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(g), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(g - numeric) / denom)) if flat.size else 0.0
