"""Compiled inner loops for conv3d.

Direct blocked convolution: reads inputs once per tap instead of
materializing patch matrices, which matters on memory-bandwidth-starved
machines. Stride-1 kernels are specialized so LLVM can vectorize the
unit-stride inner loops; generic-stride variants cover the rest. Pure
float64 IEEE arithmetic, deterministic: threads partition one output
axis, no shared accumulators. tensor.py falls back to a numpy path when
numba is unavailable.
"""

import numba
import numpy as np


def _ceil_div_lo(p, off, s):
    return max(0, -((-(p - off)) // s))


@numba.njit(cache=True, parallel=True, fastmath=False)
def forward_s1(x, k, pt, ph, pw):
    bsz, c_in, t_in, h_in, w_in = x.shape
    c_out, _, kt, kh, kw = k.shape
    ot, oh, ow = t_in + 2 * pt - kt + 1, h_in + 2 * ph - kh + 1, w_in + 2 * pw - kw + 1
    out = np.zeros((bsz, c_out, ot, oh, ow))
    for b in numba.prange(bsz):
        for co in range(c_out):
            for a in range(kt):
                t_lo, t_hi = max(0, pt - a), min(ot, t_in + pt - a)
                for bb in range(kh):
                    h_lo, h_hi = max(0, ph - bb), min(oh, h_in + ph - bb)
                    for cc in range(kw):
                        w_lo, w_hi = max(0, pw - cc), min(ow, w_in + pw - cc)
                        for ci in range(c_in):
                            kv = k[co, ci, a, bb, cc]
                            for t in range(t_lo, t_hi):
                                for h in range(h_lo, h_hi):
                                    for w in range(w_lo, w_hi):
                                        out[b, co, t, h, w] += kv * x[b, ci, t + a - pt, h + bb - ph, w + cc - pw]
    return out


@numba.njit(cache=True, parallel=True, fastmath=False)
def grad_kernel_s1(x, g, pt, ph, pw):
    bsz, c_in, t_in, h_in, w_in = x.shape
    c_out, ot, oh, ow = g.shape[1], g.shape[2], g.shape[3], g.shape[4]
    kt, kh, kw = t_in + 2 * pt - ot + 1, h_in + 2 * ph - oh + 1, w_in + 2 * pw - ow + 1
    gk = np.zeros((c_out, c_in, kt, kh, kw))
    for co in numba.prange(c_out):
        for ci in range(c_in):
            for a in range(kt):
                t_lo, t_hi = max(0, pt - a), min(ot, t_in + pt - a)
                for bb in range(kh):
                    h_lo, h_hi = max(0, ph - bb), min(oh, h_in + ph - bb)
                    for cc in range(kw):
                        w_lo, w_hi = max(0, pw - cc), min(ow, w_in + pw - cc)
                        acc = 0.0
                        for b in range(bsz):
                            for t in range(t_lo, t_hi):
                                for h in range(h_lo, h_hi):
                                    for w in range(w_lo, w_hi):
                                        acc += g[b, co, t, h, w] * x[b, ci, t + a - pt, h + bb - ph, w + cc - pw]
                        gk[co, ci, a, bb, cc] = acc
    return gk


@numba.njit(cache=True, parallel=True, fastmath=False)
def grad_input_s1(g, k, pt, ph, pw, t_in, h_in, w_in):
    bsz, c_out, ot, oh, ow = g.shape
    c_in, kt, kh, kw = k.shape[1], k.shape[2], k.shape[3], k.shape[4]
    gx = np.zeros((bsz, c_in, t_in, h_in, w_in))
    for b in numba.prange(bsz):
        for co in range(c_out):
            for a in range(kt):
                t_lo, t_hi = max(0, pt - a), min(ot, t_in + pt - a)
                for bb in range(kh):
                    h_lo, h_hi = max(0, ph - bb), min(oh, h_in + ph - bb)
                    for cc in range(kw):
                        w_lo, w_hi = max(0, pw - cc), min(ow, w_in + pw - cc)
                        for ci in range(c_in):
                            kv = k[co, ci, a, bb, cc]
                            for t in range(t_lo, t_hi):
                                for h in range(h_lo, h_hi):
                                    for w in range(w_lo, w_hi):
                                        gx[b, ci, t + a - pt, h + bb - ph, w + cc - pw] += kv * g[b, co, t, h, w]
    return gx


@numba.njit(cache=True, parallel=True, fastmath=False)
def forward_gen(x, k, st, sh, sw, pt, ph, pw, ot, oh, ow):
    bsz, c_in, t_in, h_in, w_in = x.shape
    c_out, _, kt, kh, kw = k.shape
    out = np.zeros((bsz, c_out, ot, oh, ow))
    for b in numba.prange(bsz):
        for co in range(c_out):
            for a in range(kt):
                t_lo = max(0, -((-(pt - a)) // st))
                t_hi = min(ot, (t_in - 1 + pt - a) // st + 1)
                for bb in range(kh):
                    h_lo = max(0, -((-(ph - bb)) // sh))
                    h_hi = min(oh, (h_in - 1 + ph - bb) // sh + 1)
                    for cc in range(kw):
                        w_lo = max(0, -((-(pw - cc)) // sw))
                        w_hi = min(ow, (w_in - 1 + pw - cc) // sw + 1)
                        for ci in range(c_in):
                            kv = k[co, ci, a, bb, cc]
                            for t in range(t_lo, t_hi):
                                it = t * st + a - pt
                                for h in range(h_lo, h_hi):
                                    ih = h * sh + bb - ph
                                    for w in range(w_lo, w_hi):
                                        out[b, co, t, h, w] += kv * x[b, ci, it, ih, w * sw + cc - pw]
    return out


@numba.njit(cache=True, parallel=True, fastmath=False)
def grad_kernel_gen(x, g, st, sh, sw, pt, ph, pw, c_out, c_in, kt, kh, kw):
    bsz, _, t_in, h_in, w_in = x.shape
    ot, oh, ow = g.shape[2], g.shape[3], g.shape[4]
    gk = np.zeros((c_out, c_in, kt, kh, kw))
    for co in numba.prange(c_out):
        for ci in range(c_in):
            for a in range(kt):
                t_lo = max(0, -((-(pt - a)) // st))
                t_hi = min(ot, (t_in - 1 + pt - a) // st + 1)
                for bb in range(kh):
                    h_lo = max(0, -((-(ph - bb)) // sh))
                    h_hi = min(oh, (h_in - 1 + ph - bb) // sh + 1)
                    for cc in range(kw):
                        w_lo = max(0, -((-(pw - cc)) // sw))
                        w_hi = min(ow, (w_in - 1 + pw - cc) // sw + 1)
                        acc = 0.0
                        for b in range(bsz):
                            for t in range(t_lo, t_hi):
                                it = t * st + a - pt
                                for h in range(h_lo, h_hi):
                                    ih = h * sh + bb - ph
                                    for w in range(w_lo, w_hi):
                                        acc += g[b, co, t, h, w] * x[b, ci, it, ih, w * sw + cc - pw]
                        gk[co, ci, a, bb, cc] = acc
    return gk


@numba.njit(cache=True, parallel=True, fastmath=False)
def grad_input_gen(g, k, st, sh, sw, pt, ph, pw, t_in, h_in, w_in):
    bsz, c_out = g.shape[0], g.shape[1]
    c_in, kt, kh, kw = k.shape[1], k.shape[2], k.shape[3], k.shape[4]
    ot, oh, ow = g.shape[2], g.shape[3], g.shape[4]
    gx = np.zeros((bsz, c_in, t_in, h_in, w_in))
    for b in numba.prange(bsz):
        for co in range(c_out):
            for a in range(kt):
                t_lo = max(0, -((-(pt - a)) // st))
                t_hi = min(ot, (t_in - 1 + pt - a) // st + 1)
                for bb in range(kh):
                    h_lo = max(0, -((-(ph - bb)) // sh))
                    h_hi = min(oh, (h_in - 1 + ph - bb) // sh + 1)
                    for cc in range(kw):
                        w_lo = max(0, -((-(pw - cc)) // sw))
                        w_hi = min(ow, (w_in - 1 + pw - cc) // sw + 1)
                        for ci in range(c_in):
                            kv = k[co, ci, a, bb, cc]
                            for t in range(t_lo, t_hi):
                                it = t * st + a - pt
                                for h in range(h_lo, h_hi):
                                    ih = h * sh + bb - ph
                                    for w in range(w_lo, w_hi):
                                        gx[b, ci, it, ih, w * sw + cc - pw] += kv * g[b, co, t, h, w]
    return gx


def conv3d_forward(x, k, st, sh, sw, pt, ph, pw, ot, oh, ow):
    if st == sh == sw == 1:
        return forward_s1(x, k, pt, ph, pw)
    return forward_gen(x, k, st, sh, sw, pt, ph, pw, ot, oh, ow)


def conv3d_grad_kernel(x, g, st, sh, sw, pt, ph, pw, c_out, c_in, kt, kh, kw):
    if st == sh == sw == 1:
        return grad_kernel_s1(x, g, pt, ph, pw)
    return grad_kernel_gen(x, g, st, sh, sw, pt, ph, pw, c_out, c_in, kt, kh, kw)


def conv3d_grad_input(g, k, st, sh, sw, pt, ph, pw, t_in, h_in, w_in):
    if st == sh == sw == 1:
        return grad_input_s1(g, k, pt, ph, pw, t_in, h_in, w_in)
    return grad_input_gen(g, k, st, sh, sw, pt, ph, pw, t_in, h_in, w_in)


@numba.njit(cache=True, parallel=True, fastmath=False)
def forward_cl(x, k2, pt, ph, pw):
    """Channels-last stride-1 forward: [B,T,H,W,Ci] x [kt,kh,kw,Ci,Co]."""
    bsz, t_in, h_in, w_in, c_in = x.shape
    kt, kh, kw, _, c_out = k2.shape
    ot, oh, ow = t_in + 2 * pt - kt + 1, h_in + 2 * ph - kh + 1, w_in + 2 * pw - kw + 1
    out = np.empty((bsz, ot, oh, ow, c_out))
    for b in numba.prange(bsz):
        acc = np.empty(c_out)
        for t in range(ot):
            for h in range(oh):
                for w in range(ow):
                    for co in range(c_out):
                        acc[co] = 0.0
                    for a in range(kt):
                        it = t + a - pt
                        if it < 0 or it >= t_in:
                            continue
                        for bb in range(kh):
                            ih = h + bb - ph
                            if ih < 0 or ih >= h_in:
                                continue
                            for cc in range(kw):
                                iw = w + cc - pw
                                if iw < 0 or iw >= w_in:
                                    continue
                                for ci in range(c_in):
                                    xv = x[b, it, ih, iw, ci]
                                    for co in range(c_out):
                                        acc[co] += xv * k2[a, bb, cc, ci, co]
                    for co in range(c_out):
                        out[b, t, h, w, co] = acc[co]
    return out


@numba.njit(cache=True, parallel=True, fastmath=False)
def grad_kernel_cl(x, g, pt, ph, pw, kt, kh, kw):
    """Kernel gradient, channels-last stride-1; one thread per tap."""
    bsz, t_in, h_in, w_in, c_in = x.shape
    ot, oh, ow, c_out = g.shape[1], g.shape[2], g.shape[3], g.shape[4]
    n_taps = kt * kh * kw
    gk2 = np.zeros((n_taps, c_in, c_out))
    for tap in numba.prange(n_taps):
        a = tap // (kh * kw)
        bb = (tap // kw) % kh
        cc = tap % kw
        t_lo, t_hi = max(0, pt - a), min(ot, t_in + pt - a)
        h_lo, h_hi = max(0, ph - bb), min(oh, h_in + ph - bb)
        w_lo, w_hi = max(0, pw - cc), min(ow, w_in + pw - cc)
        for b in range(bsz):
            for t in range(t_lo, t_hi):
                it = t + a - pt
                for h in range(h_lo, h_hi):
                    ih = h + bb - ph
                    for w in range(w_lo, w_hi):
                        iw = w + cc - pw
                        for ci in range(c_in):
                            xv = x[b, it, ih, iw, ci]
                            for co in range(c_out):
                                gk2[tap, ci, co] += xv * g[b, t, h, w, co]
    return gk2.reshape(kt, kh, kw, c_in, c_out)


@numba.njit(cache=True, parallel=True, fastmath=False)
def grad_input_cl(g, k2t, pt, ph, pw, t_in, h_in, w_in):
    """Input gradient, channels-last stride-1; k2t is [kt,kh,kw,Co,Ci]."""
    bsz, ot, oh, ow, c_out = g.shape
    kt, kh, kw, _, c_in = k2t.shape
    gx = np.zeros((bsz, t_in, h_in, w_in, c_in))
    for b in numba.prange(bsz):
        for t in range(ot):
            for h in range(oh):
                for w in range(ow):
                    for a in range(kt):
                        it = t + a - pt
                        if it < 0 or it >= t_in:
                            continue
                        for bb in range(kh):
                            ih = h + bb - ph
                            if ih < 0 or ih >= h_in:
                                continue
                            for cc in range(kw):
                                iw = w + cc - pw
                                if iw < 0 or iw >= w_in:
                                    continue
                                for co in range(c_out):
                                    gv = g[b, t, h, w, co]
                                    for ci in range(c_in):
                                        gx[b, it, ih, iw, ci] += gv * k2t[a, bb, cc, co, ci]
    return gx
