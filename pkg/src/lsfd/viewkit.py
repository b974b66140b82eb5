"""Long/short view construction and the video augmentation pipeline.

A long view is N*L frames sampled at a fixed temporal stride; its N short
views are the consecutive non-overlapping L-frame blocks of the same
sampled frames. Every view receives its own augmentation parameters, and
all frames within one view are transformed identically.

Augmentation order is fixed: crop -> bilinear resize -> horizontal flip
-> color drop -> color jitter. Jitter semantics (documented so tests can
be exact): brightness adds a constant, contrast scales deviation from
the frame's mean luma, then saturation scales the HSV S channel and hue
rotates the HSV H channel; output is clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synthvid import VideoClip


class ViewError(ValueError):
    """Raised when a video cannot support the requested view geometry."""


@dataclass(frozen=True)
class AugConfig:
    out_size: int = 32
    crop_area: tuple[float, float] = (0.5, 1.0)
    crop_aspect: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    hflip_p: float = 0.5
    brightness: float = 0.5
    contrast: float = 0.5
    saturation: float = 0.5
    hue: float = 0.25
    color_drop_p: float = 0.1


@dataclass(frozen=True)
class AugParams:
    crop: tuple[int, int, int, int, int, int]  # top, left, height, width, out_h, out_w
    hflip: bool
    color: tuple[float, float, float, float]   # brightness, contrast, saturation, hue
    color_drop: bool


@dataclass
class ViewSet:
    long_view_a: np.ndarray        # query-side augmentation, float64 [N*L,3,oh,ow]
    long_view_b: np.ndarray        # key-side augmentation of the same frames
    short_views: list[np.ndarray]  # N arrays of [L,3,oh,ow]
    frame_indices: np.ndarray      # source frame index per long-view position
    params_long_a: AugParams
    params_long_b: AugParams
    params_short: list[AugParams]
    n_views: int
    clip_len: int
    stride: int


def identity_params(h: int, w: int, out_size: int | None = None) -> AugParams:
    out = out_size if out_size is not None else h
    return AugParams(crop=(0, 0, h, w, out, out), hflip=False,
                     color=(0.0, 0.0, 0.0, 0.0), color_drop=False)


def sample_aug_params(rng: np.random.Generator, cfg: AugConfig,
                      src_h: int, src_w: int) -> AugParams:
    area = src_h * src_w
    log_lo, log_hi = np.log(cfg.crop_aspect[0]), np.log(cfg.crop_aspect[1])
    while True:
        frac = rng.uniform(*cfg.crop_area)
        ratio = np.exp(rng.uniform(log_lo, log_hi))
        ch = int(round(np.sqrt(frac * area / ratio)))
        cw = int(round(np.sqrt(frac * area * ratio)))
        if 1 <= ch <= src_h and 1 <= cw <= src_w and \
                cfg.crop_area[0] <= ch * cw / area <= cfg.crop_area[1]:
            break
    top = int(rng.integers(src_h - ch + 1))
    left = int(rng.integers(src_w - cw + 1))
    hflip = bool(rng.random() < cfg.hflip_p)
    color = (float(rng.uniform(-cfg.brightness, cfg.brightness)),
             float(rng.uniform(-cfg.contrast, cfg.contrast)),
             float(rng.uniform(-cfg.saturation, cfg.saturation)),
             float(rng.uniform(-cfg.hue, cfg.hue)))
    color_drop = bool(rng.random() < cfg.color_drop_p)
    return AugParams(crop=(top, left, ch, cw, cfg.out_size, cfg.out_size),
                     hflip=hflip, color=color, color_drop=color_drop)


def _resize_bilinear(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel bilinear resize of [T,3,h,w]; exact copy when sizes match."""
    t, c, h, w = frames.shape
    src_r = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    src_c = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    r0 = np.floor(src_r).astype(np.intp)
    c0 = np.floor(src_c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = (src_r - r0)[:, None]
    wc = (src_c - c0)[None, :]
    x00 = frames[:, :, r0[:, None], c0[None, :]]
    x01 = frames[:, :, r0[:, None], c1[None, :]]
    x10 = frames[:, :, r1[:, None], c0[None, :]]
    x11 = frames[:, :, r1[:, None], c1[None, :]]
    return ((1 - wr) * (1 - wc) * x00 + (1 - wr) * wc * x01
            + wr * (1 - wc) * x10 + wr * wc * x11)


def rgb_to_hsv(x: np.ndarray) -> np.ndarray:
    """Vectorized RGB->HSV on [T,3,h,w] arrays with channels in [0,1]."""
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    maxc = x.max(axis=1)
    minc = x.min(axis=1)
    delta = maxc - minc
    safe = np.where(delta == 0.0, 1.0, delta)
    hue = np.where(maxc == r, ((g - b) / safe) % 6.0,
                   np.where(maxc == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    hue = np.where(delta == 0.0, 0.0, hue / 6.0)
    sat = np.where(maxc == 0.0, 0.0, delta / np.where(maxc == 0.0, 1.0, maxc))
    return np.stack([hue, sat, maxc], axis=1)


def hsv_to_rgb(x: np.ndarray) -> np.ndarray:
    h, s, v = x[:, 0], x[:, 1], x[:, 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.intp) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices_r = np.stack([v, q, p, p, t, v])
    choices_g = np.stack([t, v, v, q, p, p])
    choices_b = np.stack([p, p, t, v, v, q])
    idx = i[None]
    r = np.take_along_axis(choices_r, idx, axis=0)[0]
    g = np.take_along_axis(choices_g, idx, axis=0)[0]
    b = np.take_along_axis(choices_b, idx, axis=0)[0]
    return np.stack([r, g, b], axis=1)


_LUMA = np.array([0.299, 0.587, 0.114])


def augment(frames: np.ndarray, params: AugParams) -> np.ndarray:
    """Apply one view's augmentation to [T,3,H,W] frames; returns float64."""
    t, c, h, w = frames.shape
    top, left, ch, cw, out_h, out_w = params.crop
    if top < 0 or left < 0 or top + ch > h or left + cw > w or ch < 1 or cw < 1:
        raise ViewError(f"crop {params.crop} outside {h}x{w} frame bounds")
    x = np.asarray(frames[:, :, top:top + ch, left:left + cw], dtype=np.float64)
    x = _resize_bilinear(x, out_h, out_w)
    if params.hflip:
        x = x[:, :, :, ::-1].copy()
    if params.color_drop:
        luma = np.einsum("c,tchw->thw", _LUMA, x)
        x = np.repeat(luma[:, None], 3, axis=1)
    db, dc, ds, dh = params.color
    if db != 0.0:
        x = x + db
    if dc != 0.0:
        mean_luma = np.einsum("c,tchw->t", _LUMA, x)[:, None, None, None] / (out_h * out_w)
        x = mean_luma + (1.0 + dc) * (x - mean_luma)
    x = np.clip(x, 0.0, 1.0)
    if ds != 0.0 or dh != 0.0:
        hsv = rgb_to_hsv(x)
        hsv[:, 1] = np.clip(hsv[:, 1] * (1.0 + ds), 0.0, 1.0)
        hsv[:, 0] = (hsv[:, 0] + dh) % 1.0
        x = hsv_to_rgb(hsv)
    return np.clip(x, 0.0, 1.0)


def required_frames(n_views: int, clip_len: int, stride: int) -> int:
    return (n_views * clip_len - 1) * stride + 1


def sample_views(video: VideoClip, n_views: int, clip_len: int, stride: int,
                 start_policy: str, rng: np.random.Generator,
                 aug_cfg: AugConfig) -> ViewSet:
    """Sample one long view plus its N short views, each independently augmented."""
    if n_views < 1 or clip_len < 1 or stride < 1:
        raise ViewError(f"invalid view geometry N={n_views} L={clip_len} stride={stride}")
    t_total = video.frames.shape[0]
    span = required_frames(n_views, clip_len, stride)
    if span > t_total:
        raise ViewError(
            f"video of {t_total} frames too short for N={n_views} L={clip_len} "
            f"stride={stride} (needs {span} frames)")
    max_start = t_total - span
    if start_policy == "uniform":
        start = int(rng.integers(max_start + 1))
    elif start_policy == "center":
        start = max_start // 2
    else:
        raise ViewError(f"unknown start policy {start_policy!r}")

    indices = start + stride * np.arange(n_views * clip_len)
    src_h, src_w = video.frames.shape[2], video.frames.shape[3]
    params_a = sample_aug_params(rng, aug_cfg, src_h, src_w)
    params_b = sample_aug_params(rng, aug_cfg, src_h, src_w)
    params_short = [sample_aug_params(rng, aug_cfg, src_h, src_w)
                    for _ in range(n_views)]

    long_frames = video.frames[indices]
    shorts = []
    for j in range(n_views):
        block = long_frames[j * clip_len:(j + 1) * clip_len]
        shorts.append(augment(block, params_short[j]))
    return ViewSet(
        long_view_a=augment(long_frames, params_a),
        long_view_b=augment(long_frames, params_b),
        short_views=shorts,
        frame_indices=indices,
        params_long_a=params_a,
        params_long_b=params_b,
        params_short=params_short,
        n_views=n_views,
        clip_len=clip_len,
        stride=stride,
    )
