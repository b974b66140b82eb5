"""Synthetic video corpus with exact stationary / motion ground truth.

Each clip is a procedural background (the stationary factor: constant
across all frames of a video) plus one colored shape driven by a program
of motion phases (the non-stationary factor). Per-frame phase ids double
as segmentation labels. Rendering is a pure function of the sampled
factors, so the corpus is reproducible bit-for-bit from (config, seed).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import rng as rngmod

# motion phase vocabulary
MOVE_RIGHT, MOVE_DOWN, MOVE_LEFT, MOVE_UP, HOLD, SHRINK, GROW = range(7)
PHASE_NAMES = ("move-right", "move-down", "move-left", "move-up",
               "hold", "shrink", "grow")

# motion-class templates: multisets of phase ids; a video of a class gets a
# random no-adjacent-repeat ordering and random durations. Keeping the class
# count small gives the dynamic-label tasks (retrieval, probing) real support
# instead of one-class-per-video programs.
MOTION_TEMPLATES = (
    (MOVE_RIGHT, MOVE_DOWN, MOVE_LEFT, MOVE_UP),
    (MOVE_RIGHT, MOVE_RIGHT, MOVE_DOWN, MOVE_DOWN),
    (MOVE_LEFT, MOVE_LEFT, MOVE_UP, MOVE_UP),
    (MOVE_RIGHT, MOVE_LEFT, HOLD, HOLD),
    (SHRINK, GROW, SHRINK, GROW),
    (MOVE_RIGHT, MOVE_DOWN, SHRINK, GROW),
    (HOLD, HOLD, SHRINK, SHRINK),
    (MOVE_DOWN, MOVE_DOWN, MOVE_UP, MOVE_UP),
)

_CLIP_MAGIC = b"LSFDVID1"

_TINTS = np.array([
    (0.20, 0.30, 0.50), (0.50, 0.25, 0.20), (0.25, 0.45, 0.25),
    (0.45, 0.40, 0.20), (0.35, 0.20, 0.45), (0.20, 0.45, 0.45),
    (0.40, 0.30, 0.35), (0.30, 0.35, 0.20),
])


class CorpusError(RuntimeError):
    """Raised on corpus construction, persistence or reload failures."""


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 512
    n_test: int = 128
    n_backgrounds: int = 8
    n_shapes: int = 8
    n_phases: int = 7
    n_frames: int = 32
    height: int = 32
    width: int = 32
    min_phase_len: int = 4
    max_phase_len: int = 12
    # 0 = fully random phase programs; > 0 = sample from templated classes
    motion_classes: int = 8
    velocity: float = 1.5
    size_step: float = 0.5
    base_size: float = 5.0


@dataclass(frozen=True)
class Factors:
    background_id: int
    shape_id: int
    shape_color: tuple[float, float, float]
    motion_program: tuple[tuple[int, int], ...]  # (phase_id, duration)
    start_position: tuple[float, float]          # (row, col)
    seed: int


@dataclass
class VideoClip:
    frames: np.ndarray        # float32 [T, 3, H, W], values in [0, 1]
    frame_labels: np.ndarray  # int32 [T]
    factors: Factors


@dataclass
class Corpus:
    clips: list[VideoClip]
    train_ids: list[int]
    test_ids: list[int]
    manifest: dict

    @property
    def train(self) -> list[VideoClip]:
        return [self.clips[i] for i in self.train_ids]

    @property
    def test(self) -> list[VideoClip]:
        return [self.clips[i] for i in self.test_ids]


def motion_class_label(program) -> int:
    """Stable label for the multiset of phases in a motion program."""
    canonical = tuple(sorted(p for p, _ in program))
    return zlib.crc32(repr(canonical).encode()) & 0x7FFFFFFF


def _random_durations(rng, total: int, parts: int, lo: int, hi: int) -> list[int]:
    """Random composition of `total` into `parts` durations, each in [lo, hi]."""
    if not (parts * lo <= total <= parts * hi):
        raise CorpusError(
            f"cannot split {total} frames into {parts} phases of {lo}..{hi}")
    durations = [lo] * parts
    headroom = np.full(parts, hi - lo)
    for _ in range(total - parts * lo):
        open_slots = np.flatnonzero(headroom > 0)
        j = int(open_slots[rng.integers(len(open_slots))])
        durations[j] += 1
        headroom[j] -= 1
    return durations


def _order_without_repeats(rng, multiset) -> list[int]:
    items = list(multiset)
    for _ in range(1000):
        perm = list(rng.permutation(items))
        if all(perm[i] != perm[i + 1] for i in range(len(perm) - 1)):
            return perm
    raise CorpusError(f"no repeat-free ordering of phases {items}")


def _random_program(rng, cfg: CorpusConfig) -> list[tuple[int, int]]:
    lo, hi, total = cfg.min_phase_len, cfg.max_phase_len, cfg.n_frames
    feasible = [k for k in range(1, total // lo + 1) if k * lo <= total <= k * hi]
    if not feasible:
        raise CorpusError(
            f"no phase count can split {total} frames into {lo}..{hi} chunks")
    parts = int(rng.choice(feasible))
    durations = _random_durations(rng, total, parts, lo, hi)
    phases: list[int] = []
    for _ in range(parts):
        p = int(rng.integers(cfg.n_phases))
        while phases and p == phases[-1]:
            p = int(rng.integers(cfg.n_phases))
        phases.append(p)
    return list(zip(phases, durations))


def available_templates(cfg: CorpusConfig) -> list[tuple[int, ...]]:
    usable = [t for t in MOTION_TEMPLATES if max(t) < cfg.n_phases]
    if cfg.motion_classes > len(usable):
        raise CorpusError(
            f"{cfg.motion_classes} motion classes requested but only "
            f"{len(usable)} templates exist for {cfg.n_phases} phases")
    return usable[:cfg.motion_classes]


def sample_factors(rng: np.random.Generator, cfg: CorpusConfig) -> Factors:
    """Draw one video's generative factors; advances `rng` deterministically."""
    if cfg.min_phase_len < 1 or cfg.n_frames < cfg.min_phase_len:
        raise CorpusError(
            f"infeasible phase partition: {cfg.n_frames} frames with "
            f"min length {cfg.min_phase_len}")
    background_id = int(rng.integers(cfg.n_backgrounds))
    shape_id = int(rng.integers(cfg.n_shapes))
    color = tuple(float(c) for c in rng.uniform(0.35, 1.0, size=3))
    if cfg.motion_classes > 0:
        template = available_templates(cfg)[int(rng.integers(cfg.motion_classes))]
        phases = _order_without_repeats(rng, template)
        durations = _random_durations(
            rng, cfg.n_frames, len(template), cfg.min_phase_len, cfg.max_phase_len)
        program = tuple(zip(phases, durations))
    else:
        program = tuple(_random_program(rng, cfg))
    margin = cfg.base_size
    row = float(rng.uniform(margin, cfg.height - 1 - margin))
    col = float(rng.uniform(margin, cfg.width - 1 - margin))
    seed = int(rng.integers(1 << 63))
    return Factors(background_id, shape_id, color, program, (row, col), seed)


def _background(bid: int, h: int, w: int) -> np.ndarray:
    """Procedural pattern [3, H, W]; constant across a video's frames."""
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    family, variant = bid % 4, bid // 4
    period = 4 if variant % 2 == 0 else 8
    if family == 0:
        m = ((rr // period) % 2).astype(np.float64)
    elif family == 1:
        m = ((cc // period) % 2).astype(np.float64)
    elif family == 2:
        m = (((rr // period) + (cc // period)) % 2).astype(np.float64)
    else:
        m = (rr + cc) / float(h + w - 2)
    intensity = 0.5 + 0.5 * m  # in [0.5, 1.0]
    tint = _TINTS[bid % len(_TINTS)] * (1.0 if variant % 2 == 0 else 0.8)
    return tint[:, None, None] * intensity[None]


def _shape_mask(shape_id: int, center: tuple[float, float], size: float,
                h: int, w: int) -> np.ndarray:
    r0, c0 = center
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dr, dc = rr - r0, cc - c0
    s = size
    kind = shape_id % 8
    if kind == 0:    # square
        return (np.abs(dr) <= s) & (np.abs(dc) <= s)
    if kind == 1:    # circle
        return dr * dr + dc * dc <= s * s
    if kind == 2:    # downward-widening triangle
        return (np.abs(dr) <= s) & (np.abs(dc) <= (dr + s) / 2.0)
    if kind == 3:    # plus
        return ((np.abs(dr) <= s / 3.0) & (np.abs(dc) <= s)) | \
               ((np.abs(dc) <= s / 3.0) & (np.abs(dr) <= s))
    if kind == 4:    # diamond
        return np.abs(dr) + np.abs(dc) <= s
    if kind == 5:    # ring
        d2 = dr * dr + dc * dc
        return (d2 <= s * s) & (d2 >= (s / 2.0) ** 2)
    if kind == 6:    # horizontal bar
        return (np.abs(dr) <= s / 3.0) & (np.abs(dc) <= s)
    return (np.abs(dc) <= s / 3.0) & (np.abs(dr) <= s)  # vertical bar


def render(factors: Factors, cfg: CorpusConfig) -> VideoClip:
    """Rasterize a clip from its factors. Pure and deterministic."""
    h, w, t_total = cfg.height, cfg.width, cfg.n_frames
    if sum(d for _, d in factors.motion_program) != t_total:
        raise CorpusError(
            f"motion program covers {sum(d for _, d in factors.motion_program)} "
            f"frames, expected {t_total}")
    labels = np.concatenate([np.full(d, p, dtype=np.int32)
                             for p, d in factors.motion_program])
    bg = _background(factors.background_id, h, w)
    color = np.asarray(factors.shape_color)

    frames = np.empty((t_total, 3, h, w), dtype=np.float32)
    row, col = factors.start_position
    size = cfg.base_size
    size_lo, size_hi = 2.5, min(h, w) / 3.0
    for t in range(t_total):
        if t > 0:
            p = int(labels[t])
            if p == MOVE_RIGHT:
                col += cfg.velocity
            elif p == MOVE_DOWN:
                row += cfg.velocity
            elif p == MOVE_LEFT:
                col -= cfg.velocity
            elif p == MOVE_UP:
                row -= cfg.velocity
            elif p == SHRINK:
                size -= cfg.size_step
            elif p == GROW:
                size += cfg.size_step
            size = float(np.clip(size, size_lo, size_hi))
            row = float(np.clip(row, size, h - 1 - size))
            col = float(np.clip(col, size, w - 1 - size))
        frame = bg.copy()
        mask = _shape_mask(factors.shape_id, (row, col), size, h, w)
        frame[:, mask] = color[:, None]
        frames[t] = frame.astype(np.float32)
    return VideoClip(frames=frames, frame_labels=labels, factors=factors)


# ---------------------------------------------------------------------------
# persistence

def write_clip(path: Path, clip: VideoClip) -> None:
    frames = np.ascontiguousarray(clip.frames, dtype="<f4")
    labels = np.ascontiguousarray(clip.frame_labels, dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(_CLIP_MAGIC)
        fh.write(struct.pack("<I", frames.ndim))
        fh.write(struct.pack(f"<{frames.ndim}I", *frames.shape))
        fh.write(frames.tobytes())
        fh.write(struct.pack("<I", labels.shape[0]))
        fh.write(labels.tobytes())


def read_clip(path: Path, factors: Factors) -> VideoClip:
    raw = Path(path).read_bytes()
    if raw[:8] != _CLIP_MAGIC:
        raise CorpusError(f"{path}: bad magic {raw[:8]!r}")
    off = 8
    (rank,) = struct.unpack_from("<I", raw, off)
    off += 4
    extents = struct.unpack_from(f"<{rank}I", raw, off)
    off += 4 * rank
    count = int(np.prod(extents))
    frames = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(extents)
    off += 4 * count
    (t_total,) = struct.unpack_from("<I", raw, off)
    off += 4
    labels = np.frombuffer(raw, dtype="<i4", count=t_total, offset=off)
    return VideoClip(frames=frames.copy(), frame_labels=labels.copy(), factors=factors)


def _clip_name(vid: int) -> str:
    return f"clip_{vid:05d}.bin"


def build_corpus(cfg: CorpusConfig, seed: int, out_dir: Path | None = None) -> Corpus:
    """Sample and render the full corpus; optionally persist it."""
    if cfg.n_train < 1 or cfg.n_test < 1:
        raise CorpusError("corpus needs at least one train and one test clip")
    n_total = cfg.n_train + cfg.n_test
    clips, records = [], []
    for vid in range(n_total):
        factors = sample_factors(rngmod.stream(seed, rngmod.FACTORS, vid), cfg)
        clip = render(factors, cfg)
        split = "train" if vid < cfg.n_train else "test"
        clips.append(clip)
        records.append({
            "id": vid,
            "split": split,
            "background_id": factors.background_id,
            "shape_id": factors.shape_id,
            "shape_color": list(factors.shape_color),
            "phases": [[int(p), int(d)] for p, d in factors.motion_program],
            "motion_class": motion_class_label(factors.motion_program),
            "start": list(factors.start_position),
            "clip_seed": factors.seed,
            "file": _clip_name(vid),
        })
    manifest = {"version": 1, "seed": seed, "config": asdict(cfg), "videos": records}
    corpus = Corpus(clips=clips,
                    train_ids=list(range(cfg.n_train)),
                    test_ids=list(range(cfg.n_train, n_total)),
                    manifest=manifest)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for vid, clip in enumerate(clips):
            write_clip(out_dir / _clip_name(vid), clip)
        (out_dir / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return corpus


def load_corpus(src_dir: Path) -> Corpus:
    src_dir = Path(src_dir)
    try:
        manifest = json.loads((src_dir / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CorpusError(f"no manifest in {src_dir}") from exc
    if manifest.get("version") != 1:
        raise CorpusError(f"unsupported corpus version {manifest.get('version')!r}")
    cfg = CorpusConfig(**manifest["config"])
    clips: list[VideoClip] = []
    train_ids, test_ids = [], []
    for rec in manifest["videos"]:
        factors = Factors(
            background_id=rec["background_id"],
            shape_id=rec["shape_id"],
            shape_color=tuple(rec["shape_color"]),
            motion_program=tuple((p, d) for p, d in rec["phases"]),
            start_position=tuple(rec["start"]),
            seed=rec["clip_seed"],
        )
        clip = read_clip(src_dir / rec["file"], factors)
        expected = np.concatenate([np.full(d, p, dtype=np.int32)
                                   for p, d in factors.motion_program])
        if clip.frames.shape != (cfg.n_frames, 3, cfg.height, cfg.width) or \
                not np.array_equal(clip.frame_labels, expected):
            raise CorpusError(f"clip {rec['id']} does not match its manifest entry")
        (train_ids if rec["split"] == "train" else test_ids).append(rec["id"])
        clips.append(clip)
    return Corpus(clips=clips, train_ids=train_ids, test_ids=test_ids,
                  manifest=manifest)
