"""Frozen-feature evaluation: nearest-neighbor retrieval, precision/recall
curves, linear probing, and the feature-decomposition analyses.

All evaluations run on features extracted once per video from a
deterministic, centered, un-augmented long view, and are pure functions
of (encoder snapshot, corpus, config). Retrieval uses cosine similarity
with ties broken toward lower video id.

Two label tasks are exposed per synthetic video: "static" (the
background id) and "dynamic" (the motion class derived from the phase
multiset), so the stationary/non-stationary halves have measurable
targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Encoder
from .synthvid import Corpus
from .tensor import Tensor
from .viewkit import augment, identity_params, required_frames

KINDS = {"s": "stationary", "n": "non_stationary", "f": "full"}
TASKS = ("static", "dynamic")


class EvalError(ValueError):
    """Raised on invalid evaluation inputs."""


@dataclass(frozen=True)
class ViewPolicy:
    """Deterministic evaluation view: centered, un-augmented, resized."""
    n_views: int = 2
    clip_len: int = 8
    stride: int = 1
    crop_size: int = 24

    @property
    def span(self) -> int:
        return required_frames(self.n_views, self.clip_len, self.stride)


@dataclass
class FeatureTable:
    video_ids: np.ndarray       # [n]
    splits: np.ndarray          # [n] "train" / "test"
    static_labels: np.ndarray   # [n] background ids
    dynamic_labels: np.ndarray  # [n] motion classes
    stationary: np.ndarray      # [n, D/2]
    non_stationary: np.ndarray  # [n, D/2]
    full: np.ndarray            # [n, D]

    def kind(self, selector: str) -> np.ndarray:
        name = KINDS.get(selector, selector)
        if name not in KINDS.values():
            raise EvalError(f"unknown feature kind {selector!r}")
        return getattr(self, name)

    def labels(self, task: str) -> np.ndarray:
        if task == "static":
            return self.static_labels
        if task == "dynamic":
            return self.dynamic_labels
        raise EvalError(f"unknown label task {task!r}")

    def rows(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)


def _center_indices(t_total: int, span: int, stride: int) -> np.ndarray:
    if span > t_total:
        raise EvalError(f"video of {t_total} frames too short for span {span}")
    start = (t_total - span) // 2
    return start + stride * np.arange((span - 1) // stride + 1)


def eval_view(clip, indices, crop_size: int) -> np.ndarray:
    frames = clip.frames[indices]
    h, w = frames.shape[2], frames.shape[3]
    out = augment(frames, identity_params(h, w, crop_size))
    return out.transpose(1, 0, 2, 3)  # [3, T, h, w]


def encode_batched(encoder: Encoder, clips: list[np.ndarray],
                    batch: int = 64) -> np.ndarray:
    feats = []
    for lo in range(0, len(clips), batch):
        stack = np.stack(clips[lo:lo + batch])
        feats.append(encoder.forward(stack).data)
    return np.concatenate(feats, axis=0)


def extract_features(encoder: Encoder, corpus: Corpus,
                     policy: ViewPolicy) -> FeatureTable:
    """One row per video from its centered un-augmented long view."""
    records = corpus.manifest["videos"]
    views = []
    for rec in records:
        clip = corpus.clips[rec["id"]]
        indices = _center_indices(clip.frames.shape[0], policy.span, policy.stride)
        views.append(eval_view(clip, indices, policy.crop_size))
    full = encode_batched(encoder, views)
    half = full.shape[1] // 2
    return FeatureTable(
        video_ids=np.array([r["id"] for r in records]),
        splits=np.array([r["split"] for r in records]),
        static_labels=np.array([r["background_id"] for r in records]),
        dynamic_labels=np.array([r["motion_class"] for r in records]),
        stationary=full[:, :half].copy(),
        non_stationary=full[:, half:].copy(),
        full=full,
    )


# ---------------------------------------------------------------------------
# retrieval

def _normalize(mat: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise EvalError(f"zero-norm {what} feature vector")
    return mat / norms


def _neighbor_order(table: FeatureTable, kind: str):
    """Per test query: train gallery indices sorted by falling cosine
    similarity, ties toward lower video id. Returns (order, train_rows,
    test_rows)."""
    train_rows = table.rows("train")
    test_rows = table.rows("test")
    if len(train_rows) == 0 or len(test_rows) == 0:
        raise EvalError("retrieval needs non-empty train and test splits")
    q = _normalize(table.kind(kind)[test_rows], "query")
    g = _normalize(table.kind(kind)[train_rows], "gallery")
    sims = q @ g.T
    gallery_ids = table.video_ids[train_rows]
    order = np.empty_like(sims, dtype=np.intp)
    for i in range(sims.shape[0]):
        order[i] = np.lexsort((gallery_ids, -sims[i]))
    return order, train_rows, test_rows


def recall_at_k(table: FeatureTable, task: str, kind: str, k: int) -> float:
    """Percentage of test videos whose top-k train neighbors contain at
    least one same-label video."""
    if k < 1:
        raise EvalError(f"k must be positive, got {k}")
    order, train_rows, test_rows = _neighbor_order(table, kind)
    labels = table.labels(task)
    gallery = labels[train_rows]
    hits = 0
    for i, row in enumerate(test_rows):
        top = gallery[order[i, :k]]
        hits += bool((top == labels[row]).any())
    return 100.0 * hits / len(test_rows)


@dataclass
class PRCurve:
    ks: np.ndarray
    precision: np.ndarray  # query-averaged at each k
    recall: np.ndarray
    n_absent: int          # queries whose label has no train examples
    averaging: str = "micro (query-averaged)"


def pr_curve(table: FeatureTable, task: str, kind: str) -> PRCurve:
    order, train_rows, test_rows = _neighbor_order(table, kind)
    labels = table.labels(task)
    gallery = labels[train_rows]
    n_train = len(train_rows)
    precisions = np.zeros(n_train)
    recalls = np.zeros(n_train)
    n_absent = 0
    for i, row in enumerate(test_rows):
        same = (gallery[order[i]] == labels[row]).astype(np.float64)
        total = same.sum()
        cum = np.cumsum(same)
        precisions += cum / np.arange(1, n_train + 1)
        if total > 0:
            recalls += cum / total
        else:
            n_absent += 1
    n_q = len(test_rows)
    return PRCurve(ks=np.arange(1, n_train + 1), precision=precisions / n_q,
                   recall=recalls / n_q, n_absent=n_absent)


# ---------------------------------------------------------------------------
# linear probe

@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 200
    lr: float = 1e-2
    seed: int = 0


@dataclass
class ProbeResult:
    accuracy: float          # test accuracy, percent
    train_accuracy: float
    classes: list[int]


def _standardize(train: np.ndarray, other: np.ndarray):
    mean = train.mean(axis=0)
    std = np.maximum(train.std(axis=0), 1e-8)
    return (train - mean) / std, (other - mean) / std


def fit_softmax_probe(x_train: np.ndarray, y_train: np.ndarray,
                      cfg: ProbeConfig) -> tuple:
    """Multinomial logistic regression by full-batch Adam on frozen
    features; returns (weight, bias, class list, standardization)."""
    classes = sorted(set(int(y) for y in y_train))
    if len(classes) < 2:
        raise EvalError("probe needs at least two classes in the train split")
    index = {c: i for i, c in enumerate(classes)}
    n, d = x_train.shape
    mean = x_train.mean(axis=0)
    std = np.maximum(x_train.std(axis=0), 1e-8)
    xs = (x_train - mean) / std
    onehot = np.zeros((n, len(classes)))
    onehot[np.arange(n), [index[int(y)] for y in y_train]] = 1.0

    from .trainkit import Adam
    w = Tensor(np.zeros((d, len(classes))), requires_grad=True)
    b = Tensor(np.zeros(len(classes)), requires_grad=True)
    opt = Adam(lr=cfg.lr)
    x_t = Tensor(xs)
    hot = Tensor(onehot)
    for _ in range(cfg.epochs):
        logits = T.bias_add(T.matmul(x_t, w), b, axis=1)
        shift = logits.data.max(axis=1, keepdims=True)
        lse = T.add(T.log(T.sum_axis(T.exp(T.sub(logits, Tensor(
            np.broadcast_to(shift, logits.shape).copy()))), axis=1)),
            Tensor(shift.copy()))
        true_logit = T.sum_axis(T.mul(logits, hot), axis=1)
        loss = T.scale(T.sum_all(T.sub(lse, true_logit)), 1.0 / n)
        T.backward(loss)
        opt.step({"w": w, "b": b})
        w.zero_grad()
        b.zero_grad()
    return w.data, b.data, classes, (mean, std)


def _probe_predict(weights, x: np.ndarray) -> np.ndarray:
    w, b, classes, (mean, std) = weights
    logits = (x - mean) / std @ w + b
    return np.array(classes)[logits.argmax(axis=1)]


def linear_probe(table: FeatureTable, task: str, kind: str,
                 cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Single linear layer + softmax cross-entropy on frozen features."""
    train_rows = table.rows("train")
    test_rows = table.rows("test")
    labels = table.labels(task)
    weights = fit_softmax_probe(table.kind(kind)[train_rows],
                                labels[train_rows], cfg)
    pred_train = _probe_predict(weights, table.kind(kind)[train_rows])
    pred_test = _probe_predict(weights, table.kind(kind)[test_rows])
    return ProbeResult(
        accuracy=100.0 * float(np.mean(pred_test == labels[test_rows])),
        train_accuracy=100.0 * float(np.mean(pred_train == labels[train_rows])),
        classes=weights[2],
    )


# ---------------------------------------------------------------------------
# decomposition analyses

@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray
    mean: float

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _cosine_histogram(values: np.ndarray, bins: int = 40) -> Histogram:
    counts, edges = np.histogram(values, bins=bins, range=(-1.0, 1.0))
    return Histogram(counts=counts, edges=edges, mean=float(values.mean()))


@dataclass
class StabilityReport:
    stationary: Histogram
    non_stationary: Histogram
    n_pairs: int
    n_skipped: int


def temporal_stability_hist(encoder: Encoder, corpus: Corpus,
                            clip_len: int = 16, crop_size: int = 24,
                            bins: int = 40) -> StabilityReport:
    """Cosine similarity between consecutive non-overlapping clips' features,
    separately for the two halves, over all corpus videos."""
    sims_s, sims_n = [], []
    n_skipped = 0
    windows, owners = [], []
    for clip in corpus.clips:
        t_total = clip.frames.shape[0]
        n_win = t_total // clip_len
        if n_win < 2:
            n_skipped += 1
            continue
        owners.append(n_win)
        for i in range(n_win):
            idx = np.arange(i * clip_len, (i + 1) * clip_len)
            windows.append(eval_view(clip, idx, crop_size))
    if not windows:
        raise EvalError("no video long enough for two clips")
    feats = encode_batched(encoder, windows)
    half = feats.shape[1] // 2
    off = 0
    for n_win in owners:
        block = feats[off:off + n_win]
        off += n_win
        s = _normalize(block[:, :half], "stationary")
        n = _normalize(block[:, half:], "non-stationary")
        sims_s.extend(np.sum(s[:-1] * s[1:], axis=1))
        sims_n.extend(np.sum(n[:-1] * n[1:], axis=1))
    return StabilityReport(
        stationary=_cosine_histogram(np.array(sims_s), bins),
        non_stationary=_cosine_histogram(np.array(sims_n), bins),
        n_pairs=len(sims_s),
        n_skipped=n_skipped,
    )


def sn_similarity_hist(table: FeatureTable, bins: int = 40) -> Histogram:
    """Cosine between the stationary and non-stationary halves per video."""
    s = _normalize(table.stationary, "stationary")
    n = _normalize(table.non_stationary, "non-stationary")
    return _cosine_histogram(np.sum(s * n, axis=1), bins)


@dataclass
class FramesNeededReport:
    counts: tuple[int, ...]
    probe_accuracy: dict[int, float]       # test accuracy per frame count
    subset_ids: dict[int, list[int]]       # video ids newly correct at n
    recall_at_1: dict[str, dict[int, float | None]]  # per kind per count


def frames_needed_partition(encoder: Encoder, corpus: Corpus,
                            table: FeatureTable,
                            counts: tuple[int, ...] = (1, 2, 4, 8),
                            task: str = "dynamic",
                            crop_size: int = 24,
                            probe_cfg: ProbeConfig = ProbeConfig()) -> FramesNeededReport:
    """Partition test videos by the number of frames a probe needs to
    classify them, then score retrieval per subset and feature half.

    Subset(n) holds videos classified correctly from n-frame center clips
    but misclassified at every smaller count; subsets are disjoint by
    construction. Retrieval R@1 within a subset uses the standard
    long-view features against the full train gallery.
    """
    records = corpus.manifest["videos"]
    labels_all = {r["id"]: r for r in records}
    correct: dict[int, np.ndarray] = {}
    probe_acc: dict[int, float] = {}
    test_rows = table.rows("test")
    train_rows = table.rows("train")
    task_labels = table.labels(task)

    for n in counts:
        views = []
        for rec in records:
            clip = corpus.clips[rec["id"]]
            idx = _center_indices(clip.frames.shape[0], n, 1)
            views.append(eval_view(clip, idx, crop_size))
        feats = encode_batched(encoder, views)
        weights = fit_softmax_probe(feats[train_rows], task_labels[train_rows],
                                    probe_cfg)
        pred = _probe_predict(weights, feats[test_rows])
        correct[n] = pred == task_labels[test_rows]
        probe_acc[n] = 100.0 * float(np.mean(correct[n]))

    subset_ids: dict[int, list[int]] = {}
    already = np.zeros(len(test_rows), dtype=bool)
    subset_masks: dict[int, np.ndarray] = {}
    for n in sorted(counts):
        fresh = correct[n] & ~already
        subset_masks[n] = fresh
        subset_ids[n] = [int(table.video_ids[r]) for r in test_rows[fresh]]
        already |= correct[n]

    r1: dict[str, dict[int, float | None]] = {"stationary": {}, "non_stationary": {}}
    labels = table.labels(task)
    for kind in ("stationary", "non_stationary"):
        order, tr_rows, te_rows = _neighbor_order(table, kind)
        gallery = labels[tr_rows]
        for n in sorted(counts):
            mask = subset_masks[n]
            if not mask.any():
                r1[kind][n] = None
                continue
            hits = sum(gallery[order[i, 0]] == labels[te_rows[i]]
                       for i in np.flatnonzero(mask))
            r1[kind][n] = 100.0 * float(hits) / int(mask.sum())
    return FramesNeededReport(counts=tuple(sorted(counts)),
                              probe_accuracy=probe_acc,
                              subset_ids=subset_ids,
                              recall_at_1=r1)
