"""Scaled cosine similarity, the memory bank, and the three InfoNCE losses.

Anchors come from the gradient-trained query branch; positives are
detached key-branch features of the second long view; negatives are
detached key features of past samples queued in the memory bank. Each
loss applies one projection head to every vector entering its
similarity, so gradients reach the head through anchor, positive and
negative branches, but never reach the key encoder or the stored bank
entries.

The log-sum-exp is computed with a detached row-max shift, which keeps
the closed-form cases exact: no negatives gives loss 0.0 exactly, and k
negatives identical to the positive give exactly log(k + 1).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Features
from .tensor import Tensor


class ObjectiveError(ValueError):
    """Raised on loss-input shape or configuration problems."""


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    j_policy: str = "uniform"  # short-view index selection for the stationary loss

    def __post_init__(self):
        if self.tau <= 0:
            raise ObjectiveError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class LossFlags:
    stationary: bool = True
    non_stationary: bool = True
    instance: bool = True


@dataclass(frozen=True)
class BankSnapshot:
    stationary: np.ndarray      # [K, D/2]
    non_stationary: np.ndarray  # [K, D/2]

    def __len__(self) -> int:
        return self.stationary.shape[0]

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.stationary, self.non_stationary], axis=1)


class MemoryBank:
    """Fixed-capacity FIFO of detached key features (both halves per entry)."""

    def __init__(self, capacity: int, half_dim: int):
        if capacity < 1:
            raise ObjectiveError(f"bank capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.half_dim = half_dim
        self._queue: deque[tuple[np.ndarray, np.ndarray]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._queue)

    def push(self, stationary: np.ndarray, non_stationary: np.ndarray) -> None:
        s = np.asarray(stationary, dtype=np.float64)
        n = np.asarray(non_stationary, dtype=np.float64)
        if s.shape != (self.half_dim,) or n.shape != (self.half_dim,):
            raise ObjectiveError(
                f"bank entries must be two ({self.half_dim},) vectors, "
                f"got {s.shape} and {n.shape}")
        self._queue.append((s.copy(), n.copy()))

    def snapshot(self) -> BankSnapshot:
        """Stable copy of the current contents, oldest first."""
        if not self._queue:
            empty = np.empty((0, self.half_dim))
            return BankSnapshot(empty, empty.copy())
        s = np.stack([e[0] for e in self._queue])
        n = np.stack([e[1] for e in self._queue])
        return BankSnapshot(s, n)


def _as_matrix(z) -> Tensor:
    t = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    if t.data.ndim == 1:
        return T.reshape(t, (1, t.shape[0]))
    if t.data.ndim == 2:
        return t
    raise ObjectiveError(f"expected vector or matrix, got shape {t.shape}")


def _project(head, z: Tensor) -> Tensor:
    return head.apply(z) if head is not None else z


def sim(head, z1, z2, tau: float) -> Tensor:
    """Cosine similarity of head projections, scaled by 1/tau. Symmetric;
    errors if either projection has zero norm. head=None means identity."""
    a = T.normalize_rows(_project(head, _as_matrix(z1)))
    b = T.normalize_rows(_project(head, _as_matrix(z2)))
    dot = T.sum_axis(T.mul(a, b), axis=1)
    return T.scale(T.reshape(dot, ()), 1.0 / tau)


def infonce_batch(head, anchors: Tensor, positives: np.ndarray,
                  negatives: np.ndarray, tau: float) -> Tensor:
    """Mean InfoNCE over a batch of anchor/positive rows with shared negatives.

    positives and negatives are detached values; gradients flow to anchors
    and, through the projections, to the head parameters only.
    """
    anchors = _as_matrix(anchors)
    bsz, dim = anchors.shape
    positives = np.asarray(positives, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    if positives.shape != (bsz, dim):
        raise ObjectiveError(
            f"positives shape {positives.shape} does not match anchors {anchors.shape}")
    if negatives.ndim != 2 or (negatives.size and negatives.shape[1] != dim):
        raise ObjectiveError(
            f"negatives shape {negatives.shape} does not match dim {dim}")
    if negatives.shape[0] == 0:
        return Tensor(0.0)

    na = T.normalize_rows(_project(head, anchors))
    npos = T.normalize_rows(_project(head, Tensor(positives)))
    nneg = T.normalize_rows(_project(head, Tensor(negatives)))
    pos_logit = T.scale(T.sum_axis(T.mul(na, npos), axis=1), 1.0 / tau)     # [B,1]
    neg_logits = T.scale(T.matmul(na, T.transpose2d(nneg)), 1.0 / tau)      # [B,K]
    logits = T.concat_lastdim([pos_logit, neg_logits])

    shift = logits.data.max(axis=1, keepdims=True)  # constant: gradient-free shift
    lse = T.add(T.log(T.sum_axis(T.exp(T.sub(logits, Tensor(np.broadcast_to(
        shift, logits.shape).copy()))), axis=1)), Tensor(shift.copy()))
    per_sample = T.sub(lse, pos_logit)
    return T.scale(T.sum_all(per_sample), 1.0 / bsz)


def infonce(head, anchor, positive, negatives, tau: float) -> Tensor:
    """Single-anchor InfoNCE with an explicit negative list (loss 0 if empty)."""
    a = _as_matrix(anchor)
    p = positive.data if isinstance(positive, Tensor) else np.asarray(positive, dtype=np.float64)
    negs = [n.data if isinstance(n, Tensor) else np.asarray(n, dtype=np.float64)
            for n in negatives]
    neg_mat = np.stack(negs) if negs else np.empty((0, a.shape[1]))
    return infonce_batch(head, a, p.reshape(1, -1), neg_mat, tau)


# ---------------------------------------------------------------------------
# the three losses over one batch of view features

@dataclass
class ViewBatchFeatures:
    """Query features of a batch plus the detached key features.

    short: features of all B*N short views, sample-major
    (sample 0 view 0, sample 0 view 1, ..., sample 1 view 0, ...).
    """
    short: Features
    long_query: Features
    key_stationary: np.ndarray      # [B, D/2]
    key_non_stationary: np.ndarray  # [B, D/2]
    key_full: np.ndarray            # [B, D]
    n_views: int

    @property
    def batch_size(self) -> int:
        return self.long_query.full.shape[0]

    def view_rows(self, view_index: int) -> np.ndarray:
        return np.arange(self.batch_size) * self.n_views + view_index


def draw_short_view_indices(rng: np.random.Generator, batch_size: int,
                            n_views: int, cfg: LossConfig) -> np.ndarray:
    if cfg.j_policy == "uniform":
        return rng.integers(n_views, size=batch_size)
    raise ObjectiveError(f"unknown j_policy {cfg.j_policy!r}")


def loss_stationary(feats: ViewBatchFeatures, snapshot: BankSnapshot, head,
                    cfg: LossConfig, j_indices) -> Tensor:
    """Anchor: one short view's stationary half per sample (query side);
    positive: the key long view's stationary half; negatives from the bank."""
    j = np.asarray(j_indices, dtype=np.intp)
    if j.shape != (feats.batch_size,) or (j.size and (j.min() < 0 or j.max() >= feats.n_views)):
        raise ObjectiveError(f"bad short-view indices for N={feats.n_views}: {j_indices}")
    rows = np.arange(feats.batch_size) * feats.n_views + j
    anchors = T.take_rows(feats.short.stationary, rows)
    return infonce_batch(head, anchors, feats.key_stationary,
                         snapshot.stationary, cfg.tau)


def loss_non_stationary(feats: ViewBatchFeatures, aggregator,
                        snapshot: BankSnapshot, head, cfg: LossConfig) -> Tensor:
    """Anchor: aggregated short-view non-stationary halves; positive: the
    key long view's non-stationary half; negatives from the bank."""
    parts = [T.take_rows(feats.short.non_stationary, feats.view_rows(n))
             for n in range(feats.n_views)]
    anchors = aggregator(parts)
    return infonce_batch(head, anchors, feats.key_non_stationary,
                         snapshot.non_stationary, cfg.tau)


def loss_instance(feats: ViewBatchFeatures, snapshot: BankSnapshot, head,
                  cfg: LossConfig) -> Tensor:
    """Instance discrimination on full features of the two long views;
    negatives are full bank entries (both halves concatenated)."""
    return infonce_batch(head, feats.long_query.full, feats.key_full,
                         snapshot.full, cfg.tau)


def total_loss(parts: dict[str, Tensor], flags: LossFlags) -> Tensor:
    """Unit-weight sum of the enabled loss terms."""
    enabled = [parts[name] for name, on in
               (("stationary", flags.stationary),
                ("non_stationary", flags.non_stationary),
                ("instance", flags.instance)) if on]
    if not enabled:
        return Tensor(0.0)
    out = enabled[0]
    for term in enabled[1:]:
        out = T.add(out, term)
    return out
